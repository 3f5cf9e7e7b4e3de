//! Monte-Carlo study for additive quantile mixed models.
//!
//! Data follow
//! `y = b0 + b1 sin(x1) + b2 / (1 + exp(-(x2 - 0.5) / 0.1)) + b3 x3 + b4 x4 + z'u + (1 + gamma x3) e`
//! with `x1 ~ U(0, 4 pi)`, `x2 ~ U(0, 1)`, `x3 ~ Bin(1, 0.3)`, `x4 ~ N(0, 1)`,
//! `z = (1, x4)` and `u ~ N(0, Sigma)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared as ChiSqDist, ContinuousCDF, Normal, StudentsT};

use crate::basis::{BasisKind, SmoothTermSpec};
use crate::error::{AqmmError, Result};
use crate::estimate::{fit, FitControls, FitResult};
use crate::model::{assemble, ClusteredData, ModelSpec, RandomTermSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDistribution {
    Normal,
    StudentT3,
    Chisq3,
}

impl ErrorDistribution {
    pub fn name(self) -> &'static str {
        match self {
            ErrorDistribution::Normal => "normal",
            ErrorDistribution::StudentT3 => "student_t3",
            ErrorDistribution::Chisq3 => "chisq3",
        }
    }

    /// Inverse CDF at `tau`.
    pub fn quantile(self, tau: f64) -> f64 {
        match self {
            ErrorDistribution::Normal => Normal::standard().inverse_cdf(tau),
            ErrorDistribution::StudentT3 => StudentsT::new(0.0, 1.0, 3.0).expect("valid t").inverse_cdf(tau),
            ErrorDistribution::Chisq3 => ChiSqDist::new(3.0).expect("valid chi-square").inverse_cdf(tau),
        }
    }

    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            ErrorDistribution::Normal => rng.sample(StandardNormal),
            ErrorDistribution::StudentT3 => StudentT::new(3.0).expect("valid t").sample(rng),
            ErrorDistribution::Chisq3 => ChiSquared::new(3.0).expect("valid chi-square").sample(rng),
        }
    }
}

/// Smooth-term settings used when fitting simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimFitSpec {
    pub basis_kind: BasisKind,
    pub dim_x1: usize,
    pub dim_x2: usize,
}

impl Default for SimFitSpec {
    fn default() -> Self {
        Self {
            basis_kind: BasisKind::CubicRegression,
            dim_x1: 10,
            dim_x2: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub distribution: ErrorDistribution,
    /// Heteroscedasticity switch, 0 or 1.
    pub gamma: f64,
    /// Observations per cluster.
    pub n: usize,
    /// Number of clusters.
    pub m: usize,
    pub replicates: usize,
    pub taus: Vec<f64>,
    pub seed: u64,
    pub beta: [f64; 5],
    pub sigma: [[f64; 2]; 2],
    /// Multiplier on the error term; 0 gives noise-free responses.
    pub noise_scale: f64,
    pub fit: SimFitSpec,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            distribution: ErrorDistribution::Normal,
            gamma: 0.0,
            n: 5,
            m: 50,
            replicates: 50,
            taus: vec![0.1, 0.5, 0.95],
            seed: 1,
            beta: [1.0, 4.0, 15.0, 4.0, 3.0],
            sigma: [[2.0, 0.8], [0.8, 1.0]],
            noise_scale: 1.0,
            fit: SimFitSpec::default(),
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AqmmError::Config(m));
        if self.n < 2 || self.m < 2 {
            return bad(format!("need n >= 2 and M >= 2, got n = {}, M = {}", self.n, self.m));
        }
        if self.gamma != 0.0 && self.gamma != 1.0 {
            return bad(format!("gamma must be 0 or 1, got {}", self.gamma));
        }
        if self.replicates == 0 {
            return bad("replicates must be positive".into());
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("tau must lie in (0, 1), got {t}"));
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be nonnegative".into());
        }
        let s = &self.sigma;
        if !(s[0][0] > 0.0 && s[0][0] * s[1][1] - s[0][1] * s[1][0] > 0.0) || s[0][1] != s[1][0] {
            return bad("sigma must be symmetric positive definite".into());
        }
        Ok(())
    }

    /// Short label such as `normal_g0`.
    pub fn label(&self) -> String {
        format!("{}_g{}", self.distribution.name(), self.gamma as u8)
    }

    /// Model fitted to simulated data.
    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new("y", "id");
        spec.linear = vec!["x3".into(), "x4".into()];
        spec.smooth = vec![
            SmoothTermSpec::new("x1", self.fit.basis_kind, self.fit.dim_x1),
            SmoothTermSpec::new("x2", self.fit.basis_kind, self.fit.dim_x2),
        ];
        spec.random = RandomTermSpec {
            intercept: true,
            slopes: vec!["x4".into()],
        };
        spec
    }

    /// Coefficient of `x3` in the conditional `tau`-quantile.
    pub fn beta3_truth(&self, tau: f64) -> f64 {
        self.beta[3] + self.gamma * self.noise_scale * self.distribution.quantile(tau)
    }
}

/// Per-row ingredients of the true conditional quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    /// Fixed and smooth part.
    pub mean: f64,
    /// `z'u` for the row's cluster.
    pub zu: f64,
    /// Error multiplier `noise_scale (1 + gamma x3)`.
    pub multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct SimReplicate {
    pub data: ClusteredData,
    pub truth: Vec<TruthRow>,
    pub u: Vec<[f64; 2]>,
}

/// RNG stream for job `(seed, job)`.
pub fn job_rng(seed: u64, job: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(job);
    rng
}

pub fn generate(scenario: &SimScenario, replicate: usize) -> Result<SimReplicate> {
    scenario.validate()?;
    let mut rng = job_rng(scenario.seed, replicate as u64);
    let (n, m) = (scenario.n, scenario.m);
    let b = scenario.beta;
    let s = scenario.sigma;
    let l11 = s[0][0].sqrt();
    let l21 = s[1][0] / l11;
    let l22 = (s[1][1] - l21 * l21).sqrt();
    let ux1 = Uniform::new(0.0, 4.0 * PI).expect("valid range");
    let ux2 = Uniform::new(0.0, 1.0).expect("valid range");
    let bern = Bernoulli::new(0.3).expect("valid probability");

    let total = n * m;
    let mut cols: BTreeMap<String, Vec<f64>> = ["x1", "x2", "x3", "x4"]
        .iter()
        .map(|k| (k.to_string(), Vec::with_capacity(total)))
        .collect();
    let mut y = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);
    let mut us = Vec::with_capacity(m);
    for i in 0..m {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let u = [l11 * e1, l21 * e1 + l22 * e2];
        us.push(u);
        for _ in 0..n {
            let x1: f64 = ux1.sample(&mut rng);
            let x2: f64 = ux2.sample(&mut rng);
            let x3 = if bern.sample(&mut rng) { 1.0 } else { 0.0 };
            let x4: f64 = rng.sample(StandardNormal);
            let eps = scenario.distribution.sample(&mut rng);
            let mean = b[0] + b[1] * x1.sin() + b[2] / (1.0 + (-(x2 - 0.5) / 0.1).exp()) + b[3] * x3 + b[4] * x4;
            let zu = u[0] + u[1] * x4;
            let multiplier = scenario.noise_scale * (1.0 + scenario.gamma * x3);
            y.push(mean + zu + multiplier * eps);
            truth.push(TruthRow { mean, zu, multiplier });
            ids.push(format!("{}", i + 1));
            for (k, v) in [("x1", x1), ("x2", x2), ("x3", x3), ("x4", x4)] {
                cols.get_mut(k).unwrap().push(v);
            }
        }
    }
    Ok(SimReplicate {
        data: ClusteredData::new(y, ids, cols)?,
        truth,
        u: us,
    })
}

pub fn true_quantile(row: &TruthRow, tau: f64, scenario: &SimScenario) -> f64 {
    row.mean + row.zu + row.multiplier * scenario.distribution.quantile(tau)
}

/// Estimates from one replicate at one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub tau: f64,
    pub converged: bool,
    pub pnr: f64,
    pub bias: f64,
    pub msep: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub omega_final: f64,
    pub iterations: usize,
}

pub fn replicate_metrics(
    scenario: &SimScenario,
    replicate: usize,
    sim: &SimReplicate,
    fit: &FitResult,
) -> Result<ReplicateMetrics> {
    if fit.fitted_level1.len() != sim.truth.len() {
        return Err(AqmmError::Alignment(format!(
            "{} fitted values for {} truth rows",
            fit.fitted_level1.len(),
            sim.truth.len()
        )));
    }
    let n = sim.truth.len() as f64;
    let (mut bias, mut msep) = (0.0, 0.0);
    for (q, t) in fit.fitted_level1.iter().zip(&sim.truth) {
        let d = q - true_quantile(t, fit.tau, scenario);
        bias += d;
        msep += d * d;
    }
    let coef = |name: &str| {
        fit.coefficient(name)
            .ok_or_else(|| AqmmError::Spec(format!("fit has no coefficient '{name}'")))
    };
    Ok(ReplicateMetrics {
        replicate,
        tau: fit.tau,
        converged: fit.converged,
        pnr: fit.pnr,
        bias: bias / n,
        msep: msep / n,
        beta3: coef("x3")?,
        beta4: coef("x4")?,
        omega_final: fit.omega_final,
        iterations: fit.iterations,
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub method: String,
    pub tau: f64,
    #[serde(rename = "PNR")]
    pub pnr: f64,
    pub bias: f64,
    pub msep: f64,
    pub rmsep: f64,
    pub relbias_b3: f64,
    pub rmse_b3: f64,
    pub relbias_b4: f64,
    pub rmse_b4: f64,
    pub converged_rate: f64,
    pub replicates_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateMetrics>,
    /// Replicate fits that failed outright, as `(replicate, tau, message)`.
    pub failures: Vec<(usize, f64, String)>,
}

/// Averages over converged replicates for each quantile level; failed fits
/// count against the convergence rate.
pub fn evaluate(scenario: &SimScenario, replicates: &[ReplicateMetrics], failures: &[(usize, f64, String)]) -> MetricsTable {
    let mut rows = Vec::new();
    for &tau in &scenario.taus {
        let attempted = replicates.iter().filter(|r| r.tau == tau).count() + failures.iter().filter(|f| f.1 == tau).count();
        let used: Vec<&ReplicateMetrics> = replicates.iter().filter(|r| r.tau == tau && r.converged).collect();
        let k = used.len() as f64;
        let mean = |f: &dyn Fn(&ReplicateMetrics) -> f64| used.iter().map(|r| f(r)).sum::<f64>() / k;
        let b3 = scenario.beta3_truth(tau);
        let b4 = scenario.beta[4];
        rows.push(MetricsRow {
            scenario: scenario.label(),
            n: scenario.n,
            m: scenario.m,
            method: "AQMM".into(),
            tau,
            pnr: mean(&|r| r.pnr),
            bias: mean(&|r| r.bias),
            msep: mean(&|r| r.msep),
            rmsep: mean(&|r| r.msep.sqrt()),
            relbias_b3: mean(&|r| (r.beta3 - b3) / b3),
            rmse_b3: mean(&|r| ((r.beta3 - b3) / b3).powi(2)).sqrt(),
            relbias_b4: mean(&|r| (r.beta4 - b4) / b4),
            rmse_b4: mean(&|r| ((r.beta4 - b4) / b4).powi(2)).sqrt(),
            converged_rate: if attempted == 0 { 0.0 } else { k / attempted as f64 },
            replicates_used: used.len(),
        });
    }
    MetricsTable {
        rows,
        replicates: replicates.to_vec(),
        failures: failures.to_vec(),
    }
}

/// The desk-scale grid: every error distribution and heteroscedasticity setting at
/// `(n, M)` in `{(5, 50), (10, 50)}`, with `R = 50` replicates.
pub fn desk_grid(seed: u64) -> Vec<SimScenario> {
    let mut out = Vec::new();
    for gamma in [0.0, 1.0] {
        for distribution in [ErrorDistribution::Normal, ErrorDistribution::StudentT3, ErrorDistribution::Chisq3] {
            for n in [5, 10] {
                out.push(SimScenario { distribution, gamma, n, m: 50, seed, ..Default::default() });
            }
        }
    }
    out
}

/// Generate, fit and summarize every replicate of a scenario.
pub fn run_scenario(scenario: &SimScenario, controls: &FitControls) -> Result<MetricsTable> {
    scenario.validate()?;
    let spec = scenario.model_spec();
    let jobs: Vec<(usize, f64)> = (0..scenario.replicates)
        .flat_map(|r| scenario.taus.iter().map(move |&t| (r, t)))
        .collect();
    let outcomes: Vec<std::result::Result<ReplicateMetrics, (usize, f64, String)>> = jobs
        .par_iter()
        .map(|&(rep, tau)| {
            let run = || -> Result<ReplicateMetrics> {
                let sim = generate(scenario, rep)?;
                let design = assemble(&sim.data, &spec)?;
                let fitted = fit(&design, tau, controls, None)?;
                replicate_metrics(scenario, rep, &sim, &fitted)
            };
            run().map_err(|e| (rep, tau, e.to_string()))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(m) => ok.push(m),
            Err(f) => failed.push(f),
        }
    }
    Ok(evaluate(scenario, &ok, &failed))
}

/// Large-sample linear quantile regression estimate of the `x3` coefficient,
/// using the true mean-function features and no random effects.
/// Solved by iteratively reweighted least squares on a smoothed check loss.
pub fn empirical_beta3(scenario: &SimScenario, tau: f64, samples: usize, seed: u64) -> Result<f64> {
    let mut sc = scenario.clone();
    sc.sigma = [[1e-12, 0.0], [0.0, 1e-12]];
    sc.seed = seed;
    sc.m = 2;
    sc.n = (samples / 2).max(2);
    let sim = generate(&sc, 0)?;
    let cols = &sim.data.columns;
    let nrow = sim.data.len();
    let p = 5;
    let mut x = DMatrix::zeros(nrow, p);
    for r in 0..nrow {
        let (x1, x2) = (cols["x1"][r], cols["x2"][r]);
        x[(r, 0)] = 1.0;
        x[(r, 1)] = x1.sin();
        x[(r, 2)] = 1.0 / (1.0 + (-(x2 - 0.5) / 0.1).exp());
        x[(r, 3)] = cols["x3"][r];
        x[(r, 4)] = cols["x4"][r];
    }
    let y = DVector::from_vec(sim.data.y.clone());
    let mut beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| AqmmError::Numerical(e.to_string()))?;
    for _ in 0..200 {
        let r = &y - &x * &beta;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        for i in 0..nrow {
            let w = (if r[i] < 0.0 { 1.0 - tau } else { tau }) / r[i].abs().max(1e-6);
            let xi = x.row(i);
            xtwx += xi.transpose() * xi * w;
            xtwy += xi.transpose() * (w * y[i]);
        }
        let next = xtwx
            .cholesky()
            .ok_or_else(|| AqmmError::Numerical("singular reweighted system".into()))?
            .solve(&xtwy);
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-9 {
            break;
        }
    }
    Ok(beta[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_responses_equal_the_mean_part() {
        let sc = SimScenario { noise_scale: 0.0, m: 4, ..Default::default() };
        let sim = generate(&sc, 0).unwrap();
        for (y, t) in sim.data.y.iter().zip(&sim.truth) {
            assert_eq!(*y, t.mean + t.zu);
        }
    }

    #[test]
    fn replicates_regenerate_identically() {
        let sc = SimScenario::default();
        let a = generate(&sc, 7).unwrap();
        let b = generate(&sc, 7).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(generate(&sc, 8).unwrap().data.y, a.data.y);
    }

    #[test]
    fn covariate_distributions() {
        let sc = SimScenario { n: 10, m: 10_000, ..Default::default() };
        let sim = generate(&sc, 0).unwrap();
        let mean = |k: &str| sim.data.columns[k].iter().sum::<f64>() / sim.data.len() as f64;
        assert!((mean("x3") - 0.3).abs() < 0.01);
        assert!(mean("x4").abs() < 0.02);
        assert!((mean("x2") - 0.5).abs() < 0.01);
        assert!((mean("x1") - 2.0 * PI).abs() < 0.05);
    }

    #[test]
    fn random_effects_have_the_configured_covariance() {
        let sc = SimScenario { n: 2, m: 50_000, ..Default::default() };
        let u = generate(&sc, 1).unwrap().u;
        let k = u.len() as f64;
        let c = |a: usize, b: usize| u.iter().map(|v| v[a] * v[b]).sum::<f64>() / k;
        assert!((c(0, 0) - 2.0).abs() < 0.05);
        assert!((c(0, 1) - 0.8).abs() < 0.03);
        assert!((c(1, 1) - 1.0).abs() < 0.03);
    }

    #[test]
    fn error_moments() {
        let mut rng = job_rng(3, 0);
        let k = 200_000;
        let chi: Vec<f64> = (0..k).map(|_| ErrorDistribution::Chisq3.sample(&mut rng)).collect();
        assert!((chi.iter().sum::<f64>() / k as f64 - 3.0).abs() < 0.03);
        let t: Vec<f64> = (0..k).map(|_| ErrorDistribution::StudentT3.sample(&mut rng)).collect();
        let below = t.iter().filter(|v| **v < ErrorDistribution::StudentT3.quantile(0.9)).count() as f64 / k as f64;
        assert!((below - 0.9).abs() < 0.005);
    }

    #[test]
    fn true_quantile_shifts() {
        let row = TruthRow { mean: 2.0, zu: 0.5, multiplier: 1.0 };
        let normal = SimScenario::default();
        assert!((true_quantile(&row, 0.5, &normal) - 2.5).abs() < 1e-12);
        let chi = SimScenario { distribution: ErrorDistribution::Chisq3, ..Default::default() };
        assert!((true_quantile(&row, 0.5, &chi) - 2.5 - 2.3660).abs() < 1e-4);
        let het = SimScenario { gamma: 1.0, ..Default::default() };
        assert!((het.beta3_truth(0.9) - 5.2816).abs() < 1e-4);
        assert_eq!(normal.beta3_truth(0.9), 4.0);
    }

    #[test]
    fn empirical_coefficient_agrees_with_analytic_truth() {
        let het = SimScenario { gamma: 1.0, ..Default::default() };
        let b = empirical_beta3(&het, 0.9, 20_000, 5).unwrap();
        assert!((b - het.beta3_truth(0.9)).abs() < 0.1, "{b}");
    }

    #[test]
    fn perfect_fits_have_zero_error() {
        let sc = SimScenario { taus: vec![0.5], ..Default::default() };
        let reps: Vec<ReplicateMetrics> = (0..3)
            .map(|r| ReplicateMetrics {
                replicate: r,
                tau: 0.5,
                converged: true,
                pnr: 0.5,
                bias: 0.0,
                msep: 0.0,
                beta3: 4.0,
                beta4: 3.0,
                omega_final: 1e-4,
                iterations: 10,
            })
            .collect();
        let t = evaluate(&sc, &reps, &[(3, 0.5, "failed".into())]);
        let row = &t.rows[0];
        assert_eq!((row.bias, row.msep, row.relbias_b3, row.rmse_b4), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(row.converged_rate, 0.75);
        assert_eq!(row.replicates_used, 3);
    }

    #[test]
    fn desk_grid_covers_six_models_at_two_sizes() {
        let g = desk_grid(1);
        assert_eq!(g.len(), 12);
        assert!(g.iter().all(|s| s.validate().is_ok() && s.m == 50 && s.replicates == 50));
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        assert!(SimScenario { gamma: 0.5, ..Default::default() }.validate().is_err());
        assert!(SimScenario { n: 1, ..Default::default() }.validate().is_err());
        assert!(SimScenario { taus: vec![1.0], ..Default::default() }.validate().is_err());
    }
}
