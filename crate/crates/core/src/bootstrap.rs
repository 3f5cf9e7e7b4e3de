//! Cluster-level resampling standard errors: the bag of little bootstraps and a
//! plain cluster bootstrap for small problems.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AqmmError, Result};
use crate::estimate::{fit, fit_from, FitControls, FitResult};
use crate::model::{ClusterWeights, DesignSet};
use crate::sim::job_rng;

/// Stream reserved for the subset partition; replicate streams use `(subset, replicate)`.
const PARTITION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlbConfig {
    /// Number of disjoint cluster subsets.
    pub subsets: usize,
    /// Clusters per subset; `ceil(M / subsets)` when absent, reduced if that overshoots `M`.
    pub subset_size: Option<usize>,
    /// Bootstrap replicates per subset.
    pub replicates: usize,
    pub seed: u64,
    /// Start replicate fits from the full-data estimate.
    pub warm_start: bool,
}

impl Default for BlbConfig {
    fn default() -> Self {
        Self {
            subsets: 5,
            subset_size: None,
            replicates: 50,
            seed: 1,
            warm_start: true,
        }
    }
}

impl BlbConfig {
    /// Subset size for `m` clusters after validation.
    pub fn resolve(&self, m: usize) -> Result<usize> {
        if self.subsets == 0 {
            return Err(AqmmError::Config("need at least one subset".into()));
        }
        if self.replicates < 2 {
            return Err(AqmmError::Config("need at least two replicates per subset".into()));
        }
        let b = match self.subset_size {
            Some(b) => b,
            None => {
                let b = m.div_ceil(self.subsets);
                if b * self.subsets > m { m / self.subsets } else { b }
            }
        };
        if b == 0 || b >= m {
            return Err(AqmmError::Config(format!("subset size {b} must lie in [1, {m})")));
        }
        if self.subsets * b > m {
            return Err(AqmmError::Config(format!(
                "{} subsets of {b} clusters exceed the {m} available",
                self.subsets
            )));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlbResult {
    pub tau: f64,
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    /// Bootstrap variance of each fixed effect, one row per subset.
    pub per_subset_variances: Vec<Vec<f64>>,
    pub replicate_convergence_rate: f64,
    pub subset_size: usize,
    pub config: BlbConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub tau: f64,
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    pub sd: Vec<f64>,
    pub replicates: usize,
    pub replicate_convergence_rate: f64,
}

/// Draw `s` disjoint subsets of `b` cluster indices without replacement.
pub fn partition_clusters(m: usize, config: &BlbConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let b = config.resolve(m)?;
    let mut ids: Vec<usize> = (0..m).collect();
    ids.shuffle(rng);
    Ok(ids.chunks(b).take(config.subsets).map(<[usize]>::to_vec).collect())
}

/// Multinomial counts with `m` trials spread uniformly over the subset clusters.
pub fn blb_weights(subset: &[usize], m: usize, rng: &mut impl Rng) -> ClusterWeights {
    let mut counts = vec![0u32; m];
    if subset.is_empty() {
        return ClusterWeights { counts };
    }
    for _ in 0..m {
        counts[subset[rng.random_range(0..subset.len())]] += 1;
    }
    ClusterWeights { counts }
}

/// Sample variance with the `n - 1` denominator, per coordinate.
fn column_variance(rows: &[Vec<f64>]) -> Vec<f64> {
    let p = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    (0..p)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

fn replicate_fit(
    design: &DesignSet,
    full: &FitResult,
    controls: &FitControls,
    weights: &ClusterWeights,
    warm: bool,
) -> Option<Vec<f64>> {
    let start = warm.then_some(&full.theta_hat);
    match fit_from(design, full.tau, controls, Some(weights), start) {
        Ok(f) if f.converged && f.beta.iter().all(|b| b.is_finite()) => Some(f.beta),
        _ => None,
    }
}

/// Bag-of-little-bootstraps standard errors of the fixed effects at each quantile.
pub fn blb_stderr(design: &DesignSet, taus: &[f64], controls: &FitControls, config: &BlbConfig) -> Result<Vec<BlbResult>> {
    let fits = taus.iter().map(|&tau| fit(design, tau, controls, None)).collect::<Result<Vec<_>>>()?;
    blb_stderr_for(design, &fits, controls, config)
}

/// As [`blb_stderr`], reusing existing full-data fits.
pub fn blb_stderr_for(design: &DesignSet, fits: &[FitResult], controls: &FitControls, config: &BlbConfig) -> Result<Vec<BlbResult>> {
    let m = design.dims().m;
    let b = config.resolve(m)?;
    let subsets = partition_clusters(m, config, &mut job_rng(config.seed, PARTITION_STREAM))?;
    let r = config.replicates;
    fits.iter()
        .map(|full| {
            let tau = full.tau;
            let jobs: Vec<(usize, usize)> = (0..subsets.len()).flat_map(|k| (0..r).map(move |j| (k, j))).collect();
            let draws: Vec<Option<Vec<f64>>> = jobs
                .par_iter()
                .map(|&(k, j)| {
                    let mut rng = job_rng(config.seed, ((k as u64) << 32) | j as u64);
                    let weights = blb_weights(&subsets[k], m, &mut rng);
                    replicate_fit(design, full, controls, &weights, config.warm_start)
                })
                .collect();
            let mut per_subset_variances = Vec::with_capacity(subsets.len());
            let mut ok_total = 0;
            for (k, chunk) in draws.chunks(r).enumerate() {
                let ok: Vec<Vec<f64>> = chunk.iter().flatten().cloned().collect();
                if 2 * ok.len() < r || ok.len() < 2 {
                    return Err(AqmmError::Diagnostic(format!(
                        "subset {k}: only {} of {r} bootstrap fits converged at tau = {tau}",
                        ok.len()
                    )));
                }
                ok_total += ok.len();
                per_subset_variances.push(column_variance(&ok));
            }
            let p = full.beta.len();
            let se = (0..p)
                .map(|j| {
                    let mean = per_subset_variances.iter().map(|v| v[j]).sum::<f64>() / per_subset_variances.len() as f64;
                    mean.sqrt()
                })
                .collect();
            Ok(BlbResult {
                tau,
                names: full.fixed_names.clone(),
                estimate: full.beta.clone(),
                se,
                per_subset_variances,
                replicate_convergence_rate: ok_total as f64 / (subsets.len() * r) as f64,
                subset_size: b,
                config: config.clone(),
            })
        })
        .collect()
}

/// Plain cluster bootstrap: resample all `M` clusters with replacement `replicates` times.
pub fn cluster_bootstrap(
    design: &DesignSet,
    taus: &[f64],
    controls: &FitControls,
    replicates: usize,
    seed: u64,
    warm_start: bool,
) -> Result<Vec<BootstrapResult>> {
    if replicates < 2 {
        return Err(AqmmError::Config("need at least two bootstrap replicates".into()));
    }
    let m = design.dims().m;
    let all: Vec<usize> = (0..m).collect();
    taus.iter()
        .map(|&tau| {
            let full = fit(design, tau, controls, None)?;
            let draws: Vec<Option<Vec<f64>>> = (0..replicates)
                .into_par_iter()
                .map(|j| {
                    let weights = blb_weights(&all, m, &mut job_rng(seed, j as u64));
                    replicate_fit(design, &full, controls, &weights, warm_start)
                })
                .collect();
            let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
            if 2 * ok.len() < replicates || ok.len() < 2 {
                return Err(AqmmError::Diagnostic(format!(
                    "only {} of {replicates} bootstrap fits converged at tau = {tau}",
                    ok.len()
                )));
            }
            Ok(BootstrapResult {
                tau,
                names: full.fixed_names.clone(),
                estimate: full.beta.clone(),
                sd: column_variance(&ok).into_iter().map(f64::sqrt).collect(),
                replicate_convergence_rate: ok.len() as f64 / replicates as f64,
                replicates,
            })
        })
        .collect()
}
