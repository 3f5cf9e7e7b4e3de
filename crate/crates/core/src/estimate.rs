//! Fitting engine: the quadratic-in-pieces objective `h`, its derivatives, the
//! modal random effects, the Laplace-approximated quasi-likelihood with the
//! scale profiled out, and the outer search over a shrinking smoothing band.
//!
//! With cluster counts `c_i` the weighted likelihood treats cluster `i` as if it
//! appeared `c_i` times with independent copies of `u_i`, all sharing `v`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AqmmError, Result};
use crate::loss::{abc_coefficients, check_loss, sign_indicator, smoothed_loss_derivative, SmoothedLossParams};
use crate::model::{build_precision, ClusterWeights, DesignInfo, DesignSet, Dims, Precision, Theta};
use crate::optim::{bfgs_numeric, nelder_mead, BfgsOptions, NelderMeadOptions};

const SCALE_FLOOR_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterMethod {
    NelderMead,
    BfgsNumeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartStrategy {
    /// Least-squares fixed effects, identity covariance, unit smoothing variances.
    Naive,
    /// Gaussian additive mixed model fitted by profiled maximum likelihood.
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitControls {
    /// Maximum number of smoothing levels (outer iterations).
    pub max_outer_iter: usize,
    /// Factor applied to the band parameter between levels.
    pub omega_shrink: f64,
    /// Relative log-likelihood change that ends the schedule; also the simplex tolerance.
    pub loglik_rel_tol: f64,
    pub inner_max_iter: usize,
    pub inner_grad_tol: f64,
    pub outer_method: OuterMethod,
    pub start_strategy: StartStrategy,
    /// Seed for resampling streams derived from these controls; fitting itself is deterministic.
    pub seed: u64,
    /// Initial band in response units; half the standard deviation of the response when absent.
    pub omega_start: Option<f64>,
    /// Smallest band, as a fraction of the initial one.
    pub omega_min_rel: f64,
    /// Objective evaluations allowed per smoothing level.
    pub outer_max_evals: usize,
    /// Simplex restarts per smoothing level.
    pub outer_restarts: usize,
    /// Minimize over the fixed effects in the inner solve so the outer search covers
    /// only the variance parameters.
    pub profile_beta: bool,
    /// Covariance multipliers tried as alternative starting points at each level.
    pub shrink_probes: Vec<f64>,
}

impl Default for FitControls {
    fn default() -> Self {
        Self {
            max_outer_iter: 200,
            omega_shrink: 0.5,
            loglik_rel_tol: 1e-5,
            inner_max_iter: 100,
            inner_grad_tol: 1e-8,
            outer_method: OuterMethod::NelderMead,
            start_strategy: StartStrategy::Warm,
            seed: 1,
            omega_start: None,
            omega_min_rel: 1e-4,
            outer_max_evals: 2000,
            outer_restarts: 0,
            profile_beta: true,
            shrink_probes: vec![(-2.0f64).exp(), (-4.0f64).exp()],
        }
    }
}

impl FitControls {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AqmmError::Config(m.to_string()));
        if !(self.omega_shrink > 0.0 && self.omega_shrink < 1.0) {
            return bad("omega_shrink must lie in (0, 1)");
        }
        if !(self.loglik_rel_tol > 0.0) || !(self.inner_grad_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.omega_min_rel > 0.0 && self.omega_min_rel <= 1.0) {
            return bad("omega_min_rel must lie in (0, 1]");
        }
        if self.max_outer_iter == 0 || self.inner_max_iter == 0 || self.outer_max_evals == 0 {
            return bad("iteration limits must be positive");
        }
        if self.shrink_probes.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return bad("shrink_probes must be positive and finite");
        }
        if let Some(w) = self.omega_start {
            if !(w > 0.0) {
                return bad("omega_start must be positive");
            }
        }
        Ok(())
    }
}

/// A design, a loss, and optional cluster counts.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub design: &'a DesignSet,
    pub weights: Option<&'a ClusterWeights>,
    pub params: SmoothedLossParams,
    /// Minimize `h` over the fixed effects together with the random effects.
    pub profile_beta: bool,
    dims: Dims,
    h_sizes: Vec<usize>,
    active: Vec<usize>,
}

/// Per-cluster block of the arrow-structured system
/// `D_i u_i + C_i' g = r_i`, `Σ c_i C_i u_i + V g = r_g`.
#[derive(Debug, Clone)]
struct ArrowBlock {
    cluster: usize,
    weight: f64,
    d: DMatrix<f64>,
    c: DMatrix<f64>,
    rhs: DVector<f64>,
}

#[derive(Debug, Clone)]
struct ArrowSystem {
    blocks: Vec<ArrowBlock>,
    v: DMatrix<f64>,
    rhs_v: DVector<f64>,
}

struct ArrowFactor {
    blocks: Vec<(usize, Cholesky<f64, Dyn>, DMatrix<f64>, DVector<f64>)>,
    schur: Option<Cholesky<f64, Dyn>>,
    rhs_s: DVector<f64>,
    /// `Σ c_i log|D_i|`.
    log_det_blocks: f64,
}

impl ArrowSystem {
    fn factor(&self) -> Result<ArrowFactor> {
        let g = self.v.nrows();
        let mut s = self.v.clone();
        let mut rhs_s = self.rhs_v.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut log_det_blocks = 0.0;
        for blk in &self.blocks {
            let chol = blk
                .d
                .clone()
                .cholesky()
                .ok_or_else(|| AqmmError::Numerical("cluster block of the Hessian is not positive definite".into()))?;
            log_det_blocks += blk.weight * 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let dinv_ct = chol.solve(&blk.c.transpose());
            let dinv_r = chol.solve(&blk.rhs);
            if g > 0 {
                s -= (&blk.c * &dinv_ct) * blk.weight;
                rhs_s -= (&blk.c * &dinv_r) * blk.weight;
            }
            blocks.push((blk.cluster, chol, dinv_ct, dinv_r));
        }
        let schur = if g > 0 {
            let s = (&s + s.transpose()) * 0.5;
            Some(
                s.cholesky()
                    .ok_or_else(|| AqmmError::Numerical("global block of the Hessian is not positive definite".into()))?,
            )
        } else {
            None
        };
        Ok(ArrowFactor {
            blocks,
            schur,
            rhs_s,
            log_det_blocks,
        })
    }
}

impl ArrowFactor {
    /// Log-determinant of the leading `k×k` block of the global Schur complement.
    fn log_det_leading(&self, k: usize) -> f64 {
        self.schur.as_ref().map_or(0.0, |c| {
            c.l_dirty()
                .diagonal()
                .iter()
                .take(k)
                .map(|v| 2.0 * v.ln())
                .sum()
        })
    }

    /// `(u blocks in cluster order, global solution)`.
    fn solve(&self) -> (Vec<(usize, DVector<f64>)>, DVector<f64>) {
        let global = match &self.schur {
            Some(c) => c.solve(&self.rhs_s),
            None => DVector::zeros(0),
        };
        let us = self
            .blocks
            .iter()
            .map(|(i, _, dinv_ct, dinv_r)| {
                let u = if global.is_empty() { dinv_r.clone() } else { dinv_r - dinv_ct * &global };
                (*i, u)
            })
            .collect();
        (us, global)
    }
}

/// Modal random effects and the objective at the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSolution {
    pub w: Vec<f64>,
    /// Fixed effects at the mode (the input values unless they are profiled).
    pub beta: Vec<f64>,
    pub h0: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// `log|Ḧ|` with `Ḧ = h''/2` at the mode (cluster blocks counted with their weights).
    pub log_det_hess: f64,
}

/// Laplace-approximated log-likelihood with the scale profiled out.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceEval {
    pub loglik: f64,
    pub beta_hat: Vec<f64>,
    pub sigma_hat: f64,
    pub h0: f64,
    pub w_hat: Vec<f64>,
    pub log_det_psi: f64,
    pub log_det_hess: f64,
    pub inner_iterations: usize,
}

impl<'a> Problem<'a> {
    pub fn new(design: &'a DesignSet, weights: Option<&'a ClusterWeights>, params: SmoothedLossParams) -> Result<Self> {
        let dims = design.dims();
        if let Some(w) = weights {
            if w.counts.len() != dims.m {
                return Err(AqmmError::Input(format!(
                    "{} cluster weights for {} clusters",
                    w.counts.len(),
                    dims.m
                )));
            }
        }
        let active = (0..dims.m).filter(|&i| weights.is_none_or(|w| w.is_active(i))).collect();
        Ok(Self {
            design,
            weights,
            params,
            profile_beta: false,
            dims,
            h_sizes: design.h_sizes(),
            active,
        })
    }

    pub fn with_profiled_beta(mut self, on: bool) -> Self {
        self.profile_beta = on;
        self
    }

    pub fn with_params(&self, params: SmoothedLossParams) -> Self {
        let mut p = self.clone();
        p.params = params;
        p
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w.get(i))
    }

    /// `Σ c_i n_i`.
    pub fn n_eff(&self) -> f64 {
        self.active
            .iter()
            .map(|&i| self.weight(i) * self.design.cluster_rows(i).len() as f64)
            .sum()
    }

    /// `Σ c_i`.
    pub fn m_eff(&self) -> f64 {
        self.active.iter().map(|&i| self.weight(i)).sum()
    }

    pub fn precision(&self, theta: &Theta) -> Result<Precision> {
        build_precision(theta, &self.dims, &self.h_sizes)
    }

    /// `y - F beta` on active rows (zero elsewhere).
    fn fixed_offset(&self, beta: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; self.dims.n];
        for &i in &self.active {
            for r in self.design.cluster_rows(i) {
                let (f, _, _) = self.design.row(r);
                e[r] = self.design.y[r] - dot(f, beta);
            }
        }
        e
    }

    fn residuals(&self, e: &[f64], w: &[f64]) -> Vec<f64> {
        let q = self.dims.q;
        let v = &w[self.dims.m * q..];
        let mut r = vec![0.0; self.dims.n];
        for &i in &self.active {
            let u = &w[i * q..(i + 1) * q];
            for row in self.design.cluster_rows(i) {
                let (_, z, b) = self.design.row(row);
                r[row] = e[row] - dot(z, u) - dot(b, v);
            }
        }
        r
    }

    /// `Σ c_i (r_i'A_i r_i + b_i'r_i + c_i'1)`.
    fn fidelity(&self, r: &[f64]) -> f64 {
        let mut total = 0.0;
        for &i in &self.active {
            let mut acc = 0.0;
            for row in self.design.cluster_rows(i) {
                let s = sign_indicator(r[row], self.params);
                let (a, b, c) = abc_coefficients(s, self.params);
                acc += a * r[row] * r[row] + b * r[row] + c;
            }
            total += self.weight(i) * acc;
        }
        total
    }

    fn h_at(&self, r: &[f64], w: &[f64], prec: &Precision) -> f64 {
        self.fidelity(r) + prec.quad_form(w, self.weights)
    }

    /// Gradient of the weighted `h` in `w`, followed by the `beta` block when
    /// `free_beta`; with `per_copy` the cluster blocks are not multiplied by their counts.
    fn gradient_at(&self, r: &[f64], w: &[f64], prec: &Precision, per_copy: bool, free_beta: bool) -> Vec<f64> {
        let (q, m, p) = (self.dims.q, self.dims.m, self.dims.p);
        let wl = w.len();
        let mut g = vec![0.0; wl + if free_beta { p } else { 0 }];
        let pw = prec.apply(w);
        for &i in &self.active {
            let c = self.weight(i);
            let mut gu = vec![0.0; q];
            for row in self.design.cluster_rows(i) {
                let s = sign_indicator(r[row], self.params);
                let (a, b, _) = abc_coefficients(s, self.params);
                let t = 2.0 * a * r[row] + b;
                if t == 0.0 {
                    continue;
                }
                let (f, z, bz) = self.design.row(row);
                for k in 0..q {
                    gu[k] -= z[k] * t;
                }
                for (k, bv) in bz.iter().enumerate() {
                    g[m * q + k] -= c * bv * t;
                }
                if free_beta {
                    for (k, fv) in f.iter().enumerate() {
                        g[wl + k] -= c * fv * t;
                    }
                }
            }
            let scale = if per_copy { 1.0 } else { c };
            for k in 0..q {
                g[i * q + k] = scale * (gu[k] + 2.0 * pw[i * q + k]);
            }
        }
        for k in m * q..wl {
            g[k] += 2.0 * pw[k];
        }
        g
    }

    /// The arrow system for the Newton step on the current quadratic piece. The
    /// global block holds `v`, followed by `beta` when `free_beta` (then `e` must be `y`).
    fn arrow_system(&self, e: &[f64], r: &[f64], prec: &Precision, free_beta: bool) -> ArrowSystem {
        let (q, h, p) = (self.dims.q, self.dims.h, self.dims.p);
        let gsz = h + if free_beta { p } else { 0 };
        let mut v = DMatrix::zeros(gsz, gsz);
        let mut rhs_v = DVector::zeros(gsz);
        let mut glob = vec![0.0; gsz];
        let mut blocks = Vec::with_capacity(self.active.len());
        for &i in &self.active {
            let c = self.weight(i);
            let mut d = prec.sigma_inv.clone();
            let mut cb = DMatrix::zeros(gsz, q);
            let mut rhs = DVector::zeros(q);
            for row in self.design.cluster_rows(i) {
                let s = sign_indicator(r[row], self.params);
                let (a, b, _) = abc_coefficients(s, self.params);
                let (f, z, bz) = self.design.row(row);
                glob[..h].copy_from_slice(bz);
                if free_beta {
                    glob[h..].copy_from_slice(f);
                }
                let t = a * e[row] + 0.5 * b;
                for k in 0..q {
                    rhs[k] += z[k] * t;
                }
                for k in 0..gsz {
                    rhs_v[k] += c * glob[k] * t;
                }
                if a == 0.0 {
                    continue;
                }
                for k in 0..q {
                    for l in 0..q {
                        d[(k, l)] += a * z[k] * z[l];
                    }
                }
                for k in 0..gsz {
                    let agk = a * glob[k];
                    for l in 0..q {
                        cb[(k, l)] += agk * z[l];
                    }
                    let cagk = c * agk;
                    for l in 0..=k {
                        v[(k, l)] += cagk * glob[l];
                    }
                }
            }
            blocks.push(ArrowBlock {
                cluster: i,
                weight: c,
                d,
                c: cb,
                rhs,
            });
        }
        let mut off = 0;
        for (&hk, &ph) in self.h_sizes.iter().zip(&prec.phi) {
            for k in off..off + hk {
                v[(k, k)] += 1.0 / ph;
            }
            off += hk;
        }
        if free_beta {
            // beta is unpenalized; a tiny ridge keeps the step defined when few
            // residuals sit inside the band
            let ridge = 1e-10 * (1.0 / self.params.omega).max((h..gsz).map(|k| v[(k, k)]).fold(0.0, f64::max));
            for k in h..gsz {
                v[(k, k)] += ridge;
            }
        }
        for k in 0..gsz {
            for l in 0..k {
                v[(l, k)] = v[(k, l)];
            }
        }
        ArrowSystem { blocks, v, rhs_v }
    }

    fn unpack_solution(&self, us: Vec<(usize, DVector<f64>)>, v: DVector<f64>) -> Vec<f64> {
        let q = self.dims.q;
        let mut w = vec![0.0; self.dims.w_len()];
        for (i, u) in us {
            w[i * q..(i + 1) * q].copy_from_slice(u.as_slice());
        }
        w[self.dims.m * q..].copy_from_slice(&v.as_slice()[..self.dims.h]);
        w
    }

    pub fn h_value(&self, theta: &Theta, w: &[f64]) -> Result<f64> {
        let prec = self.precision(theta)?;
        let e = self.fixed_offset(&theta.beta);
        let r = self.residuals(&e, w);
        Ok(self.h_at(&r, w, &prec))
    }

    pub fn h_gradient(&self, theta: &Theta, w: &[f64]) -> Result<Vec<f64>> {
        let prec = self.precision(theta)?;
        let e = self.fixed_offset(&theta.beta);
        let r = self.residuals(&e, w);
        Ok(self.gradient_at(&r, w, &prec, false, false))
    }

    /// Dense Hessian `2(G'AG + Ψ̃⁻¹)` of the weighted `h` (cluster blocks scaled by
    /// their counts, so zero-count clusters give zero blocks).
    pub fn h_hessian(&self, theta: &Theta, w: &[f64]) -> Result<DMatrix<f64>> {
        let prec = self.precision(theta)?;
        let e = self.fixed_offset(&theta.beta);
        let r = self.residuals(&e, w);
        let sys = self.arrow_system(&e, &r, &prec, false);
        let (q, m) = (self.dims.q, self.dims.m);
        let n = self.dims.w_len();
        let mut hess = DMatrix::zeros(n, n);
        for blk in &sys.blocks {
            let i = blk.cluster;
            hess.view_mut((i * q, i * q), (q, q)).copy_from(&(&blk.d * (2.0 * blk.weight)));
            let cw = &blk.c * (2.0 * blk.weight);
            hess.view_mut((m * q, i * q), (self.dims.h, q)).copy_from(&cw);
            hess.view_mut((i * q, m * q), (q, self.dims.h)).copy_from(&cw.transpose());
        }
        hess.view_mut((m * q, m * q), (self.dims.h, self.dims.h)).copy_from(&(&sys.v * 2.0));
        Ok(hess)
    }

    /// Minimize `h(theta, ·)` from `w0` by repeated exact minimization of the
    /// current quadratic piece followed by an exact line search, so `h` never
    /// increases. With a profiled fixed part, `beta` is minimized jointly.
    pub fn solve_modes(&self, theta: &Theta, w0: &[f64], max_iter: usize, grad_tol: f64) -> Result<ModeSolution> {
        let prec = self.precision(theta)?;
        self.solve_modes_with(&theta.beta, &prec, w0, max_iter, grad_tol)
    }

    fn solve_modes_with(
        &self,
        beta0: &[f64],
        prec: &Precision,
        w0: &[f64],
        max_iter: usize,
        grad_tol: f64,
    ) -> Result<ModeSolution> {
        let q = self.dims.q;
        let free = self.profile_beta;
        let mut w = w0.to_vec();
        if w.len() != self.dims.w_len() || beta0.len() != self.dims.p {
            return Err(AqmmError::Dimension(format!(
                "random-effect vector has length {}, expected {}",
                w.len(),
                self.dims.w_len()
            )));
        }
        for i in 0..self.dims.m {
            if self.weight(i) == 0.0 {
                w[i * q..(i + 1) * q].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut beta = beta0.to_vec();
        let y_active = self.fixed_offset(&vec![0.0; self.dims.p]);
        let mut e = self.fixed_offset(&beta);
        let mut r = self.residuals(&e, &w);
        let mut h = self.h_at(&r, &w, prec);
        let mut grad_norm = f64::INFINITY;
        let done = |w: Vec<f64>, beta: Vec<f64>, h: f64, grad_norm: f64, it: usize, r: &[f64], e: &[f64]| -> Result<ModeSolution> {
            let factor = self.arrow_system(if free { &y_active } else { e }, r, prec, free).factor()?;
            Ok(ModeSolution {
                w,
                beta,
                h0: h,
                grad_norm,
                iterations: it,
                log_det_hess: factor.log_det_blocks + factor.log_det_leading(self.dims.h),
            })
        };
        for it in 0..=max_iter {
            grad_norm = norm(&self.gradient_at(&r, &w, prec, true, free));
            if grad_norm <= grad_tol * (1.0 + h.abs()) {
                return done(w, beta, h, grad_norm, it, &r, &e);
            }
            if it == max_iter {
                break;
            }
            let factor = self.arrow_system(if free { &y_active } else { &e }, &r, prec, free).factor()?;
            let (us, global) = factor.solve();
            let target_w = self.unpack_solution(us, global.clone());
            let target_beta = if free {
                global.as_slice()[self.dims.h..].to_vec()
            } else {
                beta.clone()
            };
            let e_t = if free { self.fixed_offset(&target_beta) } else { e.clone() };
            let r_t = self.residuals(&e_t, &target_w);
            let mut step = self.exact_step(&r, &r_t, &w, &target_w, prec);
            let mut moved = false;
            for _ in 0..=30 {
                let trial: Vec<f64> = w.iter().zip(&target_w).map(|(a, b)| a + step * (b - a)).collect();
                let trial_beta: Vec<f64> = beta.iter().zip(&target_beta).map(|(a, b)| a + step * (b - a)).collect();
                let rt: Vec<f64> = r.iter().zip(&r_t).map(|(a, b)| a + step * (b - a)).collect();
                let ht = self.h_at(&rt, &trial, prec);
                if ht <= h {
                    moved = ht < h;
                    w = trial;
                    if free {
                        beta = trial_beta;
                        e = self.fixed_offset(&beta);
                    }
                    // recompute to keep residuals exact rather than interpolated
                    r = self.residuals(&e, &w);
                    h = self.h_at(&r, &w, prec);
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                // no descent left at working precision: the point is the mode
                return done(w, beta, h, grad_norm, it + 1, &r, &e);
            }
        }
        Err(AqmmError::NonConvergence {
            iterations: max_iter,
            grad_norm,
            best_w: w,
        })
    }

    /// Minimizer over `t >= 0` of `h` along the segment from the current point
    /// (residuals `r`, effects `w`) towards the target (`r_t`, `target`). Along a
    /// line `h` is a convex C¹ piecewise quadratic, so its derivative is monotone
    /// and piecewise linear: bracket, bisect, then interpolate inside the last piece.
    fn exact_step(&self, r: &[f64], r_t: &[f64], w: &[f64], target: &[f64], prec: &Precision) -> f64 {
        let delta: Vec<f64> = r_t.iter().zip(r).map(|(a, b)| a - b).collect();
        let d: Vec<f64> = target.iter().zip(w).map(|(a, b)| a - b).collect();
        let pd = prec.apply(&d);
        let (q, m) = (self.dims.q, self.dims.m);
        let mut pa = 0.0;
        let mut pb = 0.0;
        for k in 0..d.len() {
            let c = if k < m * q { self.weight(k / q) } else { 1.0 };
            pa += c * d[k] * pd[k];
            pb += c * w[k] * pd[k];
        }
        let slope = |t: f64| -> f64 {
            let mut acc = 0.0;
            for &i in &self.active {
                let mut part = 0.0;
                for row in self.design.cluster_rows(i) {
                    if delta[row] != 0.0 {
                        part += smoothed_loss_derivative(r[row] + t * delta[row], self.params) * delta[row];
                    }
                }
                acc += self.weight(i) * part;
            }
            2.0 * (acc + pb + t * pa)
        };
        let s0 = slope(0.0);
        if !(s0 < 0.0) {
            return 0.0;
        }
        let mut lo = (0.0, s0);
        let mut hi_t = 1.0;
        let mut hi_s = slope(hi_t);
        while hi_s < 0.0 {
            if hi_t > 1e8 {
                return hi_t;
            }
            lo = (hi_t, hi_s);
            hi_t *= 2.0;
            hi_s = slope(hi_t);
        }
        let mut hi = (hi_t, hi_s);
        for _ in 0..60 {
            if hi.0 - lo.0 <= 1e-14 * hi.0 {
                break;
            }
            // a secant point is exact once both ends share a linear piece
            let sec = lo.0 - lo.1 * (hi.0 - lo.0) / (hi.1 - lo.1);
            let mid = 0.5 * (lo.0 + hi.0);
            let s_sec = slope(sec);
            if s_sec == 0.0 {
                return sec;
            }
            if s_sec < 0.0 { lo = (sec, s_sec) } else { hi = (sec, s_sec) }
            if hi.0 - lo.0 <= 1e-14 * hi.0 || !(mid > lo.0 && mid < hi.0) {
                continue;
            }
            let s_mid = slope(mid);
            if s_mid == 0.0 {
                return mid;
            }
            if s_mid < 0.0 { lo = (mid, s_mid) } else { hi = (mid, s_mid) }
        }
        lo.0 - lo.1 * (hi.0 - lo.0) / (hi.1 - lo.1)
    }

    /// Laplace approximation at `theta` with `σ̂ = h0 / (2 N)`.
    pub fn laplace_loglik(&self, theta: &Theta, w0: &[f64], controls: &FitControls) -> Result<LaplaceEval> {
        let prec = self.precision(theta)?;
        let sol = self.solve_modes_with(&theta.beta, &prec, w0, controls.inner_max_iter, controls.inner_grad_tol)?;
        let n_eff = self.n_eff();
        let sigma_hat = (sol.h0 / (2.0 * n_eff)).max(self.scale_floor());
        if !(sigma_hat > 0.0) || !sigma_hat.is_finite() {
            return Err(AqmmError::Numerical(format!("degenerate scale estimate {sigma_hat}")));
        }
        let tau = self.params.tau;
        let log_det_psi = prec.log_det(self.m_eff());
        let loglik = n_eff * (tau * (1.0 - tau) / sigma_hat).ln()
            - 0.5 * (log_det_psi + sol.log_det_hess + sol.h0 / sigma_hat);
        Ok(LaplaceEval {
            loglik,
            sigma_hat,
            h0: sol.h0,
            beta_hat: sol.beta,
            w_hat: sol.w,
            log_det_psi,
            log_det_hess: sol.log_det_hess,
            inner_iterations: sol.iterations,
        })
    }

    /// Lower bound on scale estimates, so exactly interpolated data stay finite.
    fn scale_floor(&self) -> f64 {
        SCALE_FLOOR_REL * self.response_moments().1
    }

    /// Weighted mean and standard deviation of the response over active rows.
    fn response_moments(&self) -> (f64, f64) {
        let (mut sw, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &i in &self.active {
            let c = self.weight(i);
            for r in self.design.cluster_rows(i) {
                let y = self.design.y[r];
                sw += c;
                s1 += c * y;
                s2 += c * y * y;
            }
        }
        let mean = s1 / sw;
        let var = ((s2 - sw * mean * mean) / (sw - 1.0).max(1.0)).max(0.0);
        (mean, var.sqrt())
    }

    /// Weighted least squares of `y` on `F`.
    fn least_squares(&self) -> Result<Vec<f64>> {
        let p = self.dims.p;
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        for &i in &self.active {
            let c = self.weight(i);
            for r in self.design.cluster_rows(i) {
                let (f, _, _) = self.design.row(r);
                for a in 0..p {
                    xty[a] += c * f[a] * self.design.y[r];
                    for b in 0..p {
                        xtx[(a, b)] += c * f[a] * f[b];
                    }
                }
            }
        }
        let chol = xtx.cholesky().ok_or_else(|| AqmmError::Estimability {
            columns: self.design.fixed_names.clone(),
        })?;
        Ok(chol.solve(&xty).as_slice().to_vec())
    }

    fn weighted_rows(&self) -> Vec<(usize, f64)> {
        self.active
            .iter()
            .flat_map(|&i| self.design.cluster_rows(i).map(move |r| (r, i)))
            .map(|(r, i)| (r, self.weight(i)))
            .collect()
    }

    fn naive_start(&self) -> Result<Theta> {
        let beta = self.least_squares()?;
        let rows = self.weighted_rows();
        let (mut sw, mut sa) = (0.0, 0.0);
        for &(r, c) in &rows {
            let (f, _, _) = self.design.row(r);
            sa += c * (self.design.y[r] - dot(f, &beta)).abs();
            sw += c;
        }
        let sigma = (sa / sw).max(f64::MIN_POSITIVE);
        Ok(Theta {
            beta,
            xi: vec![0.0; self.dims.xi_len()],
            log_phi: vec![0.0; self.dims.s],
            sigma,
        })
    }

    /// Gaussian additive mixed model by profiled maximum likelihood; the fit is
    /// translated into starting values for quantile `tau`.
    fn warm_start(&self, controls: &FitControls) -> Result<Theta> {
        let dims = self.dims;
        let npar = dims.xi_len() + dims.s;
        let objective = |x: &[f64]| -> f64 {
            match self.gaussian_profile(x) {
                Ok(g) => -g.loglik,
                Err(_) => f64::INFINITY,
            }
        };
        let x = if npar == 0 {
            vec![]
        } else {
            let opts = NelderMeadOptions {
                steps: vec![1.0; npar],
                reltol: controls.loglik_rel_tol * 0.1,
                max_evals: 200 * npar,
            };
            nelder_mead(objective, &vec![0.0; npar], &opts).x
        };
        let g = self.gaussian_profile(&x)?;
        let tau = self.params.tau;
        let rows = self.weighted_rows();
        let cond: Vec<(f64, f64)> = rows.iter().map(|&(r, c)| (g.cond_resid[r], c)).collect();
        let shift = weighted_quantile(&cond, tau);
        let (mut sw, mut sr) = (0.0, 0.0);
        for &(res, c) in &cond {
            sw += c;
            sr += c * check_loss(res - shift, tau);
        }
        let sigma_al = (sr / sw).max(1e-8 * g.sigma2.sqrt()).max(f64::MIN_POSITIVE);
        let mut beta = g.beta;
        beta[0] += shift;
        // Σ = Σ̃_G σ²_G, then rescale by the asymmetric Laplace scale.
        let ratio = g.sigma2 / sigma_al;
        let xi = crate::model::scale_xi(&x[..dims.xi_len()], dims.q, ratio);
        let log_phi = x[dims.xi_len()..].iter().map(|l| l + ratio.ln()).collect();
        Ok(Theta {
            beta,
            xi,
            log_phi,
            sigma: sigma_al,
        })
    }

    fn gaussian_profile(&self, x: &[f64]) -> Result<GaussianFit> {
        let dims = self.dims;
        let (q, h, p) = (dims.q, dims.h, dims.p);
        let theta = Theta {
            beta: vec![0.0; p],
            xi: x[..dims.xi_len()].to_vec(),
            log_phi: x[dims.xi_len()..].to_vec(),
            sigma: 1.0,
        };
        let prec = self.precision(&theta)?;
        let gsz = h + p;
        let mut v = DMatrix::zeros(gsz, gsz);
        let mut rhs_v = DVector::zeros(gsz);
        let mut blocks = Vec::with_capacity(self.active.len());
        let mut glob = vec![0.0; gsz];
        for &i in &self.active {
            let c = self.weight(i);
            let mut d = prec.sigma_inv.clone();
            let mut cb = DMatrix::zeros(gsz, q);
            let mut rhs = DVector::zeros(q);
            for row in self.design.cluster_rows(i) {
                let (f, z, b) = self.design.row(row);
                glob[..h].copy_from_slice(b);
                glob[h..].copy_from_slice(f);
                let y = self.design.y[row];
                for k in 0..q {
                    rhs[k] += z[k] * y;
                    for l in 0..q {
                        d[(k, l)] += z[k] * z[l];
                    }
                }
                for k in 0..gsz {
                    rhs_v[k] += c * glob[k] * y;
                    for l in 0..q {
                        cb[(k, l)] += glob[k] * z[l];
                    }
                    for l in 0..=k {
                        v[(k, l)] += c * glob[k] * glob[l];
                    }
                }
            }
            blocks.push(ArrowBlock {
                cluster: i,
                weight: c,
                d,
                c: cb,
                rhs,
            });
        }
        let mut off = 0;
        for (&hk, &ph) in self.h_sizes.iter().zip(&prec.phi) {
            for k in off..off + hk {
                v[(k, k)] += 1.0 / ph;
            }
            off += hk;
        }
        for k in 0..gsz {
            for l in 0..k {
                v[(l, k)] = v[(k, l)];
            }
        }
        let factor = ArrowSystem { blocks, v, rhs_v }.factor()?;
        let (us, global) = factor.solve();
        let beta: Vec<f64> = global.rows(h, p).iter().copied().collect();
        let vhat = global.rows(0, h).into_owned();
        let w = self.unpack_solution(us, vhat);
        let e = self.fixed_offset(&beta);
        let r = self.residuals(&e, &w);
        let mut prss = prec.quad_form(&w, self.weights);
        for &(row, c) in &self.weighted_rows() {
            prss += c * r[row] * r[row];
        }
        let n_eff = self.n_eff();
        let sigma2 = (prss / n_eff).max(self.scale_floor().powi(2));
        if !(sigma2 > 0.0) {
            return Err(AqmmError::Numerical("zero residual variance in Gaussian start".into()));
        }
        let loglik = -0.5 * n_eff * sigma2.ln()
            - 0.5 * (prec.log_det(self.m_eff()) + factor.log_det_blocks + factor.log_det_leading(h));
        Ok(GaussianFit {
            loglik,
            beta,
            sigma2,
            cond_resid: r,
        })
    }
}

struct GaussianFit {
    loglik: f64,
    beta: Vec<f64>,
    sigma2: f64,
    cond_resid: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Smallest value whose cumulative weight reaches `tau` of the total.
fn weighted_quantile(values: &[(f64, f64)], tau: f64) -> f64 {
    let mut sorted: Vec<(f64, f64)> = values.iter().copied().filter(|v| v.1 > 0.0).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = sorted.iter().map(|v| v.1).sum();
    let mut acc = 0.0;
    for &(v, w) in &sorted {
        acc += w;
        if acc >= tau * total {
            return v;
        }
    }
    sorted.last().map_or(0.0, |v| v.0)
}

/// Result of fitting one quantile level. Estimates are reported in response
/// units; `theta_hat` keeps the internal (scaled-response) parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub tau: f64,
    pub theta_hat: Theta,
    pub response_scale: f64,
    pub fixed_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Asymmetric Laplace scale.
    pub sigma: f64,
    pub random_names: Vec<String>,
    /// Covariance of the cluster random effects.
    pub ranef_cov: Vec<Vec<f64>>,
    pub smooth_names: Vec<String>,
    /// Variance of each smooth's penalized coefficients.
    pub smooth_var: Vec<f64>,
    pub cluster_labels: Vec<String>,
    pub u_hat: Vec<Vec<f64>>,
    pub v_hat: Vec<f64>,
    /// Modal random effects `(u_1, ..., u_M, v)` on internal units.
    pub w_internal: Vec<f64>,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub omega_trace: Vec<f64>,
    pub omega_final: f64,
    pub pnr: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Fitted quantiles without cluster effects, in input row order.
    pub fitted_level0: Vec<f64>,
    /// Fitted quantiles with cluster effects, in input row order.
    pub fitted_level1: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Standard deviations and correlation matrix of the cluster random effects.
    pub fn ranef_sd_corr(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        sd_and_corr(&self.ranef_cov)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.fixed_names.iter().position(|n| n == name).map(|i| self.beta[i])
    }
}

/// Standard deviations and correlation matrix of a covariance matrix; correlations
/// involving a zero variance are reported as zero.
pub fn sd_and_corr(cov: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let sd: Vec<f64> = (0..cov.len()).map(|i| cov[i][i].max(0.0).sqrt()).collect();
    let corr = (0..cov.len())
        .map(|i| {
            (0..cov.len())
                .map(|j| {
                    if i == j {
                        1.0
                    } else if sd[i] > 0.0 && sd[j] > 0.0 {
                        cov[i][j] / (sd[i] * sd[j])
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (sd, corr)
}

/// Fit one quantile level on an assembled design.
pub fn fit(design: &DesignSet, tau: f64, controls: &FitControls, weights: Option<&ClusterWeights>) -> Result<FitResult> {
    fit_from(design, tau, controls, weights, None)
}

/// As [`fit`], optionally starting from a given internal parameter.
pub fn fit_from(
    design: &DesignSet,
    tau: f64,
    controls: &FitControls,
    weights: Option<&ClusterWeights>,
    start: Option<&Theta>,
) -> Result<FitResult> {
    controls.validate()?;
    let placeholder = SmoothedLossParams::new(tau, 1.0)?;
    let base = Problem::new(design, weights, placeholder)?;
    if base.active.is_empty() {
        return Err(AqmmError::Input("all cluster weights are zero".into()));
    }
    let dims = base.dims();
    let (_, sd_y) = base.response_moments();
    let omega0 = controls.omega_start.map_or(0.5 * sd_y, |w| w / design.scale);
    if !(omega0 > 0.0) {
        return Err(AqmmError::Input("response has zero spread; cannot choose a smoothing band".into()));
    }
    let omega_min = omega0 * controls.omega_min_rel;
    let mut problem = base.with_params(SmoothedLossParams::new(tau, omega0)?);

    let mut theta = match (start, controls.start_strategy) {
        (Some(t), _) => t.clone(),
        (None, StartStrategy::Naive) => problem.naive_start()?,
        (None, StartStrategy::Warm) => problem.warm_start(controls)?,
    };
    if theta.to_vec().len() != dims.theta_len() {
        return Err(AqmmError::Dimension("starting parameter does not match the design".into()));
    }

    let profile = controls.profile_beta;
    problem = problem.with_profiled_beta(profile);
    let skip = if profile { dims.p } else { 0 };
    let steps = initial_steps(&problem, &theta, sd_y)[skip..].to_vec();
    let mut w_best = vec![0.0; dims.w_len()];
    let mut beta_best = theta.beta.clone();
    let mut omega = omega0;
    let mut loglik_trace = Vec::new();
    let mut omega_trace = Vec::new();
    let mut evaluations = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut x = theta.to_vec()[skip..].to_vec();

    for t in 0..controls.max_outer_iter {
        iterations = t + 1;
        problem = problem.with_params(SmoothedLossParams::new(tau, omega)?);
        let sigma_carry = theta.sigma;
        // warm start the modes (and fixed effects) from the best point seen at this level
        let mut best = (f64::INFINITY, w_best.clone(), beta_best.clone());
        let start = (w_best.clone(), beta_best.clone());
        let mut objective = |v: &[f64]| -> f64 {
            let (w0, b0) = if best.0.is_finite() { (&best.1, &best.2) } else { (&start.0, &start.1) };
            let full: Vec<f64> = if profile { b0.iter().chain(v).copied().collect() } else { v.to_vec() };
            let th = Theta::from_vec(&full, &dims, sigma_carry);
            match problem.laplace_loglik(&th, w0, controls) {
                Ok(ev) if ev.loglik.is_finite() => {
                    let val = -ev.loglik;
                    if val < best.0 {
                        best = (val, ev.w_hat, ev.beta_hat);
                    }
                    val
                }
                _ => f64::INFINITY,
            }
        };
        // at small bands the likelihood often prefers much tighter random effects than
        // the previous level; probe shrunken covariances before the local search
        let mut start_f = objective(&x);
        let mut extra = 1;
        let at = dims.p - skip;
        let probe_from = x.clone();
        for &c in &controls.shrink_probes {
            let mut cand = probe_from.clone();
            let xi = crate::model::scale_xi(&cand[at..at + dims.xi_len()], dims.q, c);
            cand[at..at + dims.xi_len()].copy_from_slice(&xi);
            let f = objective(&cand);
            extra += 1;
            if f < start_f {
                start_f = f;
                x = cand;
            }
        }
        let result = match controls.outer_method {
            OuterMethod::NelderMead => {
                // restart from the best vertex with a fresh full-size simplex until a
                // restart no longer improves; the surface is rough at small omega
                let mut best_run: Option<crate::optim::OptimResult> = None;
                let mut evals = 0;
                for _ in 0..=controls.outer_restarts {
                    let from = best_run.as_ref().map_or(x.clone(), |r| r.x.clone());
                    let opts = NelderMeadOptions {
                        steps: steps.clone(),
                        reltol: controls.loglik_rel_tol,
                        max_evals: controls.outer_max_evals.saturating_sub(evals).max(1),
                    };
                    let run = nelder_mead(&mut objective, &from, &opts);
                    evals += run.evals;
                    let improved = best_run.as_ref().is_none_or(|b| {
                        run.f < b.f - controls.loglik_rel_tol * (b.f.abs() + controls.loglik_rel_tol)
                    });
                    if best_run.as_ref().is_none_or(|b| run.f < b.f) {
                        best_run = Some(run);
                    }
                    if !improved || evals >= controls.outer_max_evals {
                        break;
                    }
                }
                let mut r = best_run.expect("at least one simplex run");
                r.evals = evals;
                r
            }
            OuterMethod::BfgsNumeric => {
                let opts = BfgsOptions {
                    reltol: controls.loglik_rel_tol,
                    max_iter: controls.outer_max_evals / (2 * x.len() + 10).max(1),
                    ..BfgsOptions::default()
                };
                bfgs_numeric(&mut objective, &x, &opts)
            }
        };
        evaluations += result.evals + extra;
        if !result.f.is_finite() {
            return Err(AqmmError::Numerical(format!(
                "log-likelihood could not be evaluated at smoothing level {t} (omega = {omega:.3e})"
            )));
        }
        x = result.x;
        if best.0.is_finite() {
            w_best = best.1;
            if profile {
                beta_best = best.2;
            }
        }
        let full: Vec<f64> = if profile { beta_best.iter().chain(&x).copied().collect() } else { x.clone() };
        theta = Theta::from_vec(&full, &dims, theta.sigma);
        if !profile {
            beta_best = theta.beta.clone();
        }
        let ll = -result.f;
        let prev = loglik_trace.last().copied();
        loglik_trace.push(ll);
        omega_trace.push(omega * design.scale);
        if let Some(prev) = prev {
            if (ll - prev).abs() / (1.0 + prev.abs()) < controls.loglik_rel_tol {
                converged = true;
                break;
            }
        }
        if omega <= omega_min {
            converged = true;
            break;
        }
        omega = (omega * controls.omega_shrink).max(omega_min);
    }

    // final scale and modes at the returned parameter
    let final_eval = problem.laplace_loglik(&theta, &w_best, controls)?;
    theta.sigma = final_eval.sigma_hat;
    theta.beta = final_eval.beta_hat.clone();
    finish(design, &problem, theta, final_eval, FinishInfo {
        loglik_trace,
        omega_trace,
        omega_final: omega * design.scale,
        converged,
        iterations,
        evaluations,
    })
}

fn initial_steps(problem: &Problem, theta: &Theta, sd_y: f64) -> Vec<f64> {
    let design = problem.design;
    let dims = problem.dims();
    let mut steps = Vec::with_capacity(dims.theta_len());
    for j in 0..dims.p {
        let col = design.f.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        let base = if sd > 1e-12 && j > 0 { 0.1 * sd_y / sd } else { 0.1 * sd_y };
        steps.push(base.max(0.05 * theta.beta[j].abs()));
    }
    steps.extend(std::iter::repeat_n(1.0, dims.xi_len() + dims.s));
    steps
}

struct FinishInfo {
    loglik_trace: Vec<f64>,
    omega_trace: Vec<f64>,
    omega_final: f64,
    converged: bool,
    iterations: usize,
    evaluations: usize,
}

fn finish(design: &DesignSet, problem: &Problem, theta: Theta, eval: LaplaceEval, info: FinishInfo) -> Result<FitResult> {
    let dims = design.dims();
    let scale = design.scale;
    let (q, m) = (dims.q, dims.m);
    let sigma_tilde = crate::model::covariance_from_xi(&theta.xi, q);
    let sigma = theta.sigma;
    let ranef_cov = (0..q)
        .map(|i| (0..q).map(|j| sigma_tilde[(i, j)] * sigma * scale * scale).collect())
        .collect();
    let smooth_var = theta.log_phi.iter().map(|l| l.exp() * sigma * scale * scale).collect();
    let w = &eval.w_hat;
    let u_int: Vec<Vec<f64>> = (0..m).map(|i| w[i * q..(i + 1) * q].to_vec()).collect();
    let v_int = w[m * q..].to_vec();

    let n = dims.n;
    let mut level0 = vec![0.0; n];
    let mut level1 = vec![0.0; n];
    for i in 0..m {
        for r in design.cluster_rows(i) {
            let (f, z, b) = design.row(r);
            let orig = design.perm[r];
            level0[orig] = linear_predictor(f, b, &theta.beta, &v_int, None) * scale;
            level1[orig] = linear_predictor(f, b, &theta.beta, &v_int, Some((z, &u_int[i]))) * scale;
        }
    }
    let mut y_orig = vec![0.0; n];
    let mut row_weight = vec![0.0; n];
    for i in 0..m {
        for r in design.cluster_rows(i) {
            y_orig[design.perm[r]] = design.y[r] * scale;
            row_weight[design.perm[r]] = problem.weight(i);
        }
    }
    let pnr_value = weighted_pnr(&y_orig, &level1, &row_weight);

    Ok(FitResult {
        tau: problem.params.tau,
        response_scale: scale,
        fixed_names: design.fixed_names.clone(),
        beta: theta.beta.iter().map(|b| b * scale).collect(),
        sigma: sigma * scale,
        random_names: design.random_names.clone(),
        ranef_cov,
        smooth_names: design.smooths.iter().map(|s| format!("s({})", s.spec.variable)).collect(),
        smooth_var,
        cluster_labels: design.cluster_labels.clone(),
        u_hat: u_int.iter().map(|u| u.iter().map(|x| x * scale).collect()).collect(),
        v_hat: v_int.iter().map(|x| x * scale).collect(),
        w_internal: w.clone(),
        loglik: eval.loglik,
        loglik_trace: info.loglik_trace,
        omega_trace: info.omega_trace,
        omega_final: info.omega_final,
        pnr: pnr_value,
        converged: info.converged,
        iterations: info.iterations,
        evaluations: info.evaluations,
        fitted_level0: level0,
        fitted_level1: level1,
        warnings: design.warnings.clone(),
        theta_hat: theta,
    })
}

/// `F β + B v` and, at level 1, `+ Z u`, on internal units.
#[inline]
fn linear_predictor(f: &[f64], b: &[f64], beta: &[f64], v: &[f64], cluster: Option<(&[f64], &[f64])>) -> f64 {
    let mut acc = dot(f, beta) + dot(b, v);
    if let Some((z, u)) = cluster {
        acc += dot(z, u);
    }
    acc
}

/// Fit every quantile level; levels are independent jobs.
pub fn fit_many(design: &DesignSet, taus: &[f64], controls: &FitControls) -> Result<Vec<FitResult>> {
    taus.par_iter().map(|&tau| fit(design, tau, controls, None)).collect()
}

/// Proportion of negative residuals `mean I(y - q̂ < 0)`.
pub fn pnr(y: &[f64], q_hat: &[f64]) -> Result<f64> {
    if y.len() != q_hat.len() {
        return Err(AqmmError::Alignment(format!("{} responses but {} predictions", y.len(), q_hat.len())));
    }
    if y.is_empty() {
        return Err(AqmmError::Input("no observations".into()));
    }
    Ok(weighted_pnr(y, q_hat, &vec![1.0; y.len()]))
}

fn weighted_pnr(y: &[f64], q_hat: &[f64], weights: &[f64]) -> f64 {
    let (mut neg, mut tot) = (0.0, 0.0);
    for ((yv, qv), w) in y.iter().zip(q_hat).zip(weights) {
        if *w == 0.0 {
            continue;
        }
        tot += w;
        if yv - qv < 0.0 {
            neg += w;
        }
    }
    neg / tot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// Fixed and smooth parts only.
    Population,
    /// Adds the cluster's predicted random effects.
    Cluster,
}

impl Level {
    pub fn from_index(level: u8) -> Result<Self> {
        match level {
            0 => Ok(Level::Population),
            1 => Ok(Level::Cluster),
            other => Err(AqmmError::Input(format!("prediction level must be 0 or 1, got {other}"))),
        }
    }
}

/// Covariates (and optionally cluster labels) for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct NewData {
    pub nrows: usize,
    pub cluster: Option<Vec<String>>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    /// Rows asked for at level 1 whose cluster was not seen in training.
    pub fallback: Vec<bool>,
}

pub fn predict(fit: &FitResult, info: &DesignInfo, newdata: &NewData, level: Level) -> Result<Prediction> {
    let rows = info.new_rows(&newdata.columns, newdata.nrows)?;
    let scale = fit.response_scale;
    let q = info.q;
    let m = fit.cluster_labels.len();
    if fit.w_internal.len() != m * q + info.h {
        return Err(AqmmError::Dimension("fit does not match the design description".into()));
    }
    let v_int = &fit.w_internal[m * q..];
    let index: HashMap<&str, usize> = fit
        .cluster_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    if level == Level::Cluster && newdata.cluster.is_none() {
        return Err(AqmmError::Input("level-1 prediction needs cluster labels".into()));
    }
    let mut values = Vec::with_capacity(newdata.nrows);
    let mut fallback = Vec::with_capacity(newdata.nrows);
    let (mut f, mut z, mut b) = (vec![0.0; info.p], vec![0.0; info.q], vec![0.0; info.h]);
    for r in 0..newdata.nrows {
        f.iter_mut().enumerate().for_each(|(j, x)| *x = rows.f[(r, j)]);
        z.iter_mut().enumerate().for_each(|(j, x)| *x = rows.z[(r, j)]);
        b.iter_mut().enumerate().for_each(|(j, x)| *x = rows.b[(r, j)]);
        let cluster = match level {
            Level::Population => None,
            Level::Cluster => {
                let label = &newdata.cluster.as_ref().unwrap()[r];
                index.get(label.as_str()).map(|&i| i)
            }
        };
        fallback.push(level == Level::Cluster && cluster.is_none());
        let value = match cluster {
            Some(i) => linear_predictor(&f, &b, &fit.theta_hat.beta, v_int, Some((&z, &fit.w_internal[i * q..(i + 1) * q]))),
            None => linear_predictor(&f, &b, &fit.theta_hat.beta, v_int, None),
        };
        values.push(value * scale);
    }
    Ok(Prediction { values, fallback })
}
