//! Penalized spline bases for smooth terms and their mixed-model reparameterization.
//!
//! A smooth term contributes raw basis columns `X` with roughness penalty `S`.
//! [`reparameterize`] splits the coefficient space into the penalty null space
//! (unpenalized, appended to the fixed design) and the range space scaled so that
//! the penalty becomes the identity (appended to the random design).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{AqmmError, Result};

/// Eigenvalues below this fraction of the largest are treated as null space.
pub const RANK_TOL: f64 = 1e-10;
/// Eigenvalues below minus this fraction of the largest make a penalty indefinite.
pub const INDEFINITE_TOL: f64 = 1e-8;
/// Thin-plate candidate centres are thinned to at most this many quantiles.
const MAX_TPRS_CENTRES: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    CubicRegression,
    Bspline,
    ThinPlateLowRank,
}

fn default_center() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothTermSpec {
    pub variable: String,
    pub basis_kind: BasisKind,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
    #[serde(default = "default_center")]
    pub center: bool,
}

impl SmoothTermSpec {
    pub fn new(variable: impl Into<String>, basis_kind: BasisKind, dimension: usize) -> Self {
        Self {
            variable: variable.into(),
            basis_kind,
            dimension,
            knots: None,
            center: true,
        }
    }
}

/// A fitted basis definition, able to evaluate at new covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplineBasis {
    /// Natural cubic regression spline parameterized by its values at the knots.
    CubicRegression {
        knots: Vec<f64>,
        /// Row-major k×k map from knot values to second derivatives at the knots.
        second_deriv: Vec<f64>,
    },
    /// Clamped B-splines with the integrated squared second derivative penalty.
    Bspline { knots: Vec<f64>, degree: usize },
    /// Low-rank thin plate regression spline in one dimension.
    ThinPlate {
        centres: Vec<f64>,
        /// Row-major (centres × radial columns) coefficient map.
        radial_map: Vec<f64>,
        radial_cols: usize,
    },
}

/// Raw basis evaluations and roughness penalty for one smooth term.
#[derive(Debug, Clone)]
pub struct RawBasis {
    pub basis: SplineBasis,
    pub matrix: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

fn validate_x(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(AqmmError::Input("empty covariate vector".into()));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(AqmmError::Input(format!("non-finite covariate value {bad}")));
    }
    let mut u = x.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    u.dedup();
    Ok(u)
}

/// Quantiles of sorted distinct values at `count` evenly spaced probabilities.
fn quantile_knots(unique: &[f64], count: usize) -> Vec<f64> {
    let nu = unique.len();
    (0..count)
        .map(|j| {
            let pos = j as f64 * (nu - 1) as f64 / (count - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(nu - 1);
            let frac = pos - lo as f64;
            unique[lo] + frac * (unique[hi] - unique[lo])
        })
        .collect()
}

fn validate_knots(knots: &[f64], unique: &[f64]) -> Result<()> {
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(AqmmError::Input("explicit knots must be strictly increasing".into()));
    }
    let (lo, hi) = (unique[0], unique[unique.len() - 1]);
    if knots[0] > lo || knots[knots.len() - 1] < hi {
        return Err(AqmmError::Input(format!(
            "explicit knots [{}, {}] do not span the covariate range [{lo}, {hi}]",
            knots[0],
            knots[knots.len() - 1]
        )));
    }
    Ok(())
}

pub fn build_basis(x: &[f64], spec: &SmoothTermSpec) -> Result<RawBasis> {
    let unique = validate_x(x)?;
    let dim = spec.dimension;
    if dim < 3 {
        return Err(AqmmError::Dimension(format!(
            "smooth of '{}' needs dimension >= 3, got {dim}",
            spec.variable
        )));
    }
    if unique.len() < dim {
        return Err(AqmmError::Dimension(format!(
            "smooth of '{}' has dimension {dim} but only {} distinct covariate values",
            spec.variable,
            unique.len()
        )));
    }
    let basis = match spec.basis_kind {
        BasisKind::CubicRegression => {
            let knots = match &spec.knots {
                Some(k) => {
                    validate_knots(k, &unique)?;
                    if k.len() != dim {
                        return Err(AqmmError::Dimension(format!(
                            "cubic regression spline with dimension {dim} needs {dim} knots, got {}",
                            k.len()
                        )));
                    }
                    k.clone()
                }
                None => quantile_knots(&unique, dim),
            };
            cubic_regression(knots)
        }
        BasisKind::Bspline => {
            let degree = 3.min(dim - 1);
            let nbreaks = dim - degree + 1;
            let breaks = match &spec.knots {
                Some(k) => {
                    validate_knots(k, &unique)?;
                    if k.len() != nbreaks {
                        return Err(AqmmError::Dimension(format!(
                            "degree-{degree} B-spline with dimension {dim} needs {nbreaks} breakpoints, got {}",
                            k.len()
                        )));
                    }
                    k.clone()
                }
                None => quantile_knots(&unique, nbreaks),
            };
            let mut knots = vec![breaks[0]; degree];
            knots.extend_from_slice(&breaks);
            knots.extend(std::iter::repeat_n(breaks[nbreaks - 1], degree));
            SplineBasis::Bspline { knots, degree }
        }
        BasisKind::ThinPlateLowRank => {
            let centres = match &spec.knots {
                Some(k) => {
                    validate_knots(k, &unique)?;
                    if k.len() < dim {
                        return Err(AqmmError::Dimension(format!(
                            "thin plate spline with dimension {dim} needs at least {dim} centres"
                        )));
                    }
                    k.clone()
                }
                None if unique.len() > MAX_TPRS_CENTRES => quantile_knots(&unique, MAX_TPRS_CENTRES),
                None => unique.clone(),
            };
            thin_plate(centres, dim)?
        }
    };
    let matrix = basis.evaluate(x);
    let penalty = basis.penalty();
    Ok(RawBasis {
        basis,
        matrix,
        penalty,
    })
}

fn cubic_regression(knots: Vec<f64>) -> SplineBasis {
    let k = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut d = DMatrix::zeros(k - 2, k);
    let mut b = DMatrix::zeros(k - 2, k - 2);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < k - 2 {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let inner = b
        .cholesky()
        .expect("tridiagonal spline system is positive definite")
        .solve(&d);
    let mut f = DMatrix::zeros(k, k);
    f.view_mut((1, 0), (k - 2, k)).copy_from(&inner);
    SplineBasis::CubicRegression {
        knots,
        second_deriv: f.transpose().as_slice().to_vec(),
    }
}

fn thin_plate(centres: Vec<f64>, dim: usize) -> Result<SplineBasis> {
    let nk = centres.len();
    let e = DMatrix::from_fn(nk, nk, |i, j| tps_kernel(centres[i] - centres[j]));
    // Restrict the kernel to coefficient vectors with T'δ = 0, T = [1, x].
    let t = DMatrix::from_fn(nk, 2, |i, j| if j == 0 { 1.0 } else { centres[i] });
    let q = t.qr().q();
    let proj = DMatrix::<f64>::identity(nk, nk) - &q * q.transpose();
    let ec = symmetrize(&proj * e * &proj);
    let eig = SymmetricEigen::new(ec);
    let mut order: Vec<usize> = (0..nk).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let radial_cols = dim - 2;
    let max_ev = eig.eigenvalues[order[0]];
    if max_ev <= 0.0 {
        return Err(AqmmError::Numerical("thin plate kernel has no positive curvature".into()));
    }
    let mut map = DMatrix::zeros(nk, radial_cols);
    for (c, &idx) in order.iter().take(radial_cols).enumerate() {
        if eig.eigenvalues[idx] < RANK_TOL * max_ev {
            return Err(AqmmError::Dimension(format!(
                "thin plate kernel supports only {c} penalized directions, {radial_cols} requested"
            )));
        }
        map.set_column(c, &eig.eigenvectors.column(idx));
    }
    Ok(SplineBasis::ThinPlate {
        centres,
        radial_map: map.transpose().as_slice().to_vec(),
        radial_cols,
    })
}

#[inline]
fn tps_kernel(r: f64) -> f64 {
    r.abs().powi(3) / 12.0
}

/// Values (`deriv == 0`) or derivatives of all B-spline basis functions at `x`.
fn bspline_row(knots: &[f64], degree: usize, x: f64, deriv: usize) -> Vec<f64> {
    let nbasis = knots.len() - degree - 1;
    if deriv > degree {
        return vec![0.0; nbasis];
    }
    let lo = knots[degree];
    let hi = knots[nbasis];
    let x = x.clamp(lo, hi);
    // Degree-0 indicators with the right boundary folded into the last span.
    let mut span = degree;
    while span < nbasis - 1 && x >= knots[span + 1] {
        span += 1;
    }
    let base = degree - deriv;
    let len0 = knots.len() - 1;
    let mut vals = vec![0.0; len0];
    vals[span] = 1.0;
    for p in 1..=base {
        let mut next = vec![0.0; len0 - p];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = knots[i + p] - knots[i];
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * vals[i];
            }
            let d2 = knots[i + p + 1] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + p + 1] - x) / d2 * vals[i + 1];
            }
            *slot = v;
        }
        vals = next;
    }
    for p in base + 1..=degree {
        let pf = p as f64;
        let mut next = vec![0.0; vals.len() - 1];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = knots[i + p] - knots[i];
            if d1 > 0.0 {
                v += pf / d1 * vals[i];
            }
            let d2 = knots[i + p + 1] - knots[i + 1];
            if d2 > 0.0 {
                v -= pf / d2 * vals[i + 1];
            }
            *slot = v;
        }
        vals = next;
    }
    vals.truncate(nbasis);
    vals
}

impl SplineBasis {
    /// Covariate interval covered by the knots or centres.
    pub fn range(&self) -> (f64, f64) {
        let span = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        match self {
            SplineBasis::CubicRegression { knots, .. } => span(knots),
            SplineBasis::Bspline { knots, degree } => (knots[*degree], knots[knots.len() - degree - 1]),
            SplineBasis::ThinPlate { centres, .. } => span(centres),
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            SplineBasis::CubicRegression { knots, .. } => knots.len(),
            SplineBasis::Bspline { knots, degree } => knots.len() - degree - 1,
            SplineBasis::ThinPlate { radial_cols, .. } => radial_cols + 2,
        }
    }

    /// Evaluate the raw basis at `x`; beyond the boundary knots the fit is
    /// extended linearly.
    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let dim = self.dimension();
        let mut out = DMatrix::zeros(x.len(), dim);
        for (row, &xv) in x.iter().enumerate() {
            let vals = self.eval_row(xv);
            for (c, v) in vals.into_iter().enumerate() {
                out[(row, c)] = v;
            }
        }
        out
    }

    fn eval_row(&self, x: f64) -> Vec<f64> {
        match self {
            SplineBasis::CubicRegression {
                knots,
                second_deriv,
            } => {
                let k = knots.len();
                let f = |i: usize, j: usize| second_deriv[i * k + j];
                let mut row = vec![0.0; k];
                if x < knots[0] || x > knots[k - 1] {
                    // linear extension from the nearest boundary knot
                    let (j, at, left) = if x < knots[0] {
                        (0, knots[0], true)
                    } else {
                        (k - 2, knots[k - 1], false)
                    };
                    let hj = knots[j + 1] - knots[j];
                    let dx = x - at;
                    row[if left { j } else { j + 1 }] += 1.0;
                    // derivative of the fit at the boundary
                    row[j] += -dx / hj;
                    row[j + 1] += dx / hj;
                    for c in 0..k {
                        let d = if left {
                            -hj * (2.0 * f(j, c) + f(j + 1, c)) / 6.0
                        } else {
                            hj * (f(j, c) + 2.0 * f(j + 1, c)) / 6.0
                        };
                        row[c] += dx * d;
                    }
                    return row;
                }
                let mut j = 0;
                while j < k - 2 && x > knots[j + 1] {
                    j += 1;
                }
                let hj = knots[j + 1] - knots[j];
                let am = (knots[j + 1] - x) / hj;
                let ap = (x - knots[j]) / hj;
                let cm = ((knots[j + 1] - x).powi(3) / hj - hj * (knots[j + 1] - x)) / 6.0;
                let cp = ((x - knots[j]).powi(3) / hj - hj * (x - knots[j])) / 6.0;
                row[j] += am;
                row[j + 1] += ap;
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot += cm * f(j, c) + cp * f(j + 1, c);
                }
                row
            }
            SplineBasis::Bspline { knots, degree } => {
                let lo = knots[*degree];
                let hi = knots[knots.len() - degree - 1];
                let mut row = bspline_row(knots, *degree, x, 0);
                if x < lo || x > hi {
                    let at = if x < lo { lo } else { hi };
                    let d = bspline_row(knots, *degree, at, 1);
                    for (v, dv) in row.iter_mut().zip(d) {
                        *v += (x - at) * dv;
                    }
                }
                row
            }
            SplineBasis::ThinPlate {
                centres,
                radial_map,
                radial_cols,
            } => {
                let rc = *radial_cols;
                let mut row = vec![0.0; rc + 2];
                for (i, &c) in centres.iter().enumerate() {
                    let e = tps_kernel(x - c);
                    for j in 0..rc {
                        row[j] += e * radial_map[i * rc + j];
                    }
                }
                row[rc] = 1.0;
                row[rc + 1] = x;
                row
            }
        }
    }

    /// Roughness penalty matrix in raw coefficients.
    pub fn penalty(&self) -> DMatrix<f64> {
        match self {
            SplineBasis::CubicRegression {
                knots,
                second_deriv,
            } => {
                // ∫ f''^2 for a natural cubic spline equals β' D' B⁻¹ D β; f'' is
                // piecewise linear in the second derivatives at the knots.
                let k = knots.len();
                let f = DMatrix::from_row_slice(k, k, second_deriv);
                let mut s = DMatrix::zeros(k, k);
                for j in 0..k - 1 {
                    let h = knots[j + 1] - knots[j];
                    let fj = f.row(j);
                    let fj1 = f.row(j + 1);
                    s += (fj.transpose() * fj + fj1.transpose() * fj1) * (h / 3.0)
                        + (fj.transpose() * fj1 + fj1.transpose() * fj) * (h / 6.0);
                }
                symmetrize(s)
            }
            SplineBasis::Bspline { knots, degree } => {
                let dim = self.dimension();
                let mut s = DMatrix::zeros(dim, dim);
                if *degree < 2 {
                    return s;
                }
                // f'' has degree <= 1 per span; two-point Gauss-Legendre is exact.
                let g = 1.0 / 3f64.sqrt();
                for w in knots.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if b <= a {
                        continue;
                    }
                    let half = 0.5 * (b - a);
                    let mid = 0.5 * (a + b);
                    for node in [mid - half * g, mid + half * g] {
                        let d2 = DVector::from_vec(bspline_row(knots, *degree, node, 2));
                        s += &d2 * d2.transpose() * half;
                    }
                }
                symmetrize(s)
            }
            SplineBasis::ThinPlate {
                centres,
                radial_map,
                radial_cols,
            } => {
                let rc = *radial_cols;
                let nk = centres.len();
                let map = DMatrix::from_row_slice(nk, rc, radial_map);
                let e = DMatrix::from_fn(nk, nk, |i, j| tps_kernel(centres[i] - centres[j]));
                let inner = map.transpose() * e * &map;
                let mut s = DMatrix::zeros(rc + 2, rc + 2);
                s.view_mut((0, 0), (rc, rc)).copy_from(&inner);
                symmetrize(s)
            }
        }
    }
}

fn symmetrize(s: DMatrix<f64>) -> DMatrix<f64> {
    (&s + s.transpose()) * 0.5
}

/// A smooth term split into unpenalized and identity-penalized parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparameterizedBasis {
    /// Centred null-space columns with the constant direction removed (intercept absorbs it).
    #[serde(skip)]
    pub null_cols: DMatrix<f64>,
    /// Penalized columns; the penalty on their coefficients is the identity.
    #[serde(skip)]
    pub pen_cols: DMatrix<f64>,
    /// Square map from raw coefficients to (null, pen) coordinates, before centring.
    pub transform: DMatrix<f64>,
    /// Maps raw coefficients onto the retained null-space columns.
    pub null_map: DMatrix<f64>,
    /// Maps raw coefficients onto the penalized columns.
    pub pen_map: DMatrix<f64>,
    pub null_means: Vec<f64>,
    pub pen_means: Vec<f64>,
    /// Rank of the raw penalty (number of penalized columns).
    pub rank: usize,
    /// Dimension of the raw penalty null space.
    pub nullity: usize,
    pub centered: bool,
}

/// Split `raw` (N×d) under `penalty` (d×d) into null-space and identity-penalized blocks.
pub fn reparameterize(
    raw: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    center: bool,
) -> Result<ReparameterizedBasis> {
    let d = penalty.nrows();
    if penalty.ncols() != d || raw.ncols() != d {
        return Err(AqmmError::Dimension(format!(
            "basis has {} columns but penalty is {}x{}",
            raw.ncols(),
            penalty.nrows(),
            penalty.ncols()
        )));
    }
    let asym = (penalty - penalty.transpose()).amax();
    if asym > 1e-8 * penalty.amax().max(1.0) {
        return Err(AqmmError::Numerical("penalty matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(penalty.clone()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let min_ev = eig.eigenvalues[order[d - 1]];
    if min_ev < -INDEFINITE_TOL * max_ev.max(f64::MIN_POSITIVE) {
        return Err(AqmmError::Numerical(format!(
            "penalty is indefinite: eigenvalue {min_ev:.3e} against maximum {max_ev:.3e}"
        )));
    }
    let pen_idx: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| max_ev > 0.0 && eig.eigenvalues[i] >= RANK_TOL * max_ev)
        .collect();
    let null_idx: Vec<usize> = order
        .iter()
        .copied()
        .filter(|i| !pen_idx.contains(i))
        .collect();
    let rank = pen_idx.len();
    let nullity = null_idx.len();

    // transform rows: null eigenvectors, then sqrt(λ)-scaled range eigenvectors
    let mut transform = DMatrix::zeros(d, d);
    for (r, &i) in null_idx.iter().enumerate() {
        transform.set_row(r, &eig.eigenvectors.column(i).transpose());
    }
    let mut pen_map = DMatrix::zeros(d, rank);
    for (r, &i) in pen_idx.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        transform.set_row(nullity + r, &(eig.eigenvectors.column(i).transpose() * lam.sqrt()));
        pen_map.set_column(r, &(eig.eigenvectors.column(i) / lam.sqrt()));
    }

    let mut pen_cols = raw * &pen_map;
    let pen_means = column_means(&pen_cols);
    if center {
        subtract_means(&mut pen_cols, &pen_means);
    }
    let pen_means = if center { pen_means } else { vec![0.0; rank] };

    // Null space: centre, then keep the directions that survive (the constant does not).
    let mut u0 = DMatrix::zeros(d, nullity);
    for (c, &i) in null_idx.iter().enumerate() {
        u0.set_column(c, &eig.eigenvectors.column(i));
    }
    let mut null_raw = raw * &u0;
    let null_all_means = column_means(&null_raw);
    subtract_means(&mut null_raw, &null_all_means);
    let (null_cols, null_map, null_means) = if nullity == 0 {
        (DMatrix::zeros(raw.nrows(), 0), DMatrix::zeros(d, 0), vec![])
    } else {
        let svd = null_raw.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let vt = svd.v_t.expect("svd requested v_t");
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-9 * smax.max(f64::MIN_POSITIVE))
            .collect();
        let mut k = DMatrix::zeros(nullity, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let s = svd.singular_values[i] / (raw.nrows() as f64).sqrt();
            k.set_column(c, &(vt.row(i).transpose() / s));
        }
        let cols = &null_raw * &k;
        let map = &u0 * &k;
        let means: Vec<f64> = (0..keep.len())
            .map(|c| (null_all_means.iter().enumerate()).map(|(r, m)| m * k[(r, c)]).sum())
            .collect();
        (cols, map, means)
    };

    Ok(ReparameterizedBasis {
        null_cols,
        pen_cols,
        transform,
        null_map,
        pen_map,
        null_means,
        pen_means,
        rank,
        nullity,
        centered: center,
    })
}

impl ReparameterizedBasis {
    /// Null-space and penalized columns for raw basis rows evaluated at new data,
    /// using the training centring.
    pub fn apply(&self, raw: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            rowwise_map(raw, &self.null_map, &self.null_means),
            rowwise_map(raw, &self.pen_map, &self.pen_means),
        )
    }
}

/// `raw * map - means`, accumulated row by row so each output row depends only
/// on the matching input row.
fn rowwise_map(raw: &DMatrix<f64>, map: &DMatrix<f64>, means: &[f64]) -> DMatrix<f64> {
    let (n, d, k) = (raw.nrows(), raw.ncols(), map.ncols());
    DMatrix::from_fn(n, k, |r, c| {
        let mut acc = 0.0;
        for j in 0..d {
            acc += raw[(r, j)] * map[(j, c)];
        }
        acc - means[c]
    })
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows().max(1) as f64;
    m.column_iter().map(|c| c.sum() / n).collect()
}

fn subtract_means(m: &mut DMatrix<f64>, means: &[f64]) {
    for (j, mean) in means.iter().enumerate() {
        m.column_mut(j).add_scalar_mut(-mean);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    fn random_x(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..10.0)).collect()
    }

    fn all_kinds() -> [BasisKind; 3] {
        [BasisKind::CubicRegression, BasisKind::Bspline, BasisKind::ThinPlateLowRank]
    }

    #[test]
    fn bspline_partition_of_unity() {
        let x = random_x(200, 1);
        for dim in [3, 4, 7, 12] {
            let raw = build_basis(&x, &SmoothTermSpec::new("x", BasisKind::Bspline, dim)).unwrap();
            for r in 0..x.len() {
                assert_abs_diff_eq!(raw.matrix.row(r).sum(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constants_are_unpenalized() {
        let x = random_x(150, 2);
        for kind in [BasisKind::CubicRegression, BasisKind::Bspline] {
            let raw = build_basis(&x, &SmoothTermSpec::new("x", kind, 8)).unwrap();
            let ones = DVector::from_element(8, 1.0);
            assert!((&raw.penalty * ones).amax() < 1e-9 * raw.penalty.amax());
        }
    }

    #[test]
    fn linear_functions_are_unpenalized() {
        // Least-squares line coefficients in each raw basis; the quadratic form is
        // computed directly from the penalty matrix.
        let x = random_x(300, 3);
        for kind in all_kinds() {
            let raw = build_basis(&x, &SmoothTermSpec::new("x", kind, 9)).unwrap();
            let target = DVector::from_iterator(x.len(), x.iter().map(|v| 2.0 - 0.7 * v));
            let coef = raw
                .matrix
                .clone()
                .svd(true, true)
                .solve(&target, 1e-12)
                .unwrap();
            let fitted = &raw.matrix * &coef;
            assert!((&fitted - &target).amax() < 1e-8, "{kind:?} cannot represent a line");
            let quad = (coef.transpose() * &raw.penalty * &coef)[(0, 0)];
            let scale = raw.penalty.amax() * coef.norm_squared();
            assert!(quad.abs() < 1e-9 * scale, "{kind:?}: {quad}");
        }
    }

    #[test]
    fn penalty_matches_integrated_curvature() {
        // f = sin on a cubic regression spline; compare β'Sβ with trapezoid ∫ f''^2
        // of the interpolating spline itself, evaluated by finite differences.
        let x = grid(400, 0.0, 6.0);
        let raw = build_basis(&x, &SmoothTermSpec::new("x", BasisKind::CubicRegression, 12)).unwrap();
        let SplineBasis::CubicRegression { knots, .. } = &raw.basis else {
            unreachable!()
        };
        let beta = DVector::from_iterator(knots.len(), knots.iter().map(|k| k.sin()));
        let quad = (beta.transpose() * &raw.penalty * &beta)[(0, 0)];
        let fine = grid(20001, 0.0, 6.0);
        let vals = raw.basis.evaluate(&fine) * &beta;
        let hstep = fine[1] - fine[0];
        let mut integral = 0.0;
        for i in 1..fine.len() - 1 {
            let d2 = (vals[i + 1] - 2.0 * vals[i] + vals[i - 1]) / (hstep * hstep);
            integral += d2 * d2 * hstep;
        }
        assert!((quad - integral).abs() < 1e-3 * integral, "{quad} vs {integral}");
    }

    #[test]
    fn dimension_and_input_errors() {
        let x = vec![1.0, 2.0, 3.0, 1.0];
        let e = build_basis(&x, &SmoothTermSpec::new("x", BasisKind::CubicRegression, 4));
        assert!(matches!(e, Err(AqmmError::Dimension(_))));
        let e = build_basis(&x, &SmoothTermSpec::new("x", BasisKind::CubicRegression, 2));
        assert!(matches!(e, Err(AqmmError::Dimension(_))));
        let e = build_basis(&[1.0, f64::NAN, 3.0, 4.0], &SmoothTermSpec::new("x", BasisKind::Bspline, 3));
        assert!(matches!(e, Err(AqmmError::Input(_))));
        let mut spec = SmoothTermSpec::new("x", BasisKind::CubicRegression, 3);
        spec.knots = Some(vec![1.0, 1.0, 3.0]);
        assert!(matches!(build_basis(&x, &spec), Err(AqmmError::Input(_))));
        spec.knots = Some(vec![1.5, 2.0, 3.0]);
        assert!(matches!(build_basis(&x, &spec), Err(AqmmError::Input(_))));
        spec.knots = Some(vec![1.0, 2.5, 3.0]);
        assert!(build_basis(&x, &spec).is_ok());
    }

    #[test]
    fn identity_penalty_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = DMatrix::from_fn(30, 5, |_, _| rng.random_range(-1.0..1.0));
        let rep = reparameterize(&raw, &DMatrix::identity(5, 5), false).unwrap();
        assert_eq!(rep.rank, 5);
        assert_eq!(rep.null_cols.ncols(), 0);
        // a permutation matrix, up to signs
        let t = rep.transform.abs();
        for r in 0..5 {
            assert_abs_diff_eq!(t.row(r).sum(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(t.column(r).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_psd_penalty_becomes_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = DMatrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let s = q.transpose() * &q;
        let raw = DMatrix::from_fn(40, 8, |_, _| rng.random_range(-1.0..1.0));
        let rep = reparameterize(&raw, &s, false).unwrap();
        assert_eq!((rep.rank, rep.nullity), (5, 3));
        let tinv = rep.transform.clone().try_inverse().unwrap();
        let transformed = tinv.transpose() * &s * &tinv;
        let mut expected = DMatrix::zeros(8, 8);
        for i in 3..8 {
            expected[(i, i)] = 1.0;
        }
        assert!((transformed - expected).amax() < 1e-8);
    }

    #[test]
    fn indefinite_penalty_rejected() {
        let mut s = DMatrix::<f64>::identity(3, 3);
        s[(2, 2)] = -0.5;
        let raw = DMatrix::from_element(5, 3, 1.0);
        assert!(matches!(reparameterize(&raw, &s, true), Err(AqmmError::Numerical(_))));
    }

    #[test]
    fn every_kind_yields_identity_penalty_and_centred_columns() {
        let x = random_x(250, 6);
        for kind in all_kinds() {
            let raw = build_basis(&x, &SmoothTermSpec::new("x", kind, 10)).unwrap();
            let rep = reparameterize(&raw.matrix, &raw.penalty, true).unwrap();
            assert_eq!(rep.nullity, 2, "{kind:?}");
            assert_eq!(rep.rank, 8, "{kind:?}");
            assert_eq!(rep.null_cols.ncols(), 1, "{kind:?}");
            let tinv = rep.transform.clone().try_inverse().unwrap();
            let tp = tinv.transpose() * &raw.penalty * &tinv;
            for i in 0..10 {
                for j in 0..10 {
                    let want = if i == j && i >= 2 { 1.0 } else { 0.0 };
                    assert!((tp[(i, j)] - want).abs() < 1e-8, "{kind:?} ({i},{j}) = {}", tp[(i, j)]);
                }
            }
            for c in rep.pen_cols.column_iter() {
                assert!(c.sum().abs() < 1e-8 * x.len() as f64);
            }
            // the retained null column is the centred covariate
            let xc: Vec<f64> = {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                x.iter().map(|v| v - m).collect()
            };
            let col = rep.null_cols.column(0);
            let corr = col.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>()
                / (col.norm() * xc.iter().map(|v| v * v).sum::<f64>().sqrt());
            assert!(corr.abs() > 1.0 - 1e-9, "{kind:?} corr {corr}");
        }
    }

    #[test]
    fn round_trip_and_isometry() {
        let x = random_x(120, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in all_kinds() {
            let raw = build_basis(&x, &SmoothTermSpec::new("x", kind, 7)).unwrap();
            let rep = reparameterize(&raw.matrix, &raw.penalty, true).unwrap();
            let tinv = rep.transform.clone().try_inverse().unwrap();
            for _ in 0..10 {
                let v = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
                let coords = &rep.transform * &v;
                let back = &raw.matrix * (&tinv * &coords);
                let direct = &raw.matrix * &v;
                assert!((&back - &direct).amax() < 1e-8 * (1.0 + direct.amax()));
                let quad = (v.transpose() * &raw.penalty * &v)[(0, 0)];
                let pen = coords.rows(rep.nullity, rep.rank).norm_squared();
                assert!((quad - pen).abs() < 1e-8 * quad.max(1.0), "{kind:?}");
                // centred columns reproduce the fit up to a constant
                let pen_coef = coords.rows(rep.nullity, rep.rank).into_owned();
                let lin = least_squares(&rep.null_cols, &(&direct - &rep.pen_cols * &pen_coef));
                let resid = &direct - &rep.pen_cols * &pen_coef - &rep.null_cols * lin;
                let m = resid.mean();
                assert!(resid.iter().all(|r| (r - m).abs() < 1e-7 * (1.0 + direct.amax())), "{kind:?}");
            }
        }
    }

    fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = x.nrows();
        let mut xa = DMatrix::from_element(n, x.ncols() + 1, 1.0);
        xa.view_mut((0, 1), (n, x.ncols())).copy_from(x);
        let c = xa.svd(true, true).solve(y, 1e-12).unwrap();
        c.rows(1, x.ncols()).into_owned()
    }

    #[test]
    fn shifting_covariate_keeps_penalized_column_space() {
        let x = random_x(100, 9);
        let shifted: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        for kind in all_kinds() {
            let a = build_basis(&x, &SmoothTermSpec::new("x", kind, 6)).unwrap();
            let b = build_basis(&shifted, &SmoothTermSpec::new("x", kind, 6)).unwrap();
            let ra = reparameterize(&a.matrix, &a.penalty, true).unwrap();
            let rb = reparameterize(&b.matrix, &b.penalty, true).unwrap();
            let q = ra.pen_cols.clone().qr().q();
            let proj = &q * (q.transpose() * &rb.pen_cols);
            let dist = (&proj - &rb.pen_cols).amax() / rb.pen_cols.amax();
            assert!(dist < 1e-6, "{kind:?}: {dist}");
        }
    }

    #[test]
    fn prediction_uses_training_centring() {
        let x = random_x(80, 10);
        let raw = build_basis(&x, &SmoothTermSpec::new("x", BasisKind::CubicRegression, 6)).unwrap();
        let rep = reparameterize(&raw.matrix, &raw.penalty, true).unwrap();
        let (n, p) = rep.apply(&raw.basis.evaluate(&x));
        assert!((n - &rep.null_cols).amax() < 1e-12);
        assert!((p - &rep.pen_cols).amax() < 1e-12);
    }

    #[test]
    fn extrapolation_is_linear() {
        let x = random_x(60, 11);
        for kind in all_kinds() {
            let raw = build_basis(&x, &SmoothTermSpec::new("x", kind, 6)).unwrap();
            let pts = [-3.0, -2.0, -1.0, 11.0, 12.0, 13.0];
            let m = raw.basis.evaluate(&pts);
            let coef = DVector::from_fn(6, |i, _| (i as f64 * 1.3).sin());
            let f = m * coef;
            assert!(((f[1] - f[0]) - (f[2] - f[1])).abs() < 1e-8, "{kind:?}");
            assert!(((f[4] - f[3]) - (f[5] - f[4])).abs() < 1e-8, "{kind:?}");
        }
    }
}
