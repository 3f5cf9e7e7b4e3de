//! Model specification, design assembly, parameter packing and the block
//! precision of the random effects.
//!
//! Rows are grouped by cluster so that every cluster occupies a contiguous
//! block. The random-effect vector is `w = (u_1, ..., u_M, v_1, ..., v_s)` with
//! `u_i` of length `q` and `v_k` of length `H_k`.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, reparameterize, ReparameterizedBasis, SmoothTermSpec, SplineBasis};
use crate::error::{AqmmError, Result};

fn default_true() -> bool {
    true
}

/// Cluster-level random effects: an optional intercept plus random slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTermSpec {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub slopes: Vec<String>,
}

impl Default for RandomTermSpec {
    fn default() -> Self {
        Self {
            intercept: true,
            slopes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub response: String,
    pub cluster: String,
    #[serde(default)]
    pub linear: Vec<String>,
    #[serde(default)]
    pub smooth: Vec<SmoothTermSpec>,
    #[serde(default)]
    pub random: RandomTermSpec,
    /// Response is divided by this factor before fitting; outputs are rescaled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_scale: Option<f64>,
}

impl ModelSpec {
    pub fn new(response: impl Into<String>, cluster: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            cluster: cluster.into(),
            linear: Vec::new(),
            smooth: Vec::new(),
            random: RandomTermSpec::default(),
            response_scale: None,
        }
    }

    /// All covariate columns the spec reads (response and cluster excluded).
    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let names = self
            .linear
            .iter()
            .chain(self.smooth.iter().map(|s| &s.variable))
            .chain(self.random.slopes.iter());
        for name in names {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }
}

/// Long-format clustered observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredData {
    pub y: Vec<f64>,
    pub cluster: Vec<String>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

impl ClusteredData {
    pub fn new(y: Vec<f64>, cluster: Vec<String>, columns: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let n = y.len();
        if cluster.len() != n {
            return Err(AqmmError::Data(format!(
                "{} cluster labels for {n} responses",
                cluster.len()
            )));
        }
        for (name, col) in &columns {
            if col.len() != n {
                return Err(AqmmError::Data(format!(
                    "column '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(AqmmError::Data(format!("column '{name}' has missing or non-finite values")));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(AqmmError::Data("response has missing or non-finite values".into()));
        }
        Ok(Self { y, cluster, columns })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| AqmmError::Spec(format!("column '{name}' not found in data")))
    }
}

/// A smooth term as assembled: the basis definition plus its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub spec: SmoothTermSpec,
    pub basis: SplineBasis,
    pub reparam: ReparameterizedBasis,
    /// Columns of F holding this term's null-space part.
    pub fixed_cols: Range<usize>,
    /// Columns of B holding this term's penalized part.
    pub random_cols: Range<usize>,
}

/// Design matrices for the fixed part `F`, cluster random effects `Z` and
/// penalized spline coefficients `B`, with rows grouped by cluster.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub y: Vec<f64>,
    pub f: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Row ranges of each cluster (length `M + 1`).
    pub offsets: Vec<usize>,
    pub cluster_labels: Vec<String>,
    /// `perm[r]` is the input row placed at design row `r`.
    pub perm: Vec<usize>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub smooths: Vec<SmoothTerm>,
    pub spec: ModelSpec,
    pub scale: f64,
    pub warnings: Vec<String>,
    rows: Vec<f64>,
}

/// Dimension bookkeeping for a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub h: usize,
    pub s: usize,
}

impl Dims {
    /// Free parameters of the cluster covariance.
    pub fn xi_len(&self) -> usize {
        self.q * (self.q + 1) / 2
    }

    /// Length of the stacked random-effect vector.
    pub fn w_len(&self) -> usize {
        self.m * self.q + self.h
    }

    pub fn theta_len(&self) -> usize {
        self.p + self.xi_len() + self.s
    }
}

pub fn assemble(data: &ClusteredData, spec: &ModelSpec) -> Result<DesignSet> {
    if data.is_empty() {
        return Err(AqmmError::Data("no observations".into()));
    }
    for name in spec.covariates() {
        data.column(&name)?;
    }
    let scale = spec.response_scale.unwrap_or(1.0);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(AqmmError::Spec(format!("response scale must be positive, got {scale}")));
    }

    // cluster order of first appearance; rows stable within a cluster
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (row, label) in data.cluster.iter().enumerate() {
        let id = *index.entry(label.as_str()).or_insert_with(|| {
            labels.push(label.clone());
            members.push(Vec::new());
            labels.len() - 1
        });
        members[id].push(row);
    }
    let perm: Vec<usize> = members.iter().flatten().copied().collect();
    let mut offsets = Vec::with_capacity(members.len() + 1);
    offsets.push(0);
    for m in &members {
        offsets.push(offsets.last().unwrap() + m.len());
    }

    let n = data.len();
    let permuted = |col: &[f64]| -> Vec<f64> { perm.iter().map(|&r| col[r]).collect() };

    let mut fixed_cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut fixed_names = vec!["(Intercept)".to_string()];
    for name in &spec.linear {
        fixed_cols.push(permuted(data.column(name)?));
        fixed_names.push(name.clone());
    }
    let mut smooths = Vec::new();
    let mut random_blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut h_total = 0;
    for sspec in &spec.smooth {
        let x = permuted(data.column(&sspec.variable)?);
        let raw = build_basis(&x, sspec)?;
        let reparam = reparameterize(&raw.matrix, &raw.penalty, sspec.center)?;
        // Recomputed through `apply` so prediction on the same covariates is bit-identical.
        let (null_cols, pen_cols) = reparam.apply(&raw.matrix);
        let start = fixed_cols.len();
        for (j, col) in null_cols.column_iter().enumerate() {
            fixed_cols.push(col.iter().copied().collect());
            let suffix = if null_cols.ncols() == 1 { String::new() } else { format!(".{}", j + 1) };
            fixed_names.push(format!("s({}):linear{suffix}", sspec.variable));
        }
        let rank = reparam.rank;
        random_blocks.push(pen_cols);
        smooths.push(SmoothTerm {
            spec: sspec.clone(),
            basis: raw.basis,
            reparam,
            fixed_cols: start..fixed_cols.len(),
            random_cols: h_total..h_total + rank,
        });
        h_total += rank;
    }
    let f = DMatrix::from_fn(n, fixed_cols.len(), |r, c| fixed_cols[c][r]);
    let mut b = DMatrix::zeros(n, h_total);
    for (term, block) in smooths.iter().zip(&random_blocks) {
        b.view_mut((0, term.random_cols.start), (n, block.ncols())).copy_from(block);
    }

    let mut random_names = Vec::new();
    let mut z_cols: Vec<Vec<f64>> = Vec::new();
    if spec.random.intercept {
        z_cols.push(vec![1.0; n]);
        random_names.push("(Intercept)".to_string());
    }
    for name in &spec.random.slopes {
        z_cols.push(permuted(data.column(name)?));
        random_names.push(name.clone());
    }
    let z = DMatrix::from_fn(n, z_cols.len(), |r, c| z_cols[c][r]);
    let y: Vec<f64> = perm.iter().map(|&r| data.y[r] / scale).collect();

    check_estimability(&f, &fixed_names)?;

    let mut warnings = Vec::new();
    let q = z.ncols();
    let min_n = members.iter().map(Vec::len).min().unwrap_or(0);
    if q > min_n {
        warnings.push(format!(
            "{q} random effects per cluster but the smallest cluster has {min_n} rows; cluster effects may be poorly identified"
        ));
    }

    Ok(DesignSet::from_parts(
        y,
        f,
        z,
        b,
        offsets,
        labels,
        perm,
        fixed_names,
        random_names,
        smooths,
        spec.clone(),
        scale,
        warnings,
    ))
}

/// Reject rank-deficient fixed designs, naming the columns that add nothing new.
fn check_estimability(f: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (j, col) in f.column_iter().enumerate() {
        let orig = col.into_owned();
        let norm = orig.norm();
        let mut v = orig.clone();
        for _ in 0..2 {
            for e in &basis {
                let proj = e.dot(&v);
                v -= e * proj;
            }
        }
        let rnorm = v.norm();
        if norm == 0.0 || rnorm <= 1e-9 * norm {
            dependent.push(names[j].clone());
        } else {
            basis.push(v / rnorm);
        }
    }
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(AqmmError::Estimability { columns: dependent })
    }
}

impl DesignSet {
    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        y: Vec<f64>,
        f: DMatrix<f64>,
        z: DMatrix<f64>,
        b: DMatrix<f64>,
        offsets: Vec<usize>,
        cluster_labels: Vec<String>,
        perm: Vec<usize>,
        fixed_names: Vec<String>,
        random_names: Vec<String>,
        smooths: Vec<SmoothTerm>,
        spec: ModelSpec,
        scale: f64,
        warnings: Vec<String>,
    ) -> Self {
        let n = y.len();
        let width = f.ncols() + z.ncols() + b.ncols();
        let mut rows = Vec::with_capacity(n * width);
        for r in 0..n {
            rows.extend(f.row(r).iter());
            rows.extend(z.row(r).iter());
            rows.extend(b.row(r).iter());
        }
        Self {
            y,
            f,
            z,
            b,
            offsets,
            cluster_labels,
            perm,
            fixed_names,
            random_names,
            smooths,
            spec,
            scale,
            warnings,
            rows,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.y.len(),
            m: self.offsets.len() - 1,
            p: self.f.ncols(),
            q: self.z.ncols(),
            h: self.b.ncols(),
            s: self.smooths.len(),
        }
    }

    pub fn cluster_rows(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Penalized-column counts `H_k` per smooth.
    pub fn h_sizes(&self) -> Vec<usize> {
        self.smooths.iter().map(|s| s.reparam.rank).collect()
    }

    /// Row `r` as `(F_r, Z_r, B_r)` slices.
    #[inline]
    pub fn row(&self, r: usize) -> (&[f64], &[f64], &[f64]) {
        let (p, q, h) = (self.f.ncols(), self.z.ncols(), self.b.ncols());
        let w = p + q + h;
        let s = &self.rows[r * w..(r + 1) * w];
        (&s[..p], &s[p..p + q], &s[p + q..])
    }

    /// Dense `G = [blockdiag(Z_i) B]`; intended for small problems and tests.
    pub fn dense_g(&self) -> DMatrix<f64> {
        let d = self.dims();
        let mut g = DMatrix::zeros(d.n, d.w_len());
        for i in 0..d.m {
            for r in self.cluster_rows(i) {
                for k in 0..d.q {
                    g[(r, i * d.q + k)] = self.z[(r, k)];
                }
            }
        }
        g.view_mut((0, d.m * d.q), (d.n, d.h)).copy_from(&self.b);
        g
    }

    /// A design holding only the listed clusters (in the given order), with the
    /// same bases and centring as `self`.
    pub fn restrict_to_clusters(&self, clusters: &[usize]) -> DesignSet {
        let mut rows_idx = Vec::new();
        let mut offsets = vec![0];
        for &i in clusters {
            rows_idx.extend(self.cluster_rows(i));
            offsets.push(rows_idx.len());
        }
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows_idx.len(), m.ncols(), |r, c| m[(rows_idx[r], c)]);
        DesignSet::from_parts(
            rows_idx.iter().map(|&r| self.y[r]).collect(),
            pick(&self.f),
            pick(&self.z),
            pick(&self.b),
            offsets,
            clusters.iter().map(|&i| self.cluster_labels[i].clone()).collect(),
            {
                // input order of the kept rows, renumbered from zero
                let mut orig: Vec<usize> = rows_idx.iter().map(|&r| self.perm[r]).collect();
                let mut sorted = orig.clone();
                sorted.sort_unstable();
                orig.iter_mut().for_each(|o| *o = sorted.binary_search(o).expect("row present"));
                orig
            },
            self.fixed_names.clone(),
            self.random_names.clone(),
            self.smooths.clone(),
            self.spec.clone(),
            self.scale,
            self.warnings.clone(),
        )
    }

    /// Same design with a different (already scaled) response vector in design row order.
    pub fn with_response(&self, y: Vec<f64>) -> DesignSet {
        assert_eq!(y.len(), self.y.len());
        let mut out = self.clone();
        out.y = y;
        out
    }

    /// Design rows `(F, Z, B)` for new covariate values, using the training bases.
    pub fn new_rows(&self, columns: &BTreeMap<String, Vec<f64>>, nrows: usize) -> Result<NewRows> {
        self.info().new_rows(columns, nrows)
    }

    /// The parts of the design needed to rebuild rows for new data.
    pub fn info(&self) -> DesignInfo {
        let d = self.dims();
        DesignInfo {
            spec: self.spec.clone(),
            smooths: self.smooths.clone(),
            fixed_names: self.fixed_names.clone(),
            random_names: self.random_names.clone(),
            cluster_labels: self.cluster_labels.clone(),
            p: d.p,
            q: d.q,
            h: d.h,
            scale: self.scale,
        }
    }
}

/// Serializable description of an assembled design: enough to evaluate rows for
/// new covariate values and to map cluster labels to random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignInfo {
    pub spec: ModelSpec,
    pub smooths: Vec<SmoothTerm>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub cluster_labels: Vec<String>,
    pub p: usize,
    pub q: usize,
    pub h: usize,
    pub scale: f64,
}

impl DesignInfo {
    /// Design rows `(F, Z, B)` for new covariate values, using the training bases.
    pub fn new_rows(&self, columns: &BTreeMap<String, Vec<f64>>, nrows: usize) -> Result<NewRows> {
        let get = |name: &str| -> Result<&Vec<f64>> {
            let col = columns
                .get(name)
                .ok_or_else(|| AqmmError::Spec(format!("column '{name}' not found in new data")))?;
            if col.len() != nrows {
                return Err(AqmmError::Data(format!("column '{name}' has {} rows, expected {nrows}", col.len())));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(AqmmError::Data(format!("column '{name}' has missing or non-finite values")));
            }
            Ok(col)
        };
        let mut f = DMatrix::zeros(nrows, self.p);
        let mut b = DMatrix::zeros(nrows, self.h);
        f.column_mut(0).fill(1.0);
        for (j, name) in self.spec.linear.iter().enumerate() {
            let col = get(name)?;
            f.column_mut(j + 1).copy_from_slice(col);
        }
        for term in &self.smooths {
            let x = get(&term.spec.variable)?;
            let raw = term.basis.evaluate(x);
            let (nc, pc) = term.reparam.apply(&raw);
            f.view_mut((0, term.fixed_cols.start), (nrows, nc.ncols())).copy_from(&nc);
            b.view_mut((0, term.random_cols.start), (nrows, pc.ncols())).copy_from(&pc);
        }
        let mut z = DMatrix::zeros(nrows, self.q);
        let mut c = 0;
        if self.spec.random.intercept {
            z.column_mut(0).fill(1.0);
            c = 1;
        }
        for name in &self.spec.random.slopes {
            z.column_mut(c).copy_from_slice(get(name)?);
            c += 1;
        }
        Ok(NewRows { f, z, b })
    }
}

#[derive(Debug, Clone)]
pub struct NewRows {
    pub f: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Log-Cholesky coordinates (row-major lower triangle, diagonal logged) of a
/// symmetric positive-definite matrix.
pub fn log_cholesky(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let q = sigma.nrows();
    if sigma.ncols() != q {
        return Err(AqmmError::Parameterization("covariance must be square".into()));
    }
    if (sigma - sigma.transpose()).amax() > 1e-10 * sigma.amax().max(1.0) {
        return Err(AqmmError::Parameterization("covariance is not symmetric".into()));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| AqmmError::Parameterization("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut xi = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..=i {
            xi.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    Ok(xi)
}

/// Lower Cholesky factor from log-Cholesky coordinates.
pub fn cholesky_factor(xi: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { xi[k].exp() } else { xi[k] };
            k += 1;
        }
    }
    l
}

/// Log-Cholesky coordinates of the covariance multiplied by `factor`.
pub fn scale_xi(xi: &[f64], q: usize, factor: f64) -> Vec<f64> {
    let mut out = xi.to_vec();
    for i in 0..q {
        for j in 0..i {
            out[i * (i + 1) / 2 + j] *= factor.sqrt();
        }
        out[i * (i + 1) / 2 + i] += 0.5 * factor.ln();
    }
    out
}

pub fn covariance_from_xi(xi: &[f64], q: usize) -> DMatrix<f64> {
    let l = cholesky_factor(xi, q);
    &l * l.transpose()
}

/// Outer parameter `(beta, xi, log phi)` with the profiled scale carried alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    pub log_phi: Vec<f64>,
    pub sigma: f64,
}

impl Theta {
    /// Pack from the scaled covariance and smoothing variances.
    pub fn pack(beta: Vec<f64>, sigma_tilde: &DMatrix<f64>, phi_tilde: &[f64], sigma: f64) -> Result<Self> {
        if let Some(bad) = phi_tilde.iter().find(|&&p| !(p > 0.0)) {
            return Err(AqmmError::Parameterization(format!("smoothing variance must be positive, got {bad}")));
        }
        if !(sigma > 0.0) {
            return Err(AqmmError::Parameterization(format!("scale must be positive, got {sigma}")));
        }
        Ok(Self {
            beta,
            xi: log_cholesky(sigma_tilde)?,
            log_phi: phi_tilde.iter().map(|p| p.ln()).collect(),
            sigma,
        })
    }

    /// `(beta, Σ̃, φ̃, σ)`.
    pub fn unpack(&self, q: usize) -> (Vec<f64>, DMatrix<f64>, Vec<f64>, f64) {
        (
            self.beta.clone(),
            covariance_from_xi(&self.xi, q),
            self.log_phi.iter().map(|l| l.exp()).collect(),
            self.sigma,
        )
    }

    /// Flat optimizer coordinates; `sigma` is excluded because it is profiled.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend_from_slice(&self.xi);
        v.extend_from_slice(&self.log_phi);
        v
    }

    pub fn from_vec(v: &[f64], dims: &Dims, sigma: f64) -> Self {
        let (p, m) = (dims.p, dims.xi_len());
        Self {
            beta: v[..p].to_vec(),
            xi: v[p..p + m].to_vec(),
            log_phi: v[p + m..p + m + dims.s].to_vec(),
            sigma,
        }
    }
}

/// Multinomial cluster counts for weighted (bootstrap) likelihoods.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterWeights {
    pub counts: Vec<u32>,
}

impl ClusterWeights {
    pub fn ones(m: usize) -> Self {
        Self { counts: vec![1; m] }
    }

    /// Counts over `M` clusters that must add up to `total`.
    pub fn new(counts: Vec<u32>, total: usize) -> Result<Self> {
        let sum: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if sum != total as u64 {
            return Err(AqmmError::Input(format!("cluster weights sum to {sum}, expected {total}")));
        }
        Ok(Self { counts })
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        f64::from(self.counts[i])
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.counts[i] > 0
    }
}

/// Block inverse of `Ψ̃ = (I_M ⊗ Σ̃) ⊕ (⊕_k φ̃_k I_{H_k})` and its log-determinant.
#[derive(Debug, Clone)]
pub struct Precision {
    pub q: usize,
    pub m: usize,
    pub sigma_inv: DMatrix<f64>,
    pub log_det_sigma: f64,
    pub phi: Vec<f64>,
    pub h_sizes: Vec<usize>,
}

pub fn build_precision(theta: &Theta, dims: &Dims, h_sizes: &[usize]) -> Result<Precision> {
    let q = dims.q;
    let l = cholesky_factor(&theta.xi, q);
    let log_det_sigma = 2.0 * theta.xi_diag_sum(q);
    let linv = l
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| AqmmError::Numerical("cluster covariance factor is singular".into()))?;
    let sigma_inv = linv.transpose() * &linv;
    let phi: Vec<f64> = theta.log_phi.iter().map(|l| l.exp()).collect();
    if phi.iter().any(|p| !(p.is_finite() && *p > 0.0)) || !log_det_sigma.is_finite() {
        return Err(AqmmError::Numerical("variance parameters out of range".into()));
    }
    Ok(Precision {
        q,
        m: dims.m,
        sigma_inv,
        log_det_sigma,
        phi,
        h_sizes: h_sizes.to_vec(),
    })
}

impl Theta {
    fn xi_diag_sum(&self, q: usize) -> f64 {
        (0..q).map(|i| self.xi[i * (i + 1) / 2 + i]).sum()
    }
}

impl Precision {
    /// `log|Ψ̃|` with the cluster block counted `m_eff` times.
    pub fn log_det(&self, m_eff: f64) -> f64 {
        m_eff * self.log_det_sigma
            + self
                .h_sizes
                .iter()
                .zip(&self.phi)
                .map(|(&h, p)| h as f64 * p.ln())
                .sum::<f64>()
    }

    /// `u' Σ̃⁻¹ u` for one cluster block.
    #[inline]
    pub fn cluster_quad(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.q {
            for b in 0..self.q {
                acc += u[a] * self.sigma_inv[(a, b)] * u[b];
            }
        }
        acc
    }

    /// `Σ_i c_i u_i'Σ̃⁻¹u_i + Σ_k ‖v_k‖²/φ̃_k`, with cluster counts `c_i` (all ones when absent).
    pub fn quad_form(&self, w: &[f64], weights: Option<&ClusterWeights>) -> f64 {
        let q = self.q;
        let mut acc = 0.0;
        for i in 0..self.m {
            let c = weights.map_or(1.0, |wt| wt.get(i));
            if c == 0.0 {
                continue;
            }
            acc += c * self.cluster_quad(&w[i * q..(i + 1) * q]);
        }
        let mut off = self.m * q;
        for (&h, &p) in self.h_sizes.iter().zip(&self.phi) {
            acc += w[off..off + h].iter().map(|v| v * v).sum::<f64>() / p;
            off += h;
        }
        acc
    }

    /// `Ψ̃⁻¹ w`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut out = vec![0.0; w.len()];
        for i in 0..self.m {
            for a in 0..q {
                out[i * q + a] = (0..q).map(|b| self.sigma_inv[(a, b)] * w[i * q + b]).sum();
            }
        }
        let mut off = self.m * q;
        for (&h, &p) in self.h_sizes.iter().zip(&self.phi) {
            for j in off..off + h {
                out[j] = w[j] / p;
            }
            off += h;
        }
        out
    }

    /// Dense `Ψ̃⁻¹`; for tests and small problems.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let q = self.q;
        let h: usize = self.h_sizes.iter().sum();
        let n = self.m * q + h;
        let mut out = DMatrix::zeros(n, n);
        for i in 0..self.m {
            out.view_mut((i * q, i * q), (q, q)).copy_from(&self.sigma_inv);
        }
        let mut off = self.m * q;
        for (&hk, &p) in self.h_sizes.iter().zip(&self.phi) {
            for j in off..off + hk {
                out[(j, j)] = 1.0 / p;
            }
            off += hk;
        }
        out
    }
}
