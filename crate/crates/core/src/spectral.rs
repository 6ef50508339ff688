//! Spectral factorization `BH = U S V^T` and the maps between pixel space and
//! the per-coordinate denoising problem `ybar = S^+ U^T B y`.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamformer::BeamformerMatrix;
use crate::error::{check_len, Error, Result};
use crate::system::SystemMatrix;

/// Column-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// `M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.col(j)) {
                *o += m * xj;
            }
        }
        out
    }

    /// `M^T x`.
    pub fn mul_t_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .into_par_iter()
            .map(|j| self.col(j).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub(crate) fn from_faer(m: faer::MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// Orthonormal basis; identity is kept implicit so pure-denoising mode never
/// allocates `N^2` values.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Identity(usize),
    Dense(DenseMatrix),
}

impl Basis {
    pub fn dim(&self) -> usize {
        match self {
            Basis::Identity(n) => *n,
            Basis::Dense(m) => m.rows,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Basis::Identity(n) => *n,
            Basis::Dense(m) => m.cols,
        }
    }

    /// `Q x` (spectral -> pixel).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Basis::Identity(_) => x.to_vec(),
            Basis::Dense(m) => m.mul_vec(x),
        }
    }

    /// `Q^T x` (pixel -> spectral).
    pub fn apply_t(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Basis::Identity(_) => x.to_vec(),
            Basis::Dense(m) => m.mul_t_vec(x),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Basis::Identity(n) => DenseMatrix::identity(*n),
            Basis::Dense(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMethod {
    Exact,
    Randomized,
    Identity,
}

impl FactorMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorMethod::Exact => "exact",
            FactorMethod::Randomized => "randomized",
            FactorMethod::Identity => "identity",
        }
    }
}

/// How to factorize `BH`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum FactorizationRequest {
    Exact,
    Randomized {
        rank: usize,
        #[serde(default = "default_oversampling")]
        oversampling: usize,
        #[serde(default = "default_power_iterations")]
        power_iterations: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_oversampling() -> usize {
    10
}

fn default_power_iterations() -> usize {
    2
}

/// Largest `N` the exact path accepts.
pub const EXACT_MAX_DIM: usize = 16384;

/// Singular values below `rank_tol * s_1` are treated as unobserved.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFactorization {
    pub u: Basis,
    pub s: Vec<f64>,
    pub v: Basis,
    pub residual_norm: f64,
    pub method: FactorMethod,
    pub rank_tol: f64,
}

impl SpectralFactorization {
    /// `BH = I`: pure denoising.
    pub fn identity(n: usize) -> Self {
        Self {
            u: Basis::Identity(n),
            s: vec![1.0; n],
            v: Basis::Identity(n),
            residual_norm: 0.0,
            method: FactorMethod::Identity,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn dim(&self) -> usize {
        self.v.dim()
    }

    /// Coordinates with `s_i > rank_tol * s_1`.
    pub fn observed(&self) -> Vec<bool> {
        let s1 = self.s.first().copied().unwrap_or(0.0);
        self.s.iter().map(|&s| s > self.rank_tol * s1 && s > 0.0).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed().iter().filter(|o| **o).count()
    }
}

/// Dense `B H` (N x N), built one row at a time from the sparse factors.
pub fn compose_bh(b: &BeamformerMatrix, h: &SystemMatrix, memory_budget_mb: f64) -> Result<DenseMatrix> {
    check_len("compose_bh inner dimension", h.rows(), b.cols())?;
    let n = b.rows();
    let m = h.cols();
    let needed = (n * m * 8) as f64 / (1024.0 * 1024.0)
        + h.storage().approx_bytes() as f64 / (1024.0 * 1024.0);
    if needed > memory_budget_mb {
        return Err(Error::MemoryBudget {
            what: "dense BH",
            needed_mb: needed,
            budget_mb: memory_budget_mb,
        });
    }
    let h_rows = h.storage().transpose();
    let mut row_major = vec![0.0; n * m];
    row_major
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(r, out)| {
            let (bi, bv) = b.row(r);
            for (&k, &bk) in bi.iter().zip(bv) {
                let (hi, hv) = h_rows.lane(k as usize);
                for (&c, &hk) in hi.iter().zip(hv) {
                    out[c as usize] += bk * hk;
                }
            }
        });
    Ok(DenseMatrix::from_fn(n, m, |i, j| row_major[i * m + j]))
}

fn is_identity(a: &DenseMatrix) -> bool {
    a.rows == a.cols
        && (0..a.cols).all(|j| {
            a.col(j)
                .iter()
                .enumerate()
                .all(|(i, &v)| v == if i == j { 1.0 } else { 0.0 })
        })
}

/// `‖A - U S V^T‖_F / ‖A‖_F`.
pub fn reconstruction_residual(a: &DenseMatrix, u: &Basis, s: &[f64], v: &Basis) -> f64 {
    let norm = a.frobenius();
    let u = u.to_dense();
    let v = v.to_dense();
    let us = Mat::from_fn(u.rows, s.len(), |i, j| u.get(i, j) * s[j]);
    let vf = v.to_faer();
    let recon = &us * vf.transpose();
    let af = a.to_faer();
    let diff = &af - &recon;
    let r = diff.norm_l2();
    if norm == 0.0 {
        r
    } else {
        r / norm
    }
}

pub fn factorize(bh: &DenseMatrix, request: &FactorizationRequest, tol: f64) -> Result<SpectralFactorization> {
    if bh.rows != bh.cols {
        return Err(Error::DimensionMismatch {
            context: "factorize expects a square BH",
            expected: bh.rows,
            got: bh.cols,
        });
    }
    let n = bh.rows;
    if is_identity(bh) {
        return Ok(SpectralFactorization::identity(n));
    }
    let (u, s, v, method) = match *request {
        FactorizationRequest::Exact => {
            if n > EXACT_MAX_DIM {
                return Err(Error::config(format!(
                    "exact factorization limited to N <= {EXACT_MAX_DIM}, got {n}"
                )));
            }
            let svd = bh
                .to_faer()
                .thin_svd()
                .map_err(|e| Error::NonConvergence(format!("{e:?}")))?;
            let s: Vec<f64> = (0..n).map(|i| svd.S()[i]).collect();
            (
                DenseMatrix::from_faer(svd.U()),
                s,
                DenseMatrix::from_faer(svd.V()),
                FactorMethod::Exact,
            )
        }
        FactorizationRequest::Randomized {
            rank,
            oversampling,
            power_iterations,
            seed,
        } => {
            let (u, s, v) = randomized_svd(bh, rank, oversampling, power_iterations, seed)?;
            (u, s, v, FactorMethod::Randomized)
        }
    };
    let (u, s, v) = sort_descending(u, s, v);
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonConvergence("non-finite singular values".into()));
    }
    let (u, v) = (Basis::Dense(u), Basis::Dense(v));
    let residual_norm = reconstruction_residual(bh, &u, &s, &v);
    if !(residual_norm <= tol) {
        return Err(Error::ResidualTooLarge {
            residual: residual_norm,
            tol,
        });
    }
    Ok(SpectralFactorization {
        u,
        s,
        v,
        residual_norm,
        method,
        rank_tol: DEFAULT_RANK_TOL,
    })
}

fn sort_descending(u: DenseMatrix, s: Vec<f64>, v: DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return (u, s, v);
    }
    let s2 = order.iter().map(|&i| s[i]).collect();
    let u2 = DenseMatrix::from_fn(u.rows, order.len(), |i, j| u.get(i, order[j]));
    let v2 = DenseMatrix::from_fn(v.rows, order.len(), |i, j| v.get(i, order[j]));
    (u2, s2, v2)
}

/// Subspace iteration with Gaussian test matrix and re-orthonormalised power
/// steps; returns the leading `rank` triplets.
fn randomized_svd(
    a: &DenseMatrix,
    rank: usize,
    oversampling: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let n = a.rows;
    if rank == 0 || rank > n {
        return Err(Error::config(format!("randomized rank must lie in 1..={n}")));
    }
    let width = (rank + oversampling).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Mat::from_fn(n, width, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let af = a.to_faer();
    let mut q = (&af * &omega).qr().compute_thin_Q();
    for _ in 0..power_iterations {
        let z = (af.transpose() * &q).qr().compute_thin_Q();
        q = (&af * &z).qr().compute_thin_Q();
    }
    let small = q.transpose() * &af;
    let svd = small
        .thin_svd()
        .map_err(|e| Error::NonConvergence(format!("{e:?}")))?;
    let u = &q * svd.U();
    let s: Vec<f64> = (0..rank).map(|i| svd.S()[i]).collect();
    let u = DenseMatrix::from_fn(n, rank, |i, j| u[(i, j)]);
    let vv = svd.V();
    let v = DenseMatrix::from_fn(n, rank, |i, j| vv[(i, j)]);
    Ok((u, s, v))
}

/// Per-coordinate measurement in the spectral domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMeasurement {
    /// `(U^T B y)_i / s_i`; zero on unobserved coordinates.
    pub ybar: Vec<f64>,
    /// `sigma_d / s_i`; infinite on unobserved coordinates.
    pub sigma_y: Vec<f64>,
    pub observed: Vec<bool>,
}

/// Same as [`to_spectral`] from an already beamformed image `B y`.
pub fn to_spectral_from_das(fact: &SpectralFactorization, by: &[f64], sigma_d: f64) -> Result<SpectralMeasurement> {
    check_len("to_spectral image", fact.u.dim(), by.len())?;
    let proj = fact.u.apply_t(by);
    let observed = fact.observed();
    let mut ybar = vec![0.0; fact.rank()];
    let mut sigma_y = vec![f64::INFINITY; fact.rank()];
    for i in 0..fact.rank() {
        if observed[i] {
            ybar[i] = proj[i] / fact.s[i];
            sigma_y[i] = sigma_d / fact.s[i];
        }
    }
    Ok(SpectralMeasurement {
        ybar,
        sigma_y,
        observed,
    })
}

pub fn to_spectral(
    fact: &SpectralFactorization,
    b: &BeamformerMatrix,
    y: &[f64],
    sigma_d: f64,
) -> Result<SpectralMeasurement> {
    to_spectral_from_das(fact, &b.apply(y)?, sigma_d)
}

/// `V xbar`.
pub fn from_spectral(fact: &SpectralFactorization, xbar: &[f64]) -> Result<Vec<f64>> {
    check_len("from_spectral input", fact.rank(), xbar.len())?;
    Ok(fact.v.apply(xbar))
}

/// Robust noise level of `B y`: scaled median absolute deviation of
/// `(U^T B y)_i` over the decile of coordinates with the smallest `s_i`.
pub fn estimate_sigma_d(fact: &SpectralFactorization, by: &[f64]) -> Result<f64> {
    check_len("estimate_sigma_d image", fact.u.dim(), by.len())?;
    let proj = fact.u.apply_t(by);
    let take = (fact.rank() / 10).max(1);
    // s is sorted descending, so the tail holds the weakest coordinates
    let tail: Vec<f64> = proj[fact.rank() - take..].to_vec();
    Ok(1.4826 * mad(&tail))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mad(v: &[f64]) -> f64 {
    let mut w = v.to_vec();
    let m = median(&mut w);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
    median(&mut dev)
}
