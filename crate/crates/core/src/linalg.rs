//! Dense symmetric linear algebra for the low-rank-plus-identity Gaussian.
//!
//! The covariance of one observation row is Σ = σ_a²ZZᵀ + σ²I_p. Everything
//! the likelihood needs can be written in terms of the K×K matrices
//! G = ZᵀZ and Q = ZᵀSZ:
//!
//! ```text
//! log det Σ   = (p − K) log σ² + log det B,          B = σ_a²G + σ²I_K
//! tr(Σ⁻¹S)    = (tr S − σ_a² tr(B⁻¹Q)) / σ²
//! ```
//!
//! so no p×p factorization is ever formed on the hot path.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;

/// A finite, symmetric, square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    /// Relative asymmetry above which input is rejected rather than repaired.
    const ASYMMETRY_LIMIT: f64 = 1e-8;

    /// Validates and symmetrizes `m` as (m + mᵀ)/2.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(LfmError::DimensionMismatch {
                what: "square matrix columns",
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(LfmError::invalid("matrix has non-finite entries"));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > Self::ASYMMETRY_LIMIT * scale {
                    return Err(LfmError::invalid(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self { inner: sym })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            inner: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }
}

/// Largest absolute eigenvalue, i.e. the spectral norm of a symmetric matrix.
pub fn spectral_norm(m: &SymMatrix) -> Result<f64> {
    if m.inner.iter().any(|v| !v.is_finite()) {
        return Err(LfmError::invalid("matrix has non-finite entries"));
    }
    if m.dim() == 0 {
        return Ok(0.0);
    }
    let eig = SymmetricEigen::new(m.inner.clone());
    Ok(eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowRankTerms {
    /// log det(σ_a²ZZᵀ + σ²I_p)
    pub log_det: f64,
    /// tr((σ_a²ZZᵀ + σ²I_p)⁻¹ S)
    pub trace_term: f64,
}

/// Evaluates log det Σ and tr(Σ⁻¹S) for Σ = σ_a²ZZᵀ + σ²I_p using only
/// K×K factorizations.
pub fn lowrank_gaussian_terms(
    z: &BinaryFeatureMatrix,
    s: &SymMatrix,
    sigma2: f64,
    sigma_a2: f64,
) -> Result<LowRankTerms> {
    check_variances(sigma2, sigma_a2)?;
    if z.p() != s.dim() {
        return Err(LfmError::DimensionMismatch {
            what: "rows of Z vs dimension of S",
            expected: s.dim(),
            actual: z.p(),
        });
    }
    let k = z.k();
    let g = z.gram();
    let w = sz_product(z, s);
    let q = z_t_times(z, &w);
    let mut ws = InnerWorkspace::default();
    ws.evaluate(
        GramView::new(g.as_slice(), q.as_slice(), k),
        z.p(),
        s.trace(),
        sigma2,
        sigma_a2,
    )
}

pub(crate) fn check_variances(sigma2: f64, sigma_a2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(LfmError::invalid(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if !(sigma_a2 > 0.0 && sigma_a2.is_finite()) {
        return Err(LfmError::invalid(format!(
            "loading variance must be positive, got {sigma_a2}"
        )));
    }
    Ok(())
}

/// W = SZ (p×K).
pub(crate) fn sz_product(z: &BinaryFeatureMatrix, s: &SymMatrix) -> DMatrix<f64> {
    let p = z.p();
    let mut w = DMatrix::zeros(p, z.k());
    for (k, col) in z.columns().enumerate() {
        for (j, &v) in col.iter().enumerate() {
            if v != 0 {
                let src = s.inner.column(j);
                let mut dst = w.column_mut(k);
                dst += src;
            }
        }
    }
    w
}

/// Zᵀ W for a p×K `w`, returned as K×K (symmetric when W = SZ).
pub(crate) fn z_t_times(z: &BinaryFeatureMatrix, w: &DMatrix<f64>) -> DMatrix<f64> {
    let k = z.k();
    let mut out = DMatrix::zeros(k, k);
    for (a, col) in z.columns().enumerate() {
        for b in 0..k {
            let mut acc = 0.0;
            for (j, &v) in col.iter().enumerate() {
                if v != 0 {
                    acc += w[(j, b)];
                }
            }
            out[(a, b)] = acc;
        }
    }
    // symmetrize away summation-order noise
    for a in 0..k {
        for b in (a + 1)..k {
            let m = 0.5 * (out[(a, b)] + out[(b, a)]);
            out[(a, b)] = m;
            out[(b, a)] = m;
        }
    }
    out
}

/// Borrowed K×K matrices G = ZᵀZ and Q = ZᵀSZ, both stored densely
/// (column- or row-major is immaterial since both are symmetric).
#[derive(Debug, Clone, Copy)]
pub(crate) struct GramView<'a> {
    pub g: &'a [f64],
    pub q: &'a [f64],
    pub k: usize,
}

impl<'a> GramView<'a> {
    pub fn new(g: &'a [f64], q: &'a [f64], k: usize) -> Self {
        debug_assert_eq!(g.len(), k * k);
        debug_assert_eq!(q.len(), k * k);
        Self { g, q, k }
    }
}

/// Scratch space for repeated K×K Cholesky evaluations.
#[derive(Debug, Clone, Default)]
pub(crate) struct InnerWorkspace {
    chol: Vec<f64>,
    rhs: Vec<f64>,
    k: usize,
}

impl InnerWorkspace {
    /// Factors B = σ_a²G + σ²I and returns the Gaussian terms.
    pub fn evaluate(
        &mut self,
        gram: GramView<'_>,
        p: usize,
        trace_s: f64,
        sigma2: f64,
        sigma_a2: f64,
    ) -> Result<LowRankTerms> {
        let log_det_b = self.factor(gram.g, gram.k, sigma2, sigma_a2)?;
        let k = gram.k;
        // tr(B⁻¹Q) = Σ_c (B⁻¹ q_c)_c
        let mut tr_binv_q = 0.0;
        self.rhs.resize(k, 0.0);
        for c in 0..k {
            self.rhs.copy_from_slice(&gram.q[c * k..(c + 1) * k]);
            let mut rhs = std::mem::take(&mut self.rhs);
            self.solve_in_place(&mut rhs);
            tr_binv_q += rhs[c];
            self.rhs = rhs;
        }
        let log_det = (p as f64 - k as f64) * sigma2.ln() + log_det_b;
        let trace_term = (trace_s - sigma_a2 * tr_binv_q) / sigma2;
        Ok(LowRankTerms {
            log_det,
            trace_term,
        })
    }

    /// Cholesky of B = σ_a²G + σ²I_K into `self.chol` (row-major lower
    /// triangle). Returns log det B.
    pub fn factor(&mut self, g: &[f64], k: usize, sigma2: f64, sigma_a2: f64) -> Result<f64> {
        self.k = k;
        self.chol.clear();
        self.chol.extend(g.iter().map(|v| sigma_a2 * v));
        for i in 0..k {
            self.chol[i * k + i] += sigma2;
        }
        let l = &mut self.chol;
        let mut log_det = 0.0;
        for j in 0..k {
            let mut d = l[j * k + j];
            for t in 0..j {
                d -= l[j * k + t] * l[j * k + t];
            }
            if !d.is_finite() || d <= 0.0 {
                return Err(LfmError::Numerical(format!(
                    "inner {k}x{k} system is not positive definite (pivot {j} = {d})"
                )));
            }
            let djj = d.sqrt();
            l[j * k + j] = djj;
            log_det += 2.0 * djj.ln();
            for i in (j + 1)..k {
                let mut s = l[i * k + j];
                for t in 0..j {
                    s -= l[i * k + t] * l[j * k + t];
                }
                l[i * k + j] = s / djj;
            }
        }
        Ok(log_det)
    }

    /// Solves B x = rhs using the current factor.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let k = self.k;
        let l = &self.chol;
        for i in 0..k {
            let mut s = rhs[i];
            for t in 0..i {
                s -= l[i * k + t] * rhs[t];
            }
            rhs[i] = s / l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = rhs[i];
            for t in (i + 1)..k {
                s -= l[t * k + i] * rhs[t];
            }
            rhs[i] = s / l[i * k + i];
        }
    }
}
