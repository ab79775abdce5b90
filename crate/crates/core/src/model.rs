//! The linear-Gaussian latent feature model Xᵀ = ZA + E.
//!
//! With loadings a_ki ~ N(0, σ_a²) and noise e_ji ~ N(0, σ²) integrated out,
//! every observation row is x_i ~ N_p(0, σ_a²ZZᵀ + σ²I_p), so the likelihood
//! only touches X through S = XᵀX.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;
use crate::linalg::{check_variances, lowrank_gaussian_terms, spectral_norm, SymMatrix};
use crate::prior::{log_pmf_given_alpha, PriorSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations X (n×p) together with the cached statistic S = XᵀX.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    s: SymMatrix,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LfmError::invalid("data matrix has non-finite entries"));
        }
        let s = SymMatrix::new(x.transpose() * &x)?;
        Ok(Self { x, s })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn s(&self) -> &SymMatrix {
        &self.s
    }
}

/// Variance parameters and, in extended mode, instantiated loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub sigma2: f64,
    pub sigma_a2: f64,
    /// K×n loading matrix; only present in extended mode.
    pub loadings: Option<DMatrix<f64>>,
}

impl ModelParams {
    /// σ² = σ_a² = 1, no loadings.
    pub fn unit() -> Self {
        Self {
            sigma2: 1.0,
            sigma_a2: 1.0,
            loadings: None,
        }
    }

    pub fn new(sigma2: f64, sigma_a2: f64) -> Result<Self> {
        check_variances(sigma2, sigma_a2)?;
        Ok(Self {
            sigma2,
            sigma_a2,
            loadings: None,
        })
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::unit()
    }
}

/// log p(X | Z, σ², σ_a²) with the loadings integrated out.
pub fn marginal_log_likelihood(
    z: &BinaryFeatureMatrix,
    data: &Dataset,
    params: &ModelParams,
) -> Result<f64> {
    if z.p() != data.p() {
        return Err(LfmError::DimensionMismatch {
            what: "rows of Z vs columns of X",
            expected: data.p(),
            actual: z.p(),
        });
    }
    let terms = lowrank_gaussian_terms(z, data.s(), params.sigma2, params.sigma_a2)?;
    Ok(gaussian_loglik(data.n(), data.p(), terms.log_det, terms.trace_term))
}

#[inline]
pub(crate) fn gaussian_loglik(n: usize, p: usize, log_det: f64, trace_term: f64) -> f64 {
    let n = n as f64;
    -0.5 * n * p as f64 * LN_2PI - 0.5 * n * log_det - 0.5 * trace_term
}

/// log Gamma(α; shape 1, rate 1), the hyperprior on α.
#[inline]
pub fn log_alpha_prior(alpha: f64) -> f64 {
    -alpha
}

/// (1/T)·log p(X|Z) + log Π(Z|α) + log p(α).
pub fn tempered_log_target(
    z: &BinaryFeatureMatrix,
    alpha: f64,
    data: &Dataset,
    params: &ModelParams,
    temperature: f64,
    prior: &PriorSpec,
) -> Result<f64> {
    if temperature.is_nan() || temperature < 1.0 {
        return Err(LfmError::invalid(format!(
            "temperature must be at least 1, got {temperature}"
        )));
    }
    let loglik = marginal_log_likelihood(z, data, params)?;
    let log_prior = log_pmf_given_alpha(z, alpha, prior)?;
    Ok(loglik / temperature + log_prior + log_alpha_prior(alpha))
}

/// ‖ZZᵀ − Z*Z*ᵀ‖ in spectral norm.
pub fn residual_norm(z: &BinaryFeatureMatrix, z_star: &BinaryFeatureMatrix) -> Result<f64> {
    if z.p() != z_star.p() {
        return Err(LfmError::DimensionMismatch {
            what: "rows of Z vs rows of Z*",
            expected: z_star.p(),
            actual: z.p(),
        });
    }
    let diff = z.similarity() - z_star.similarity();
    spectral_norm(&SymMatrix::new(diff)?)
}

/// Draws A (K×n) from its Gaussian full conditional given Z, X and the
/// variances: column i ~ N(M⁻¹Zᵀx_iᵀ, σ²M⁻¹) with M = ZᵀZ + (σ²/σ_a²)I.
pub fn sample_loadings<R: Rng + ?Sized>(
    z: &BinaryFeatureMatrix,
    data: &Dataset,
    params: &ModelParams,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    sample_loadings_tempered(z, data, params, 1.0, rng)
}

/// Loadings full conditional when the likelihood is raised to 1/T:
/// the noise variance is effectively Tσ².
pub fn sample_loadings_tempered<R: Rng + ?Sized>(
    z: &BinaryFeatureMatrix,
    data: &Dataset,
    params: &ModelParams,
    temperature: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    check_variances(params.sigma2, params.sigma_a2)?;
    if z.p() != data.p() {
        return Err(LfmError::DimensionMismatch {
            what: "rows of Z vs columns of X",
            expected: data.p(),
            actual: z.p(),
        });
    }
    let k = z.k();
    let n = data.n();
    if k == 0 {
        return Ok(DMatrix::zeros(0, n));
    }
    let noise = temperature * params.sigma2;
    let zd = z.to_dmatrix();
    let mut m = zd.transpose() * &zd;
    for i in 0..k {
        m[(i, i)] += noise / params.sigma_a2;
    }
    let chol = Cholesky::new(m)
        .ok_or_else(|| LfmError::Numerical("loadings precision not positive definite".into()))?;
    // K×n right-hand sides Zᵀxᵢᵀ
    let rhs = zd.transpose() * data.x().transpose();
    let mean = chol.solve(&rhs);
    let l = chol.l();
    let sd = noise.sqrt();
    let mut out = mean;
    for i in 0..n {
        let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Lᵀ y = ε gives y ~ N(0, M⁻¹)
        let y = l
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or_else(|| LfmError::Numerical("singular loadings factor".into()))?;
        let mut col = out.column_mut(i);
        col.axpy(sd, &y, 1.0);
    }
    Ok(out)
}

/// Conjugate inverse-gamma draws for (σ², σ_a²) under IG(1, 1) priors.
pub fn sample_variances<R: Rng + ?Sized>(
    z: &BinaryFeatureMatrix,
    loadings: &DMatrix<f64>,
    data: &Dataset,
    rng: &mut R,
) -> Result<(f64, f64)> {
    sample_variances_tempered(z, loadings, data, 1.0, rng)
}

/// As [`sample_variances`], with the likelihood part of the σ² update
/// raised to 1/T. The σ_a² update does not involve the likelihood.
pub fn sample_variances_tempered<R: Rng + ?Sized>(
    z: &BinaryFeatureMatrix,
    loadings: &DMatrix<f64>,
    data: &Dataset,
    temperature: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let k = z.k();
    let n = data.n();
    let p = data.p();
    if loadings.nrows() != k || loadings.ncols() != n {
        return Err(LfmError::DimensionMismatch {
            what: "loadings shape (rows = K)",
            expected: k,
            actual: loadings.nrows(),
        });
    }
    let fitted = z.to_dmatrix() * loadings;
    let resid_sq = (data.x().transpose() - fitted).norm_squared();
    let a_sq = loadings.norm_squared();
    let shape = 1.0 + (n * p) as f64 / (2.0 * temperature);
    let rate = 1.0 + resid_sq / (2.0 * temperature);
    let sigma2 = draw_inverse_gamma(shape, rate, rng)?;
    let sigma_a2 = draw_inverse_gamma(1.0 + (n * k) as f64 / 2.0, 1.0 + 0.5 * a_sq, rng)?;
    Ok((sigma2, sigma_a2))
}

/// log density of IG(shape, rate) at x.
pub fn log_inverse_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - statrs::function::gamma::ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

fn draw_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| LfmError::Numerical(format!("inverse-gamma parameters: {e}")))?;
    Ok(1.0 / g.sample(rng))
}
