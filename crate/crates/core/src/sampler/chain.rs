use std::collections::HashMap;

use rand::Rng;
use statrs::function::gamma::ln_gamma;

use super::cache::{LikelihoodCache, LikelihoodInputs};
use super::Mode;
use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;
use crate::model::{
    log_alpha_prior, log_inverse_gamma, marginal_log_likelihood, sample_loadings_tempered,
    sample_variances_tempered, Dataset, ModelParams,
};
use crate::prior::{alpha_full_conditional, log_pmf_given_alpha, PriorKind, PriorSpec};
use crate::rng::StreamRng;

const LAMBDA_CACHE_LIMIT: usize = 1 << 16;

/// Everything that moves between temperatures when two chains swap.
#[derive(Debug, Clone)]
pub struct ChainState {
    z: BinaryFeatureMatrix,
    alpha: f64,
    params: ModelParams,
    loglik: f64,
    col_sums: Vec<usize>,
    cache: LikelihoodCache,
}

impl ChainState {
    pub fn new(
        mut z: BinaryFeatureMatrix,
        alpha: f64,
        params: ModelParams,
        data: &Dataset,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LfmError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if z.p() != data.p() {
            return Err(LfmError::DimensionMismatch {
                what: "rows of Z vs columns of X",
                expected: data.p(),
                actual: z.p(),
            });
        }
        z.canonicalize();
        let cache = LikelihoodCache::build(&z, data.s());
        let mut state = Self {
            col_sums: z.column_sums(),
            z,
            alpha,
            params,
            loglik: 0.0,
            cache,
        };
        state.refresh(data)?;
        Ok(state)
    }

    /// The empty matrix with α = 1 and unit variances.
    pub fn initial(data: &Dataset) -> Result<Self> {
        Self::new(BinaryFeatureMatrix::empty(data.p()), 1.0, ModelParams::unit(), data)
    }

    pub fn z(&self) -> &BinaryFeatureMatrix {
        &self.z
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.z.k()
    }

    /// Cached untempered marginal log-likelihood.
    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    /// Untempered log posterior kernel of the current state.
    pub fn log_kernel(&self, prior: &PriorSpec, mode: Mode) -> Result<f64> {
        let mut out = self.loglik
            + log_pmf_given_alpha(&self.z, self.alpha, prior)?
            + log_alpha_prior(self.alpha);
        if mode == Mode::Extended {
            out += log_inverse_gamma(self.params.sigma2, 1.0, 1.0)
                + log_inverse_gamma(self.params.sigma_a2, 1.0, 1.0);
        }
        Ok(out)
    }

    /// Recomputes the cached likelihood from scratch and returns the
    /// largest discrepancy seen against the incremental value.
    pub fn check_coherence(&self, data: &Dataset) -> Result<f64> {
        let fresh = marginal_log_likelihood(&self.z, data, &self.params)?;
        Ok((fresh - self.loglik).abs())
    }

    fn inputs<'a>(&self, data: &'a Dataset) -> LikelihoodInputs<'a> {
        LikelihoodInputs {
            s: data.s(),
            n: data.n(),
            trace_s: data.s().trace(),
            sigma2: self.params.sigma2,
            sigma_a2: self.params.sigma_a2,
        }
    }

    fn refresh(&mut self, data: &Dataset) -> Result<()> {
        let inputs = self.inputs(data);
        self.loglik = self.cache.loglik(&inputs)?;
        Ok(())
    }

    fn rebuild(&mut self, data: &Dataset) -> Result<()> {
        self.cache.rebuild(&self.z, data.s());
        self.refresh(data)
    }

    fn remove_column(&mut self, col: usize) {
        self.z.remove_column(col);
        self.cache.remove_column(col);
        self.col_sums.remove(col);
    }

    fn push_singleton(&mut self, j: usize, data: &Dataset) {
        self.cache.push_singleton(&self.z, j, data.s());
        self.z.push_singleton(j);
        self.col_sums.push(1);
    }

    fn flip(&mut self, j: usize, col: usize, data: &Dataset) -> Result<()> {
        let on = self.z.get(j, col) == 0;
        let delta = if on { 1.0 } else { -1.0 };
        let inputs = self.inputs(data);
        self.cache.flip(&self.z, j, col, delta, &inputs)?;
        self.z.set(j, col, on);
        if on {
            self.col_sums[col] += 1;
        } else {
            self.col_sums[col] -= 1;
        }
        Ok(())
    }
}

/// Fixed inputs shared by every chain during a run.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub data: &'a Dataset,
    pub prior: &'a PriorSpec,
    pub k_max_plus: usize,
    pub mode: Mode,
}

/// One tempered chain: a temperature, its own random stream and the state
/// currently sitting at that temperature.
#[derive(Debug, Clone)]
pub struct Chain {
    temperature: f64,
    rng: StreamRng,
    pub(crate) state: ChainState,
    lambda_cache: HashMap<Vec<u8>, f64>,
}

impl Chain {
    pub fn new(temperature: f64, rng: StreamRng, state: ChainState) -> Result<Self> {
        if !(temperature >= 1.0 && temperature.is_finite()) {
            return Err(LfmError::invalid(format!(
                "temperature must be at least 1, got {temperature}"
            )));
        }
        Ok(Self {
            temperature,
            rng,
            state,
            lambda_cache: HashMap::new(),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn into_state(self) -> ChainState {
        self.state
    }

    /// The Gibbs half of one iteration: every row in turn, then α, then (extended
    /// mode) loadings and variances.
    pub fn step(&mut self, ctx: &StepContext<'_>) -> Result<()> {
        self.state.params.loadings = None;
        self.state.rebuild(ctx.data)?;
        for j in 0..ctx.data.p() {
            self.sweep_row(j, ctx)?;
        }
        self.update_alpha(ctx.prior);
        if ctx.mode == Mode::Extended {
            self.update_variances(ctx.data)?;
        }
        debug_assert!(
            self.state.check_coherence(ctx.data).map(|d| d < 1e-6).unwrap_or(false),
            "cached log-likelihood drifted from a fresh evaluation"
        );
        Ok(())
    }

    /// Gibbs update of row j: singleton columns are dropped, the remaining
    /// entries are resampled left to right, and new singleton columns are
    /// appended.
    pub fn sweep_row(&mut self, j: usize, ctx: &StepContext<'_>) -> Result<()> {
        let data = ctx.data;
        if j >= data.p() {
            return Err(LfmError::invalid(format!("row {j} out of range")));
        }
        let st = &mut self.state;
        let mut dropped = 0;
        let mut col = 0;
        while col < st.z.k() {
            if st.col_sums[col] == st.z.get(j, col) as usize {
                st.remove_column(col);
                dropped += 1;
            } else {
                col += 1;
            }
        }
        if dropped > 0 {
            st.refresh(data)?;
        }

        let p = data.p();
        let inv_t = 1.0 / self.temperature;
        for col in 0..self.state.z.k() {
            let current = self.state.z.get(j, col);
            let m_others = self.state.col_sums[col] - current as usize;
            let prior_log_odds = match &ctx.prior.kind {
                PriorKind::Ibp => (m_others as f64).ln() - ((p - m_others) as f64).ln(),
                PriorKind::Pibp(_) => {
                    let mut column = self.state.z.column(col).to_vec();
                    column[j] = 1;
                    let l1 = self.log_lambda(&column, ctx.prior)?;
                    column[j] = 0;
                    let l0 = self.log_lambda(&column, ctx.prior)?;
                    l1 - l0
                }
            };
            let st = &mut self.state;
            let inputs = st.inputs(data);
            let delta = if current == 0 { 1.0 } else { -1.0 };
            let ll_alt = st.cache.loglik_with_flip(&st.z, j, col, delta, &inputs)?;
            let (ll1, ll0) = if current == 0 {
                (ll_alt, st.loglik)
            } else {
                (st.loglik, ll_alt)
            };
            let logit = (ll1 - ll0) * inv_t + prior_log_odds;
            let prob_one = 1.0 / (1.0 + (-logit).exp());
            let draw = u8::from(self.rng.random::<f64>() < prob_one);
            if draw != current {
                let st = &mut self.state;
                st.flip(j, col, data)?;
                st.loglik = ll_alt;
            }
        }

        self.sample_new_features(j, dropped, ctx)?;
        Ok(())
    }

    /// Draws the number of new singleton columns for row j and appends
    /// them. `dropped` is the number of singleton columns removed from row
    /// j at the start of its sweep.
    pub fn sample_new_features(
        &mut self,
        j: usize,
        dropped: usize,
        ctx: &StepContext<'_>,
    ) -> Result<usize> {
        let data = ctx.data;
        let p = data.p();
        let st = &mut self.state;
        let inputs = st.inputs(data);
        let logliks = st.cache.singleton_logliks(&st.z, j, ctx.k_max_plus, &inputs)?;
        let probs = new_feature_probabilities(&logliks, self.temperature, st.alpha, p);
        let mut k = sample_categorical(&probs, self.rng.random::<f64>());
        if let PriorKind::Pibp(_) = &ctx.prior.kind {
            // independence proposal from the IBP kernel, corrected to the
            // pIBP singleton weight λ(e_j) in place of 1/p
            if dropped <= ctx.k_max_plus {
                let mut e_j = vec![0u8; p];
                e_j[j] = 1;
                let log_ratio = self.log_lambda(&e_j, ctx.prior)? + (p as f64).ln();
                let log_accept = (k as f64 - dropped as f64) * log_ratio;
                if log_accept < 0.0 && self.rng.random::<f64>() >= log_accept.exp() {
                    k = dropped;
                }
            }
        }
        let st = &mut self.state;
        for _ in 0..k {
            st.push_singleton(j, data);
        }
        st.loglik = logliks[k];
        Ok(k)
    }

    /// α ~ Gamma(K + 1, scale (c + 1)⁻¹); the law does not depend on T.
    pub fn update_alpha(&mut self, prior: &PriorSpec) {
        let law = alpha_full_conditional(self.state.z.k(), self.state.z.p(), prior);
        self.state.alpha = law.sample(&mut self.rng);
    }

    fn update_variances(&mut self, data: &Dataset) -> Result<()> {
        let t = self.temperature;
        let st = &mut self.state;
        let loadings = sample_loadings_tempered(&st.z, data, &st.params, t, &mut self.rng)?;
        let (sigma2, sigma_a2) = sample_variances_tempered(&st.z, &loadings, data, t, &mut self.rng)?;
        st.params.sigma2 = sigma2;
        st.params.sigma_a2 = sigma_a2;
        st.params.loadings = Some(loadings);
        st.refresh(data)
    }

    fn log_lambda(&mut self, column: &[u8], prior: &PriorSpec) -> Result<f64> {
        if let Some(&v) = self.lambda_cache.get(column) {
            return Ok(v);
        }
        let v = prior.log_lambda(column)?;
        if self.lambda_cache.len() >= LAMBDA_CACHE_LIMIT {
            self.lambda_cache.clear();
        }
        self.lambda_cache.insert(column.to_vec(), v);
        Ok(v)
    }
}

/// P̃(K⁺ = k) ∝ exp(ℓ_k / T)·Pois(k; α/p) for k = 0..logliks.len()−1,
/// where ℓ_k is the log-likelihood with k singleton columns appended.
pub fn new_feature_probabilities(logliks: &[f64], temperature: f64, alpha: f64, p: usize) -> Vec<f64> {
    let rate = alpha / p as f64;
    let log_rate = rate.ln();
    let weights: Vec<f64> = logliks
        .iter()
        .enumerate()
        .map(|(k, &ll)| ll / temperature + k as f64 * log_rate - ln_gamma(k as f64 + 1.0))
        .collect();
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|w| w / total).collect()
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pr) in probs.iter().enumerate() {
        acc += pr;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use nalgebra::DMatrix;

    fn toy() -> Dataset {
        Dataset::new(DMatrix::from_row_slice(3, 4, &[
            0.3, -1.2, 0.8, 0.1, //
            1.1, 0.4, -0.5, 0.9, //
            -0.7, 0.2, 1.3, -0.4,
        ]))
        .unwrap()
    }

    #[test]
    fn truncated_poisson_weights_under_flat_likelihood() {
        let probs = new_feature_probabilities(&[0.0; 3], 1.0, 1.0, 2);
        let expect = [0.6154, 0.3077, 0.0769];
        for (a, b) in probs.iter().zip(expect) {
            assert!((a - b).abs() < 5e-5, "{probs:?}");
        }
        assert_eq!(new_feature_probabilities(&[-3.0], 1.7, 0.4, 9), vec![1.0]);
    }

    #[test]
    fn zero_truncation_never_adds_columns() {
        let data = toy();
        let prior = PriorSpec::ibp();
        let ctx = StepContext { data: &data, prior: &prior, k_max_plus: 0, mode: Mode::Theory };
        let mut chain = Chain::new(1.0, substream(1, 1, 0), ChainState::initial(&data).unwrap()).unwrap();
        for _ in 0..50 {
            chain.step(&ctx).unwrap();
            assert_eq!(chain.state().k(), 0);
        }
    }

    #[test]
    fn singleton_at_swept_row_is_dropped_first() {
        let data = toy();
        let prior = PriorSpec::ibp();
        let z = BinaryFeatureMatrix::from_columns(4, &[vec![0, 1, 0, 0], vec![1, 1, 0, 0]]).unwrap();
        let state = ChainState::new(z, 1.0, ModelParams::unit(), &data).unwrap();
        let ctx = StepContext { data: &data, prior: &prior, k_max_plus: 0, mode: Mode::Theory };
        for seed in 0..20 {
            let mut chain = Chain::new(1.0, substream(seed, 1, 0), state.clone()).unwrap();
            chain.sweep_row(1, &ctx).unwrap();
            let z = chain.state().z();
            assert_eq!(z.k(), 1);
            assert_eq!(z.get(0, 0), 1);
        }
    }

    #[test]
    fn cache_stays_coherent_over_many_sweeps() {
        let data = toy();
        for mode in [Mode::Theory, Mode::Extended] {
            let prior = PriorSpec::ibp();
            let ctx = StepContext { data: &data, prior: &prior, k_max_plus: 3, mode };
            let mut chain =
                Chain::new(1.5, substream(9, 1, 0), ChainState::initial(&data).unwrap()).unwrap();
            for _ in 0..200 {
                chain.step(&ctx).unwrap();
                assert!(chain.state().z().is_canonical());
                assert!(chain.state().check_coherence(&data).unwrap() < 1e-8);
                assert_eq!(chain.state().col_sums, chain.state().z().column_sums());
            }
        }
    }

    #[test]
    fn alpha_draw_ignores_temperature() {
        let data = toy();
        let prior = PriorSpec::ibp();
        let state = ChainState::initial(&data).unwrap();
        let mut cold = Chain::new(1.0, substream(4, 1, 0), state.clone()).unwrap();
        let mut hot = Chain::new(7.0, substream(4, 1, 0), state).unwrap();
        cold.update_alpha(&prior);
        hot.update_alpha(&prior);
        assert_eq!(cold.state().alpha(), hot.state().alpha());
    }

    #[test]
    fn alpha_posterior_mean_at_nine_features() {
        let p = 50;
        let cols: Vec<Vec<u8>> = (0..9)
            .map(|k| (0..p).map(|j| u8::from(j == k)).collect())
            .collect();
        let z = BinaryFeatureMatrix::from_columns(p, &cols).unwrap();
        let x = DMatrix::from_fn(2, p, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let data = Dataset::new(x).unwrap();
        let prior = PriorSpec::ibp();
        let state = ChainState::new(z, 1.0, ModelParams::unit(), &data).unwrap();
        let mut chain = Chain::new(1.0, substream(3, 1, 0), state).unwrap();
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            chain.update_alpha(&prior);
            sum += chain.state().alpha();
        }
        let expect = 10.0 / (crate::prior::harmonic(50) + 1.0);
        assert!((expect - 1.818).abs() < 1e-3);
        // sd of Gamma(10, 1/5.499) ≈ 0.575
        let band = 3.0 * 0.575 / (draws as f64).sqrt();
        assert!((sum / draws as f64 - expect).abs() < band);
    }
}
