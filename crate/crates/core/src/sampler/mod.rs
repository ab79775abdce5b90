//! Parallel-tempering Gibbs sampler.
//!
//! Each iteration runs a full Gibbs sweep on every chain (rows, then α,
//! then the variance block in extended mode) and afterwards proposes state
//! exchanges between neighbouring temperatures, hottest pair first.

mod cache;
mod chain;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use chain::{new_feature_probabilities, Chain, ChainState, StepContext};

use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;
use crate::model::{residual_norm, Dataset, ModelParams};
use crate::prior::PriorSpec;
use crate::rng::{substream, DOMAIN_CHAIN, DOMAIN_SWAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// σ² = σ_a² = 1 held fixed.
    Theory,
    /// σ², σ_a² sampled under IG(1, 1) priors, loadings reported.
    Extended,
}

impl std::str::FromStr for Mode {
    type Err = LfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theory" => Ok(Mode::Theory),
            "extended" => Ok(Mode::Extended),
            other => Err(LfmError::Config(format!(
                "unknown mode `{other}` (expected theory or extended)"
            ))),
        }
    }
}

/// Temperatures T_1 = 1 < T_2 < … < T_N.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureLadder {
    temps: Vec<f64>,
}

impl TemperatureLadder {
    /// T_i = β^(i−1) for i = 1..N.
    pub fn geometric(n: usize, beta: f64) -> Result<Self> {
        if n == 0 {
            return Err(LfmError::Config("ladder needs at least one chain".into()));
        }
        if n > 1 && !(beta > 1.0 && beta.is_finite()) {
            return Err(LfmError::Config(format!(
                "temperature ratio must exceed 1, got {beta}"
            )));
        }
        Self::new((0..n).map(|i| beta.powi(i as i32)).collect())
    }

    pub fn new(temps: Vec<f64>) -> Result<Self> {
        if temps.first() != Some(&1.0) {
            return Err(LfmError::Config("the first temperature must be 1".into()));
        }
        if !temps.windows(2).all(|w| w[1] > w[0]) || !temps.iter().all(|t| t.is_finite()) {
            return Err(LfmError::Config(
                "temperatures must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { temps })
    }

    pub fn temps(&self) -> &[f64] {
        &self.temps
    }

    pub fn len(&self) -> usize {
        self.temps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub iters: usize,
    pub k_max_plus: usize,
    pub ladder: TemperatureLadder,
    pub seed: u64,
    pub mode: Mode,
    pub prior: PriorSpec,
    /// Record every `thin`-th iteration.
    pub thin: usize,
    /// Residual against Z* every `residual_every` recorded iterations;
    /// 0 evaluates it only at the last iteration.
    pub residual_every: usize,
    /// Record all chains instead of only the T = 1 chain.
    pub trace_all_chains: bool,
    /// Iterations discarded before posterior averages are accumulated.
    pub burn_in: usize,
}

impl SamplerConfig {
    pub fn new(iters: usize, ladder: TemperatureLadder, seed: u64) -> Self {
        Self {
            iters,
            k_max_plus: 10,
            ladder,
            seed,
            mode: Mode::Theory,
            prior: PriorSpec::ibp(),
            thin: 1,
            residual_every: 1,
            trace_all_chains: false,
            burn_in: iters / 2,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.iters == 0 {
            return Err(LfmError::Config("iters must be at least 1".into()));
        }
        if self.k_max_plus == 0 {
            return Err(LfmError::Config("k_max_plus must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(LfmError::Config("thin must be at least 1".into()));
        }
        if self.ladder.is_empty() {
            return Err(LfmError::Config("empty temperature ladder".into()));
        }
        self.prior
            .validate(p)
            .map_err(|e| LfmError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub chain: usize,
    pub temperature: f64,
    pub k: usize,
    pub loglik: f64,
    /// Untempered log posterior kernel; T = 1 chain only.
    pub log_kernel: Option<f64>,
    /// ‖ZZᵀ − Z*Z*ᵀ‖; T = 1 chain only, when Z* is known.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MapEstimate {
    pub iteration: usize,
    pub z: BinaryFeatureMatrix,
    pub alpha: f64,
    pub params: ModelParams,
    pub log_kernel: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapStats {
    /// Entry i counts proposals between chains i and i + 1.
    pub attempts: Vec<u64>,
    pub accepts: Vec<u64>,
}

impl SwapStats {
    pub fn new(pairs: usize) -> Self {
        Self {
            attempts: vec![0; pairs],
            accepts: vec![0; pairs],
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.attempts
            .iter()
            .zip(&self.accepts)
            .map(|(&a, &s)| if a == 0 { 0.0 } else { s as f64 / a as f64 })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRow>,
    pub map: MapEstimate,
    pub swaps: SwapStats,
    pub final_states: Vec<ChainState>,
    /// Mean of ZZᵀ over post-burn-in T = 1 states.
    pub mean_similarity: DMatrix<f64>,
    /// Mean K over post-burn-in T = 1 states.
    pub mean_k: f64,
    /// Terminal ‖ZZᵀ − Z*Z*ᵀ‖ of the T = 1 chain, when Z* is known.
    pub terminal_residual: Option<f64>,
}

impl RunOutput {
    pub fn terminal_k(&self) -> usize {
        self.final_states[0].k()
    }

    pub fn cold_trace(&self) -> impl Iterator<Item = &TraceRow> {
        self.trace.iter().filter(|r| r.chain == 0)
    }
}

/// Acceptance probability for exchanging the states of a hotter chain
/// (temperature `t_hot`, log-likelihood `ll_hot`) and its colder neighbour.
pub fn swap_acceptance(ll_hot: f64, ll_cold: f64, t_hot: f64, t_cold: f64) -> f64 {
    let log_a = (1.0 / t_hot - 1.0 / t_cold) * (ll_cold - ll_hot);
    if log_a >= 0.0 {
        1.0
    } else {
        log_a.exp()
    }
}

/// The swap half of one iteration: for i = N..2 propose exchanging the states of chains i and i−1.
pub fn swap_step<R: Rng + ?Sized>(chains: &mut [Chain], stats: &mut SwapStats, rng: &mut R) {
    for i in (1..chains.len()).rev() {
        let (cold, hot) = chains.split_at_mut(i);
        let cold = &mut cold[i - 1];
        let hot = &mut hot[0];
        let a = swap_acceptance(
            hot.state.loglik(),
            cold.state.loglik(),
            hot.temperature(),
            cold.temperature(),
        );
        stats.attempts[i - 1] += 1;
        let u: f64 = rng.random();
        if u < a {
            std::mem::swap(&mut hot.state, &mut cold.state);
            stats.accepts[i - 1] += 1;
        }
    }
}

/// Runs the sampler from the empty matrix on every chain.
pub fn run_ptmcmc(
    cfg: &SamplerConfig,
    data: &Dataset,
    z_star: Option<&BinaryFeatureMatrix>,
) -> Result<RunOutput> {
    let p = data.p();
    cfg.validate(p)?;
    if let Some(zs) = z_star {
        if zs.p() != p {
            return Err(LfmError::DimensionMismatch {
                what: "rows of Z* vs columns of X",
                expected: p,
                actual: zs.p(),
            });
        }
    }
    let init = ChainState::initial(data)?;
    let mut chains: Vec<Chain> = cfg
        .ladder
        .temps()
        .iter()
        .enumerate()
        .map(|(i, &t)| Chain::new(t, substream(cfg.seed, DOMAIN_CHAIN, i as u32), init.clone()))
        .collect::<Result<_>>()?;
    let mut swap_rng = substream(cfg.seed, DOMAIN_SWAP, 0);
    let mut swaps = SwapStats::new(chains.len() - 1);
    let ctx = StepContext {
        data,
        prior: &cfg.prior,
        k_max_plus: cfg.k_max_plus,
        mode: cfg.mode,
    };

    let mut trace = Vec::with_capacity(cfg.iters / cfg.thin + 1);
    let mut map: Option<MapEstimate> = None;
    let mut sim_sum = DMatrix::<f64>::zeros(p, p);
    let mut k_sum = 0.0;
    let mut averaged = 0usize;
    let mut terminal_residual = None;
    let mut recorded = 0usize;

    for iter in 1..=cfg.iters {
        chains.par_iter_mut().try_for_each(|c| c.step(&ctx))?;
        swap_step(&mut chains, &mut swaps, &mut swap_rng);

        let cold = &chains[0].state;
        let kernel = cold.log_kernel(&cfg.prior, cfg.mode)?;
        if map.as_ref().is_none_or(|m| kernel > m.log_kernel) {
            map = Some(MapEstimate {
                iteration: iter,
                z: cold.z().clone(),
                alpha: cold.alpha(),
                params: cold.params().clone(),
                log_kernel: kernel,
            });
        }
        if iter > cfg.burn_in.min(cfg.iters - 1) {
            sim_sum += cold.z().similarity();
            k_sum += cold.k() as f64;
            averaged += 1;
        }

        let last = iter == cfg.iters;
        if iter % cfg.thin == 0 || last {
            let residual = match z_star {
                Some(zs) => {
                    let due = if cfg.residual_every == 0 {
                        last
                    } else {
                        recorded.is_multiple_of(cfg.residual_every) || last
                    };
                    if due {
                        Some(residual_norm(cold.z(), zs)?)
                    } else {
                        None
                    }
                }
                None => None,
            };
            if last {
                terminal_residual = residual;
            }
            let n_rec = if cfg.trace_all_chains { chains.len() } else { 1 };
            for (ci, c) in chains.iter().take(n_rec).enumerate() {
                trace.push(TraceRow {
                    iteration: iter,
                    chain: ci,
                    temperature: c.temperature(),
                    k: c.state.k(),
                    loglik: c.state.loglik(),
                    log_kernel: (ci == 0).then_some(kernel),
                    residual: if ci == 0 { residual } else { None },
                });
            }
            recorded += 1;
        }
    }

    let averaged = averaged.max(1) as f64;
    Ok(RunOutput {
        trace,
        map: map.expect("at least one iteration ran"),
        swaps,
        final_states: chains.into_iter().map(Chain::into_state).collect(),
        mean_similarity: sim_sum / averaged,
        mean_k: k_sum / averaged,
        terminal_residual,
    })
}
