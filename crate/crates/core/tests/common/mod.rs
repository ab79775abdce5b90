#![allow(dead_code)]

use std::collections::HashMap;

use lfm::features::BinaryFeatureMatrix;
use lfm::model::{Dataset, ModelParams};
use lfm::prior::PriorSpec;
use lfm::rng::substream;
use lfm::sampler::{swap_step, Chain, ChainState, Mode, StepContext, SwapStats};
use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sum of p-variate normal log densities, built from a dense Σ and its
/// Cholesky factor.
pub fn dense_loglik(z: &BinaryFeatureMatrix, x: &DMatrix<f64>, sigma2: f64, sigma_a2: f64) -> f64 {
    let p = x.ncols();
    let zm = DMatrix::from_fn(p, z.k(), |i, k| z.get(i, k) as f64);
    let sigma = &zm * zm.transpose() * sigma_a2 + DMatrix::identity(p, p) * sigma2;
    let chol = sigma.cholesky().expect("Σ is positive definite");
    let half_log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let row = x.row(i).transpose();
        let w = chol.l().solve_lower_triangular(&row).expect("triangular solve");
        total += -0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln() - half_log_det - 0.5 * w.norm_squared();
    }
    total
}

pub fn random_binary(p: usize, k: usize, density: f64, rng: &mut impl Rng) -> BinaryFeatureMatrix {
    let cols: Vec<Vec<u8>> = (0..k)
        .map(|_| (0..p).map(|_| u8::from(rng.random::<f64>() < density)).collect())
        .collect();
    BinaryFeatureMatrix::from_columns(p, &cols).expect("binary columns")
}

pub fn random_gaussian(n: usize, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Fixed 2×2 data used by every two-object exactness check.
pub fn toy_data() -> Dataset {
    Dataset::new(DMatrix::from_row_slice(2, 2, &[1.3, 0.9, -0.4, 0.7])).unwrap()
}

/// Counts of the column types (1,0), (0,1) and (1,1) of a two-row matrix.
/// These counts determine ZZᵀ and are in one-to-one correspondence with it.
pub type TypeCounts = (usize, usize, usize);

pub fn type_counts(z: &BinaryFeatureMatrix) -> TypeCounts {
    let (mut a, mut b, mut c) = (0, 0, 0);
    for col in z.columns() {
        match (col[0], col[1]) {
            (1, 0) => a += 1,
            (0, 1) => b += 1,
            _ => c += 1,
        }
    }
    (a, b, c)
}

pub fn from_type_counts((a, b, c): TypeCounts) -> BinaryFeatureMatrix {
    let mut cols = Vec::new();
    cols.extend(std::iter::repeat_n(vec![1u8, 0], a));
    cols.extend(std::iter::repeat_n(vec![0u8, 1], b));
    cols.extend(std::iter::repeat_n(vec![1u8, 1], c));
    BinaryFeatureMatrix::from_columns(2, &cols).unwrap()
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// Exact IBP-mixture posterior over ZZᵀ for two objects at temperature T,
/// with α integrated out by hand. Every nonzero column has λ = 1/2 and
/// H₂ + 1 = 5/2, so the prior mass of a class is K!/(a!b!c!)·5^{−K} up to a
/// constant. States with more than `max_per_type` columns of one type are
/// cut off; their mass is negligible.
pub fn toy_posterior(data: &Dataset, temperature: f64, max_per_type: usize) -> HashMap<TypeCounts, f64> {
    let mut weights = HashMap::new();
    let mut log_max = f64::NEG_INFINITY;
    for a in 0..=max_per_type {
        for b in 0..=max_per_type {
            for c in 0..=max_per_type {
                let z = from_type_counts((a, b, c));
                let k = a + b + c;
                let lw = dense_loglik(&z, data.x(), 1.0, 1.0) / temperature + ln_factorial(k)
                    - ln_factorial(a)
                    - ln_factorial(b)
                    - ln_factorial(c)
                    - k as f64 * 5f64.ln();
                log_max = log_max.max(lw);
                weights.insert((a, b, c), lw);
            }
        }
    }
    let total: f64 = weights.values().map(|lw| (lw - log_max).exp()).sum();
    weights
        .into_iter()
        .map(|(key, lw)| (key, (lw - log_max).exp() / total))
        .collect()
}

/// Runs a replica-exchange ladder on the toy data and tallies, for every
/// chain, how often each ZZᵀ class is visited after every iteration.
pub fn toy_ladder_counts(
    temps: &[f64],
    k_max_plus: usize,
    iters: usize,
    seed: u64,
) -> Vec<HashMap<TypeCounts, usize>> {
    let data = toy_data();
    let prior = PriorSpec::ibp();
    let ctx = StepContext {
        data: &data,
        prior: &prior,
        k_max_plus,
        mode: Mode::Theory,
    };
    let init = ChainState::initial(&data).unwrap();
    let mut chains: Vec<Chain> = temps
        .iter()
        .enumerate()
        .map(|(i, &t)| Chain::new(t, substream(seed, 1, i as u32), init.clone()).unwrap())
        .collect();
    let mut stats = SwapStats::new(temps.len() - 1);
    let mut swap_rng = substream(seed, 2, 0);
    let mut counts = vec![HashMap::new(); temps.len()];
    for _ in 0..iters {
        for c in chains.iter_mut() {
            c.step(&ctx).unwrap();
        }
        swap_step(&mut chains, &mut stats, &mut swap_rng);
        for (c, tally) in chains.iter().zip(counts.iter_mut()) {
            *tally.entry(type_counts(c.state().z())).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson χ² goodness of fit. Cells with expected count below `min_expected`
/// are pooled, together with every observed state the oracle does not list.
pub fn chi_square<K: std::hash::Hash + Eq + Clone>(
    observed: &HashMap<K, usize>,
    expected_probs: &HashMap<K, f64>,
    min_expected: f64,
) -> ChiSquareOutcome {
    let n: usize = observed.values().sum();
    let n = n as f64;
    let mut statistic = 0.0;
    let mut cells = 0usize;
    let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
    for (key, &prob) in expected_probs {
        let e = prob * n;
        let o = *observed.get(key).unwrap_or(&0) as f64;
        if e >= min_expected {
            statistic += (o - e).powi(2) / e;
            cells += 1;
        } else {
            pooled_o += o;
            pooled_e += e;
        }
    }
    pooled_o += observed
        .iter()
        .filter(|(k, _)| !expected_probs.contains_key(*k))
        .map(|(_, &v)| v as f64)
        .sum::<f64>();
    if pooled_e > 0.0 {
        statistic += (pooled_o - pooled_e).powi(2) / pooled_e;
        cells += 1;
    }
    let df = cells.saturating_sub(1).max(1);
    let p_value = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(statistic);
    ChiSquareOutcome {
        statistic,
        df,
        p_value,
    }
}

/// A three-leaf tree with one interior node: ((1,2),3) at unit depth.
pub fn two_level_tree_newick() -> &'static str {
    "((1:0.4,2:0.4):0.6,3:1);"
}

pub fn unit_params() -> ModelParams {
    ModelParams::unit()
}
