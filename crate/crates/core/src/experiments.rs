//! Simulation protocol: sparse ground truth, synthetic data, replicated
//! sampler runs and summaries of how the residual ‖ZZᵀ − Z*Z*ᵀ‖ behaves
//! across design points.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{Cholesky, DMatrix};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;
use crate::linalg::{spectral_norm, SymMatrix};
use crate::model::{residual_norm, Dataset};
use crate::rng::{derive_seed, substream, DOMAIN_DATA, DOMAIN_REPLICATE, DOMAIN_TRUTH};
use crate::sampler::{run_ptmcmc, SamplerConfig};

/// Number of distinct nonzero binary p-vectors with at most s ones,
/// saturating at `u128::MAX`.
fn sparse_pattern_count(p: usize, s: usize) -> u128 {
    let mut total: u128 = 0;
    let mut binom: u128 = 1;
    for m in 1..=s.min(p) {
        binom = match binom.checked_mul((p - m + 1) as u128) {
            Some(v) => v / m as u128,
            None => return u128::MAX,
        };
        total = total.saturating_add(binom);
    }
    total
}

/// How many ones each ground-truth column receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnSizeLaw {
    /// m_k uniform on {1..s}.
    #[default]
    Uniform,
    /// m_k = s for every column.
    Exact,
}

impl std::str::FromStr for ColumnSizeLaw {
    type Err = LfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "exact" => Ok(Self::Exact),
            other => Err(LfmError::Config(format!(
                "unknown column size law `{other}` (expected uniform or exact)"
            ))),
        }
    }
}

/// K* distinct columns, each with m_k drawn uniformly from {1..s} and its
/// m_k ones placed on uniformly chosen rows.
pub fn generate_sparse_truth<R: Rng + ?Sized>(
    p: usize,
    k_star: usize,
    s: usize,
    rng: &mut R,
) -> Result<BinaryFeatureMatrix> {
    generate_sparse_truth_with(p, k_star, s, ColumnSizeLaw::Uniform, rng)
}

/// As [`generate_sparse_truth`] with a choice of column-size law.
pub fn generate_sparse_truth_with<R: Rng + ?Sized>(
    p: usize,
    k_star: usize,
    s: usize,
    law: ColumnSizeLaw,
    rng: &mut R,
) -> Result<BinaryFeatureMatrix> {
    if p == 0 || s == 0 || s > p {
        return Err(LfmError::invalid(format!(
            "sparsity level s = {s} must lie in 1..={p}"
        )));
    }
    let available = match law {
        ColumnSizeLaw::Uniform => sparse_pattern_count(p, s),
        ColumnSizeLaw::Exact => sparse_pattern_count(p, s) - sparse_pattern_count(p, s - 1),
    };
    if (k_star as u128) > available {
        return Err(LfmError::invalid(format!(
            "{k_star} distinct columns with {} {s} ones do not exist for p = {p}",
            if law == ColumnSizeLaw::Exact { "exactly" } else { "at most" }
        )));
    }
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(k_star);
    let mut columns = Vec::with_capacity(k_star);
    while columns.len() < k_star {
        let m = match law {
            ColumnSizeLaw::Uniform => rng.random_range(1..=s),
            ColumnSizeLaw::Exact => s,
        };
        let mut col = vec![0u8; p];
        for j in sample_indices(rng, p, m) {
            col[j] = 1;
        }
        if seen.insert(col.clone()) {
            columns.push(col);
        }
    }
    BinaryFeatureMatrix::from_columns(p, &columns)
}

/// n rows drawn i.i.d. from N(0, Z*Z*ᵀ + I).
pub fn generate_dataset<R: Rng + ?Sized>(
    z_star: &BinaryFeatureMatrix,
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let p = z_star.p();
    let mut sigma = z_star.similarity();
    for i in 0..p {
        sigma[(i, i)] += 1.0;
    }
    let l = Cholesky::new(sigma)
        .ok_or_else(|| LfmError::Numerical("Z*Z*ᵀ + I not positive definite".into()))?
        .unpack();
    let eps = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Dataset::new((l * eps).transpose())
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub k_star: usize,
    pub reps: usize,
    pub column_sizes: ColumnSizeLaw,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.s > self.p {
            return Err(LfmError::Config(format!(
                "s = {} must lie in 1..={}",
                self.s, self.p
            )));
        }
        if self.k_star == 0 || self.reps == 0 || self.n == 0 {
            return Err(LfmError::Config("n, K* and reps must be at least 1".into()));
        }
        self.sampler.validate(self.p)
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep: usize,
    pub seed: u64,
    pub terminal_k: usize,
    pub terminal_residual: f64,
    /// Mean K over post-burn-in T = 1 states.
    pub posterior_mean_k: f64,
    /// ‖E[ZZᵀ] − Z*Z*ᵀ‖ with the expectation over post-burn-in T = 1 states.
    pub posterior_mean_residual: f64,
    /// ‖Z*Z*ᵀ‖ of this replicate's ground truth.
    pub truth_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub k_star: usize,
    pub reps: usize,
    pub mean_k: f64,
    pub sd_k: f64,
    pub mean_residual: f64,
    pub sd_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Terminal-state summary.
    pub summary: SummaryRow,
    /// Same layout, built from posterior means instead of terminal states.
    pub posterior_summary: SummaryRow,
    pub replicates: Vec<RepResult>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates (K, residual) pairs into a [`SummaryRow`]; standard
/// deviations use the n − 1 denominator.
pub fn summarize(
    n: usize,
    p: usize,
    s: usize,
    k_star: usize,
    ks: &[f64],
    residuals: &[f64],
) -> Result<SummaryRow> {
    if ks.is_empty() || ks.len() != residuals.len() {
        return Err(LfmError::invalid("summary needs matching, nonempty K and residual lists"));
    }
    let (mean_k, sd_k) = mean_sd(ks);
    let (mean_residual, sd_residual) = mean_sd(residuals);
    Ok(SummaryRow {
        n,
        p,
        s,
        k_star,
        reps: ks.len(),
        mean_k,
        sd_k,
        mean_residual,
        sd_residual,
    })
}

/// Runs one replicate: fresh truth, fresh data, one sampler run.
pub fn run_replicate(cfg: &ExperimentConfig, rep: usize) -> Result<RepResult> {
    let seed = derive_seed(cfg.seed, DOMAIN_REPLICATE, rep as u32);
    let z_star = generate_sparse_truth_with(
        cfg.p,
        cfg.k_star,
        cfg.s,
        cfg.column_sizes,
        &mut substream(seed, DOMAIN_TRUTH, 0),
    )?;
    let data = generate_dataset(&z_star, cfg.n, &mut substream(seed, DOMAIN_DATA, 0))?;
    let mut sampler = cfg.sampler.clone();
    sampler.seed = seed;
    let out = run_ptmcmc(&sampler, &data, Some(&z_star))?;
    let terminal_residual = match out.terminal_residual {
        Some(r) => r,
        None => residual_norm(out.final_states[0].z(), &z_star)?,
    };
    let truth = z_star.similarity();
    let diff = &out.mean_similarity - &truth;
    Ok(RepResult {
        rep,
        seed,
        terminal_k: out.terminal_k(),
        terminal_residual,
        posterior_mean_k: out.mean_k,
        posterior_mean_residual: spectral_norm(&SymMatrix::new(diff)?)?,
        truth_norm: spectral_norm(&SymMatrix::new(truth)?)?,
    })
}

/// All replicates of one design point, aggregated.
pub fn run_table_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let replicates: Vec<RepResult> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<_>>()?;
    let ks: Vec<f64> = replicates.iter().map(|r| r.terminal_k as f64).collect();
    let res: Vec<f64> = replicates.iter().map(|r| r.terminal_residual).collect();
    let pks: Vec<f64> = replicates.iter().map(|r| r.posterior_mean_k).collect();
    let pres: Vec<f64> = replicates.iter().map(|r| r.posterior_mean_residual).collect();
    Ok(ExperimentResult {
        summary: summarize(cfg.n, cfg.p, cfg.s, cfg.k_star, &ks, &res)?,
        posterior_summary: summarize(cfg.n, cfg.p, cfg.s, cfg.k_star, &pks, &pres)?,
        replicates,
    })
}

/// Rate predictor max{√p, √(s·K*·log(p+1))}/√n · ‖Z*Z*ᵀ‖.
pub fn contraction_rate_predictor(n: usize, p: usize, s: usize, k_star: usize, truth_norm: f64) -> f64 {
    let pf = p as f64;
    let a = pf.sqrt();
    let b = (s as f64 * k_star as f64 * (pf + 1.0).ln()).sqrt();
    a.max(b) / (n as f64).sqrt() * truth_norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeTrend {
    pub p: usize,
    pub s: usize,
    pub ns: Vec<usize>,
    pub residuals: Vec<f64>,
    pub strictly_decreasing: bool,
    /// Residual at the smallest n divided by residual at the largest n.
    pub first_to_last_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRobustness {
    pub n: usize,
    pub s: usize,
    pub ps: Vec<usize>,
    pub residuals: Vec<f64>,
    /// max / min residual across p; 1 when every residual is zero.
    pub spread: f64,
    pub within_factor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorPoint {
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub predictor: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub factor: f64,
    pub sample_size: Vec<SampleSizeTrend>,
    pub dimension: Vec<DimensionRobustness>,
    pub predictor: Vec<PredictorPoint>,
    /// Spearman rank correlation between predictor and observed residual.
    pub spearman: Option<f64>,
}

/// Options for [`contraction_trend_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendOptions {
    /// Largest tolerated max/min ratio of residuals across p at fixed n.
    pub factor: f64,
    /// ‖Z*Z*ᵀ‖ for the predictor; `None` uses the bound s·K*.
    pub truth_norm: Option<f64>,
}

impl Default for TrendOptions {
    fn default() -> Self {
        Self {
            factor: 2.0,
            truth_norm: None,
        }
    }
}

/// Checks the residual trends across a set of summary rows: decreasing in n
/// at fixed (p, s), and roughly flat in p at fixed (n, s).
pub fn contraction_trend_report(rows: &[SummaryRow], opts: TrendOptions) -> Result<TrendReport> {
    if rows.len() < 2 {
        return Err(LfmError::invalid(format!(
            "a trend needs at least two summary rows, got {}",
            rows.len()
        )));
    }
    let mut by_p: BTreeMap<(usize, usize), Vec<&SummaryRow>> = BTreeMap::new();
    let mut by_n: BTreeMap<(usize, usize), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        by_p.entry((r.p, r.s)).or_default().push(r);
        by_n.entry((r.n, r.s)).or_default().push(r);
    }

    let mut sample_size = Vec::new();
    for ((p, s), mut group) in by_p {
        group.sort_by_key(|r| r.n);
        group.dedup_by_key(|r| r.n);
        if group.len() < 2 {
            continue;
        }
        let residuals: Vec<f64> = group.iter().map(|r| r.mean_residual).collect();
        sample_size.push(SampleSizeTrend {
            p,
            s,
            ns: group.iter().map(|r| r.n).collect(),
            strictly_decreasing: residuals.windows(2).all(|w| w[1] < w[0]),
            first_to_last_ratio: residuals[0] / residuals[residuals.len() - 1],
            residuals,
        });
    }

    let mut dimension = Vec::new();
    for ((n, s), mut group) in by_n {
        group.sort_by_key(|r| r.p);
        group.dedup_by_key(|r| r.p);
        if group.len() < 2 {
            continue;
        }
        let residuals: Vec<f64> = group.iter().map(|r| r.mean_residual).collect();
        let max = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = residuals.iter().cloned().fold(f64::INFINITY, f64::min);
        let spread = if max == 0.0 { 1.0 } else { max / min };
        dimension.push(DimensionRobustness {
            n,
            s,
            ps: group.iter().map(|r| r.p).collect(),
            within_factor: spread <= opts.factor,
            spread,
            residuals,
        });
    }

    if sample_size.is_empty() && dimension.is_empty() {
        return Err(LfmError::invalid(
            "rows share neither p nor n, so no trend can be assessed",
        ));
    }

    let predictor: Vec<PredictorPoint> = rows
        .iter()
        .map(|r| {
            let norm = opts.truth_norm.unwrap_or((r.s * r.k_star) as f64);
            PredictorPoint {
                n: r.n,
                p: r.p,
                s: r.s,
                predictor: contraction_rate_predictor(r.n, r.p, r.s, r.k_star, norm),
                observed: r.mean_residual,
            }
        })
        .collect();
    let xs: Vec<f64> = predictor.iter().map(|q| q.predictor).collect();
    let ys: Vec<f64> = predictor.iter().map(|q| q.observed).collect();
    Ok(TrendReport {
        factor: opts.factor,
        sample_size,
        dimension,
        spearman: spearman(&xs, &ys),
        predictor,
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman's ρ with average ranks for ties; `None` when either input is
/// constant or shorter than two.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
