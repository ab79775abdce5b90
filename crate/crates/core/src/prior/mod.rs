//! IBP and phylogenetic-IBP priors over binary feature matrices.
//!
//! Both priors share one shape. With c = ψ(S(𝒯)+1) − ψ(1) (c = H_p for the
//! IBP) and per-column factors λ_k,
//!
//! ```text
//! Π(Z | α) = exp(−cα) α^K / K! ∏ λ_k
//! Π(Z)     = (c + 1)^−(K+1) ∏ λ_k          (α ~ Gamma(1, 1) integrated out)
//! ```
//!
//! For the IBP λ_k = (p − m_k)!(m_k − 1)!/p!. For the pIBP
//! λ(z, 𝒯) = ∫₀¹ P(z | π, 𝒯) π⁻¹ dπ, evaluated by quadrature over a tree
//! pruning recursion.

mod quadrature;
mod tree;

use std::sync::Arc;

use rand::Rng;
use rand_distr::Distribution;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;

pub use tree::PhyloTree;

/// Default Gauss-Legendre node count for λ integrals.
pub const DEFAULT_QUADRATURE_POINTS: usize = 256;
const LAMBDA_REL_TOL: f64 = 1e-8;
const MAX_QUADRATURE_POINTS: usize = 8192;
/// π = 1 − v^r; smooths the (1 − π)^t endpoint behaviour at π → 1.
const SUBSTITUTION_POWER: f64 = 4.0;
/// Upper bound on explicitly enumerated matrices in [`enumerate_prior_mass`].
const ENUMERATION_BUDGET: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorKind {
    Ibp,
    Pibp(Arc<PhyloTree>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub quadrature_points: usize,
}

impl PriorSpec {
    pub fn ibp() -> Self {
        Self {
            kind: PriorKind::Ibp,
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
        }
    }

    pub fn pibp(tree: PhyloTree) -> Self {
        Self {
            kind: PriorKind::Pibp(Arc::new(tree)),
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
        }
    }

    pub fn with_quadrature_points(mut self, n: usize) -> Self {
        self.quadrature_points = n.max(1);
        self
    }

    pub fn tree(&self) -> Option<&PhyloTree> {
        match &self.kind {
            PriorKind::Ibp => None,
            PriorKind::Pibp(t) => Some(t),
        }
    }

    pub fn is_ibp(&self) -> bool {
        matches!(self.kind, PriorKind::Ibp)
    }

    /// Checks that the prior can be used for p objects.
    pub fn validate(&self, p: usize) -> Result<()> {
        if let PriorKind::Pibp(t) = &self.kind {
            if t.num_leaves() != p {
                return Err(LfmError::DimensionMismatch {
                    what: "tree leaves vs objects",
                    expected: p,
                    actual: t.num_leaves(),
                });
            }
        }
        Ok(())
    }

    /// c = ψ(S(𝒯)+1) − ψ(1); equals H_p for the IBP.
    pub fn mass_rate(&self, p: usize) -> f64 {
        match &self.kind {
            PriorKind::Ibp => harmonic(p),
            PriorKind::Pibp(t) => digamma(t.total_length() + 1.0) - digamma(1.0),
        }
    }

    /// log λ(z, 𝒯) for one nonzero column.
    pub fn log_lambda(&self, column: &[u8]) -> Result<f64> {
        let m = column.iter().filter(|&&v| v != 0).count();
        if m == 0 {
            return Err(LfmError::DivergentIntegral);
        }
        match &self.kind {
            PriorKind::Ibp => Ok(log_beta_factor(column.len(), m)),
            PriorKind::Pibp(t) => {
                if column.len() != t.num_leaves() {
                    return Err(LfmError::DimensionMismatch {
                        what: "column length vs tree leaves",
                        expected: t.num_leaves(),
                        actual: column.len(),
                    });
                }
                log_lambda_quadrature(column, t, self.quadrature_points)
            }
        }
    }
}

/// H_p = Σ_{j ≤ p} 1/j.
pub fn harmonic(p: usize) -> f64 {
    (1..=p).map(|j| 1.0 / j as f64).sum()
}

/// log[(p − m)!(m − 1)!/p!] = log B(m, p − m + 1).
pub fn log_beta_factor(p: usize, m: usize) -> f64 {
    ln_gamma((p - m + 1) as f64) + ln_gamma(m as f64) - ln_gamma((p + 1) as f64)
}

/// P(z | π, 𝒯) by leaf-to-root pruning, with the root fixed at 0.
pub fn column_prob_given_pi(column: &[u8], pi: f64, tree: &PhyloTree) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(LfmError::invalid(format!(
            "success probability must lie in (0, 1), got {pi}"
        )));
    }
    check_column(column, tree)?;
    let mut scratch = PruneScratch::new(tree.num_nodes());
    Ok(scratch.log_prob(column, (-pi).ln_1p(), tree).exp())
}

/// λ(z, 𝒯) = ∫₀¹ P(z | π, 𝒯) π⁻¹ dπ. For the star tree with unit edges
/// this is the Beta function B(m, p − m + 1).
pub fn lambda_column(column: &[u8], tree: &PhyloTree) -> Result<f64> {
    check_column(column, tree)?;
    if column.iter().all(|&v| v == 0) {
        return Err(LfmError::DivergentIntegral);
    }
    Ok(log_lambda_quadrature(column, tree, DEFAULT_QUADRATURE_POINTS)?.exp())
}

fn check_column(column: &[u8], tree: &PhyloTree) -> Result<()> {
    if column.len() != tree.num_leaves() {
        return Err(LfmError::DimensionMismatch {
            what: "column length vs tree leaves",
            expected: tree.num_leaves(),
            actual: column.len(),
        });
    }
    if column.iter().any(|&v| v > 1) {
        return Err(LfmError::invalid("column entries must be 0 or 1"));
    }
    Ok(())
}

/// Per-node pruning messages: log P(leaves below | node = 0) and whether
/// every leaf below is 1 (which is P(leaves below | node = 1)).
struct PruneScratch {
    log_m0: Vec<f64>,
    all_ones: Vec<bool>,
}

impl PruneScratch {
    fn new(nodes: usize) -> Self {
        Self {
            log_m0: vec![0.0; nodes],
            all_ones: vec![false; nodes],
        }
    }

    /// log P(z | π, 𝒯) given ln(1 − π).
    fn log_prob(&mut self, column: &[u8], log1m_pi: f64, tree: &PhyloTree) -> f64 {
        for &v in tree.postorder() {
            if let Some(j) = tree.object_at(v) {
                if column[j] != 0 {
                    self.log_m0[v] = f64::NEG_INFINITY;
                    self.all_ones[v] = true;
                } else {
                    self.log_m0[v] = 0.0;
                    self.all_ones[v] = false;
                }
                continue;
            }
            let mut acc = 0.0;
            let mut ones = true;
            for &c in tree.children(v) {
                // log P(stay 0 along the edge) = t·ln(1 − π)
                let log_stay = tree.edge_length(c) * log1m_pi;
                let stay = log_stay + self.log_m0[c];
                let term = if self.all_ones[c] {
                    let log_switch = (-log_stay.exp_m1()).ln();
                    log_add_exp(stay, log_switch)
                } else {
                    stay
                };
                acc += term;
                ones &= self.all_ones[c];
            }
            self.log_m0[v] = acc;
            self.all_ones[v] = ones;
        }
        self.log_m0[tree.root()]
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_lambda_quadrature(column: &[u8], tree: &PhyloTree, start_points: usize) -> Result<f64> {
    let mut scratch = PruneScratch::new(tree.num_nodes());
    let mut n = start_points.max(8);
    let mut prev = log_lambda_fixed(column, tree, n, &mut scratch);
    while n < MAX_QUADRATURE_POINTS {
        n *= 2;
        let next = log_lambda_fixed(column, tree, n, &mut scratch);
        if (next - prev).exp_m1().abs() <= LAMBDA_REL_TOL {
            return Ok(next);
        }
        prev = next;
    }
    Err(LfmError::Numerical(format!(
        "lambda quadrature did not converge within {MAX_QUADRATURE_POINTS} nodes"
    )))
}

/// One Gauss-Legendre pass over v ∈ (0, 1) with π = 1 − v^r.
fn log_lambda_fixed(column: &[u8], tree: &PhyloTree, n: usize, scratch: &mut PruneScratch) -> f64 {
    let rule = quadrature::gauss_legendre_unit(n);
    let r = SUBSTITUTION_POWER;
    let mut terms = Vec::with_capacity(n);
    for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
        let ln_v = v.ln();
        let log1m_pi = r * ln_v;
        let ln_pi = (-log1m_pi.exp_m1()).ln();
        let log_p = scratch.log_prob(column, log1m_pi, tree);
        // P/π · dπ/dv, dπ/dv = r v^(r−1)
        terms.push(w.ln() + log_p - ln_pi + r.ln() + (r - 1.0) * ln_v);
    }
    log_sum_exp(&terms)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

fn require_canonical(z: &BinaryFeatureMatrix) -> Result<()> {
    if !z.is_canonical() {
        return Err(LfmError::ContractViolation(
            "prior pmf requires a matrix without all-zero columns".into(),
        ));
    }
    Ok(())
}

fn sum_log_lambda(z: &BinaryFeatureMatrix, spec: &PriorSpec) -> Result<f64> {
    spec.validate(z.p())?;
    z.columns().map(|c| spec.log_lambda(c)).sum()
}

/// log Π(Z) with α integrated out under Gamma(1, 1).
pub fn log_pmf(z: &BinaryFeatureMatrix, spec: &PriorSpec) -> Result<f64> {
    require_canonical(z)?;
    let c1 = spec.mass_rate(z.p()) + 1.0;
    let k = z.k() as f64;
    Ok(-(k + 1.0) * c1.ln() + sum_log_lambda(z, spec)?)
}

/// log Π(Z | α) = −cα + K log α − log K! + Σ log λ_k.
pub fn log_pmf_given_alpha(z: &BinaryFeatureMatrix, alpha: f64, spec: &PriorSpec) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(LfmError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    require_canonical(z)?;
    let k = z.k();
    let c = spec.mass_rate(z.p());
    let mut out = -c * alpha;
    if k > 0 {
        out += k as f64 * alpha.ln() - ln_gamma(k as f64 + 1.0) + sum_log_lambda(z, spec)?;
    }
    Ok(out)
}

/// Π(z_jk = 1 | z_(−j)k). Requires the column to be held by some other
/// object: singleton columns are dropped by the sampler, not resampled.
pub fn conditional_prior_one(
    j: usize,
    k: usize,
    z: &BinaryFeatureMatrix,
    spec: &PriorSpec,
) -> Result<f64> {
    if j >= z.p() || k >= z.k() {
        return Err(LfmError::invalid(format!(
            "entry ({j}, {k}) outside a {}x{} matrix",
            z.p(),
            z.k()
        )));
    }
    let col = z.column(k);
    conditional_prior_one_column(col, j, spec)
}

pub(crate) fn conditional_prior_one_column(col: &[u8], j: usize, spec: &PriorSpec) -> Result<f64> {
    let p = col.len();
    let m_others = col.iter().enumerate().filter(|&(i, &v)| i != j && v != 0).count();
    if m_others == 0 {
        return Err(LfmError::ContractViolation(format!(
            "conditional prior undefined: no object other than {j} has the feature"
        )));
    }
    match spec.kind {
        PriorKind::Ibp => Ok(m_others as f64 / p as f64),
        PriorKind::Pibp(_) => {
            let mut with = col.to_vec();
            with[j] = 1;
            let mut without = col.to_vec();
            without[j] = 0;
            let l1 = spec.log_lambda(&with)?;
            let l0 = spec.log_lambda(&without)?;
            // λ1 / (λ1 + λ0)
            Ok(1.0 / (1.0 + (l0 - l1).exp()))
        }
    }
}

/// A Gamma law in (shape, scale) form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl GammaParams {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rand_distr::Gamma::new(self.shape, self.scale)
            .expect("gamma parameters are positive by construction")
            .sample(rng)
    }
}

/// α | Z ~ Gamma(K + 1, scale (c + 1)⁻¹), the same at every temperature.
pub fn alpha_full_conditional(k: usize, p: usize, spec: &PriorSpec) -> GammaParams {
    GammaParams {
        shape: k as f64 + 1.0,
        scale: 1.0 / (spec.mass_rate(p) + 1.0),
    }
}

/// Total prior mass of all matrices with at most `k_max` columns.
///
/// Every nonzero column pattern is enumerated. Matrices with K columns are
/// enumerated one by one while (2^p − 1)^K stays within budget; beyond that
/// the sum over K-column matrices is taken as the K-th power of the
/// single-column sum, which is exact because the pmf factorizes over columns.
pub fn enumerate_prior_mass(p: usize, k_max: usize, spec: &PriorSpec) -> Result<f64> {
    spec.validate(p)?;
    if p == 0 || p > 20 {
        return Err(LfmError::ResourceExhausted(format!(
            "cannot enumerate column patterns for p = {p}"
        )));
    }
    let patterns = (1u64 << p) - 1;
    if patterns > ENUMERATION_BUDGET {
        return Err(LfmError::ResourceExhausted(format!(
            "{patterns} column patterns exceed the budget of {ENUMERATION_BUDGET}"
        )));
    }
    let mut lambdas = Vec::with_capacity(patterns as usize);
    for code in 1..=patterns {
        let col: Vec<u8> = (0..p).map(|j| ((code >> j) & 1) as u8).collect();
        lambdas.push(spec.log_lambda(&col)?.exp());
    }
    let c1 = spec.mass_rate(p) + 1.0;
    let column_sum: f64 = lambdas.iter().sum();

    let mut total = 0.0;
    let mut explicit = true;
    for k in 0..=k_max {
        let count = (patterns as f64).powi(k as i32);
        explicit &= count <= ENUMERATION_BUDGET as f64;
        let matrices_sum = if explicit {
            sum_products(&lambdas, k)
        } else {
            column_sum.powi(k as i32)
        };
        total += c1.powi(-(k as i32 + 1)) * matrices_sum;
    }
    Ok(total)
}

/// Σ over all K-tuples of patterns of ∏ λ, by explicit enumeration.
fn sum_products(lambdas: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let n = lambdas.len();
    let mut idx = vec![0usize; k];
    let mut total = 0.0;
    loop {
        total += idx.iter().map(|&i| lambdas[i]).product::<f64>();
        let mut pos = 0;
        loop {
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
            if pos == k {
                return total;
            }
        }
    }
}
