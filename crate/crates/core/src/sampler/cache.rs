//! Incrementally maintained G = ZᵀZ, Q = ZᵀSZ and W = SZ for one chain.
//!
//! Flipping z_jk by δ = ±1 touches only row/column k:
//!
//! ```text
//! G' = G + δ(e_k rᵀ + r e_kᵀ) + δ² e_k e_kᵀ        r = old row j of Z
//! Q' = Q + δ(e_k wᵀ + w e_kᵀ) + δ² S_jj e_k e_kᵀ   w = old row j of W
//! W' = W + δ S e_j e_kᵀ
//! ```
//!
//! Writing the change of G as e_k aᵀ + a e_kᵀ with a = δr + (δ²/2)e_k, the
//! inner matrix B = σ_a²G + σ²I moves by a rank-two term, so candidate flips
//! are scored through a 2×2 Woodbury system against an explicit B⁻¹. B⁻¹ is
//! carried across accepted flips by the same update and refactored from a
//! fresh Cholesky factor periodically and whenever K changes.

use crate::error::{LfmError, Result};
use crate::features::BinaryFeatureMatrix;
use crate::linalg::{InnerWorkspace, LowRankTerms, SymMatrix};
use crate::model::gaussian_loglik;

/// Rank-two updates of B⁻¹ allowed before a fresh factorization.
const MAX_RANK_UPDATES: usize = 64;

#[derive(Debug, Clone, Default)]
pub(crate) struct LikelihoodCache {
    k: usize,
    p: usize,
    /// K×K, row-major
    g: Vec<f64>,
    /// K×K, row-major
    q: Vec<f64>,
    /// p×K, column-major
    w: Vec<f64>,
    ws: InnerWorkspace,
    factor: Option<Factor>,
    row: Option<RowTerms>,
}

/// B⁻¹ and derived quantities for the current state and variances.
#[derive(Debug, Clone)]
struct Factor {
    sigma2: f64,
    sigma_a2: f64,
    /// K×K, row-major (symmetric)
    inv: Vec<f64>,
    /// diagonal of B⁻¹QB⁻¹
    r_diag: Vec<f64>,
    log_det_b: f64,
    /// tr(B⁻¹Q)
    tr_binv_q: f64,
    /// rank-two updates applied since the last factorization
    updates: usize,
}

/// O(1) quantities of a single candidate flip.
#[derive(Debug, Clone, Copy)]
struct FlipScalars {
    log_det_d: f64,
    tr_new: f64,
    f00: f64,
    f01: f64,
    f11: f64,
    /// PᵀQ'P as (00, 01, 11)
    h: [f64; 3],
    p0_b: f64,
    p1_b: f64,
    p0_e: f64,
    p1_e: f64,
}

/// Per-row vectors for scoring flips in row j; valid until the next change.
#[derive(Debug, Clone)]
struct RowTerms {
    j: usize,
    /// B⁻¹r
    y: Vec<f64>,
    /// B⁻¹w
    v: Vec<f64>,
    /// B⁻¹Qy
    u: Vec<f64>,
    r_y: f64,
    y_w: f64,
    y_q_y: f64,
}

/// Sufficient pieces of the dataset used by the likelihood.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LikelihoodInputs<'a> {
    pub s: &'a SymMatrix,
    pub n: usize,
    pub trace_s: f64,
    pub sigma2: f64,
    pub sigma_a2: f64,
}

impl<'a> LikelihoodInputs<'a> {
    fn loglik(&self, p: usize, terms: LowRankTerms) -> f64 {
        gaussian_loglik(self.n, p, terms.log_det, terms.trace_term)
    }
}

impl LikelihoodCache {
    pub fn build(z: &BinaryFeatureMatrix, s: &SymMatrix) -> Self {
        let mut cache = Self::default();
        cache.rebuild(z, s);
        cache
    }

    pub fn rebuild(&mut self, z: &BinaryFeatureMatrix, s: &SymMatrix) {
        self.invalidate();
        let p = z.p();
        let k = z.k();
        self.p = p;
        self.k = k;
        self.w.clear();
        self.w.resize(p * k, 0.0);
        for (c, col) in z.columns().enumerate() {
            let dst = &mut self.w[c * p..(c + 1) * p];
            for (j, &v) in col.iter().enumerate() {
                if v != 0 {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += s.get(i, j);
                    }
                }
            }
        }
        self.g.clear();
        self.g.resize(k * k, 0.0);
        self.q.clear();
        self.q.resize(k * k, 0.0);
        for a in 0..k {
            let ca = z.column(a);
            for b in a..k {
                let cb = z.column(b);
                let mut gab = 0.0;
                let mut qab = 0.0;
                for j in 0..p {
                    if ca[j] != 0 {
                        gab += cb[j] as f64;
                        qab += self.w[b * p + j];
                    }
                }
                self.g[a * k + b] = gab;
                self.g[b * k + a] = gab;
                self.q[a * k + b] = qab;
                self.q[b * k + a] = qab;
            }
        }
    }

    pub fn loglik(&mut self, inputs: &LikelihoodInputs<'_>) -> Result<f64> {
        self.ensure_factor(inputs)?;
        let f = self.factor.as_ref().expect("factor ensured");
        let terms = self.base_terms(f, inputs);
        Ok(inputs.loglik(self.p, terms))
    }

    fn base_terms(&self, f: &Factor, inputs: &LikelihoodInputs<'_>) -> LowRankTerms {
        LowRankTerms {
            log_det: (self.p as f64 - self.k as f64) * inputs.sigma2.ln() + f.log_det_b,
            trace_term: (inputs.trace_s - inputs.sigma_a2 * f.tr_binv_q) / inputs.sigma2,
        }
    }

    fn invalidate(&mut self) {
        self.factor = None;
        self.row = None;
    }

    fn ensure_factor(&mut self, inputs: &LikelihoodInputs<'_>) -> Result<()> {
        if let Some(f) = &self.factor {
            if f.sigma2 == inputs.sigma2 && f.sigma_a2 == inputs.sigma_a2 && f.updates < MAX_RANK_UPDATES {
                return Ok(());
            }
        }
        self.row = None;
        let k = self.k;
        let log_det_b = self.ws.factor(&self.g, k, inputs.sigma2, inputs.sigma_a2)?;
        let mut inv = vec![0.0; k * k];
        let mut e = vec![0.0; k];
        for c in 0..k {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            self.ws.solve_in_place(&mut e);
            for (i, &x) in e.iter().enumerate() {
                inv[i * k + c] = x;
            }
        }
        for a in 0..k {
            for b in 0..a {
                let m = 0.5 * (inv[a * k + b] + inv[b * k + a]);
                inv[a * k + b] = m;
                inv[b * k + a] = m;
            }
        }
        let mut tr_binv_q = 0.0;
        for (x, q) in inv.iter().zip(&self.q) {
            tr_binv_q += x * q;
        }
        // R_cc = inv_cᵀ Q inv_c
        let mut r_diag = vec![0.0; k];
        for (c, rd) in r_diag.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..k {
                let qa = &self.q[a * k..(a + 1) * k];
                let mut t = 0.0;
                for b in 0..k {
                    t += qa[b] * inv[b * k + c];
                }
                acc += inv[a * k + c] * t;
            }
            *rd = acc;
        }
        self.factor = Some(Factor {
            sigma2: inputs.sigma2,
            sigma_a2: inputs.sigma_a2,
            inv,
            r_diag,
            log_det_b,
            tr_binv_q,
            updates: 0,
        });
        Ok(())
    }

    fn ensure_row(&mut self, z: &BinaryFeatureMatrix, j: usize, inputs: &LikelihoodInputs<'_>) -> Result<()> {
        self.ensure_factor(inputs)?;
        if self.row.as_ref().is_some_and(|r| r.j == j) {
            return Ok(());
        }
        let k = self.k;
        let p = self.p;
        let f = self.factor.as_ref().expect("factor just ensured");
        let r: Vec<f64> = (0..k).map(|c| z.get(j, c) as f64).collect();
        let w: Vec<f64> = (0..k).map(|c| self.w[c * p + j]).collect();
        let mat_vec = |m: &[f64], x: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|a| m[a * k..(a + 1) * k].iter().zip(x).map(|(s, t)| s * t).sum())
                .collect()
        };
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(s, t)| s * t).sum() };
        let y = mat_vec(&f.inv, &r);
        let v = mat_vec(&f.inv, &w);
        let qy = mat_vec(&self.q, &y);
        let u = mat_vec(&f.inv, &qy);
        self.row = Some(RowTerms {
            j,
            r_y: dot(&r, &y),
            y_w: dot(&y, &w),
            y_q_y: dot(&y, &qy),
            y,
            v,
            u,
        });
        Ok(())
    }

    fn flip_scalars(&self, j: usize, col: usize, delta: f64, inputs: &LikelihoodInputs<'_>) -> Result<FlipScalars> {
        let f = self.factor.as_ref().expect("factor ensured");
        let rt = self.row.as_ref().expect("row terms ensured");
        let k = self.k;
        let (d, d2) = (delta, delta * delta);
        let s_jj = inputs.s.get(j, j);
        let inv_kk = f.inv[col * k + col];
        let y_k = rt.y[col];
        // P = B⁻¹U with U = [e_k, a]; M = UᵀP
        let p1_k = d * y_k + 0.5 * d2 * inv_kk;
        let m00 = inv_kk;
        let m01 = p1_k;
        let m11 = d2 * rt.r_y + d2 * d * y_k + 0.25 * d2 * d2 * inv_kk;
        // D = I + CM with C = σ_a²[[0,1],[1,0]]
        let sa2 = inputs.sigma_a2;
        let (d00, d01, d10, d11) = (1.0 + sa2 * m01, sa2 * m11, sa2 * m00, 1.0 + sa2 * m01);
        let det_d = d00 * d11 - d01 * d10;
        if !det_d.is_finite() || det_d <= 0.0 {
            return Err(LfmError::Numerical(format!(
                "rank-two update lost positive definiteness (det = {det_d})"
            )));
        }
        // b = δw + (δ²S_jj/2)e_k; Pᵀb and Pᵀe_k
        let p0_b = d * rt.v[col] + 0.5 * d2 * s_jj * inv_kk;
        let p1_b = d2 * rt.y_w + 0.5 * d2 * d * s_jj * y_k + 0.5 * d2 * d * rt.v[col]
            + 0.25 * d2 * d2 * s_jj * inv_kk;
        let (p0_e, p1_e) = (inv_kk, p1_k);
        // H = PᵀQ'P
        let r_kk = f.r_diag[col];
        let u_k = rt.u[col];
        let h00 = r_kk + 2.0 * p0_e * p0_b;
        let h01 = d * u_k + 0.5 * d2 * r_kk + p0_e * p1_b + p0_b * p1_e;
        let h11 = d2 * rt.y_q_y + d2 * d * u_k + 0.25 * d2 * d2 * r_kk + 2.0 * p1_e * p1_b;
        // tr(D⁻¹CH), CH = σ_a²[[h01, h11],[h00, h01]]
        let (c00, c01, c10, c11) = (sa2 * h01, sa2 * h11, sa2 * h00, sa2 * h01);
        let tr_dinv_ch = (d11 * c00 - d01 * c10 - d10 * c01 + d00 * c11) / det_d;
        // F = (C⁻¹ + M)⁻¹, so that B'⁻¹ = B⁻¹ − P F Pᵀ
        let e01 = m01 + 1.0 / sa2;
        let det_e = m00 * m11 - e01 * e01;
        Ok(FlipScalars {
            log_det_d: det_d.ln(),
            tr_new: f.tr_binv_q + 2.0 * p0_b - tr_dinv_ch,
            f00: m11 / det_e,
            f01: -e01 / det_e,
            f11: m00 / det_e,
            h: [h00, h01, h11],
            p0_b,
            p1_b,
            p0_e,
            p1_e,
        })
    }

    /// Log-likelihood if z_jk were changed by `delta`, without committing.
    pub fn loglik_with_flip(
        &mut self,
        z: &BinaryFeatureMatrix,
        j: usize,
        col: usize,
        delta: f64,
        inputs: &LikelihoodInputs<'_>,
    ) -> Result<f64> {
        self.ensure_row(z, j, inputs)?;
        let fs = self.flip_scalars(j, col, delta, inputs)?;
        let f = self.factor.as_ref().expect("factor ensured");
        let terms = LowRankTerms {
            log_det: (self.p as f64 - self.k as f64) * inputs.sigma2.ln() + f.log_det_b + fs.log_det_d,
            trace_term: (inputs.trace_s - inputs.sigma_a2 * fs.tr_new) / inputs.sigma2,
        };
        Ok(inputs.loglik(self.p, terms))
    }

    /// Moves B⁻¹, log det B, tr(B⁻¹Q) and diag(B⁻¹QB⁻¹) across a flip in
    /// O(K²). Must run before G, Q and W change.
    fn update_factor_for_flip(
        &mut self,
        z: &BinaryFeatureMatrix,
        j: usize,
        col: usize,
        delta: f64,
        inputs: &LikelihoodInputs<'_>,
    ) -> Result<()> {
        self.ensure_row(z, j, inputs)?;
        let fs = self.flip_scalars(j, col, delta, inputs)?;
        let k = self.k;
        let (d, d2) = (delta, delta * delta);
        let s_jj = inputs.s.get(j, j);
        let rt = self.row.take().expect("row terms ensured");
        let f = self.factor.as_mut().expect("factor ensured");
        let p0: Vec<f64> = (0..k).map(|a| f.inv[a * k + col]).collect();
        let p1: Vec<f64> = (0..k).map(|a| d * rt.y[a] + 0.5 * d2 * p0[a]).collect();
        // B⁻¹Q'P, column by column
        let q_p0: Vec<f64> = (0..k)
            .map(|a| self.q[a * k..(a + 1) * k].iter().zip(&p0).map(|(x, y)| x * y).sum())
            .collect();
        let nqp0: Vec<f64> = (0..k)
            .map(|a| f.inv[a * k..(a + 1) * k].iter().zip(&q_p0).map(|(x, y)| x * y).sum())
            .collect();
        let nb: Vec<f64> = (0..k).map(|a| d * rt.v[a] + 0.5 * d2 * s_jj * p0[a]).collect();
        let mut nq_p = Vec::with_capacity(k);
        for a in 0..k {
            let nqp1 = d * rt.u[a] + 0.5 * d2 * nqp0[a];
            nq_p.push((
                nqp0[a] + p0[a] * fs.p0_b + nb[a] * fs.p0_e,
                nqp1 + p0[a] * fs.p1_b + nb[a] * fs.p1_e,
            ));
        }
        let [h00, h01, h11] = fs.h;
        for c in 0..k {
            let fc0 = fs.f00 * p0[c] + fs.f01 * p1[c];
            let fc1 = fs.f01 * p0[c] + fs.f11 * p1[c];
            let quad = fc0 * fc0 * h00 + 2.0 * fc0 * fc1 * h01 + fc1 * fc1 * h11;
            let (a0, a1) = nq_p[c];
            f.r_diag[c] += 2.0 * f.inv[col * k + c] * nb[c] - 2.0 * (a0 * fc0 + a1 * fc1) + quad;
        }
        for a in 0..k {
            let fa0 = fs.f00 * p0[a] + fs.f01 * p1[a];
            let fa1 = fs.f01 * p0[a] + fs.f11 * p1[a];
            for c in 0..k {
                f.inv[a * k + c] -= fa0 * p0[c] + fa1 * p1[c];
            }
        }
        f.log_det_b += fs.log_det_d;
        f.tr_binv_q = fs.tr_new;
        f.updates += 1;
        Ok(())
    }

    /// Commits a flip. `z` must still hold the value before the flip.
    pub fn flip(
        &mut self,
        z: &BinaryFeatureMatrix,
        j: usize,
        col: usize,
        delta: f64,
        inputs: &LikelihoodInputs<'_>,
    ) -> Result<()> {
        let valid = self
            .factor
            .as_ref()
            .is_some_and(|f| f.sigma2 == inputs.sigma2 && f.sigma_a2 == inputs.sigma_a2);
        if valid {
            self.update_factor_for_flip(z, j, col, delta, inputs)?;
        } else {
            self.invalidate();
        }
        self.row = None;
        let s = inputs.s;
        apply_flip(
            &mut self.g,
            &mut self.q,
            &self.w,
            self.k,
            self.p,
            z,
            j,
            col,
            delta,
            s.get(j, j),
        );
        let p = self.p;
        for (i, wv) in self.w[col * p..(col + 1) * p].iter_mut().enumerate() {
            *wv += delta * s.get(i, j);
        }
        Ok(())
    }

    pub fn remove_column(&mut self, col: usize) {
        self.invalidate();
        let k = self.k;
        let p = self.p;
        remove_row_col(&mut self.g, k, col);
        remove_row_col(&mut self.q, k, col);
        self.w.drain(col * p..(col + 1) * p);
        self.k -= 1;
    }

    /// Appends a singleton column at row j. `z` must not yet contain it.
    pub fn push_singleton(&mut self, z: &BinaryFeatureMatrix, j: usize, s: &SymMatrix) {
        self.invalidate();
        let k = self.k;
        let p = self.p;
        let new_k = k + 1;
        let mut g = vec![0.0; new_k * new_k];
        let mut q = vec![0.0; new_k * new_k];
        for a in 0..k {
            g[a * new_k..a * new_k + k].copy_from_slice(&self.g[a * k..(a + 1) * k]);
            q[a * new_k..a * new_k + k].copy_from_slice(&self.q[a * k..(a + 1) * k]);
            let gz = z.get(j, a) as f64;
            let qw = self.w[a * p + j];
            g[a * new_k + k] = gz;
            g[k * new_k + a] = gz;
            q[a * new_k + k] = qw;
            q[k * new_k + a] = qw;
        }
        g[k * new_k + k] = 1.0;
        q[k * new_k + k] = s.get(j, j);
        self.g = g;
        self.q = q;
        self.w.extend((0..p).map(|i| s.get(i, j)));
        self.k = new_k;
    }

    /// Log-likelihoods after appending 0..=k_max singleton columns at row j.
    ///
    /// Appending k copies of e_j changes Σ by kσ_a² e_j e_jᵀ, so each
    /// candidate follows from Sherman–Morrison and the matrix determinant
    /// lemma applied to the current state.
    pub fn singleton_logliks(
        &mut self,
        z: &BinaryFeatureMatrix,
        j: usize,
        k_max: usize,
        inputs: &LikelihoodInputs<'_>,
    ) -> Result<Vec<f64>> {
        self.ensure_row(z, j, inputs)?;
        let f = self.factor.as_ref().expect("factor ensured");
        let rt = self.row.as_ref().expect("row terms ensured");
        let base = self.base_terms(f, inputs);
        let (s2, sa2) = (inputs.sigma2, inputs.sigma_a2);
        // (Σ⁻¹)_jj and (Σ⁻¹SΣ⁻¹)_jj
        let d = (1.0 - sa2 * rt.r_y) / s2;
        let u_s_u = (inputs.s.get(j, j) - 2.0 * sa2 * rt.y_w + sa2 * sa2 * rt.y_q_y) / (s2 * s2);
        Ok((0..=k_max)
            .map(|extra| {
                let t = extra as f64 * sa2;
                let denom = 1.0 + t * d;
                let terms = LowRankTerms {
                    log_det: base.log_det + denom.ln(),
                    trace_term: base.trace_term - t * u_s_u / denom,
                };
                inputs.loglik(self.p, terms)
            })
            .collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_flip(
    g: &mut [f64],
    q: &mut [f64],
    w: &[f64],
    k: usize,
    p: usize,
    z: &BinaryFeatureMatrix,
    j: usize,
    col: usize,
    delta: f64,
    s_jj: f64,
) {
    for a in 0..k {
        let ra = z.get(j, a) as f64;
        let wa = w[a * p + j];
        if a == col {
            g[col * k + col] += 2.0 * delta * ra + delta * delta;
            q[col * k + col] += 2.0 * delta * wa + delta * delta * s_jj;
        } else {
            g[col * k + a] += delta * ra;
            g[a * k + col] += delta * ra;
            q[col * k + a] += delta * wa;
            q[a * k + col] += delta * wa;
        }
    }
}

fn remove_row_col(m: &mut Vec<f64>, k: usize, col: usize) {
    let mut out = Vec::with_capacity((k - 1) * (k - 1));
    for a in 0..k {
        if a == col {
            continue;
        }
        for b in 0..k {
            if b != col {
                out.push(m[a * k + b]);
            }
        }
    }
    *m = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{marginal_log_likelihood, Dataset, ModelParams};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BinaryFeatureMatrix, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = BinaryFeatureMatrix::from_columns(
            5,
            &[vec![1, 1, 0, 0, 1], vec![0, 1, 1, 0, 0], vec![1, 0, 0, 0, 0]],
        )
        .unwrap();
        let x = DMatrix::from_fn(7, 5, |_, _| rng.random_range(-2.0..2.0));
        (z, Dataset::new(x).unwrap())
    }

    fn inputs<'a>(d: &'a Dataset, params: &ModelParams) -> LikelihoodInputs<'a> {
        LikelihoodInputs {
            s: d.s(),
            n: d.n(),
            trace_s: d.s().trace(),
            sigma2: params.sigma2,
            sigma_a2: params.sigma_a2,
        }
    }

    #[test]
    fn incremental_updates_match_fresh_evaluation() {
        let (mut z, d) = setup();
        let params = ModelParams::new(0.7, 1.8).unwrap();
        let inp = inputs(&d, &params);
        let mut cache = LikelihoodCache::build(&z, d.s());
        let fresh = marginal_log_likelihood(&z, &d, &params).unwrap();
        assert!((cache.loglik(&inp).unwrap() - fresh).abs() < 1e-10);

        // flip (3, 1) on
        let predicted = cache.loglik_with_flip(&z, 3, 1, 1.0, &inp).unwrap();
        cache.flip(&z, 3, 1, 1.0, &inp).unwrap();
        z.set(3, 1, true);
        let fresh = marginal_log_likelihood(&z, &d, &params).unwrap();
        assert!((predicted - fresh).abs() < 1e-10);
        assert!((cache.loglik(&inp).unwrap() - fresh).abs() < 1e-10);

        // flip (0, 0) off
        cache.flip(&z, 0, 0, -1.0, &inp).unwrap();
        z.set(0, 0, false);
        assert!(
            (cache.loglik(&inp).unwrap() - marginal_log_likelihood(&z, &d, &params).unwrap()).abs()
                < 1e-10
        );

        cache.remove_column(2);
        z.remove_column(2);
        assert!(
            (cache.loglik(&inp).unwrap() - marginal_log_likelihood(&z, &d, &params).unwrap()).abs()
                < 1e-10
        );
    }

    #[test]
    fn singleton_candidates_match_fresh_evaluation() {
        let (z, d) = setup();
        let params = ModelParams::new(1.3, 0.6).unwrap();
        let inp = inputs(&d, &params);
        let mut cache = LikelihoodCache::build(&z, d.s());
        let cands = cache.singleton_logliks(&z, 4, 3, &inp).unwrap();
        let mut grown = z.clone();
        let mut grown_cache = cache.clone();
        for (extra, &cand) in cands.iter().enumerate() {
            let fresh = marginal_log_likelihood(&grown, &d, &params).unwrap();
            assert!((cand - fresh).abs() < 1e-9, "extra = {extra}");
            assert!((grown_cache.loglik(&inp).unwrap() - fresh).abs() < 1e-9);
            grown_cache.push_singleton(&grown, 4, d.s());
            grown.push_singleton(4);
        }
    }

    #[test]
    fn random_flip_sequences_track_fresh_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let p = rng.random_range(2..12);
            let k = rng.random_range(1..7);
            let cols: Vec<Vec<u8>> = (0..k)
                .map(|_| (0..p).map(|_| u8::from(rng.random_bool(0.4))).collect())
                .collect();
            let mut z = BinaryFeatureMatrix::from_columns(p, &cols).unwrap();
            let x = DMatrix::from_fn(rng.random_range(1..9), p, |_, _| rng.random_range(-2.0..2.0));
            let d = Dataset::new(x).unwrap();
            let params = ModelParams::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)).unwrap();
            let inp = inputs(&d, &params);
            let mut cache = LikelihoodCache::build(&z, d.s());
            for _ in 0..40 {
                let j = rng.random_range(0..p);
                let c = rng.random_range(0..k);
                let delta = if z.get(j, c) == 0 { 1.0 } else { -1.0 };
                let predicted = cache.loglik_with_flip(&z, j, c, delta, &inp).unwrap();
                let mut alt = z.clone();
                alt.set(j, c, delta > 0.0);
                let fresh = marginal_log_likelihood(&alt, &d, &params).unwrap();
                assert!(
                    (predicted - fresh).abs() < 1e-8 * fresh.abs().max(1.0),
                    "trial {trial}: {predicted} vs {fresh}"
                );
                if rng.random_bool(0.5) {
                    cache.flip(&z, j, c, delta, &inp).unwrap();
                    z = alt;
                }
            }
        }
    }
}
