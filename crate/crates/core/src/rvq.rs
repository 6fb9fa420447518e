//! Residual vector quantization with low-rank projections.
//!
//! Each level projects its input residual `r` (`[F, C]`) to `p = r·W_in`
//! (`[F, M]`), snaps every row to its nearest codebook entry `e`, and maps
//! back with `z̃ = e·W_out`. The straight-through estimator makes the
//! backward pass treat the snap as the identity, so the chain is
//! differentiable with respect to the encoder output.

use rand::Rng;

use crate::Real;
use crate::autodiff::{Graph, Var};
use crate::config::Style;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const EMA_DECAY: Real = 0.99;
pub const EXPIRY_THRESHOLD: Real = 0.90;

/// One quantizer level. `ema` is a non-trainable `[V]` entry of the store.
#[derive(Debug, Clone)]
pub struct VqLevel {
    pub w_in: ParamId,
    pub w_out: ParamId,
    pub codebook: ParamId,
    pub ema: ParamId,
}

impl VqLevel {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, code_dim: usize, vocab: usize, rng: &mut R) -> Self {
        let w_in = store.add_uniform(format!("{name}.w_in"), &[dim, code_dim], rng);
        let w_out = store.add_uniform(format!("{name}.w_out"), &[code_dim, dim], rng);
        let codebook = store.add_uniform(format!("{name}.codebook"), &[vocab, code_dim], rng);
        let ema = store.add(format!("{name}.ema"), Tensor::full(&[vocab], 1.0), false);
        Self {
            w_in,
            w_out,
            codebook,
            ema,
        }
    }

    pub fn vocab(&self, store: &ParamStore) -> usize {
        store.get(self.codebook).rows()
    }
}

/// Index of the codebook row nearest to `p` in squared Euclidean distance.
/// Ties go to the lowest index.
pub fn nearest(codebook: &Tensor, p: &[Real]) -> usize {
    let mut best = 0;
    let mut best_d = Real::INFINITY;
    for j in 0..codebook.rows() {
        let d: Real = codebook.row(j).iter().zip(p).map(|(e, x)| (x - e) * (x - e)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Quantizes a single residual vector: `(index, W_out e_index)`.
pub fn vq_lookup(store: &ParamStore, level: &VqLevel, r: &[Real]) -> Result<(usize, Vec<Real>)> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "vq_lookup".into() });
    }
    let w_in = store.get(level.w_in);
    let r = Tensor::matrix(1, r.len(), r.to_vec())?;
    let p = r.matmul(w_in)?;
    let idx = nearest(store.get(level.codebook), p.data());
    let e = store.get(level.codebook).slice_rows(idx, 1);
    let z = e.matmul(store.get(level.w_out))?;
    Ok((idx, z.into_data()))
}

/// Codes and snap offsets captured at a reference point.
///
/// Replaying them turns each level into `p + (e₀ − p₀)`, a smooth map whose
/// value at the reference equals the quantized output and whose derivative is
/// the straight-through identity. Finite differences can then be compared
/// against autodiff across the whole quantizer.
#[derive(Debug, Clone)]
pub struct FrozenCodes {
    /// Indices and straight-through offset `e − p` per level.
    pub levels: Vec<(Vec<usize>, Tensor)>,
    /// `(p, e)` per level at freezing time.
    pub anchors: Vec<(Tensor, Tensor)>,
}

#[derive(Debug, Clone, Copy)]
pub enum QuantMode<'f> {
    Nearest,
    Frozen(&'f FrozenCodes),
}

/// Graph handles and recorded values of one level.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    /// Input residual `r_i` (`[F, C]`).
    pub residual: Tensor,
    /// `p_i = r_i · W_in`, still on the graph.
    pub projected: Var,
    /// `e_{v_i}` gathered from the codebook (gradient reaches the codebook).
    pub code: Var,
    /// `z̃_i` (`[F, C]`).
    pub output: Var,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct QuantizeResult {
    /// Sum of all active level outputs, ascending level order.
    pub z: Var,
    /// Output of the semantic level alone (mimi style).
    pub semantic: Option<Var>,
    pub levels: Vec<LevelOutput>,
    pub frames: usize,
}

impl QuantizeResult {
    /// Frame-major `F × k` index matrix.
    pub fn index_grid(&self) -> Vec<u32> {
        let k = self.levels.len();
        let mut out = vec![0u32; self.frames * k];
        for (l, lv) in self.levels.iter().enumerate() {
            for (f, &i) in lv.indices.iter().enumerate() {
                out[f * k + l] = i as u32;
            }
        }
        out
    }

    pub fn freeze(&self, g: &Graph<'_>) -> FrozenCodes {
        FrozenCodes {
            anchors: self
                .levels
                .iter()
                .map(|l| (g.value(l.projected).clone(), g.value(l.code).clone()))
                .collect(),
            levels: self
                .levels
                .iter()
                .map(|l| {
                    let (p, e) = (g.value(l.projected), g.value(l.code));
                    let off = Tensor::new(
                        p.shape().to_vec(),
                        e.data().iter().zip(p.data()).map(|(e, p)| e - p).collect(),
                    )
                    .expect("same shape");
                    (l.indices.clone(), off)
                })
                .collect(),
        }
    }
}

/// Per-level quantizers plus topology.
///
/// In mimi style `levels[0]` is the semantic quantizer and `levels[1..]` the
/// acoustic chain; both read the encoder output.
#[derive(Debug, Clone)]
pub struct QuantizerState {
    pub style: Style,
    pub levels: Vec<VqLevel>,
}

impl QuantizerState {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        style: Style,
        levels: usize,
        dim: usize,
        code_dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        let levels = (0..levels)
            .map(|i| VqLevel::new(store, &format!("{name}.{i}"), dim, code_dim, vocab, rng))
            .collect();
        Self { style, levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.levels.len() {
            return Err(Error::KOutOfRange {
                k,
                max: self.levels.len(),
            });
        }
        Ok(())
    }

    fn level<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        li: usize,
        r: Var,
        mode: QuantMode<'_>,
    ) -> Result<LevelOutput> {
        let lv = &self.levels[li];
        let w_in = g.param(store, lv.w_in);
        let projected = g.matmul(r, w_in)?;
        let table = g.param(store, lv.codebook);
        let (indices, q) = match mode {
            QuantMode::Nearest => {
                let p = g.value(projected);
                let cb = g.value(table);
                let idx: Vec<usize> = (0..p.rows()).map(|f| nearest(cb, p.row(f))).collect();
                let code = g.embedding(table, &idx)?;
                let snapped = g.value(code).clone();
                let q = g.straight_through(projected, snapped)?;
                (idx, (q, code))
            }
            QuantMode::Frozen(fc) => {
                let (idx, off) = fc
                    .levels
                    .get(li)
                    .ok_or_else(|| Error::InvalidArgument(format!("no frozen codes for level {li}")))?;
                let code = g.embedding(table, idx)?;
                let off = g.constant(off.clone());
                let q = g.add(projected, off)?;
                (idx.clone(), (q, code))
            }
        };
        let (q, code) = q;
        let w_out = g.param(store, lv.w_out);
        let output = g.matmul(q, w_out)?;
        Ok(LevelOutput {
            residual: g.value(r).clone(),
            projected,
            code,
            output,
            indices,
        })
    }

    /// Quantizes `z_e` (`[F, C]`) with the first `k` levels.
    pub fn quantize<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        z_e: Var,
        k: usize,
        mode: QuantMode<'_>,
    ) -> Result<QuantizeResult> {
        self.check_k(k)?;
        if !g.value(z_e).is_finite() {
            return Err(Error::NonFinite { op: "rvq_quantize".into() });
        }
        let frames = g.value(z_e).rows();
        let mut levels = Vec::with_capacity(k);
        let (chain, semantic) = match self.style {
            Style::Dac => (0..k, None),
            Style::Mimi => {
                let s = self.level(g, store, 0, z_e, mode)?;
                let out = s.output;
                levels.push(s);
                (1..k, Some(out))
            }
        };
        let mut r = z_e;
        for li in chain {
            let lv = self.level(g, store, li, r, mode)?;
            r = g.sub(r, lv.output)?;
            levels.push(lv);
        }
        let mut z = levels[0].output;
        for lv in &levels[1..] {
            z = g.add(z, lv.output)?;
        }
        Ok(QuantizeResult {
            z,
            semantic,
            levels,
            frames,
        })
    }

    /// Column-convention Jacobian `∂z_k/∂z_e` of the straight-through chain:
    /// `Σ_i J_i ∏_{j<i} (I − J_j)` with `J_i = W_outᵀ W_inᵀ`, later factors on
    /// the left.
    pub fn ste_jacobian_closed_form(&self, store: &ParamStore, k: usize) -> Result<Vec<Vec<f64>>> {
        if self.style != Style::Dac {
            return Err(Error::InvalidArgument(
                "closed-form Jacobian is defined for the dac topology only".into(),
            ));
        }
        self.check_k(k)?;
        let c = store.get(self.levels[0].w_in).rows();
        let eye = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
        };
        let mul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let n = a.len();
            let mut o = vec![vec![0.0; n]; n];
            for i in 0..n {
                for (l, bl) in b.iter().enumerate() {
                    let av = a[i][l];
                    for j in 0..n {
                        o[i][j] += av * bl[j];
                    }
                }
            }
            o
        };
        let mut total = vec![vec![0.0; c]; c];
        let mut prefix = eye(c);
        for lv in &self.levels[..k] {
            let (wi, wo) = (store.get(lv.w_in), store.get(lv.w_out));
            let m = wi.cols();
            // J = (W_in W_out)ᵀ
            let mut j_i = vec![vec![0.0; c]; c];
            for a in 0..c {
                for b in 0..c {
                    let mut s = 0.0;
                    for t in 0..m {
                        s += wi.data()[b * m + t] as f64 * wo.data()[t * c + a] as f64;
                    }
                    j_i[a][b] = s;
                }
            }
            let term = mul(&j_i, &prefix);
            for a in 0..c {
                for b in 0..c {
                    total[a][b] += term[a][b];
                }
            }
            let mut step = eye(c);
            for a in 0..c {
                for b in 0..c {
                    step[a][b] -= j_i[a][b];
                }
            }
            prefix = mul(&step, &prefix);
        }
        Ok(total)
    }

    /// Sets each active level's codebook from projections of that level's
    /// residuals on `z_e`, walking the chain so later levels see the
    /// residuals left by the freshly initialized earlier ones.
    pub fn init_from_batch<R: Rng>(&self, store: &mut ParamStore, z_e: &Tensor, rng: &mut R) -> Result<()> {
        if z_e.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut r = z_e.clone();
        for (li, lv) in self.levels.iter().enumerate() {
            let input = if self.style == Style::Mimi && li <= 1 { z_e.clone() } else { r.clone() };
            let p = input.matmul(store.get(lv.w_in))?;
            let vocab = lv.vocab(store);
            let cb = store.get_mut(lv.codebook);
            for j in 0..vocab {
                let src = rng.random_range(0..p.rows());
                cb.row_mut(j).copy_from_slice(p.row(src));
            }
            let cb = store.get(lv.codebook);
            let mut z = Tensor::zeros(&[p.rows(), p.cols()]);
            for f in 0..p.rows() {
                let idx = nearest(cb, p.row(f));
                z.row_mut(f).copy_from_slice(cb.row(idx));
            }
            let z = z.matmul(store.get(lv.w_out))?;
            if self.style == Style::Mimi && li == 0 {
                continue;
            }
            r = Tensor::new(
                input.shape().to_vec(),
                input.data().iter().zip(z.data()).map(|(a, b)| a - b).collect(),
            )?;
        }
        Ok(())
    }
}

/// Codebook and commitment losses summed over levels, averaged over frames.
///
/// `L_vq = Σ‖sg[p_i] − e_i‖²` moves codebooks; `L_commit = Σ‖p_i − sg[e_i]‖²`
/// moves the encoder side.
pub fn vq_losses(g: &mut Graph<'_>, result: &QuantizeResult) -> Result<(Var, Var)> {
    let frames = result.frames.max(1) as Real;
    let mut vq: Option<Var> = None;
    let mut commit: Option<Var> = None;
    for lv in &result.levels {
        let p_sg = g.detach(lv.projected);
        let e_sg = g.detach(lv.code);
        let d = g.sub(p_sg, lv.code)?;
        let a = g.sum_sq(d);
        let d = g.sub(lv.projected, e_sg)?;
        let b = g.sum_sq(d);
        vq = Some(match vq {
            Some(v) => g.add(v, a)?,
            None => a,
        });
        commit = Some(match commit {
            Some(v) => g.add(v, b)?,
            None => b,
        });
    }
    let vq = vq.ok_or(Error::EmptyInput)?;
    let commit = commit.ok_or(Error::EmptyInput)?;
    Ok((g.scale(vq, 1.0 / frames), g.scale(commit, 1.0 / frames)))
}

/// `ema ← 0.99·ema + 0.01·count·V/total` for one level.
pub fn usage_update(ema: &mut [Real], indices: &[usize]) {
    let v = ema.len();
    let mut counts = vec![0u32; v];
    for &i in indices {
        counts[i] += 1;
    }
    let total = indices.len();
    let norm = if total == 0 { 0.0 } else { v as Real / total as Real };
    for (e, &c) in ema.iter_mut().zip(&counts) {
        *e = EMA_DECAY * *e + (1.0 - EMA_DECAY) * c as Real * norm;
    }
}

/// Replaces every entry whose usage fell below the threshold with the
/// projection `x·W_in` of a uniformly drawn row of `latents` and resets its
/// usage to 1. Returns the number of entries replaced.
pub fn expire_and_reinit<R: Rng>(
    store: &mut ParamStore,
    level: &VqLevel,
    latents: &Tensor,
    rng: &mut R,
) -> Result<usize> {
    let stale: Vec<usize> = store
        .get(level.ema)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &e)| e < EXPIRY_THRESHOLD)
        .map(|(i, _)| i)
        .collect();
    if stale.is_empty() {
        return Ok(0);
    }
    if latents.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let w_in = store.get(level.w_in).clone();
    for &j in &stale {
        let src = rng.random_range(0..latents.rows());
        let p = latents.slice_rows(src, 1).matmul(&w_in)?;
        store.get_mut(level.codebook).row_mut(j).copy_from_slice(p.data());
        store.get_mut(level.ema).data_mut()[j] = 1.0;
    }
    Ok(stale.len())
}

/// Mean row norm `‖r_i‖` per active level.
pub fn residual_norm_profile(result: &QuantizeResult) -> Vec<Real> {
    result
        .levels
        .iter()
        .map(|l| {
            let r = &l.residual;
            let n = r.rows().max(1);
            let s: f64 = (0..r.rows())
                .map(|f| r.row(f).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
                .sum();
            (s / n as f64) as Real
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_level(store: &mut ParamStore, rows: &[[Real; 2]]) -> VqLevel {
        let n = store.len();
        let w_in = store.add(format!("{n}.w_in"), Tensor::eye(2), true);
        let w_out = store.add(format!("{n}.w_out"), Tensor::eye(2), true);
        let data = rows.iter().flatten().copied().collect();
        let codebook = store.add(format!("{n}.cb"), Tensor::matrix(rows.len(), 2, data).unwrap(), true);
        let ema = store.add(format!("{n}.ema"), Tensor::full(&[rows.len()], 1.0), false);
        VqLevel {
            w_in,
            w_out,
            codebook,
            ema,
        }
    }

    #[test]
    fn lookup_picks_nearest_entry() {
        let mut store = ParamStore::new();
        let lv = identity_level(&mut store, &[[0.0, 0.0], [1.0, 0.0]]);
        let (i, z) = vq_lookup(&store, &lv, &[0.9, 0.0]).unwrap();
        assert_eq!(i, 1);
        assert_eq!(z, vec![1.0, 0.0]);
    }

    #[test]
    fn lookup_ties_go_to_lowest_index() {
        let mut store = ParamStore::new();
        let mut rows = [[5.0 as Real, 5.0]; 8];
        rows[3] = [1.0, 0.0];
        rows[7] = [-1.0, 0.0];
        let lv = identity_level(&mut store, &rows);
        assert_eq!(vq_lookup(&store, &lv, &[0.0, 0.0]).unwrap().0, 3);
    }

    #[test]
    fn lookup_rejects_non_finite_input() {
        let mut store = ParamStore::new();
        let lv = identity_level(&mut store, &[[0.0, 0.0]]);
        assert!(vq_lookup(&store, &lv, &[Real::NAN, 0.0]).is_err());
    }

    #[test]
    fn single_losses_match_hand_values() {
        let mut store = ParamStore::new();
        let lv = VqLevel {
            w_in: store.add("w_in", Tensor::matrix(1, 1, vec![1.0]).unwrap(), true),
            w_out: store.add("w_out", Tensor::matrix(1, 1, vec![1.0]).unwrap(), true),
            codebook: store.add("cb", Tensor::matrix(1, 1, vec![0.2]).unwrap(), true),
            ema: store.add("ema", Tensor::full(&[1], 1.0), false),
        };
        let q = QuantizerState {
            style: Style::Dac,
            levels: vec![lv],
        };
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let res = q.quantize(&mut g, &store, z, 1, QuantMode::Nearest).unwrap();
        let (vq, commit) = vq_losses(&mut g, &res).unwrap();
        assert!((g.scalar(vq) - 0.09).abs() < 1e-7);
        assert!((g.scalar(commit) - 0.09).abs() < 1e-7);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = QuantizerState::new(&mut store, "q", Style::Dac, 2, 4, 2, 8, &mut rng);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            q.quantize(&mut g, &store, z, 0, QuantMode::Nearest),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(q.quantize(&mut g, &store, z, 3, QuantMode::Nearest).is_err());
    }

    #[test]
    fn unused_entry_decays_and_uniform_usage_is_a_fixed_point() {
        let mut ema = vec![1.0 as Real; 4];
        usage_update(&mut ema, &[0, 1, 2, 0, 1, 2]);
        assert_eq!(ema[3], 0.99);
        let mut ema = vec![1.0 as Real; 4];
        usage_update(&mut ema, &[0, 1, 2, 3, 3, 2, 1, 0]);
        assert!(ema.iter().all(|&e| (e - 1.0).abs() < 1e-7));
    }

    #[test]
    fn expiry_touches_only_stale_entries() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = QuantizerState::new(&mut store, "q", Style::Dac, 1, 4, 2, 8, &mut rng);
        let lv = q.levels[0].clone();
        let latents = Tensor::matrix(3, 4, (0..12).map(|i| i as Real * 0.1).collect()).unwrap();
        let before = store.get(lv.codebook).clone();
        assert_eq!(expire_and_reinit(&mut store, &lv, &latents, &mut rng).unwrap(), 0);
        assert_eq!(store.get(lv.codebook), &before);

        store.get_mut(lv.ema).data_mut()[5] = 0.89;
        assert_eq!(expire_and_reinit(&mut store, &lv, &latents, &mut rng).unwrap(), 1);
        let projected = latents.matmul(store.get(lv.w_in)).unwrap();
        let row = store.get(lv.codebook).row(5).to_vec();
        assert!((0..3).any(|f| projected.row(f) == &row[..]));
        assert_eq!(store.get(lv.ema).data()[5], 1.0);
        for j in (0..8).filter(|&j| j != 5) {
            assert_eq!(store.get(lv.codebook).row(j), before.row(j));
        }
    }

    #[test]
    fn expiry_with_empty_batch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = QuantizerState::new(&mut store, "q", Style::Dac, 1, 4, 2, 8, &mut rng);
        store.get_mut(q.levels[0].ema).data_mut()[0] = 0.5;
        let empty = Tensor::zeros(&[0, 4]);
        assert!(expire_and_reinit(&mut store, &q.levels[0], &empty, &mut rng).is_err());
    }

    #[test]
    fn identity_projections_telescope_to_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = QuantizerState::new(&mut store, "q", Style::Dac, 3, 4, 2, 8, &mut rng);
        for (i, lv) in q.levels.iter_mut().enumerate() {
            lv.w_in = store.add(format!("eye_in{i}"), Tensor::eye(4), true);
            lv.w_out = store.add(format!("eye_out{i}"), Tensor::eye(4), true);
        }
        for k in 1..=3 {
            let j = q.ste_jacobian_closed_form(&store, k).unwrap();
            for (a, row) in j.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    assert_eq!(v, if a == b { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn residual_profile_of_perfect_first_level_is_zero_afterwards() {
        let mut store = ParamStore::new();
        let lv0 = identity_level(&mut store, &[[0.3, -0.4]]);
        let lv1 = identity_level(&mut store, &[[0.0, 0.0]]);
        let q = QuantizerState {
            style: Style::Dac,
            levels: vec![lv0, lv1],
        };
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap());
        let res = q.quantize(&mut g, &store, z, 2, QuantMode::Nearest).unwrap();
        let prof = residual_norm_profile(&res);
        assert!((prof[0] - 0.5).abs() < 1e-6);
        assert_eq!(prof[1], 0.0);
    }
}
