use std::collections::VecDeque;

use rand::Rng;

use super::{LayerNorm, Linear};
use crate::Real;
use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnConfig {
    pub heads: usize,
    pub window: usize,
    pub rotary_base: Real,
}

/// PreLN block: `x + ls₁⊙Attn(LN₁(x))`, then `+ ls₂⊙SwiGLU(LN₂(·))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ls1: ParamId,
    pub ln2: LayerNorm,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
    pub ls2: ParamId,
}

/// Rolling keys/values of one layer for one stream.
///
/// Holds at most `window - 1` past frames: exactly what the next query can
/// still see.
#[derive(Debug, Clone)]
pub struct LayerCache {
    window: usize,
    next_pos: usize,
    keys: VecDeque<Vec<Real>>,
    values: VecDeque<Vec<Real>>,
}

impl LayerCache {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            next_pos: 0,
            keys: VecDeque::new(),
            values: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Absolute position of the next frame.
    pub fn position(&self) -> usize {
        self.next_pos
    }

    fn stacked(rows: &VecDeque<Vec<Real>>, c: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), c, data).expect("rows of width c")
    }

    fn push(&mut self, keys: &Tensor, values: &Tensor) {
        for i in 0..keys.rows() {
            self.keys.push_back(keys.row(i).to_vec());
            self.values.push_back(values.row(i).to_vec());
        }
        self.next_pos += keys.rows();
        let keep = self.window.saturating_sub(1);
        while self.keys.len() > keep {
            self.keys.pop_front();
            self.values.pop_front();
        }
    }
}

/// Per-stream caches for every layer of a [`TransformerStack`].
#[derive(Debug, Clone)]
pub struct StackCache {
    pub layers: Vec<LayerCache>,
}

impl StackCache {
    pub fn new(layers: usize, window: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerCache::new(window)).collect(),
        }
    }

    pub fn position(&self) -> usize {
        self.layers.first().map_or(0, |l| l.next_pos)
    }

    /// Total cached scalars (keys and values).
    pub fn footprint(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.keys.iter().chain(&l.values).map(Vec::len).sum::<usize>())
            .sum()
    }
}

enum AttnMode<'c> {
    Offline,
    Cached(&'c mut LayerCache),
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ffn: usize,
        layerscale: Real,
        rng: &mut R,
    ) -> Self {
        let lin = |store: &mut ParamStore, n: &str, i, o, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, false, rng)
        };
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            wq: lin(store, "wq", dim, dim, rng),
            wk: lin(store, "wk", dim, dim, rng),
            wv: lin(store, "wv", dim, dim, rng),
            wo: lin(store, "wo", dim, dim, rng),
            ls1: store.add(format!("{name}.ls1"), Tensor::full(&[dim], layerscale), true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            w_gate: lin(store, "w_gate", dim, ffn, rng),
            w_up: lin(store, "w_up", dim, ffn, rng),
            w_down: lin(store, "w_down", ffn, dim, rng),
            ls2: store.add(format!("{name}.ls2"), Tensor::full(&[dim], layerscale), true),
        }
    }

    fn forward_mode<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        attn: AttnConfig,
        mode: AttnMode<'_>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, h)?;
        let v = self.wv.forward(g, store, h)?;
        let a = match mode {
            AttnMode::Offline => {
                let q = g.rope(q, attn.heads, 0, attn.rotary_base)?;
                let k = g.rope(k, attn.heads, 0, attn.rotary_base)?;
                let layout = AttnLayout {
                    heads: attn.heads,
                    window: attn.window,
                    q_pos0: 0,
                    k_pos0: 0,
                };
                g.attention(q, k, v, layout)?
            }
            AttnMode::Cached(cache) => {
                let pos = cache.next_pos;
                let q = g.rope(q, attn.heads, pos, attn.rotary_base)?;
                let k = g.rope(k, attn.heads, pos, attn.rotary_base)?;
                let c = g.value(k).cols();
                let past = cache.keys.len();
                let (keys, vals) = if past == 0 {
                    (k, v)
                } else {
                    let pk = g.constant(LayerCache::stacked(&cache.keys, c));
                    let pv = g.constant(LayerCache::stacked(&cache.values, c));
                    (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
                };
                let layout = AttnLayout {
                    heads: attn.heads,
                    window: attn.window,
                    q_pos0: pos,
                    k_pos0: pos - past,
                };
                let out = g.attention(q, keys, vals, layout)?;
                let (kt, vt) = (g.value(k).clone(), g.value(v).clone());
                cache.push(&kt, &vt);
                out
            }
        };
        let a = self.wo.forward(g, store, a)?;
        let ls1 = g.param(store, self.ls1);
        let a = g.mul_row(a, ls1)?;
        let x = g.add(x, a)?;

        let h = self.ln2.forward(g, store, x)?;
        let gate = self.w_gate.forward(g, store, h)?;
        let gate = g.silu(gate);
        let up = self.w_up.forward(g, store, h)?;
        let f = g.mul(gate, up)?;
        let f = self.w_down.forward(g, store, f)?;
        let ls2 = g.param(store, self.ls2);
        let f = g.mul_row(f, ls2)?;
        g.add(x, f)
    }

    /// Offline evaluation of `x: [F, C]` with positions starting at 0.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var, attn: AttnConfig) -> Result<Var> {
        self.forward_mode(g, store, x, attn, AttnMode::Offline)
    }

    /// Evaluates new frames against `cache` and appends them to it.
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        attn: AttnConfig,
        cache: &mut LayerCache,
    ) -> Result<Var> {
        self.forward_mode(g, store, x, attn, AttnMode::Cached(cache))
    }
}

/// `L` blocks followed by a final LayerNorm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub attn: AttnConfig,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ffn: usize,
        layers: usize,
        attn: AttnConfig,
        layerscale: Real,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.{i}"), dim, ffn, layerscale, rng))
            .collect();
        Self {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            attn,
        }
    }

    pub fn new_cache(&self) -> StackCache {
        StackCache::new(self.blocks.len(), self.attn.window)
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x, self.attn)?;
        }
        self.final_norm.forward(g, store, x)
    }

    /// Zero-lookahead step: new frames in, the same number of frames out.
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        mut x: Var,
        cache: &mut StackCache,
    ) -> Result<Var> {
        if cache.layers.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "cache has {} layers, stack has {}",
                cache.layers.len(),
                self.blocks.len()
            )));
        }
        let pos = cache.position();
        if cache.layers.iter().any(|l| l.next_pos != pos || l.window != self.attn.window) {
            return Err(Error::InvalidArgument("layer caches out of sync".into()));
        }
        for (b, c) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = b.step(g, store, x, self.attn, c)?;
        }
        self.final_norm.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(layers: usize, window: usize, seed: u64) -> (ParamStore, TransformerStack) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = AttnConfig {
            heads: 2,
            window,
            rotary_base: 10_000.0,
        };
        // large LayerScale so the blocks are far from identity
        let s = TransformerStack::new(&mut store, "s", 8, 32, layers, attn, 0.5, &mut rng);
        (store, s)
    }

    fn input(frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(frames, 8, data).unwrap()
    }

    #[test]
    fn zero_layerscale_makes_block_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Block::new(&mut store, "b", 8, 16, 0.0, &mut rng);
        let attn = AttnConfig {
            heads: 2,
            window: 4,
            rotary_base: 10_000.0,
        };
        let x = input(5, 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, &store, xv, attn).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn streaming_matches_offline_for_100_frames() {
        let (store, s) = stack(2, 4, 11);
        let x = input(100, 12);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let offline = s.forward(&mut g, &store, xv).unwrap();
        let offline = g.value(offline).clone();

        let mut cache = s.new_cache();
        for t in 0..100 {
            let mut g = Graph::new();
            let row = g.constant(x.slice_rows(t, 1));
            let y = s.step(&mut g, &store, row, &mut cache).unwrap();
            assert_eq!(g.value(y).data(), offline.row(t), "frame {t}");
        }
        assert!(cache.layers.iter().all(|l| l.len() <= 3));
    }

    #[test]
    fn first_frame_with_empty_cache_equals_one_frame_offline() {
        let (store, s) = stack(2, 4, 5);
        let x = input(1, 6);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let off = s.forward(&mut g, &store, xv).unwrap();
        let mut cache = s.new_cache();
        let on = s.step(&mut g, &store, xv, &mut cache).unwrap();
        assert_eq!(g.value(off), g.value(on));
    }

    #[test]
    fn multi_frame_steps_match_single_frame_steps() {
        let (store, s) = stack(1, 3, 8);
        let x = input(7, 9);
        let mut a = s.new_cache();
        let mut b = s.new_cache();
        let mut g = Graph::new();
        let chunk = g.constant(x.slice_rows(0, 4));
        let ya = s.step(&mut g, &store, chunk, &mut a).unwrap();
        let ya = g.value(ya).clone();
        for t in 0..4 {
            let row = g.constant(x.slice_rows(t, 1));
            let yb = s.step(&mut g, &store, row, &mut b).unwrap();
            assert_eq!(g.value(yb).data(), ya.row(t));
        }
    }

    #[test]
    fn out_of_sync_caches_are_rejected() {
        let (store, s) = stack(2, 4, 3);
        let mut cache = s.new_cache();
        cache.layers[1].next_pos = 5;
        let mut g = Graph::new();
        let row = g.constant(input(1, 1));
        assert!(s.step(&mut g, &store, row, &mut cache).is_err());
    }
}
