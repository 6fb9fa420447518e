//! Causal Transformer building blocks and the sample/frame interface.

mod transformer;

pub use transformer::{AttnConfig, Block, LayerCache, StackCache, TransformerStack};

use rand::Rng;

use crate::Real;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: Real = 1e-5;

/// `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true));
        Self { weight, bias }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Reshapes mono samples into `N`-sample frames and lifts them through two
/// linear layers, `N → hidden → C`.
#[derive(Debug, Clone)]
pub struct Framer {
    pub frame_size: usize,
    pub proj1: Linear,
    pub proj2: Linear,
}

impl Framer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        frame_size: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            frame_size,
            proj1: Linear::new(store, &format!("{name}.proj1"), frame_size, hidden, true, rng),
            proj2: Linear::new(store, &format!("{name}.proj2"), hidden, dim, true, rng),
        }
    }

    /// `samples` is 1-D with a length that is a positive multiple of `N`.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, samples: Var) -> Result<Var> {
        let len = g.value(samples).len();
        if len == 0 {
            return Err(Error::EmptyInput);
        }
        if len % self.frame_size != 0 {
            return Err(Error::shape(
                "frame_reshape",
                format!("{len} samples is not a multiple of frame size {}", self.frame_size),
            ));
        }
        let frames = g.reshape(samples, vec![len / self.frame_size, self.frame_size])?;
        let h = self.proj1.forward(g, store, frames)?;
        self.proj2.forward(g, store, h)
    }
}

/// Mirror of [`Framer`]: `C → hidden → N`, frames concatenated into samples.
#[derive(Debug, Clone)]
pub struct Deframer {
    pub frame_size: usize,
    pub proj1: Linear,
    pub proj2: Linear,
}

impl Deframer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        frame_size: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            frame_size,
            proj1: Linear::new(store, &format!("{name}.proj1"), dim, hidden, true, rng),
            proj2: Linear::new(store, &format!("{name}.proj2"), hidden, frame_size, true, rng),
        }
    }

    /// `[F, C]` embeddings to `F·N` samples (1-D).
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.proj1.forward(g, store, x)?;
        let frames = self.proj2.forward(g, store, h)?;
        let n = g.value(frames).len();
        g.reshape(frames, vec![n])
    }
}

/// Framer followed by a causal Transformer stack; shared by the codec
/// encoder and the feature extractor.
#[derive(Debug, Clone)]
pub struct CausalEncoder {
    pub framer: Framer,
    pub stack: TransformerStack,
}

impl CausalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        frame_size: usize,
        hidden: usize,
        dim: usize,
        ffn: usize,
        layers: usize,
        attn: AttnConfig,
        layerscale: Real,
        rng: &mut R,
    ) -> Self {
        Self {
            framer: Framer::new(store, &format!("{name}.framer"), frame_size, hidden, dim, rng),
            stack: TransformerStack::new(store, &format!("{name}.stack"), dim, ffn, layers, attn, layerscale, rng),
        }
    }

    /// Offline pass. `mask` optionally replaces framed rows by a token before
    /// the Transformer stack.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        samples: Var,
        mask: Option<(Var, &[bool])>,
    ) -> Result<Var> {
        let mut x = self.framer.forward(g, store, samples)?;
        if let Some((token, flags)) = mask {
            x = g.mask_rows(x, token, flags)?;
        }
        self.stack.forward(g, store, x)
    }

    /// One or more whole frames through the cached stack.
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        samples: Var,
        cache: &mut StackCache,
    ) -> Result<Var> {
        let x = self.framer.forward(g, store, samples)?;
        self.stack.step(g, store, x, cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn framer() -> (ParamStore, Framer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Framer::new(&mut store, "f", 320, 24, 16, &mut rng);
        // non-zero biases so the zero-signal case is informative
        for id in [f.proj1.bias.unwrap(), f.proj2.bias.unwrap()] {
            for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.01 * i as Real - 0.05;
            }
        }
        (store, f)
    }

    #[test]
    fn ten_frames_from_3200_samples() {
        let (store, f) = framer();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.1; 3200]));
        let y = f.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[10, 16]);
    }

    #[test]
    fn zero_signal_yields_bias_path_only() {
        let (store, f) = framer();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 640]));
        let y = f.forward(&mut g, &store, x).unwrap();
        // b1 · W2 + b2
        let b1 = store.get(f.proj1.bias.unwrap()).clone().reshape(vec![1, 24]).unwrap();
        let mut expect = b1.matmul(store.get(f.proj2.weight)).unwrap();
        expect.add_assign(&store.get(f.proj2.bias.unwrap()).clone().reshape(vec![1, 16]).unwrap());
        for r in 0..2 {
            assert_eq!(g.value(y).row(r), expect.data());
        }
    }

    #[test]
    fn reshape_then_project_matches_per_frame_matvec() {
        let (store, f) = framer();
        let samples: Vec<Real> = (0..960).map(|i| ((i * 37 % 101) as Real / 50.0) - 1.0).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(samples.clone()));
        let y = f.forward(&mut g, &store, x).unwrap();
        let (w1, b1) = (store.get(f.proj1.weight), store.get(f.proj1.bias.unwrap()));
        let (w2, b2) = (store.get(f.proj2.weight), store.get(f.proj2.bias.unwrap()));
        for t in 0..3 {
            let frame = &samples[t * 320..(t + 1) * 320];
            let mut h = vec![0.0 as Real; 24];
            for (i, &s) in frame.iter().enumerate() {
                for j in 0..24 {
                    h[j] += s * w1.data()[i * 24 + j];
                }
            }
            for (hv, bv) in h.iter_mut().zip(b1.data()) {
                *hv += bv;
            }
            let mut o = vec![0.0 as Real; 16];
            for (i, &hv) in h.iter().enumerate() {
                for j in 0..16 {
                    o[j] += hv * w2.data()[i * 16 + j];
                }
            }
            for (ov, bv) in o.iter_mut().zip(b2.data()) {
                *ov += bv;
            }
            assert_eq!(g.value(y).row(t), &o[..], "frame {t}");
        }
    }

    #[test]
    fn framer_rejects_empty_and_ragged_input() {
        let (store, f) = framer();
        let mut g = Graph::new();
        let empty = g.constant(Tensor::vector(vec![]));
        assert!(matches!(f.forward(&mut g, &store, empty), Err(Error::EmptyInput)));
        let ragged = g.constant(Tensor::vector(vec![0.0; 321]));
        assert!(f.forward(&mut g, &store, ragged).is_err());
    }
}
