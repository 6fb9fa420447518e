//! The assembled codec: framer, causal encoder stack, quantizer, causal
//! decoder stack, de-framer.
//!
//! ```
//! use jhcodec::{Codec, CodecConfig, Real};
//!
//! let codec = Codec::new(CodecConfig::toy(), 7).unwrap();
//! let x: Vec<Real> = (0..1000).map(|i| (i as Real * 0.03).sin() * 0.3).collect();
//! let enc = codec.encode(&x, 2).unwrap();
//! // 1000 samples at 64 per frame: 15 full frames plus one padded frame
//! assert_eq!((enc.grid.frames(), enc.grid.k(), enc.pad_samples), (16, 2, 24));
//! let y = codec.decode(&enc.grid).unwrap();
//! assert_eq!(y.len(), 16 * 64);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;
use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nnet::{AttnConfig, CausalEncoder, Deframer, StackCache, TransformerStack};
use crate::params::{ParamId, ParamStore};
use crate::rvq::{QuantMode, QuantizeResult, QuantizerState};
use crate::tensor::Tensor;

/// `F × k` code indices, frame-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    indices: Vec<u32>,
    frames: usize,
    k: usize,
    frame_rate: u32,
}

impl CodeGrid {
    pub fn new(indices: Vec<u32>, frames: usize, k: usize, frame_rate: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::KOutOfRange { k, max: usize::MAX });
        }
        if indices.len() != frames * k {
            return Err(Error::shape("code_grid", format!("{} indices for {frames}x{k}", indices.len())));
        }
        Ok(Self {
            indices,
            frames,
            k,
            frame_rate,
        })
    }

    pub fn empty(k: usize, frame_rate: u32) -> Result<Self> {
        Self::new(Vec::new(), 0, k, frame_rate)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, frame: usize, level: usize) -> u32 {
        self.indices[frame * self.k + level]
    }

    pub fn frame(&self, f: usize) -> &[u32] {
        &self.indices[f * self.k..(f + 1) * self.k]
    }

    /// Indices of one level across frames.
    pub fn level(&self, l: usize) -> Vec<u32> {
        (0..self.frames).map(|f| self.get(f, l)).collect()
    }

    /// Keeps the first `k` levels of every frame.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::KOutOfRange { k, max: self.k });
        }
        let indices = (0..self.frames).flat_map(|f| self.frame(f)[..k].to_vec()).collect();
        Self::new(indices, self.frames, k, self.frame_rate)
    }

    /// Frames `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::shape("code_grid", format!("{start}+{len} > {}", self.frames)));
        }
        Self::new(
            self.indices[start * self.k..(start + len) * self.k].to_vec(),
            len,
            self.k,
            self.frame_rate,
        )
    }

    pub fn append(&mut self, other: &CodeGrid) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("code_grid", format!("k {} vs {}", self.k, other.k)));
        }
        self.indices.extend_from_slice(&other.indices);
        self.frames += other.frames;
        Ok(())
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= vocab) {
            Some(&index) => Err(Error::IndexOutOfRange { index, vocab }),
            None => Ok(()),
        }
    }
}

/// Output of an offline encode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub grid: CodeGrid,
    /// Zeros appended to complete the final frame.
    pub pad_samples: usize,
}

/// Graph handles from one training-mode pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub z_e: Var,
    pub quant: QuantizeResult,
    pub x_hat: Var,
}

/// Per-session streaming state. Caches are bounded by the attention window.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub k: usize,
    encoder: StackCache,
    decoder: StackCache,
    buffer: Vec<Real>,
    frames_encoded: usize,
    frames_decoded: usize,
    closed: bool,
}

impl StreamState {
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn frames_encoded(&self) -> usize {
        self.frames_encoded
    }

    pub fn frames_decoded(&self) -> usize {
        self.frames_decoded
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Cached scalars across both stacks.
    pub fn cache_footprint(&self) -> usize {
        self.encoder.footprint() + self.decoder.footprint()
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub store: ParamStore,
    pub encoder: CausalEncoder,
    pub quantizer: QuantizerState,
    pub decoder: TransformerStack,
    pub deframer: Deframer,
    /// Learned replacement for masked encoder-input frames.
    pub enc_mask: ParamId,
    /// Learned replacement for masked decoder-input frames.
    pub dec_mask: ParamId,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let attn = AttnConfig {
            heads: c.heads,
            window: c.window,
            rotary_base: c.rotary_base,
        };
        let encoder = CausalEncoder::new(
            &mut store,
            "enc",
            c.frame_size,
            c.frame_hidden,
            c.model_dim,
            c.ffn_dim,
            c.layers,
            attn,
            c.layerscale_init,
            &mut rng,
        );
        let quantizer = QuantizerState::new(
            &mut store,
            "rvq",
            c.style,
            c.num_quantizers,
            c.model_dim,
            c.code_dim,
            c.codebook_size,
            &mut rng,
        );
        let decoder = TransformerStack::new(
            &mut store,
            "dec.stack",
            c.model_dim,
            c.ffn_dim,
            c.layers,
            attn,
            c.layerscale_init,
            &mut rng,
        );
        let deframer = Deframer::new(&mut store, "dec.deframer", c.frame_size, c.frame_hidden, c.model_dim, &mut rng);
        let bound = 1.0 / (c.model_dim as Real).sqrt();
        let token = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            let data = (0..c.model_dim).map(|_| rng.random_range(-bound..bound)).collect();
            store.add(name, Tensor::vector(data), true)
        };
        let enc_mask = token(&mut store, "enc.mask_token", &mut rng);
        let dec_mask = token(&mut store, "dec.mask_token", &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            quantizer,
            decoder,
            deframer,
            enc_mask,
            dec_mask,
        })
    }

    pub fn frame_rate(&self) -> u32 {
        (self.config.sample_rate as usize / self.config.frame_size) as u32
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.config.num_quantizers {
            return Err(Error::KOutOfRange {
                k,
                max: self.config.num_quantizers,
            });
        }
        Ok(())
    }

    /// Zero-pads to whole frames; returns the padded signal and pad length.
    pub fn pad_to_frames(&self, samples: &[Real]) -> (Vec<Real>, usize) {
        let n = self.config.frame_size;
        let padded = samples.len().div_ceil(n) * n;
        let mut x = samples.to_vec();
        x.resize(padded, 0.0);
        (x, padded - samples.len())
    }

    /// Full differentiable pass over one frame-aligned clip.
    ///
    /// `masks` holds per-frame replacement flags for the encoder input (after
    /// framing) and the decoder input (after the quantizer sum).
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        k: usize,
        masks: Option<(&[bool], &[bool])>,
        mode: QuantMode<'_>,
    ) -> Result<ForwardOutput> {
        self.check_k(k)?;
        let enc_mask = match masks {
            Some((m, _)) => Some((g.param(&self.store, self.enc_mask), m)),
            None => None,
        };
        let z_e = self.encoder.forward(g, &self.store, x, enc_mask)?;
        let quant = self.quantizer.quantize(g, &self.store, z_e, k, mode)?;
        let mut z = quant.z;
        if let Some((_, m)) = masks {
            let tok = g.param(&self.store, self.dec_mask);
            z = g.mask_rows(z, tok, m)?;
        }
        let x_hat = self.decode_latents(g, z)?;
        Ok(ForwardOutput { z_e, quant, x_hat })
    }

    /// Decoder stack plus de-framer, offline.
    pub fn decode_latents<'a>(&'a self, g: &mut Graph<'a>, z: Var) -> Result<Var> {
        let h = self.decoder.forward(g, &self.store, z)?;
        self.deframer.forward(g, &self.store, h)
    }

    /// `Σ_l W_out,l e_l` in ascending level order, from indices.
    pub fn embed_codes<'a>(&'a self, g: &mut Graph<'a>, grid: &CodeGrid) -> Result<Var> {
        self.check_k(grid.k())?;
        grid.check_vocab(self.config.codebook_size)?;
        if grid.frames() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut z: Option<Var> = None;
        for l in 0..grid.k() {
            let lv = &self.quantizer.levels[l];
            let idx: Vec<usize> = grid.level(l).into_iter().map(|i| i as usize).collect();
            let table = g.param(&self.store, lv.codebook);
            let e = g.embedding(table, &idx)?;
            let w = g.param(&self.store, lv.w_out);
            let zl = g.matmul(e, w)?;
            z = Some(match z {
                Some(acc) => g.add(acc, zl)?,
                None => zl,
            });
        }
        Ok(z.expect("k >= 1"))
    }

    fn grid_from(&self, quant: &QuantizeResult, k: usize) -> Result<CodeGrid> {
        CodeGrid::new(quant.index_grid(), quant.frames, k, self.frame_rate())
    }

    /// Offline encode with the first `k` levels.
    pub fn encode(&self, samples: &[Real], k: usize) -> Result<Encoded> {
        self.check_k(k)?;
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (x, pad) = self.pad_to_frames(samples);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x));
        let z_e = self.encoder.forward(&mut g, &self.store, xv, None)?;
        let q = self.quantizer.quantize(&mut g, &self.store, z_e, k, QuantMode::Nearest)?;
        Ok(Encoded {
            grid: self.grid_from(&q, k)?,
            pad_samples: pad,
        })
    }

    /// Offline decode to `F·N` samples clipped to `[-1, 1]`.
    pub fn decode(&self, grid: &CodeGrid) -> Result<Vec<Real>> {
        if grid.frames() == 0 {
            self.check_k(grid.k())?;
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let z = self.embed_codes(&mut g, grid)?;
        let y = self.decode_latents(&mut g, z)?;
        g.check_finite()?;
        Ok(clip(g.value(y).data()))
    }

    pub fn stream(&self, k: usize) -> Result<StreamState> {
        self.check_k(k)?;
        Ok(StreamState {
            k,
            encoder: self.encoder.stack.new_cache(),
            decoder: self.decoder.new_cache(),
            buffer: Vec::with_capacity(self.config.frame_size),
            frames_encoded: 0,
            frames_decoded: 0,
            closed: false,
        })
    }

    fn encode_frames(&self, state: &mut StreamState, x: Vec<Real>) -> Result<CodeGrid> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x));
        let z_e = self.encoder.step(&mut g, &self.store, xv, &mut state.encoder)?;
        let q = self.quantizer.quantize(&mut g, &self.store, z_e, state.k, QuantMode::Nearest)?;
        state.frames_encoded += q.frames;
        self.grid_from(&q, state.k)
    }

    /// Buffers `samples` and encodes every completed frame.
    pub fn stream_encode_chunk(&self, state: &mut StreamState, samples: &[Real]) -> Result<CodeGrid> {
        if state.closed {
            return Err(Error::SessionClosed);
        }
        let n = self.config.frame_size;
        state.buffer.extend_from_slice(samples);
        let whole = state.buffer.len() / n * n;
        if whole == 0 {
            return CodeGrid::empty(state.k, self.frame_rate());
        }
        let rest = state.buffer.split_off(whole);
        let x = std::mem::replace(&mut state.buffer, rest);
        self.encode_frames(state, x)
    }

    /// Zero-pads and encodes any buffered remainder; returns the frames and
    /// the pad length.
    pub fn stream_flush(&self, state: &mut StreamState) -> Result<(CodeGrid, usize)> {
        if state.closed {
            return Err(Error::SessionClosed);
        }
        if state.buffer.is_empty() {
            return Ok((CodeGrid::empty(state.k, self.frame_rate())?, 0));
        }
        let n = self.config.frame_size;
        let pad = n - state.buffer.len();
        let mut x = std::mem::take(&mut state.buffer);
        x.resize(n, 0.0);
        Ok((self.encode_frames(state, x)?, pad))
    }

    /// Decodes frames as they arrive: `N` samples per frame, no lookahead.
    pub fn stream_decode_chunk(&self, state: &mut StreamState, grid: &CodeGrid) -> Result<Vec<Real>> {
        if state.closed {
            return Err(Error::SessionClosed);
        }
        if grid.frames() == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let z = self.embed_codes(&mut g, grid)?;
        let h = self.decoder.step(&mut g, &self.store, z, &mut state.decoder)?;
        let y = self.deframer.forward(&mut g, &self.store, h)?;
        g.check_finite()?;
        state.frames_decoded += grid.frames();
        Ok(clip(g.value(y).data()))
    }
}

fn clip(x: &[Real]) -> Vec<Real> {
    x.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Gaussian { snr_db: Real },
    Sinusoid { freq_hz: Real, snr_db: Real },
}

pub const SNR_RANGE_DB: (Real, Real) = (20.0, 40.0);
pub const TONE_RANGE_HZ: (Real, Real) = (50.0, 7000.0);

fn noise_power(samples: &[Real], snr_db: Real) -> f64 {
    let p: f64 = samples.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / samples.len().max(1) as f64;
    p / 10f64.powf(snr_db as f64 / 10.0)
}

/// Adds white Gaussian noise at `snr_db` relative to the signal power.
pub fn add_gaussian_noise<R: Rng>(samples: &mut [Real], snr_db: Real, rng: &mut R) {
    let sigma = noise_power(samples, snr_db).sqrt() as Real;
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0 as Real, sigma).expect("positive sigma");
    for s in samples.iter_mut() {
        *s += normal.sample(rng);
    }
}

/// Adds a sinusoid of random phase at `snr_db` relative to the signal power.
pub fn add_sinusoid<R: Rng>(samples: &mut [Real], freq_hz: Real, snr_db: Real, sample_rate: u32, rng: &mut R) {
    let amp = (2.0 * noise_power(samples, snr_db)).sqrt();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let w = std::f64::consts::TAU * freq_hz as f64 / sample_rate as f64;
    for (n, s) in samples.iter_mut().enumerate() {
        *s += (amp * (w * n as f64 + phase).sin()) as Real;
    }
}

/// With probability `prob`, corrupts `samples` with Gaussian noise or a
/// random tone (even odds), SNR uniform in 20..40 dB.
pub fn apply_input_noise<R: Rng>(samples: &mut [Real], prob: Real, sample_rate: u32, rng: &mut R) -> Option<NoiseKind> {
    if prob <= 0.0 || rng.random::<Real>() >= prob {
        return None;
    }
    let snr_db = rng.random_range(SNR_RANGE_DB.0..SNR_RANGE_DB.1);
    if rng.random::<bool>() {
        add_gaussian_noise(samples, snr_db, rng);
        Some(NoiseKind::Gaussian { snr_db })
    } else {
        let hi = TONE_RANGE_HZ.1.min(sample_rate as Real / 2.0);
        let freq_hz = rng.random_range(TONE_RANGE_HZ.0..hi);
        add_sinusoid(samples, freq_hz, snr_db, sample_rate, rng);
        Some(NoiseKind::Sinusoid { freq_hz, snr_db })
    }
}

/// Independent per-frame replacement flags.
pub fn mask_flags<R: Rng>(frames: usize, rate: Real, rng: &mut R) -> Vec<bool> {
    (0..frames)
        .map(|_| rate > 0.0 && (rate >= 1.0 || rng.random::<Real>() < rate))
        .collect()
}

/// Replaces each frame of `emb` by `token` with probability `rate`.
pub fn apply_masking<R: Rng>(emb: &Tensor, rate: Real, token: &[Real], rng: &mut R) -> Result<(Tensor, Vec<bool>)> {
    if token.len() != emb.cols() {
        return Err(Error::shape("apply_masking", format!("token {} vs width {}", token.len(), emb.cols())));
    }
    let flags = mask_flags(emb.rows(), rate, rng);
    let mut out = emb.clone();
    for (f, &m) in flags.iter().enumerate() {
        if m {
            out.row_mut(f).copy_from_slice(token);
        }
    }
    Ok((out, flags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(n: usize, seed: u64) -> Vec<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn short_chunk_is_buffered() {
        let codec = Codec::new(CodecConfig::toy(), 1).unwrap();
        let mut s = codec.stream(2).unwrap();
        let out = codec.stream_encode_chunk(&mut s, &[0.1; 40]).unwrap();
        assert_eq!(out.frames(), 0);
        assert_eq!(s.buffered(), 40);
    }

    #[test]
    fn two_frames_in_two_calls_equal_one_call() {
        let codec = Codec::new(CodecConfig::toy(), 2).unwrap();
        let x = signal(128, 3);
        let mut a = codec.stream(4).unwrap();
        let mut g1 = codec.stream_encode_chunk(&mut a, &x[..64]).unwrap();
        g1.append(&codec.stream_encode_chunk(&mut a, &x[64..]).unwrap()).unwrap();
        let mut b = codec.stream(4).unwrap();
        let g2 = codec.stream_encode_chunk(&mut b, &x).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn closed_session_rejects_input() {
        let codec = Codec::new(CodecConfig::toy(), 2).unwrap();
        let mut s = codec.stream(1).unwrap();
        s.close();
        assert!(matches!(codec.stream_encode_chunk(&mut s, &[0.0; 64]), Err(Error::SessionClosed)));
    }

    #[test]
    fn decode_rejects_out_of_vocab_index() {
        let codec = Codec::new(CodecConfig::toy(), 2).unwrap();
        let grid = CodeGrid::new(vec![64], 1, 1, 250).unwrap();
        assert!(matches!(codec.decode(&grid), Err(Error::IndexOutOfRange { index: 64, .. })));
    }

    #[test]
    fn encode_rejects_empty_and_bad_k() {
        let codec = Codec::new(CodecConfig::toy(), 2).unwrap();
        assert!(matches!(codec.encode(&[], 1), Err(Error::EmptyInput)));
        assert!(codec.encode(&[0.0; 64], 5).is_err());
    }

    #[test]
    fn decoded_length_is_frames_times_n_for_any_k() {
        let codec = Codec::new(CodecConfig::toy(), 4).unwrap();
        let x = signal(640, 5);
        for k in [1, 4] {
            let e = codec.encode(&x, k).unwrap();
            let y = codec.decode(&e.grid).unwrap();
            assert_eq!(y.len(), 640);
            assert!(y.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn noise_with_zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = signal(256, 1);
        let before = x.clone();
        assert_eq!(apply_input_noise(&mut x, 0.0, 16_000, &mut rng), None);
        assert_eq!(x, before);
    }

    #[test]
    fn masking_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = Tensor::matrix(5, 3, (0..15).map(|i| i as Real).collect()).unwrap();
        let tok = [9.0, 9.0, 9.0];
        let (same, flags) = apply_masking(&emb, 0.0, &tok, &mut rng).unwrap();
        assert_eq!(same, emb);
        assert!(flags.iter().all(|f| !f));
        let (all, _) = apply_masking(&emb, 1.0, &tok, &mut rng).unwrap();
        assert!((0..5).all(|f| all.row(f) == tok));
    }
}
