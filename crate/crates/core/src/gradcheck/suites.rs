//! Named finite-difference suites per module, shared by tests and the CLI.
//!
//! Every case reduces its output to a scalar through a fixed random
//! projection `Σ out ⊙ R`, so each output coordinate reaches the check with a
//! generic weight. Inputs to non-smooth ops are drawn away from their kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_inputs, check_inputs_split, check_params, check_params_split, GradCheckReport,
    ParamOwner, CHAIN_EPS, DEFAULT_EPS,
};
use crate::Real;
use crate::autodiff::{AttnLayout, Graph, Var};
use crate::codec::{mask_flags, Codec};
use crate::config::{CodecConfig, Style};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, MelScale};
use crate::nnet::{AttnConfig, Block, Deframer, Framer, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rvq::{self, FrozenCodes, QuantMode, QuantizeResult, QuantizerState};
use crate::ssr::{make_surrogate_teacher, FeatureExtractor};
use crate::tensor::Tensor;

/// Modules with a suite.
pub const MODULES: [&str; 6] = ["autodiff", "nnet", "rvq", "losses", "ssr", "codec"];

/// Coordinates probed per tensor.
const PROBES: usize = 24;

/// Coordinates probed per tensor in the full-chain check.
const CHAIN_PROBES: usize = 8;

pub fn run_module(module: &str, seed: u64) -> Result<Vec<GradCheckReport>> {
    match module {
        "autodiff" => primitive_checks(seed),
        "nnet" => nnet_checks(seed),
        "rvq" => rvq_checks(seed),
        "losses" => loss_checks(seed),
        "ssr" => ssr_checks(seed),
        "codec" => chain_checks(seed),
        other => Err(Error::InvalidArgument(format!(
            "no gradient suite for {other:?}; expected one of {MODULES:?}"
        ))),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for m in MODULES {
        out.extend(run_module(m, seed)?);
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `±[lo, hi]`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// `Σ out ⊙ R` with `R` fixed by `seed`.
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn case<'s, F>(name: &str, seed: u64, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'s>, &[Var]) -> Result<Var>,
{
    check_inputs(name, inputs, DEFAULT_EPS, PROBES, |g, v| {
        let out = f(g, v)?;
        if g.value(out).len() == 1 {
            Ok(out)
        } else {
            project(g, out, seed)
        }
    })
}

/// One case per differentiable primitive.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |shape: &[usize]| uniform(&mut rng, shape, -1.0, 1.0);
    let (a34, b45, c34, d34) = (m(&[3, 4]), m(&[4, 5]), m(&[3, 4]), m(&[3, 4]));
    let (row4, row4b, x35, x36) = (m(&[4]), m(&[4]), m(&[3, 5]), m(&[3, 6]));
    let (gamma, beta, table) = (m(&[6]), m(&[6]), m(&[6, 4]));
    let (x43, tok3, x24, x34b) = (m(&[4, 3]), m(&[3]), m(&[2, 4]), m(&[3, 4]));
    let (q, k, v, rope_x) = (m(&[3, 8]), m(&[5, 8]), m(&[5, 8]), m(&[3, 8]));
    let (cos_a, cos_b, sig) = (m(&[3, 5]), m(&[3, 5]), m(&[48]));
    let chain = [m(&[5, 5]), m(&[5, 5]), m(&[5, 5]), m(&[5, 1])];
    let mut r2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let abs_in = away_from_zero(&mut r2, &[3, 4], 0.2, 1.0);
    let log_in = uniform(&mut r2, &[3, 4], 0.5, 2.0);

    let s = seed;
    let out = vec![
        case("matmul", s, &[a34.clone(), b45], |g, v| g.matmul(v[0], v[1]))?,
        case("matmul_chain_5x5", s, &chain, |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let abc = g.matmul(ab, v[2])?;
            g.matmul(abc, v[3])
        })?,
        case("add", s, &[a34.clone(), c34.clone()], |g, v| g.add(v[0], v[1]))?,
        case("sub", s, &[a34.clone(), c34.clone()], |g, v| g.sub(v[0], v[1]))?,
        case("mul", s, &[a34.clone(), d34.clone()], |g, v| g.mul(v[0], v[1]))?,
        case("add_row", s, &[a34.clone(), row4.clone()], |g, v| g.add_row(v[0], v[1]))?,
        case("mul_row", s, &[a34.clone(), row4b], |g, v| g.mul_row(v[0], v[1]))?,
        case("scale", s, &[a34.clone()], |g, v| Ok(g.scale(v[0], -1.7)))?,
        case("silu", s, &[a34.clone()], |g, v| Ok(g.silu(v[0])))?,
        case("softmax", s, &[x35.clone()], |g, v| Ok(g.softmax(v[0])))?,
        case("layer_norm", s, &[x36, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?,
        case("sum", s, &[a34.clone()], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })?,
        case("mean", s, &[a34.clone()], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })?,
        case("mean_abs", s, &[abs_in], |g, v| Ok(g.mean_abs(v[0])))?,
        case("sum_sq", s, &[a34.clone()], |g, v| Ok(g.sum_sq(v[0])))?,
        case("log_eps", s, &[log_in], |g, v| Ok(g.log_eps(v[0], 1e-5)))?,
        case("reshape", s, &[a34.clone()], |g, v| g.reshape(v[0], vec![6, 2]))?,
        case("slice_rows", s, &[x35.clone()], |g, v| g.slice_rows(v[0], 1, 2))?,
        case("concat_rows", s, &[x24, x34b], |g, v| g.concat_rows(&[v[0], v[1]]))?,
        case("embedding", s, &[table], |g, v| g.embedding(v[0], &[1, 3, 1, 5]))?,
        case("mask_rows", s, &[x43, tok3], |g, v| g.mask_rows(v[0], v[1], &[true, false, true, false]))?,
        case("rope", s, &[rope_x], |g, v| g.rope(v[0], 2, 5, 10_000.0))?,
        case("attention", s, &[q, k, v], |g, v| {
            let layout = AttnLayout {
                heads: 2,
                window: 4,
                q_pos0: 2,
                k_pos0: 0,
            };
            g.attention(v[0], v[1], v[2], layout)
        })?,
        case("stft_magnitude", s, &[sig], |g, v| g.stft_magnitude(v[0], 16, 8))?,
        case("cosine_distance", s, &[cos_a, cos_b], |g, v| g.cosine_distance(v[0], v[1], 1e-8))?,
    ];
    Ok(out)
}

fn all_params(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.is_trainable(id)).collect()
}

fn param_case<F>(name: &str, seed: u64, store: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var>,
{
    let ids = all_params(store);
    check_params(name, store, &ids, DEFAULT_EPS, PROBES, |g, s| {
        let out = f(g, s)?;
        project(g, out, seed)
    })
}

/// Layers of the network with respect to their parameters.
pub fn nnet_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 8], -1.0, 1.0);
    let samples = uniform(&mut rng, &[48], -1.0, 1.0);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 8, 6, true, &mut rng);
    out.push(param_case("linear", seed, &store, |g, s| {
        let xv = g.constant(x.clone());
        lin.forward(g, s, xv)
    })?);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 8);
    for v in store.get_mut(store.find("ln.gamma").expect("gamma")).data_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    out.push(param_case("layer_norm_module", seed, &store, |g, s| {
        let xv = g.constant(x.clone());
        ln.forward(g, s, xv)
    })?);

    let mut store = ParamStore::new();
    let fr = Framer::new(&mut store, "fr", 16, 12, 8, &mut rng);
    out.push(param_case("framer", seed, &store, |g, s| {
        let xv = g.constant(samples.clone());
        fr.forward(g, s, xv)
    })?);

    let mut store = ParamStore::new();
    let df = Deframer::new(&mut store, "df", 16, 12, 8, &mut rng);
    out.push(param_case("deframer", seed, &store, |g, s| {
        let xv = g.constant(x.clone());
        df.forward(g, s, xv)
    })?);

    // unit layerscale so every sub-block contributes a measurable gradient
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "blk", 8, 16, 1.0, &mut rng);
    let attn = AttnConfig {
        heads: 2,
        window: 3,
        rotary_base: 10_000.0,
    };
    out.push(param_case("transformer_block", seed, &store, |g, s| {
        let xv = g.constant(x.clone());
        block.forward(g, s, xv, attn)
    })?);
    Ok(out)
}

fn toy_quantizer(seed: u64, style: Style) -> (ParamStore, QuantizerState, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let q = QuantizerState::new(&mut store, "rvq", style, 4, 12, 4, 8, &mut rng);
    let z_e = uniform(&mut rng, &[5, 12], -1.0, 1.0);
    (store, q, z_e)
}

/// Codebook and commitment losses with the stopped side replaced by its
/// frozen value: `Σ‖p₀ − e‖²/F` and `Σ‖p − e₀‖²/F`. Same value and gradient
/// as [`rvq::vq_losses`] at the freezing point, with no stop-gradient inside.
pub fn frozen_vq_oracle(g: &mut Graph<'_>, res: &QuantizeResult, frozen: &FrozenCodes) -> Result<(Var, Var)> {
    let frames = res.frames.max(1) as Real;
    let mut vq = Vec::new();
    let mut commit = Vec::new();
    for (lv, (p0, e0)) in res.levels.iter().zip(&frozen.anchors) {
        let p0 = g.constant(p0.clone());
        let e0 = g.constant(e0.clone());
        let d = g.sub(p0, lv.code)?;
        vq.push(g.sum_sq(d));
        let d = g.sub(lv.projected, e0)?;
        commit.push(g.sum_sq(d));
    }
    let sum = |g: &mut Graph<'_>, xs: Vec<Var>| -> Result<Var> {
        let mut acc = *xs.first().ok_or(Error::EmptyInput)?;
        for &x in &xs[1..] {
            acc = g.add(acc, x)?;
        }
        Ok(g.scale(acc, 1.0 / frames))
    };
    Ok((sum(g, vq)?, sum(g, commit)?))
}

fn quant_objective(
    g: &mut Graph<'_>,
    res: &QuantizeResult,
    seed: u64,
    oracle: Option<&FrozenCodes>,
) -> Result<Var> {
    let p = project(g, res.z, seed)?;
    let (vq, commit) = match oracle {
        Some(f) => frozen_vq_oracle(g, res, f)?,
        None => rvq::vq_losses(g, res)?,
    };
    let l = g.add(p, vq)?;
    let c = g.scale(commit, 0.1);
    g.add(l, c)
}

/// Frozen-code quantizer objective on `latent`, or on the constant `z_e`
/// when no latent var is given.
#[allow(clippy::too_many_arguments)]
fn quant_from_latent<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    q: &QuantizerState,
    latent: Option<Var>,
    z_e: &Tensor,
    k: usize,
    frozen: &FrozenCodes,
    seed: u64,
    oracle: bool,
) -> Result<Var> {
    let z = match latent {
        Some(v) => v,
        None => g.constant(z_e.clone()),
    };
    let r = q.quantize(g, store, z, k, QuantMode::Frozen(frozen))?;
    quant_objective(g, &r, seed, oracle.then_some(frozen))
}

/// Quantizer chain with indices frozen at their clean values.
pub fn rvq_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (style, k) in [(Style::Dac, 3), (Style::Mimi, 4)] {
        let (store, q, z_e) = toy_quantizer(seed, style);
        let frozen = {
            let mut g = Graph::new();
            let z = g.constant(z_e.clone());
            let r = q.quantize(&mut g, &store, z, k, QuantMode::Nearest)?;
            r.freeze(&g)
        };
        let tag = format!("{style:?}").to_lowercase();
        let ids = all_params(&store);
        out.push(check_params_split(
            &format!("rvq_{tag}_params"),
            &store,
            &ids,
            DEFAULT_EPS,
            PROBES,
            |g, s| quant_from_latent(g, s, &q, None, &z_e, k, &frozen, seed, false),
            |g, s| quant_from_latent(g, s, &q, None, &z_e, k, &frozen, seed, true),
        )?);
        out.push(check_inputs_split(
            &format!("rvq_{tag}_latent"),
            &[z_e.clone()],
            DEFAULT_EPS,
            PROBES,
            |g, v| quant_from_latent(g, &store, &q, Some(v[0]), &z_e, k, &frozen, seed, false),
            |g, v| quant_from_latent(g, &store, &q, Some(v[0]), &z_e, k, &frozen, seed, true),
        )?);
    }
    Ok(out)
}

fn small_scales(sr: u32) -> Vec<MelScale> {
    [(64, 8), (128, 16)].iter().map(|&(f, b)| MelScale::new(f, b, sr).expect("valid scale")).collect()
}

/// Reconstruction and representation losses with respect to the estimate.
pub fn loss_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = 16_000;
    let x = uniform(&mut rng, &[512], -0.4, 0.4);
    // Scaling the reference makes every log-mel difference strictly positive,
    // so no L1 kink lies within a step.
    let x_hat = Tensor::vector(x.data().iter().map(|a| 3.0 * a).collect());
    let scales = small_scales(sr);
    let mut out = vec![check_inputs("multi_scale_mel_l1", &[x_hat.clone()], DEFAULT_EPS, PROBES, |g, v| {
        let xv = g.constant(x.clone());
        Ok(losses::multi_scale_mel_l1(g, xv, v[0], &scales)?.0)
    })?];
    let a = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    out.push(check_inputs("cosine_distill", &[a], DEFAULT_EPS, PROBES, |g, v| {
        let t = g.constant(b.clone());
        losses::cosine_distill_loss(g, v[0], t)
    })?);
    Ok(out)
}

/// Representation loss through a frozen extractor.
pub fn ssr_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = CodecConfig {
        layerscale_init: 1.0,
        ..CodecConfig::toy()
    };
    let phi = make_surrogate_teacher(seed, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.frame_size * 3;
    let x: Vec<Real> = uniform(&mut rng, &[n], -0.5, 0.5).into_data();
    let x_hat = uniform(&mut rng, &[n], -0.5, 0.5);
    Ok(vec![check_inputs("ssrr", &[x_hat], DEFAULT_EPS, PROBES, |g, v| {
        losses::ssrr_loss(g, &phi, &x, v[0])
    })?])
}

/// Codec under test plus the frozen extractor its loss reads.
#[derive(Clone)]
struct ChainOwner {
    codec: Codec,
    phi: FeatureExtractor,
}

impl ParamOwner for ChainOwner {
    fn store(&self) -> &ParamStore {
        &self.codec.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.codec.store
    }
}

struct ChainCtx {
    x: Tensor,
    enc_mask: Vec<bool>,
    dec_mask: Vec<bool>,
    frozen: FrozenCodes,
    scales: Vec<MelScale>,
    k: usize,
    weights: LossWeights,
}

fn chain_objective<'a>(g: &mut Graph<'a>, o: &'a ChainOwner, c: &ChainCtx, oracle: bool) -> Result<Var> {
    let xv = g.constant(c.x.clone());
    let masks = Some((c.enc_mask.as_slice(), c.dec_mask.as_slice()));
    let out = o.codec.forward(g, xv, c.k, masks, QuantMode::Frozen(&c.frozen))?;
    let (mel, _) = losses::multi_scale_mel_l1(g, xv, out.x_hat, &c.scales)?;
    let (vq, commit) = if oracle {
        frozen_vq_oracle(g, &out.quant, &c.frozen)?
    } else {
        rvq::vq_losses(g, &out.quant)?
    };
    let ssrr = Some(losses::ssrr_loss(g, &o.phi, c.x.data(), out.x_hat)?);
    let sed = match out.quant.semantic {
        Some(sem) => {
            let t = g.constant(o.phi.features(c.x.data())?);
            Some(losses::cosine_distill_loss(g, sem, t)?)
        }
        None => None,
    };
    losses::total_loss(g, LossTerms { mel, vq, commit, ssrr, sed }, c.weights)
}

/// Encoder, quantizer, decoder and weighted loss as one chain.
pub fn chain_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for style in [Style::Dac, Style::Mimi] {
        let cfg = CodecConfig {
            style,
            layerscale_init: 0.5,
            ..CodecConfig::toy()
        };
        let codec = Codec::new(cfg.clone(), seed)?;
        let phi = make_surrogate_teacher(seed + 1, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 4;
        let x = uniform(&mut rng, &[frames * cfg.frame_size], -0.5, 0.5);
        let enc_mask = mask_flags(frames, 0.5, &mut rng);
        let dec_mask = mask_flags(frames, 0.5, &mut rng);
        let k = cfg.num_quantizers;
        let scales = small_scales(cfg.sample_rate);
        let weights = LossWeights::from_config(&cfg);
        let frozen = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let o = codec.forward(&mut g, xv, k, Some((&enc_mask, &dec_mask)), QuantMode::Nearest)?;
            o.quant.freeze(&g)
        };
        let ids = all_params(&codec.store);
        let tag = format!("{style:?}").to_lowercase();
        let owner = ChainOwner { codec, phi };
        let ctx = ChainCtx {
            x,
            enc_mask,
            dec_mask,
            frozen,
            scales,
            k,
            weights,
        };
        out.push(check_params_split(
            &format!("chain_{tag}"),
            &owner,
            &ids,
            CHAIN_EPS,
            CHAIN_PROBES,
            |g, o| chain_objective(g, o, &ctx, false),
            |g, o| chain_objective(g, o, &ctx, true),
        )?);
    }
    Ok(out)
}
