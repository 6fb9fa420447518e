//! Optimizer, synthetic data and the phased training loop.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Real;
use crate::autodiff::{Gradients, Graph, Var};
use crate::codec::{apply_input_noise, mask_flags, Codec};
use crate::config::{key_values, Style};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossTerms, LossWeights, MelScale};
use crate::params::{ParamId, ParamStore};
use crate::rvq::{self, QuantMode};
use crate::ssr::FeatureExtractor;
use crate::tensor::Tensor;

/// Optimizer settings and the phase schedule of a run.
///
/// Steps `0..warm_start_steps` train without the representation loss; steps
/// in `mask_start..mask_end` replace a fraction of encoder and decoder input
/// frames by mask tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub warm_start_steps: usize,
    pub mask_start: usize,
    pub mask_end: usize,
    pub dropout: bool,
    pub seed: u64,
    /// Samples per training clip.
    pub clip_len: usize,
}

impl TrainPlan {
    /// Full-scale optimizer settings with phase boundaries scaled to `steps`
    /// (1/20 and 1/4 of the run).
    pub fn scaled(steps: usize) -> Self {
        Self {
            steps,
            batch: 8,
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warm_start_steps: steps / 20,
            mask_start: steps / 20,
            mask_end: steps / 4,
            dropout: true,
            seed: 0,
            clip_len: 4096,
        }
    }

    /// Desk-scale plan used by the toy runs.
    pub fn toy(steps: usize) -> Self {
        Self {
            lr: TOY_LR,
            ..Self::scaled(steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.mask_start <= self.mask_end && self.mask_end <= self.steps) {
            return fail(format!(
                "mask window {}..{} must lie within 0..={}",
                self.mask_start, self.mask_end, self.steps
            ));
        }
        if self.warm_start_steps > self.steps {
            return fail("warm_start_steps exceeds steps".into());
        }
        if self.batch == 0 || self.clip_len == 0 {
            return fail("batch and clip_len must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return fail("lr and eps must be positive, weight_decay non-negative".into());
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("beta {b} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// `key=value` overrides on top of `base`.
    pub fn parse_with_base(text: &str, base: TrainPlan) -> Result<Self> {
        let mut p = base;
        for (k, v) in key_values(text)? {
            p.set(&k, &v)?;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "warm_start_steps" => self.warm_start_steps = num(key, value)?,
            "mask_start" => self.mask_start = num(key, value)?,
            "mask_end" => self.mask_end = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "clip_len" => self.clip_len = num(key, value)?,
            other => return Err(Error::Config(format!("unknown plan key {other:?}"))),
        }
        Ok(())
    }

    pub fn phase(&self, step: usize) -> Phase {
        if step < self.warm_start_steps {
            Phase::Warmup
        } else if step >= self.mask_start && step < self.mask_end {
            Phase::Masked
        } else {
            Phase::Refine
        }
    }
}

/// Learning rate of the toy plan.
pub const TOY_LR: Real = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// No representation loss, no masking.
    Warmup,
    /// Representation loss and input masking.
    Masked,
    /// Representation loss, no masking.
    Refine,
}

/// Seeded synthetic clips: a few tones with slow envelopes over low-passed
/// noise, peak-normalized into `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub clip_len: usize,
    pub sample_rate: u32,
}

impl SyntheticDataset {
    pub fn new(seed: u64, clip_len: usize, sample_rate: u32) -> Self {
        Self {
            seed,
            clip_len,
            sample_rate,
        }
    }

    /// Clip `index`, a pure function of `(seed, index)`.
    pub fn clip(&self, index: u64) -> Vec<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let sr = self.sample_rate as f64;
        let n = self.clip_len;
        let mut x = vec![0.0f64; n];
        let tones = rng.random_range(1..=3);
        for _ in 0..tones {
            let f = 80.0 * (4000.0f64 / 80.0).powf(rng.random::<f64>());
            let amp = rng.random_range(0.1..0.5);
            let phase = rng.random_range(0.0..TAU);
            let env_f = rng.random_range(0.5..4.0);
            let env_p = rng.random_range(0.0..TAU);
            for (t, v) in x.iter_mut().enumerate() {
                let time = t as f64 / sr;
                let env = 0.6 + 0.4 * (TAU * env_f * time + env_p).sin();
                *v += amp * env * (TAU * f * time + phase).sin();
            }
        }
        let noise_amp = rng.random_range(0.01..0.1);
        let alpha = rng.random_range(0.05..0.9);
        let mut state = 0.0;
        for v in x.iter_mut() {
            state += alpha * (rng.random_range(-1.0..1.0) - state);
            *v += noise_amp * state;
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
        x.iter().map(|v| (v * scale) as Real).collect()
    }
}

/// Uniform over `1..=levels`.
pub fn sample_dropout_k<R: Rng>(rng: &mut R, levels: usize) -> usize {
    rng.random_range(1..=levels.max(1))
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<Real>,
    v: Vec<Real>,
    t: u32,
}

/// One AdamW update of `param` in place (decoupled weight decay first).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [Real],
    grad: &[Real],
    m: &mut [Real],
    v: &mut [Real],
    t: u32,
    lr: Real,
    betas: (Real, Real),
    eps: Real,
    weight_decay: Real,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= lr * weight_decay * param[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW with per-parameter step counts; parameters without a gradient in a
/// step are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: Real, weight_decay: Real) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn from_plan(plan: &TrainPlan) -> Self {
        Self {
            beta1: plan.beta1,
            beta2: plan.beta2,
            eps: plan.eps,
            ..Self::new(plan.lr, plan.weight_decay)
        }
    }

    /// Applies one update; refuses the whole step if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, step: usize) -> Result<()> {
        let pairs: Vec<(ParamId, &Tensor)> = grads.params().collect();
        self.apply(store, &pairs, step)
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Tensor)], step: usize) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: format!("non-finite gradient for {}", store.name(*id)),
            });
        }
        for &(id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let n = g.len();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            adamw_update(
                store.get_mut(id).data_mut(),
                g.data(),
                &mut st.m,
                &mut st.v,
                st.t,
                self.lr,
                (self.beta1, self.beta2),
                self.eps,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

/// `‖(g_1, …, g_n)‖₂` over every parameter gradient.
pub fn grad_global_norm(grads: &Gradients) -> Real {
    global_norm(grads.params().map(|(_, g)| g))
}

pub fn global_norm<'t>(tensors: impl IntoIterator<Item = &'t Tensor>) -> Real {
    tensors.into_iter().map(Tensor::sum_sq).sum::<f64>().sqrt() as Real
}

/// Metrics of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub k: usize,
    pub report: LossReport,
    pub grad_norm: Real,
    pub masked_frames: usize,
    pub noisy_clips: usize,
    pub expired: usize,
    pub residual_norms: Vec<Real>,
}

pub const CSV_HEADER: &str = "step,mel,vq,commit,ssrr,total,grad_norm";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, r.mel, r.vq, r.commit, r.ssrr, r.total, self.grad_norm
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<StepLog>,
    /// Steps whose objective carried a non-zero representation-loss weight.
    pub ssrr_grad_steps: usize,
    /// Steps in which at least one frame was masked.
    pub masked_steps: usize,
    pub masked_frames: usize,
    pub expired: usize,
}

impl TrainReport {
    /// Mean of `f` over steps `range`.
    pub fn mean(&self, range: std::ops::Range<usize>, f: impl Fn(&StepLog) -> Real) -> Real {
        let v: Vec<Real> = self.curve.iter().filter(|s| range.contains(&s.step)).map(f).collect();
        v.iter().map(|&x| x as f64).sum::<f64>() as Real / v.len().max(1) as Real
    }
}

/// Mean absolute feature difference without a graph.
fn ssrr_value(phi: &FeatureExtractor, x: &[Real], x_hat: &[Real]) -> Result<Real> {
    let a = phi.features(x)?;
    let b = phi.features(x_hat)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).sum();
    Ok((s / a.len().max(1) as f64) as Real)
}

/// Runs the training loop on `codec` in place.
///
/// Codebooks are initialized from the first batch. After each update every
/// active level's usage is refreshed and stale entries are re-seeded from
/// that level's residuals. A non-finite loss or gradient aborts before the
/// update, so `codec` keeps the last good parameters.
pub fn train_codec(
    codec: &mut Codec,
    plan: &TrainPlan,
    dataset: &SyntheticDataset,
    phi: Option<&FeatureExtractor>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    plan.validate()?;
    if let Some(p) = phi {
        if !p.is_frozen() {
            return Err(Error::NotFrozen);
        }
    }
    let n = codec.config.frame_size;
    if plan.clip_len % n != 0 {
        return Err(Error::Config(format!("clip_len {} is not a multiple of {n}", plan.clip_len)));
    }
    let weights = LossWeights::from_config(&codec.config);
    weights.validate()?;
    let scales: Vec<MelScale> = losses::default_scales(codec.config.sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = AdamW::from_plan(plan);
    let mut report = TrainReport::default();
    let levels = codec.config.num_quantizers;

    for step in 0..plan.steps {
        let phase = plan.phase(step);
        let clips: Vec<Vec<Real>> = (0..plan.batch)
            .map(|b| dataset.clip((step * plan.batch + b) as u64))
            .collect();
        if step == 0 {
            init_codebooks(codec, &clips, &mut rng)?;
        }
        let k = if plan.dropout { sample_dropout_k(&mut rng, levels) } else { levels };
        let ssrr_w = if phase == Phase::Warmup { 0.0 } else { weights.ssrr };
        let step_w = LossWeights { ssrr: ssrr_w, ..weights };
        let frames = plan.clip_len / n;

        let mut noisy_clips = 0;
        let inputs: Vec<Vec<Real>> = clips
            .iter()
            .map(|c| {
                let mut x = c.clone();
                if apply_input_noise(&mut x, codec.config.noise_prob, codec.config.sample_rate, &mut rng).is_some() {
                    noisy_clips += 1;
                }
                x
            })
            .collect();
        let masks: Vec<Option<(Vec<bool>, Vec<bool>)>> = clips
            .iter()
            .map(|_| {
                (phase == Phase::Masked).then(|| {
                    (
                        mask_flags(frames, codec.config.mask_rate, &mut rng),
                        mask_flags(frames, codec.config.mask_rate, &mut rng),
                    )
                })
            })
            .collect();
        let masked_frames: usize = masks
            .iter()
            .flatten()
            .map(|(a, b)| a.iter().chain(b).filter(|&&m| m).count())
            .sum();

        let (log_report, grads, level_data, residual_norms) = {
            let codec_ref: &Codec = codec;
            let mut g = Graph::with_trainable(&codec_ref.store);
            let mut acc = Acc::default();
            let mut level_data: Vec<(Vec<usize>, Vec<Tensor>)> = vec![(Vec::new(), Vec::new()); k];
            let mut norms = vec![0.0 as Real; k];
            for ((clip, input), mask) in clips.iter().zip(&inputs).zip(&masks) {
                let xin = g.constant(Tensor::vector(input.clone()));
                let x = g.constant(Tensor::vector(clip.clone()));
                let m = mask.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
                let out = codec_ref.forward(&mut g, xin, k, m, QuantMode::Nearest)?;
                let (mel, per_scale) = losses::multi_scale_mel_l1(&mut g, x, out.x_hat, &scales)?;
                let (vq, commit) = rvq::vq_losses(&mut g, &out.quant)?;
                let ssrr = match phi {
                    Some(p) if ssrr_w > 0.0 => Some(losses::ssrr_loss(&mut g, p, clip, out.x_hat)?),
                    Some(p) => {
                        let v = ssrr_value(p, clip, g.value(out.x_hat).data())?;
                        acc.ssrr_detached += v as f64;
                        None
                    }
                    None => None,
                };
                let sed = match (phi, out.quant.semantic) {
                    (Some(p), Some(sem)) if codec_ref.config.style == Style::Mimi && weights.sed > 0.0 => {
                        let target = g.constant(p.features(clip)?);
                        Some(losses::cosine_distill_loss(&mut g, sem, target)?)
                    }
                    _ => None,
                };
                let terms = LossTerms {
                    mel,
                    vq,
                    commit,
                    ssrr,
                    sed,
                };
                let total = losses::total_loss(&mut g, terms, step_w)?;
                acc.push(&g, terms, total, &per_scale);
                for (l, lv) in out.quant.levels.iter().enumerate() {
                    level_data[l].0.extend_from_slice(&lv.indices);
                    level_data[l].1.push(lv.residual.clone());
                }
                for (l, v) in rvq::residual_norm_profile(&out.quant).into_iter().enumerate() {
                    norms[l] += v / plan.batch as Real;
                }
            }
            let root = acc.root(&mut g, plan.batch)?;
            let rep = acc.report(plan.batch);
            if !rep.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("loss {}", rep.total),
                });
            }
            g.check_finite().map_err(|e| Error::Diverged {
                step,
                what: e.to_string(),
            })?;
            let grads = g.backward(root)?;
            (rep, grads, level_data, norms)
        };

        let grad_norm = grad_global_norm(&grads);
        opt.step(&mut codec.store, &grads, step)?;
        drop(grads);

        let mut expired = 0;
        for (l, (indices, residuals)) in level_data.iter().enumerate() {
            let lv = codec.quantizer.levels[l].clone();
            rvq::usage_update(codec.store.get_mut(lv.ema).data_mut(), indices);
            let rows: usize = residuals.iter().map(Tensor::rows).sum();
            let c = codec.config.model_dim;
            let mut data = Vec::with_capacity(rows * c);
            for r in residuals {
                data.extend_from_slice(r.data());
            }
            let latents = Tensor::matrix(rows, c, data)?;
            expired += rvq::expire_and_reinit(&mut codec.store, &lv, &latents, &mut rng)?;
        }

        if ssrr_w > 0.0 && phi.is_some() {
            report.ssrr_grad_steps += 1;
        }
        if masked_frames > 0 {
            report.masked_steps += 1;
        }
        report.masked_frames += masked_frames;
        report.expired += expired;
        let log = StepLog {
            step,
            phase,
            k,
            report: log_report,
            grad_norm,
            masked_frames,
            noisy_clips,
            expired,
            residual_norms,
        };
        on_step(&log);
        report.curve.push(log);
    }
    Ok(report)
}

#[derive(Default)]
struct Acc {
    totals: Vec<Var>,
    mel: f64,
    vq: f64,
    commit: f64,
    ssrr: f64,
    ssrr_detached: f64,
    sed: f64,
    total: f64,
    per_scale: Vec<f64>,
}

impl Acc {
    fn push(&mut self, g: &Graph<'_>, t: LossTerms, total: Var, per_scale: &[Var]) {
        self.mel += g.scalar(t.mel) as f64;
        self.vq += g.scalar(t.vq) as f64;
        self.commit += g.scalar(t.commit) as f64;
        self.ssrr += t.ssrr.map_or(0.0, |v| g.scalar(v) as f64);
        self.sed += t.sed.map_or(0.0, |v| g.scalar(v) as f64);
        self.total += g.scalar(total) as f64;
        self.per_scale.resize(per_scale.len(), 0.0);
        for (a, &v) in self.per_scale.iter_mut().zip(per_scale) {
            *a += g.scalar(v) as f64;
        }
        self.totals.push(total);
    }

    fn root(&self, g: &mut Graph<'_>, batch: usize) -> Result<Var> {
        let mut r = *self.totals.first().ok_or(Error::EmptyInput)?;
        for &t in &self.totals[1..] {
            r = g.add(r, t)?;
        }
        Ok(g.scale(r, 1.0 / batch as Real))
    }

    fn report(&self, batch: usize) -> LossReport {
        let b = batch as f64;
        LossReport {
            mel: (self.mel / b) as Real,
            vq: (self.vq / b) as Real,
            commit: (self.commit / b) as Real,
            ssrr: ((self.ssrr + self.ssrr_detached) / b) as Real,
            sed: (self.sed / b) as Real,
            total: (self.total / b) as Real,
            mel_per_scale: self.per_scale.iter().map(|v| (v / b) as Real).collect(),
        }
    }
}

/// Seeds every codebook from the first batch's encoder latents.
pub fn init_codebooks<R: Rng>(codec: &mut Codec, clips: &[Vec<Real>], rng: &mut R) -> Result<()> {
    let mut rows = 0;
    let mut data = Vec::new();
    for clip in clips {
        let (x, _) = codec.pad_to_frames(clip);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x));
        let z = codec.encoder.forward(&mut g, &codec.store, xv, None)?;
        rows += g.value(z).rows();
        data.extend_from_slice(g.value(z).data());
    }
    let z_e = Tensor::matrix(rows, codec.config.model_dim, data)?;
    let quantizer = codec.quantizer.clone();
    quantizer.init_from_batch(&mut codec.store, &z_e, rng)
}

/// Fraction of each level's entries selected at least once when encoding
/// `clips` with all levels.
pub fn codebook_usage(codec: &Codec, clips: &[Vec<Real>]) -> Result<Vec<Real>> {
    let k = codec.config.num_quantizers;
    let v = codec.config.codebook_size;
    let mut seen = vec![vec![false; v]; k];
    for clip in clips {
        let grid = codec.encode(clip, k)?.grid;
        for f in 0..grid.frames() {
            for (l, &i) in grid.frame(f).iter().enumerate() {
                seen[l][i as usize] = true;
            }
        }
    }
    Ok(seen
        .iter()
        .map(|s| s.iter().filter(|&&b| b).count() as Real / v as Real)
        .collect())
}

/// Writes the CSV header and one row per step.
pub fn write_curve<W: Write>(w: &mut W, curve: &[StepLog]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for s in curve {
        writeln!(w, "{}", s.csv_row())?;
    }
    Ok(())
}
