//! Frozen causal feature extractor and cosine distillation.
//!
//! The extractor has the codec encoder's shape (framer plus causal stack) so
//! its features line up frame for frame with the codec latents. At desk scale
//! the teacher is a seeded random network; a student of the same shape can be
//! distilled onto it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Real;
use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::losses::cosine_distill_loss;
use crate::nnet::{AttnConfig, CausalEncoder, StackCache};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamW, SyntheticDataset};

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: CodecConfig,
    pub store: ParamStore,
    pub encoder: CausalEncoder,
    pub seed: u64,
    frozen: bool,
}

impl FeatureExtractor {
    /// Fresh trainable extractor shaped by `config` (frame size, widths, depth).
    pub fn new(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = AttnConfig {
            heads: config.heads,
            window: config.window,
            rotary_base: config.rotary_base,
        };
        let encoder = CausalEncoder::new(
            &mut store,
            "phi",
            config.frame_size,
            config.frame_hidden,
            config.model_dim,
            config.ffn_dim,
            config.layers,
            attn,
            config.layerscale_init,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            seed,
            frozen: false,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    /// Features of a frame-aligned signal already on `g`. Parameters enter as
    /// constants unless `g` was built with this extractor's store as trainable.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, samples: Var) -> Result<Var> {
        self.encoder.forward(g, &self.store, samples, None)
    }

    /// Value-only features; the signal is zero-padded to whole frames.
    pub fn features(&self, samples: &[Real]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = self.config.frame_size;
        let mut x = samples.to_vec();
        x.resize(samples.len().div_ceil(n) * n, 0.0);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(x));
        let f = self.forward(&mut g, v)?;
        Ok(g.value(f).clone())
    }

    /// Causal features of 16 kHz-style mono audio at the configured rate.
    pub fn phi_forward(&self, samples: &[Real], sample_rate: u32) -> Result<Tensor> {
        if sample_rate != self.config.sample_rate {
            return Err(Error::SampleRate {
                got: sample_rate,
                expected: self.config.sample_rate,
            });
        }
        self.features(samples)
    }

    pub fn new_cache(&self) -> StackCache {
        self.encoder.stack.new_cache()
    }

    /// Streaming features of whole frames.
    pub fn step(&self, samples: &[Real], cache: &mut StackCache) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(samples.to_vec()));
        let f = self.encoder.step(&mut g, &self.store, v, cache)?;
        Ok(g.value(f).clone())
    }
}

/// Frozen seeded random extractor standing in for a pretrained teacher.
pub fn make_surrogate_teacher(seed: u64, config: &CodecConfig) -> Result<FeatureExtractor> {
    Ok(FeatureExtractor::new(config, seed)?.freeze())
}

#[derive(Debug, Clone)]
pub struct DistillPlan {
    pub steps: usize,
    pub batch: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub seed: u64,
    pub clip_len: usize,
}

impl Default for DistillPlan {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            clip_len: 4096,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    /// Per-step mean cosine distance.
    pub curve: Vec<Real>,
    pub initial_loss: Real,
    pub final_loss: Real,
}

/// Mean frame cosine similarity between two extractors over `clips`.
pub fn mean_cosine(student: &FeatureExtractor, teacher: &FeatureExtractor, clips: &[Vec<Real>]) -> Result<Real> {
    let mut total = 0.0f64;
    for clip in clips {
        let mut g = Graph::new();
        let a = g.constant(student.features(clip)?);
        let b = g.constant(teacher.features(clip)?);
        let d = cosine_distill_loss(&mut g, a, b)?;
        total += 1.0 - g.scalar(d) as f64;
    }
    Ok((total / clips.len().max(1) as f64) as Real)
}

/// Trains a fresh student of `student_config` to match the frozen teacher's
/// features under the cosine objective and returns it frozen.
pub fn distill_student(
    teacher: &FeatureExtractor,
    student_config: &CodecConfig,
    dataset: &SyntheticDataset,
    plan: &DistillPlan,
) -> Result<(FeatureExtractor, DistillReport)> {
    if !teacher.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if student_config.model_dim != teacher.dim() || student_config.frame_size != teacher.config.frame_size {
        return Err(Error::Config("student and teacher must share frame size and width".into()));
    }
    let student = FeatureExtractor::new(student_config, plan.seed.wrapping_add(1))?;
    distill_into(teacher, student, dataset, plan)
}

/// Continues distilling an existing student.
pub fn distill_into(
    teacher: &FeatureExtractor,
    mut student: FeatureExtractor,
    dataset: &SyntheticDataset,
    plan: &DistillPlan,
) -> Result<(FeatureExtractor, DistillReport)> {
    let mut opt = AdamW::new(plan.lr, plan.weight_decay);
    let mut curve = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let clips: Vec<Vec<Real>> = (0..plan.batch)
            .map(|b| dataset.clip((step * plan.batch + b) as u64))
            .collect();
        let targets = clips.iter().map(|c| teacher.features(c)).collect::<Result<Vec<_>>>()?;
        let (loss, grads) = {
            let mut g = Graph::with_trainable(&student.store);
            let mut acc: Option<Var> = None;
            for (clip, target) in clips.iter().zip(targets) {
                let x = g.constant(Tensor::vector(clip.clone()));
                let f = student.forward(&mut g, x)?;
                let t = g.constant(target);
                let d = cosine_distill_loss(&mut g, f, t)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, d)?,
                    None => d,
                });
            }
            let acc = acc.ok_or(Error::EmptyInput)?;
            let loss = g.scale(acc, 1.0 / plan.batch as Real);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("distillation loss {value}"),
                });
            }
            (value, g.backward(loss)?)
        };
        opt.step(&mut student.store, &grads, step)?;
        curve.push(loss);
    }
    let initial_loss = curve.first().copied().unwrap_or(Real::NAN);
    let final_loss = curve.last().copied().unwrap_or(Real::NAN);
    Ok((
        student.freeze(),
        DistillReport {
            curve,
            initial_loss,
            final_loss,
        },
    ))
}
