//! Reconstruction and representation losses.

use crate::Real;
use crate::autodiff::{Graph, Var};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::ssr::FeatureExtractor;
use crate::tensor::Tensor;

pub const LOG_EPS: Real = 1e-5;
pub const COSINE_EPS: Real = 1e-8;

/// FFT sizes of the default multi-scale mel loss; hop is a quarter of each.
pub const MEL_FFT_SIZES: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
pub const MEL_BINS: [usize; 6] = [8, 16, 32, 64, 80, 128];

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// One STFT resolution of the mel loss.
#[derive(Debug, Clone)]
pub struct MelScale {
    pub fft_size: usize,
    pub hop: usize,
    pub mel_bins: usize,
    /// Triangular filters, `[fft/2 + 1, mel_bins]`.
    pub filterbank: Tensor,
}

impl MelScale {
    pub fn new(fft_size: usize, mel_bins: usize, sample_rate: u32) -> Result<Self> {
        if !fft_size.is_power_of_two() || fft_size < 4 {
            return Err(Error::InvalidArgument(format!("fft size {fft_size} must be a power of two")));
        }
        let mel_bins = mel_bins.min(fft_size / 2);
        if mel_bins == 0 {
            return Err(Error::InvalidArgument("mel_bins must be positive".into()));
        }
        Ok(Self {
            fft_size,
            hop: fft_size / 4,
            mel_bins,
            filterbank: mel_filterbank(fft_size, mel_bins, sample_rate),
        })
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self, sample_rate: u32) -> Vec<f64> {
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        (1..=self.mel_bins)
            .map(|m| mel_to_hz(top * m as f64 / (self.mel_bins + 1) as f64))
            .collect()
    }
}

/// Peak-one triangular filters on the HTK mel scale spanning `0..sr/2`.
pub fn mel_filterbank(fft_size: usize, mel_bins: usize, sample_rate: u32) -> Tensor {
    let bins = fft_size / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[bins, mel_bins]);
    for k in 0..bins {
        let f = k as f64 * sample_rate as f64 / fft_size as f64;
        for m in 0..mel_bins {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.data_mut()[k * mel_bins + m] = w as Real;
        }
    }
    fb
}

pub fn default_scales(sample_rate: u32) -> Vec<MelScale> {
    MEL_FFT_SIZES
        .iter()
        .zip(MEL_BINS)
        .map(|(&f, b)| MelScale::new(f, b, sample_rate).expect("static scales are valid"))
        .collect()
}

/// `log(1e-5 + mel)` of a 1-D signal, `[frames, mel_bins]`.
pub fn mel_spectrogram(g: &mut Graph<'_>, x: Var, scale: &MelScale) -> Result<Var> {
    let mag = g.stft_magnitude(x, scale.fft_size, scale.hop)?;
    let fb = g.constant(scale.filterbank.clone());
    let mel = g.matmul(mag, fb)?;
    Ok(g.log_eps(mel, LOG_EPS))
}

/// Value-only mel spectrogram.
pub fn mel_spectrogram_of(samples: &[Real], scale: &MelScale) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(samples.to_vec()));
    let m = mel_spectrogram(&mut g, x, scale)?;
    Ok(g.value(m).clone())
}

/// Mean over scales of the mean absolute log-mel difference. Returns the
/// loss and the per-scale terms.
pub fn multi_scale_mel_l1(g: &mut Graph<'_>, x: Var, x_hat: Var, scales: &[MelScale]) -> Result<(Var, Vec<Var>)> {
    let (lx, ly) = (g.value(x).len(), g.value(x_hat).len());
    if lx != ly {
        return Err(Error::shape("multi_scale_mel_l1", format!("{lx} vs {ly} samples")));
    }
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no mel scales".into()));
    }
    let mut terms = Vec::with_capacity(scales.len());
    for s in scales {
        let a = mel_spectrogram(g, x, s)?;
        let b = mel_spectrogram(g, x_hat, s)?;
        let d = g.sub(a, b)?;
        terms.push(g.mean_abs(d));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((g.scale(total, 1.0 / scales.len() as Real), terms))
}

/// L1 distance between frozen features of the reference and the
/// reconstruction. Gradient reaches `x_hat` only.
pub fn ssrr_loss<'a>(g: &mut Graph<'a>, phi: &'a FeatureExtractor, x: &[Real], x_hat: Var) -> Result<Var> {
    if !phi.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let target = phi.features(x)?;
    let t = g.constant(target);
    let f = phi.forward(g, x_hat)?;
    let d = g.sub(f, t)?;
    Ok(g.mean_abs(d))
}

/// Mean over frames of `1 − cos(student_t, teacher_t)`.
pub fn cosine_distill_loss(g: &mut Graph<'_>, student: Var, teacher: Var) -> Result<Var> {
    g.cosine_distance(student, teacher, COSINE_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mel: Real,
    pub vq: Real,
    pub commit: Real,
    pub ssrr: Real,
    pub sed: Real,
}

impl LossWeights {
    pub fn from_config(c: &CodecConfig) -> Self {
        Self {
            mel: c.lambda_mel,
            vq: c.lambda_vq,
            commit: c.lambda_commit,
            ssrr: c.lambda_ssrr,
            sed: c.lambda_sed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mel, self.vq, self.commit, self.ssrr, self.sed];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("negative or non-finite loss weight in {self:?}")));
        }
        Ok(())
    }
}

/// Component handles of one objective evaluation; absent terms count as 0.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mel: Var,
    pub vq: Var,
    pub commit: Var,
    pub ssrr: Option<Var>,
    pub sed: Option<Var>,
}

/// Weighted sum `λ_mel·mel + λ_vq·vq + λ_commit·commit + λ_ssrr·ssrr + λ_sed·sed`.
pub fn total_loss(g: &mut Graph<'_>, terms: LossTerms, w: LossWeights) -> Result<Var> {
    w.validate()?;
    let mut parts = vec![(terms.mel, w.mel), (terms.vq, w.vq), (terms.commit, w.commit)];
    if let Some(s) = terms.ssrr {
        parts.push((s, w.ssrr));
    }
    if let Some(s) = terms.sed {
        parts.push((s, w.sed));
    }
    let mut total: Option<Var> = None;
    for (v, lambda) in parts {
        if lambda == 0.0 {
            continue;
        }
        let t = g.scale(v, lambda);
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Scalar summary of one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub mel: Real,
    pub vq: Real,
    pub commit: Real,
    pub ssrr: Real,
    pub sed: Real,
    pub total: Real,
    pub mel_per_scale: Vec<Real>,
}

impl LossReport {
    /// The weighted total recomputed from the components.
    pub fn weighted_total(&self, w: LossWeights) -> Real {
        w.mel * self.mel + w.vq * self.vq + w.commit * self.commit + w.ssrr * self.ssrr + w.sed * self.sed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_filter_covers_at_least_one_bin() {
        for s in default_scales(16_000) {
            for m in 0..s.mel_bins {
                let mass: Real = (0..s.filterbank.rows()).map(|k| s.filterbank.data()[k * s.mel_bins + m]).sum();
                assert!(mass > 0.0, "fft {} filter {m}", s.fft_size);
            }
        }
    }

    #[test]
    fn zero_signal_gives_log_floor() {
        let s = MelScale::new(256, 32, 16_000).unwrap();
        let m = mel_spectrogram_of(&vec![0.0; 1024], &s).unwrap();
        let floor = LOG_EPS.ln();
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_in_nearest_filter() {
        let sr = 16_000;
        let s = MelScale::new(1024, 80, sr).unwrap();
        let centers = s.centers(sr);
        for &m in &[20usize, 45, 70] {
            let f = centers[m];
            let x: Vec<Real> = (0..4096)
                .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / sr as f64).sin() as Real * 0.5)
                .collect();
            let mel = mel_spectrogram_of(&x, &s).unwrap();
            let row = mel.row(3);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, m);
        }
    }

    #[test]
    fn mel_l1_is_zero_on_identical_and_symmetric() {
        let scales = default_scales(16_000);
        let a: Vec<Real> = (0..2048).map(|i| ((i * 13 % 29) as Real / 29.0) - 0.5).collect();
        let b: Vec<Real> = (0..2048).map(|i| ((i * 7 % 31) as Real / 31.0) - 0.5).collect();
        let mut g = Graph::new();
        let (xa, xb) = (g.constant(Tensor::vector(a)), g.constant(Tensor::vector(b)));
        let (same, _) = multi_scale_mel_l1(&mut g, xa, xa, &scales).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let (ab, _) = multi_scale_mel_l1(&mut g, xa, xb, &scales).unwrap();
        let (ba, _) = multi_scale_mel_l1(&mut g, xb, xa, &scales).unwrap();
        assert_eq!(g.scalar(ab), g.scalar(ba));
        assert!(g.scalar(ab) > 0.0);
    }

    #[test]
    fn mel_l1_rejects_length_mismatch() {
        let scales = default_scales(16_000);
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0; 100]));
        let b = g.constant(Tensor::vector(vec![0.0; 101]));
        assert!(multi_scale_mel_l1(&mut g, a, b, &scales).is_err());
    }

    #[test]
    fn cosine_extremes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap());
        let neg = g.scale(a, -1.0);
        let same = cosine_distill_loss(&mut g, a, a).unwrap();
        let anti = cosine_distill_loss(&mut g, a, neg).unwrap();
        assert!(g.scalar(same).abs() < 1e-6);
        assert!((g.scalar(anti) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn total_of_zero_components_is_zero_and_weights_apply() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let w = LossWeights {
            mel: 0.1,
            vq: 1.0,
            commit: 0.1,
            ssrr: 1.0,
            sed: 0.0,
        };
        let t = total_loss(
            &mut g,
            LossTerms {
                mel: z,
                vq: z,
                commit: z,
                ssrr: Some(z),
                sed: None,
            },
            w,
        )
        .unwrap();
        assert_eq!(g.scalar(t), 0.0);

        let vals = [0.731 as Real, 0.0213, 0.4471, 0.1189];
        let vs: Vec<Var> = vals.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let t = total_loss(
            &mut g,
            LossTerms {
                mel: vs[0],
                vq: vs[1],
                commit: vs[2],
                ssrr: Some(vs[3]),
                sed: None,
            },
            w,
        )
        .unwrap();
        let expect = 0.1 * vals[0] as f64 + vals[1] as f64 + 0.1 * vals[2] as f64 + vals[3] as f64;
        assert!((g.scalar(t) as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let w = LossWeights {
            mel: -0.1,
            vq: 1.0,
            commit: 0.1,
            ssrr: 0.0,
            sed: 0.0,
        };
        let terms = LossTerms {
            mel: z,
            vq: z,
            commit: z,
            ssrr: None,
            sed: None,
        };
        assert!(total_loss(&mut g, terms, w).is_err());
    }
}
