//! Architectural and training constants, read and written as `key=value` text.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::Real;
use crate::error::{Error, Result};

/// Quantizer topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    /// A single residual chain of `K` levels.
    Dac,
    /// One semantic level plus a residual chain of `K - 1` acoustic levels,
    /// both fed the encoder output; their outputs are summed.
    Mimi,
}

impl Style {
    pub fn code(self) -> u8 {
        match self {
            Style::Dac => 0,
            Style::Mimi => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Style::Dac),
            1 => Some(Style::Mimi),
            _ => None,
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Dac => "dac",
            Style::Mimi => "mimi",
        })
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dac" => Ok(Style::Dac),
            "mimi" => Ok(Style::Mimi),
            other => Err(Error::Config(format!("unknown style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Samples per frame (N).
    pub frame_size: usize,
    /// Width of the intermediate framing projection (768 at full scale).
    pub frame_hidden: usize,
    /// Transformer width (C).
    pub model_dim: usize,
    /// Transformer layers per stack (L).
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Attention window in frames, current frame included.
    pub window: usize,
    pub rotary_base: Real,
    pub layerscale_init: Real,
    /// Total quantizer levels (K).
    pub num_quantizers: usize,
    /// Entries per codebook (V).
    pub codebook_size: usize,
    /// Projected code dimension (M).
    pub code_dim: usize,
    pub style: Style,
    pub lambda_mel: Real,
    pub lambda_vq: Real,
    pub lambda_commit: Real,
    pub lambda_ssrr: Real,
    /// Weight of the semantic-level cosine distillation term (mimi style only).
    pub lambda_sed: Real,
    pub mask_rate: Real,
    pub noise_prob: Real,
}

impl CodecConfig {
    /// Full-size configuration: 16 kHz, 50 Hz frames, C=1024, L=8, K=8, V=1024.
    pub fn paper() -> Self {
        Self {
            sample_rate: 16_000,
            frame_size: 320,
            frame_hidden: 768,
            model_dim: 1024,
            layers: 8,
            heads: 16,
            ffn_dim: 4096,
            window: 16,
            rotary_base: 10_000.0,
            layerscale_init: 1e-2,
            num_quantizers: 8,
            codebook_size: 1024,
            code_dim: 16,
            style: Style::Mimi,
            lambda_mel: 0.1,
            lambda_vq: 1.0,
            lambda_commit: 0.1,
            lambda_ssrr: 1.0,
            lambda_sed: 1.0,
            mask_rate: 0.1,
            noise_prob: 0.1,
        }
    }

    /// Desk-scale configuration used by the tests and the toy training runs.
    pub fn toy() -> Self {
        Self {
            frame_size: 64,
            frame_hidden: 128,
            model_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            num_quantizers: 4,
            codebook_size: 64,
            code_dim: 8,
            style: Style::Dac,
            ..Self::paper()
        }
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.frame_size as f64
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn bits_per_code(&self) -> u32 {
        self.codebook_size.trailing_zeros()
    }

    /// Nominal bitrate in bits per second when `k` codebooks are transmitted.
    pub fn bitrate(&self, k: usize) -> f64 {
        k as f64 * self.bits_per_code() as f64 * self.frame_rate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frame_size == 0 || self.sample_rate as usize % self.frame_size != 0 {
            return fail(format!(
                "frame_size {} must divide sample_rate {}",
                self.frame_size, self.sample_rate
            ));
        }
        if !self.codebook_size.is_power_of_two() || self.codebook_size < 2 {
            return fail(format!("codebook_size {} must be a power of two", self.codebook_size));
        }
        if self.codebook_size > 1 << 15 {
            return fail("codebook_size above 32768".into());
        }
        if self.code_dim == 0 || self.code_dim >= self.model_dim {
            return fail(format!("code_dim {} must be in 1..model_dim", self.code_dim));
        }
        if self.num_quantizers == 0 || self.num_quantizers > 255 {
            return fail(format!("num_quantizers {} out of range", self.num_quantizers));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 || self.head_dim() % 2 != 0 {
            return fail(format!(
                "model_dim {} must split into an even head_dim over {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.window == 0 {
            return fail("window must be >= 1".into());
        }
        if self.frame_hidden == 0 || self.ffn_dim == 0 {
            return fail("frame_hidden and ffn_dim must be positive".into());
        }
        let weights = [
            self.lambda_mel,
            self.lambda_vq,
            self.lambda_commit,
            self.lambda_ssrr,
            self.lambda_sed,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return fail("loss weights must be finite and non-negative".into());
        }
        for (name, p) in [("mask_rate", self.mask_rate), ("noise_prob", self.noise_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines; unknown keys are rejected, missing keys keep
    /// the values of `base`.
    pub fn parse_with_base(text: &str, base: CodecConfig) -> Result<Self> {
        let mut cfg = base;
        for (key, value) in key_values(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "sample_rate" => self.sample_rate = num(key, value)?,
            "frame_size" => self.frame_size = num(key, value)?,
            "frame_hidden" => self.frame_hidden = num(key, value)?,
            "model_dim" => self.model_dim = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "rotary_base" => self.rotary_base = num(key, value)?,
            "layerscale_init" => self.layerscale_init = num(key, value)?,
            "num_quantizers" => self.num_quantizers = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "code_dim" => self.code_dim = num(key, value)?,
            "style" => self.style = value.parse()?,
            "lambda_mel" => self.lambda_mel = num(key, value)?,
            "lambda_vq" => self.lambda_vq = num(key, value)?,
            "lambda_commit" => self.lambda_commit = num(key, value)?,
            "lambda_ssrr" => self.lambda_ssrr = num(key, value)?,
            "lambda_sed" => self.lambda_sed = num(key, value)?,
            "mask_rate" => self.mask_rate = num(key, value)?,
            "noise_prob" => self.noise_prob = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("sample_rate", self.sample_rate.to_string());
        put("frame_size", self.frame_size.to_string());
        put("frame_hidden", self.frame_hidden.to_string());
        put("model_dim", self.model_dim.to_string());
        put("layers", self.layers.to_string());
        put("heads", self.heads.to_string());
        put("ffn_dim", self.ffn_dim.to_string());
        put("window", self.window.to_string());
        put("rotary_base", self.rotary_base.to_string());
        put("layerscale_init", self.layerscale_init.to_string());
        put("num_quantizers", self.num_quantizers.to_string());
        put("codebook_size", self.codebook_size.to_string());
        put("code_dim", self.code_dim.to_string());
        put("style", self.style.to_string());
        put("lambda_mel", self.lambda_mel.to_string());
        put("lambda_vq", self.lambda_vq.to_string());
        put("lambda_commit", self.lambda_commit.to_string());
        put("lambda_ssrr", self.lambda_ssrr.to_string());
        put("lambda_sed", self.lambda_sed.to_string());
        put("mask_rate", self.mask_rate.to_string());
        put("noise_prob", self.noise_prob.to_string());
        s
    }
}

impl FromStr for CodecConfig {
    type Err = Error;

    /// Keys not present default to the full-size configuration.
    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_base(s, Self::paper())
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_config_frames_at_50_hz() {
        let c = CodecConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.frame_rate(), 50.0);
        assert_eq!(c.bitrate(8), 4000.0);
    }

    #[test]
    fn kv_text_round_trips() {
        let mut c = CodecConfig::toy();
        c.style = Style::Mimi;
        c.lambda_ssrr = 0.0;
        let back: CodecConfig = c.to_kv_string().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!("colour=blue".parse::<CodecConfig>().is_err());
        assert!("layers=eight".parse::<CodecConfig>().is_err());
        assert!("codebook_size=1000".parse::<CodecConfig>().is_err());
        assert!("lambda_mel=-1".parse::<CodecConfig>().is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c: CodecConfig = "# toy\n\nlayers = 3 # fewer\n".parse().unwrap();
        assert_eq!(c.layers, 3);
    }
}
