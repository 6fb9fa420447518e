//! Analytical MAC counts and wall-clock latency and real-time-factor
//! measurements.
//!
//! MAC convention: one multiply-accumulate per weight touched by one frame.
//! Norms, softmax, activations and rotary embeddings count zero. Attention
//! scores and the value mix count `C` MACs per visible key each, with the
//! key count capped at the window. Code search counts `V·M` per level.

use std::cell::Cell;
use std::time::{Duration, Instant};

use crate::Real;
use crate::codec::Codec;
use crate::config::CodecConfig;
use crate::error::{Error, Result};

/// MACs per frame, by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacBreakdown {
    pub framer: u64,
    pub encoder: u64,
    pub quantizer: u64,
    pub decoder: u64,
    pub deframer: u64,
}

impl MacBreakdown {
    pub fn per_frame(&self) -> u64 {
        self.framer + self.encoder + self.quantizer + self.decoder + self.deframer
    }

    pub fn per_second(&self, frame_rate: f64) -> f64 {
        self.per_frame() as f64 * frame_rate
    }
}

/// MACs of one Transformer layer for one frame with a full window.
pub fn layer_macs(config: &CodecConfig) -> u64 {
    let c = config.model_dim as u64;
    let w = config.window as u64;
    let f = config.ffn_dim as u64;
    4 * c * c + 2 * c * w + 3 * c * f
}

pub fn mac_breakdown(config: &CodecConfig) -> MacBreakdown {
    let n = config.frame_size as u64;
    let h = config.frame_hidden as u64;
    let c = config.model_dim as u64;
    let m = config.code_dim as u64;
    let v = config.codebook_size as u64;
    let k = config.num_quantizers as u64;
    let stack = config.layers as u64 * layer_macs(config);
    MacBreakdown {
        framer: n * h + h * c,
        encoder: stack,
        quantizer: k * (c * m + m * c + v * m),
        decoder: stack,
        deframer: c * h + h * n,
    }
}

/// Giga-MACs for one second of audio.
pub fn count_macs(config: &CodecConfig) -> f64 {
    mac_breakdown(config).per_second(config.frame_rate()) / 1e9
}

/// Monotonic time source; swapped out in tests.
pub trait Clock {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Advances by a fixed tick on every reading.
#[derive(Debug)]
pub struct FakeClock {
    t: Cell<Duration>,
    tick: Duration,
}

impl FakeClock {
    pub fn new(tick: Duration) -> Self {
        Self {
            t: Cell::new(Duration::ZERO),
            tick,
        }
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        let t = self.t.get() + self.tick;
        self.t.set(t);
        t
    }
}

/// Latency split: `total_ms == buffering_ms + lookahead_ms + compute_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    /// Time to fill one input frame.
    pub buffering_ms: f64,
    /// Future context the model waits for; zero for a causal model.
    pub lookahead_ms: f64,
    /// Median wall time to encode and decode one frame.
    pub compute_ms: f64,
    pub total_ms: f64,
}

impl LatencyReport {
    pub fn from_parts(buffering_ms: f64, lookahead_ms: f64, compute_ms: f64) -> Self {
        Self {
            buffering_ms,
            lookahead_ms,
            compute_ms,
            total_ms: buffering_ms + lookahead_ms + compute_ms,
        }
    }
}

pub fn buffering_ms(config: &CodecConfig) -> f64 {
    config.frame_size as f64 * 1000.0 / config.sample_rate as f64
}

/// Streams `frames` single frames through a fresh session and reports the
/// median per-frame encode+decode time alongside the analytical terms.
pub fn measure_latency(codec: &Codec, k: usize, frames: usize, clock: &dyn Clock) -> Result<LatencyReport> {
    if frames == 0 {
        return Err(Error::EmptyInput);
    }
    let n = codec.config.frame_size;
    let signal = bench_signal(frames * n, codec.config.sample_rate);
    let mut state = codec.stream(k)?;
    let mut times = Vec::with_capacity(frames);
    for chunk in signal.chunks(n) {
        let t0 = clock.now();
        let grid = codec.stream_encode_chunk(&mut state, chunk)?;
        codec.stream_decode_chunk(&mut state, &grid)?;
        times.push((clock.now() - t0).as_secs_f64() * 1000.0);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Ok(LatencyReport::from_parts(buffering_ms(&codec.config), 0.0, median))
}

/// Real-time factors; `total == enc + dec`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtfReport {
    pub enc: f64,
    pub dec: f64,
    pub total: f64,
}

/// Streams `seconds` of audio frame by frame, timing the encode and decode
/// passes separately.
pub fn measure_rtf(codec: &Codec, k: usize, seconds: f64, clock: &dyn Clock) -> Result<RtfReport> {
    if !(seconds >= 1.0) {
        return Err(Error::InvalidArgument(format!("rtf duration {seconds} s below 1 s")));
    }
    let sr = codec.config.sample_rate;
    let n = codec.config.frame_size;
    let len = ((seconds * sr as f64) as usize).div_ceil(n) * n;
    let signal = bench_signal(len, sr);
    let audio_s = len as f64 / sr as f64;

    let mut state = codec.stream(k)?;
    let t0 = clock.now();
    let mut grids = Vec::with_capacity(len / n);
    for chunk in signal.chunks(n) {
        grids.push(codec.stream_encode_chunk(&mut state, chunk)?);
    }
    let enc = (clock.now() - t0).as_secs_f64();
    let t1 = clock.now();
    for grid in &grids {
        codec.stream_decode_chunk(&mut state, grid)?;
    }
    let dec = (clock.now() - t1).as_secs_f64();
    let (enc, dec) = (enc / audio_s, dec / audio_s);
    Ok(RtfReport {
        enc,
        dec,
        total: enc + dec,
    })
}

/// One row of the cost table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub macs_g: f64,
    pub latency: LatencyReport,
    pub rtf: RtfReport,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "macs_g,buffering_ms,lookahead_ms,compute_ms,latency_ms,rtf_enc,rtf_dec,rtf_total";

    pub fn csv_row(&self) -> String {
        let l = &self.latency;
        format!(
            "{:.4},{:.3},{:.3},{:.4},{:.4},{:.5},{:.5},{:.5}",
            self.macs_g, l.buffering_ms, l.lookahead_ms, l.compute_ms, l.total_ms, self.rtf.enc, self.rtf.dec, self.rtf.total
        )
    }

    pub fn table(&self) -> String {
        let l = &self.latency;
        format!(
            "MAC (G)          {:>10.3}\n\
             buffering (ms)   {:>10.3}\n\
             lookahead (ms)   {:>10.3}\n\
             compute (ms)     {:>10.4}\n\
             latency (ms)     {:>10.4}\n\
             RTF enc          {:>10.5}\n\
             RTF dec          {:>10.5}\n\
             RTF total        {:>10.5}\n",
            self.macs_g, l.buffering_ms, l.lookahead_ms, l.compute_ms, l.total_ms, self.rtf.enc, self.rtf.dec, self.rtf.total
        )
    }
}

pub fn cost_report(codec: &Codec, k: usize, latency_frames: usize, rtf_seconds: f64, clock: &dyn Clock) -> Result<CostReport> {
    Ok(CostReport {
        macs_g: count_macs(&codec.config),
        latency: measure_latency(codec, k, latency_frames, clock)?,
        rtf: measure_rtf(codec, k, rtf_seconds, clock)?,
    })
}

/// Deterministic chirp used as benchmark input.
fn bench_signal(len: usize, sample_rate: u32) -> Vec<Real> {
    let sr = sample_rate as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            (0.4 * (std::f64::consts::TAU * (200.0 + 300.0 * t) * t).sin()) as Real
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_layers_leave_framing_and_quantizer_terms() {
        let cfg = CodecConfig {
            layers: 0,
            ..CodecConfig::toy()
        };
        let b = mac_breakdown(&cfg);
        assert_eq!(b.encoder + b.decoder, 0);
        // 64·128 + 128·32 twice, and 4·(32·8 + 8·32 + 64·8)
        assert_eq!(b.per_frame(), 2 * (8192 + 4096) + 4 * (256 + 256 + 512));
    }

    #[test]
    fn doubling_frame_rate_doubles_macs() {
        let a = CodecConfig::toy();
        let b = CodecConfig {
            sample_rate: 2 * a.sample_rate,
            ..a.clone()
        };
        assert_eq!(mac_breakdown(&a), mac_breakdown(&b));
        assert!((count_macs(&b) - 2.0 * count_macs(&a)).abs() < 1e-12);
    }

    #[test]
    fn buffering_terms_are_exact() {
        assert_eq!(buffering_ms(&CodecConfig::paper()), 20.0);
        assert_eq!(buffering_ms(&CodecConfig::toy()), 4.0);
    }

    #[test]
    fn fake_clock_latency_decomposes() {
        let codec = Codec::new(CodecConfig::toy(), 0).unwrap();
        let r = measure_latency(&codec, 2, 5, &FakeClock::new(Duration::from_millis(1))).unwrap();
        assert_eq!(r.compute_ms, 1.0);
        assert_eq!(r.total_ms, r.buffering_ms + r.lookahead_ms + r.compute_ms);
    }

    #[test]
    fn rtf_splits_and_rejects_short_runs() {
        let codec = Codec::new(CodecConfig::toy(), 0).unwrap();
        let clock = FakeClock::new(Duration::from_millis(10));
        let r = measure_rtf(&codec, 4, 1.0, &clock).unwrap();
        assert_eq!(r.total, r.enc + r.dec);
        assert!(r.enc > 0.0 && r.dec > 0.0);
        assert!(measure_rtf(&codec, 4, 0.5, &clock).is_err());
    }
}
