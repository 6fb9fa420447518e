//! Forward/backward kernels for the fused ops on [`super::Graph`].

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::AttnLayout;
use crate::Real;
use crate::error::{Error, Result};
use crate::tensor::dot;

pub(super) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Returns `(x̂, 1/σ)` per row.
pub(super) fn normalize_rows(x: &[Real], r: usize, c: usize, eps: Real) -> (Vec<Real>, Vec<Real>) {
    let mut xhat = vec![0.0; r * c];
    let mut rstd = vec![0.0; r];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<Real>() / c as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[i] = rs;
        for j in 0..c {
            xhat[i * c + j] = (row[j] - mean) * rs;
        }
    }
    (xhat, rstd)
}

pub(super) fn layer_norm_backward(
    g: &[Real],
    gamma: &[Real],
    xhat: &[Real],
    rstd: &[Real],
    r: usize,
    c: usize,
    out: &mut [Real],
) {
    let mut gh = vec![0.0; c];
    for i in 0..r {
        let mut mean_gh = 0.0;
        let mut mean_ghx = 0.0;
        for j in 0..c {
            gh[j] = g[i * c + j] * gamma[j];
            mean_gh += gh[j];
            mean_ghx += gh[j] * xhat[i * c + j];
        }
        mean_gh /= c as Real;
        mean_ghx /= c as Real;
        for j in 0..c {
            out[i * c + j] += rstd[i] * (gh[j] - mean_gh - xhat[i * c + j] * mean_ghx);
        }
    }
}

/// Rotates channel pairs `(2p, 2p+1)` of every head by `pos · base^(-2p/d)`;
/// `inverse` applies the transpose rotation.
pub(super) fn rotate(data: &mut [Real], c: usize, heads: usize, pos0: usize, base: Real, inverse: bool) {
    let d = c / heads;
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|p| (base as f64).powf(-2.0 * p as f64 / d as f64))
        .collect();
    let rows = data.len() / c;
    for i in 0..rows {
        let pos = (pos0 + i) as f64;
        let row = &mut data[i * c..(i + 1) * c];
        for (p, &f) in inv_freq.iter().enumerate() {
            let angle = pos * f;
            let (s, co) = (angle.sin() as Real, angle.cos() as Real);
            let s = if inverse { -s } else { s };
            for h in 0..heads {
                let a = h * d + 2 * p;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * co - x1 * s;
                row[a + 1] = x0 * s + x1 * co;
            }
        }
    }
}

/// Key span `[lo, hi)` visible to query `i`.
fn key_span(i: usize, fk: usize, layout: AttnLayout) -> Result<(usize, usize)> {
    let pos = layout.q_pos0 + i;
    if pos < layout.k_pos0 {
        return Err(Error::InvalidArgument(format!(
            "query position {pos} precedes first key position {}",
            layout.k_pos0
        )));
    }
    let hi = (pos - layout.k_pos0 + 1).min(fk);
    let lo = (pos + 1).saturating_sub(layout.window).saturating_sub(layout.k_pos0);
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("query position {pos} sees no keys")));
    }
    Ok((lo, hi))
}

type AttnOut = (Vec<Real>, Vec<(usize, usize)>, Vec<Real>);

pub(super) fn attention_forward(
    q: &[Real],
    k: &[Real],
    v: &[Real],
    fq: usize,
    fk: usize,
    c: usize,
    layout: AttnLayout,
) -> Result<AttnOut> {
    let heads = layout.heads;
    let d = c / heads;
    // f64 inside a head keeps the output close to correctly rounded
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; fq * c];
    let mut spans = Vec::with_capacity(fq);
    let mut probs = Vec::new();
    let mut scores: Vec<f64> = Vec::with_capacity(layout.window);
    let mut acc = vec![0.0f64; d];
    for i in 0..fq {
        let (lo, hi) = key_span(i, fk, layout)?;
        spans.push((lo, hi));
        for h in 0..heads {
            let qh = &q[i * c + h * d..i * c + (h + 1) * d];
            scores.clear();
            for j in lo..hi {
                let kh = &k[j * c + h * d..j * c + (h + 1) * d];
                let s: f64 = qh.iter().zip(kh).map(|(&a, &b)| a as f64 * b as f64).sum();
                scores.push(s * scale);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (s, j) in scores.iter_mut().zip(lo..hi) {
                *s /= sum;
                let vh = &v[j * c + h * d..j * c + (h + 1) * d];
                for (a, &vv) in acc.iter_mut().zip(vh) {
                    *a += *s * vv as f64;
                }
            }
            for (o, &a) in out[i * c + h * d..i * c + (h + 1) * d].iter_mut().zip(&acc) {
                *o = a as Real;
            }
            probs.extend(scores.iter().map(|&p| p as Real));
        }
    }
    Ok((out, spans, probs))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward(
    g: &[Real],
    q: &[Real],
    k: &[Real],
    v: &[Real],
    c: usize,
    heads: usize,
    spans: &[(usize, usize)],
    probs: &[Real],
    gq: &mut [Real],
    gk: &mut [Real],
    gv: &mut [Real],
) {
    let d = c / heads;
    let scale = 1.0 / (d as Real).sqrt();
    let mut off = 0;
    let mut dp = Vec::new();
    for (i, &(lo, hi)) in spans.iter().enumerate() {
        for h in 0..heads {
            let n = hi - lo;
            let p = &probs[off..off + n];
            off += n;
            let go = &g[i * c + h * d..i * c + (h + 1) * d];
            dp.clear();
            for j in lo..hi {
                dp.push(dot(go, &v[j * c + h * d..j * c + (h + 1) * d]));
            }
            let inner: Real = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (t, j) in (lo..hi).enumerate() {
                let ds = p[t] * (dp[t] - inner) * scale;
                for e in 0..d {
                    let qi = i * c + h * d + e;
                    let kj = j * c + h * d + e;
                    gv[kj] += p[t] * go[e];
                    gq[qi] += ds * k[kj];
                    gk[kj] += ds * q[qi];
                }
            }
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<Real>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<Real>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<Real> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as Real)
        .collect()
}

pub(super) fn stft_frames(len: usize, fft: usize, hop: usize) -> usize {
    1 + (len.max(fft) - fft) / hop
}

/// Returns `(magnitudes, one-sided spectra, frame count)`.
pub(super) fn stft_forward(x: &[Real], fft: usize, hop: usize) -> (Vec<Real>, Vec<Complex<Real>>, usize) {
    let frames = stft_frames(x.len(), fft, hop);
    let bins = fft / 2 + 1;
    let window = hann_window(fft);
    let forward = plan(fft, false);
    let mut buf = vec![Complex::new(0.0 as Real, 0.0); fft];
    let mut mags = Vec::with_capacity(frames * bins);
    let mut spectra = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            let s = x.get(start + n).copied().unwrap_or(0.0);
            *b = Complex::new(s * window[n], 0.0);
        }
        forward.process(&mut buf);
        for b in &buf[..bins] {
            mags.push(b.norm());
            spectra.push(*b);
        }
    }
    (mags, spectra, frames)
}

/// `∂L/∂x[n] = w[n] · Re Σ_k (g_k / |X_k|) X_k e^{+2πikn/N}` per frame.
pub(super) fn stft_backward(
    g: &[Real],
    mags: &[Real],
    spectra: &[Complex<Real>],
    fft: usize,
    hop: usize,
    out: &mut [Real],
) {
    let bins = fft / 2 + 1;
    let frames = mags.len() / bins;
    let window = hann_window(fft);
    let inverse = plan(fft, true);
    let mut buf = vec![Complex::new(0.0 as Real, 0.0); fft];
    for f in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        for k in 0..bins {
            let idx = f * bins + k;
            let m = mags[idx];
            if m > 0.0 {
                buf[k] = spectra[idx] * (g[idx] / m);
            }
        }
        inverse.process(&mut buf);
        let start = f * hop;
        for n in 0..fft {
            if let Some(o) = out.get_mut(start + n) {
                *o += window[n] * buf[n].re;
            }
        }
    }
}

/// `(cos, ‖a‖, ‖b‖, floored)` with the norm product floored at `eps`.
pub(super) fn cosine(a: &[Real], b: &[Real], eps: Real) -> (Real, Real, Real, bool) {
    let ab = dot(a, b);
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let prod = na * nb;
    if prod < eps {
        (ab / eps, na, nb, true)
    } else {
        (ab / prod, na, nb, false)
    }
}
