//! Continuous wavelet transform with truncated complex Morlet wavelets.
//!
//! For a scale `s` (seconds) the wavelet is
//! `psi_s(t) = exp(j 2 pi t / s) * exp(-t^2 / (beta s^2))` with unit
//! normalization, truncated to `|t| <= eta * s * sqrt(4.5 beta)` and sampled at
//! integer multiples of `1 / fs`. Row `i` of the transform is
//! `sum_m x[t - m] * conj(psi_{s_i}(m / fs))` evaluated on the central samples
//! of a segment carrying `border` extra samples on each side.

mod dump;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sigio::Signal;

pub use dump::{read_spectrogram, write_spectrogram, SpectrogramHeader};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwtConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub n_scales: usize,
    pub beta: f64,
    pub eta: f64,
    /// Extra samples on each side of the segment of interest (`T_B`).
    pub border: usize,
}

impl Default for CwtConfig {
    fn default() -> Self {
        CwtConfig {
            f_min: 0.5,
            f_max: 30.0,
            n_scales: 32,
            beta: 0.5,
            eta: 1.5,
            border: 1000,
        }
    }
}

impl CwtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return Err(Error::invalid(format!(
                "need 0 < f_min < f_max, got {} and {}",
                self.f_min, self.f_max
            )));
        }
        if self.n_scales < 2 {
            return Err(Error::invalid("at least two scales are required"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("wavelet width must be positive, got {}", self.beta)));
        }
        if !(self.eta >= 1.0) {
            return Err(Error::invalid(format!("support factor must be >= 1, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Geometric progression of `n_scales` scales whose central frequencies `1/s`
/// run from `f_max` down to `f_min`. Scales are strictly increasing.
pub fn scale_grid(config: &CwtConfig) -> Vec<f64> {
    let n = config.n_scales;
    let s_min = 1.0 / config.f_max;
    let s_max = 1.0 / config.f_min;
    let log_ratio = (s_max / s_min).ln() / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i == 0 {
                s_min
            } else if i == n - 1 {
                s_max
            } else {
                s_min * (log_ratio * i as f64).exp()
            }
        })
        .collect()
}

/// Truncation half-width in seconds.
pub fn half_support_seconds(scale: f64, beta: f64, eta: f64) -> f64 {
    eta * scale * (4.5 * beta).sqrt()
}

/// Truncation half-width in samples (kernel has `2K + 1` taps).
pub fn half_support_samples(scale: f64, beta: f64, eta: f64, fs: f64) -> usize {
    (half_support_seconds(scale, beta, eta) * fs + 1e-9).floor() as usize
}

/// Sampled wavelet `psi_s(k / fs)` for `k = -K..=K`.
pub fn morlet_kernel<T: Real>(scale: f64, beta: f64, eta: f64, fs: f64) -> Vec<Complex<T>> {
    let k = half_support_samples(scale, beta, eta, fs) as i64;
    (-k..=k)
        .map(|i| {
            let t = i as f64 / fs;
            let env = (-t * t / (beta * scale * scale)).exp();
            let ph = 2.0 * std::f64::consts::PI * t / scale;
            Complex::new(T::lit(env * ph.cos()), T::lit(env * ph.sin()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CwtMethod {
    #[default]
    Direct,
    Fft,
}

/// Complex time-frequency array, planes stored row-major as `(n_scales, n_times)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T: Real = f64> {
    pub real: Vec<T>,
    pub imag: Vec<T>,
    pub scales: Vec<f64>,
    pub n_times: usize,
    pub fs: f64,
}

impl<T: Real> Spectrogram<T> {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.scales.iter().map(|s| 1.0 / s).collect()
    }

    pub fn row_real(&self, i: usize) -> &[T] {
        &self.real[i * self.n_times..(i + 1) * self.n_times]
    }

    pub fn row_imag(&self, i: usize) -> &[T] {
        &self.imag[i * self.n_times..(i + 1) * self.n_times]
    }

    pub fn magnitude(&self) -> Vec<T> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect()
    }
}

/// A bank of Morlet wavelets whose supports are fixed at construction while
/// the envelope width can vary afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorletBank {
    pub scales: Vec<f64>,
    pub half_supports: Vec<usize>,
    pub fs: f64,
}

impl MorletBank {
    pub fn new(config: &CwtConfig, fs: f64) -> Result<Self> {
        config.validate()?;
        if !(fs > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        let scales = scale_grid(config);
        let half_supports = scales
            .iter()
            .map(|&s| half_support_samples(s, config.beta, config.eta, fs))
            .collect();
        Ok(MorletBank {
            scales,
            half_supports,
            fs,
        })
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn max_half_support(&self) -> usize {
        self.half_supports.iter().copied().max().unwrap_or(0)
    }

    pub fn check_border(&self, border: usize) -> Result<()> {
        let required = self.max_half_support();
        if border < required {
            return Err(Error::InsufficientPadding {
                required,
                got: border,
            });
        }
        Ok(())
    }

    /// Envelope, cosine and sine tables of row `i` for the current `beta`,
    /// indexed by `m + K`.
    fn tables(&self, i: usize, beta: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = self.half_supports[i] as i64;
        let s = self.scales[i];
        let mut env = Vec::with_capacity((2 * k + 1) as usize);
        let mut cos = Vec::with_capacity(env.capacity());
        let mut sin = Vec::with_capacity(env.capacity());
        for m in -k..=k {
            let t = m as f64 / self.fs;
            env.push((-t * t / (beta * s * s)).exp());
            let ph = 2.0 * std::f64::consts::PI * t / s;
            cos.push(ph.cos());
            sin.push(ph.sin());
        }
        (env, cos, sin)
    }

    /// Transform a padded segment; returns `(real, imag)` planes of shape
    /// `(n_scales, x.len() - 2 * border)`.
    pub fn transform<T: Real>(
        &self,
        x: &[T],
        border: usize,
        beta: f64,
        method: CwtMethod,
    ) -> Result<(Vec<T>, Vec<T>)> {
        self.check_border(border)?;
        if x.len() <= 2 * border {
            return Err(Error::invalid(format!(
                "segment of {} samples leaves nothing after removing 2 x {border} border samples",
                x.len()
            )));
        }
        let n_t = x.len() - 2 * border;
        let rows: Vec<(Vec<T>, Vec<T>)> = match method {
            CwtMethod::Direct => (0..self.n_scales())
                .into_par_iter()
                .map(|i| self.row_direct(i, x, border, n_t, beta))
                .collect(),
            CwtMethod::Fft => {
                let ctx = FftContext::new(x, self.max_half_support().max(n_t));
                (0..self.n_scales())
                    .into_par_iter()
                    .map(|i| self.row_fft(i, &ctx, border, n_t, beta))
                    .collect()
            }
        };
        let mut re = Vec::with_capacity(self.n_scales() * n_t);
        let mut im = Vec::with_capacity(self.n_scales() * n_t);
        for (r, i) in rows {
            re.extend(r);
            im.extend(i);
        }
        Ok((re, im))
    }

    fn row_direct<T: Real>(
        &self,
        i: usize,
        x: &[T],
        border: usize,
        n_t: usize,
        beta: f64,
    ) -> (Vec<T>, Vec<T>) {
        let k = self.half_supports[i];
        let (env, cos, sin) = self.tables(i, beta);
        let wr: Vec<f64> = env.iter().zip(&cos).map(|(e, c)| e * c).collect();
        let wi: Vec<f64> = env.iter().zip(&sin).map(|(e, s)| -e * s).collect();
        let mut re = Vec::with_capacity(n_t);
        let mut im = Vec::with_capacity(n_t);
        for t in 0..n_t {
            // x[border + t - m] for m = -K..=K, i.e. j = m + K
            let center = border + t;
            let (mut ar, mut ai) = (0.0f64, 0.0f64);
            for j in 0..=2 * k {
                let xv = x[center + k - j].to_f64_lossy();
                ar += xv * wr[j];
                ai += xv * wi[j];
            }
            re.push(T::lit(ar));
            im.push(T::lit(ai));
        }
        (re, im)
    }

    fn row_fft<T: Real>(
        &self,
        i: usize,
        ctx: &FftContext,
        border: usize,
        n_t: usize,
        beta: f64,
    ) -> (Vec<T>, Vec<T>) {
        let k = self.half_supports[i];
        let (env, cos, sin) = self.tables(i, beta);
        let n = ctx.n;
        // h[j] = conj(psi(j - K))
        let mut h = vec![Complex::new(0.0, 0.0); n];
        for j in 0..=2 * k {
            h[j] = Complex::new(env[j] * cos[j], -env[j] * sin[j]);
        }
        ctx.forward(&mut h);
        for (hv, xv) in h.iter_mut().zip(&ctx.spectrum) {
            *hv *= xv;
        }
        ctx.inverse(&mut h);
        let scale = 1.0 / n as f64;
        let offset = border + k;
        let re = (0..n_t).map(|t| T::lit(h[offset + t].re * scale)).collect();
        let im = (0..n_t).map(|t| T::lit(h[offset + t].im * scale)).collect();
        (re, im)
    }

    /// Gradient of a loss with respect to `beta`, given the loss gradients of
    /// the real and imaginary planes produced by [`MorletBank::transform`].
    pub fn beta_gradient<T: Real>(
        &self,
        x: &[T],
        border: usize,
        beta: f64,
        grad_re: &[T],
        grad_im: &[T],
        method: CwtMethod,
    ) -> Result<f64> {
        self.check_border(border)?;
        let n_t = x.len() - 2 * border;
        if grad_re.len() != self.n_scales() * n_t || grad_im.len() != grad_re.len() {
            return Err(Error::Shape {
                layer: "cwt",
                expected: format!("{} x {}", self.n_scales(), n_t),
                got: format!("{} values", grad_re.len()),
            });
        }
        let ctx = match method {
            CwtMethod::Fft => Some(FftContext::new(x, n_t.max(self.max_half_support()))),
            CwtMethod::Direct => None,
        };
        let parts: Vec<f64> = (0..self.n_scales())
            .into_par_iter()
            .map(|i| {
                let k = self.half_supports[i];
                let gr = &grad_re[i * n_t..(i + 1) * n_t];
                let gi = &grad_im[i * n_t..(i + 1) * n_t];
                // corr[j] = sum_t g[t] * x[border + t - m], j = m + K
                let (cr, ci) = match &ctx {
                    None => correlate_direct(x, gr, gi, border, k),
                    Some(ctx) => ctx.correlate(gr, gi, border, k),
                };
                let (env, cos, sin) = self.tables(i, beta);
                let s = self.scales[i];
                (0..=2 * k)
                    .map(|j| {
                        let t = (j as f64 - k as f64) / self.fs;
                        let denv = env[j] * t * t / (beta * beta * s * s);
                        denv * (cos[j] * cr[j] - sin[j] * ci[j])
                    })
                    .sum()
            })
            .collect();
        Ok(parts.iter().sum())
    }
}

fn correlate_direct<T: Real>(
    x: &[T],
    gr: &[T],
    gi: &[T],
    border: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut cr = vec![0.0; 2 * k + 1];
    let mut ci = vec![0.0; 2 * k + 1];
    for j in 0..=2 * k {
        let (mut a, mut b) = (0.0, 0.0);
        for t in 0..gr.len() {
            let xv = x[border + t + k - j].to_f64_lossy();
            a += gr[t].to_f64_lossy() * xv;
            b += gi[t].to_f64_lossy() * xv;
        }
        cr[j] = a;
        ci[j] = b;
    }
    (cr, ci)
}

struct FftContext {
    n: usize,
    spectrum: Vec<Complex<f64>>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl FftContext {
    fn new<T: Real>(x: &[T], extra: usize) -> Self {
        let n = (x.len() + 2 * extra + 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut spectrum = vec![Complex::new(0.0, 0.0); n];
        for (s, v) in spectrum.iter_mut().zip(x) {
            s.re = v.to_f64_lossy();
        }
        fwd.process(&mut spectrum);
        FftContext {
            n,
            spectrum,
            fwd,
            inv,
        }
    }

    fn forward(&self, buf: &mut [Complex<f64>]) {
        self.fwd.process(buf);
    }

    fn inverse(&self, buf: &mut [Complex<f64>]) {
        self.inv.process(buf);
    }

    /// `q[u] = sum_t (gr[t] + j gi[t]) x[t + u]`, read out at
    /// `u = border + K - j` for `j = 0..=2K`.
    fn correlate<T: Real>(&self, gr: &[T], gi: &[T], border: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut a = vec![Complex::new(0.0, 0.0); n];
        for t in 0..gr.len() {
            a[t] = Complex::new(gr[t].to_f64_lossy(), -gi[t].to_f64_lossy());
        }
        self.forward(&mut a);
        for (av, xv) in a.iter_mut().zip(&self.spectrum) {
            *av = av.conj() * xv;
        }
        self.inverse(&mut a);
        let scale = 1.0 / n as f64;
        let mut cr = vec![0.0; 2 * k + 1];
        let mut ci = vec![0.0; 2 * k + 1];
        for j in 0..=2 * k {
            let q = a[border + k - j] * scale;
            cr[j] = q.re;
            ci[j] = q.im;
        }
        (cr, ci)
    }
}

/// Transform a signal segment holding `config.border` padding samples on each
/// side, by direct time-domain convolution.
pub fn cwt<T: Real>(signal: &Signal<T>, config: &CwtConfig) -> Result<Spectrogram<T>> {
    cwt_with(signal, config, CwtMethod::Direct)
}

pub fn cwt_with<T: Real>(
    signal: &Signal<T>,
    config: &CwtConfig,
    method: CwtMethod,
) -> Result<Spectrogram<T>> {
    let bank = MorletBank::new(config, signal.fs())?;
    let (real, imag) = bank.transform(signal.samples(), config.border, config.beta, method)?;
    Ok(Spectrogram {
        real,
        imag,
        n_times: signal.len() - 2 * config.border,
        scales: bank.scales,
        fs: signal.fs(),
    })
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}
