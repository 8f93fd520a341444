//! Band-limited rational-rate resampling with a windowed-sinc kernel.
//!
//! Output sample `n` sits at input position `n * M / L`. Its integer part picks
//! the input neighbourhood and its fractional part (one of `L` phases) picks a
//! precomputed tap set, so each phase is evaluated once.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::Signal;

/// Zero crossings of the sinc on each side, measured at the lower rate.
const ZERO_CROSSINGS: f64 = 16.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.92;
/// Largest phase count for which a tap table is cached.
const MAX_TABLE_PHASES: u64 = 4096;

fn rational_ratio(fs_in: f64, fs_out: f64) -> Option<(u64, u64)> {
    // continued-fraction approximation of fs_out / fs_in = L / M
    let x = fs_out / fs_in;
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > 1e12 {
            break;
        }
        let a_u = a as u64;
        let h2 = a_u.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a_u.checked_mul(k1)?.checked_add(k0)?;
        if k2 > 1_000_000 {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64 / k1 as f64) - x).abs() <= 1e-12 * x {
            return Some((h1, k1));
        }
        let frac = r - a;
        if frac < 1e-15 {
            break;
        }
        r = 1.0 / frac;
    }
    if k1 > 0 && ((h1 as f64 / k1 as f64) - x).abs() <= 1e-12 * x {
        Some((h1, k1))
    } else {
        None
    }
}

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    let x = (u + 1.0) / 2.0;
    0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos()
}

struct Kernel {
    /// cutoff in cycles per input sample
    fc: f64,
    half_width: f64,
}

impl Kernel {
    fn new(ratio: f64) -> Self {
        let fc = 0.5 * ratio.min(1.0) * ROLLOFF;
        let half_width = ZERO_CROSSINGS / (2.0 * 0.5 * ratio.min(1.0));
        Kernel { fc, half_width }
    }

    fn value(&self, u: f64) -> f64 {
        if u.abs() >= self.half_width {
            return 0.0;
        }
        let arg = 2.0 * self.fc * u;
        let sinc = if arg.abs() < 1e-12 {
            1.0
        } else {
            (PI * arg).sin() / (PI * arg)
        };
        2.0 * self.fc * sinc * blackman(u / self.half_width)
    }

    /// Normalized taps for the fractional offset `frac` in [0, 1).
    fn taps(&self, frac: f64) -> (i64, Vec<f64>) {
        let lo = (frac - self.half_width).ceil() as i64;
        let hi = (frac + self.half_width).floor() as i64;
        let mut taps: Vec<f64> = (lo..=hi).map(|k| self.value(frac - k as f64)).collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        (lo, taps)
    }
}

fn apply(x: &[f64], base: i64, lo: i64, taps: &[f64]) -> f64 {
    let last = x.len() as i64 - 1;
    taps.iter()
        .enumerate()
        .map(|(j, &t)| {
            let idx = (base + lo + j as i64).clamp(0, last) as usize;
            t * x[idx]
        })
        .sum()
}

/// Resample to `target_fs`. Edges are extended by repeating the boundary
/// samples, so constants are preserved exactly up to rounding.
pub fn resample<T: Real>(signal: &Signal<T>, target_fs: f64) -> Result<Signal<T>> {
    if !(target_fs > 0.0 && target_fs.is_finite()) {
        return Err(Error::invalid(format!("target rate must be positive, got {target_fs}")));
    }
    let fs = signal.fs();
    if target_fs == fs {
        return Ok(signal.clone());
    }
    if signal.is_empty() {
        return Signal::new(Vec::new(), target_fs);
    }
    let x: Vec<f64> = signal.samples().iter().map(|v| v.to_f64_lossy()).collect();
    let ratio = target_fs / fs;
    let n_out = ((x.len() as f64) * ratio).round().max(1.0) as usize;
    let kernel = Kernel::new(ratio);

    let out: Vec<f64> = match rational_ratio(fs, target_fs) {
        Some((l, m)) if l <= MAX_TABLE_PHASES => {
            let table: Vec<(i64, Vec<f64>)> =
                (0..l).map(|p| kernel.taps(p as f64 / l as f64)).collect();
            (0..n_out as u64)
                .map(|n| {
                    let num = n * m;
                    let base = (num / l) as i64;
                    let (lo, taps) = &table[(num % l) as usize];
                    apply(&x, base, *lo, taps)
                })
                .collect()
        }
        _ => (0..n_out)
            .map(|n| {
                let pos = n as f64 / ratio;
                let base = pos.floor();
                let (lo, taps) = kernel.taps(pos - base);
                apply(&x, base as i64, lo, &taps)
            })
            .collect(),
    };
    Signal::new(out.into_iter().map(T::lit).collect(), target_fs)
}
