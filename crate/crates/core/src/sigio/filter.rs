//! Butterworth IIR design (bilinear transform of the analog prototype) and
//! zero-phase second-order-section filtering.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterBand {
    Lowpass(f64),
    Highpass(f64),
    Bandpass(f64, f64),
}

impl FilterBand {
    fn lowest_edge(&self) -> f64 {
        match *self {
            FilterBand::Lowpass(f) | FilterBand::Highpass(f) => f,
            FilterBand::Bandpass(lo, _) => lo,
        }
    }
}

/// Cascade of biquads `[b0, b1, b2, 1, a1, a2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<[f64; 6]>,
    /// Odd-extension length used by [`filtfilt`].
    pub padlen: usize,
}

impl Sos {
    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * f / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            let num = s[0] + z1 * s[1] + z2 * s[2];
            let den = s[3] + z1 * s[4] + z2 * s[5];
            acc * num / den
        })
    }

    /// Steady-state transposed direct form II states for a unit step input.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut gain_in = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
                let y = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let z2 = b2 - a2 * y;
                let z1 = y - b0;
                let states = [z1 * gain_in, z2 * gain_in];
                gain_in *= y;
                states
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], init: &[[f64; 2]], scale: f64) {
        for (s, zi) in self.sections.iter().zip(init) {
            let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
            let mut z1 = zi[0] * scale;
            let mut z2 = zi[1] * scale;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }
}

/// Design a digital Butterworth filter of the given prototype order.
pub fn butterworth(order: usize, band: FilterBand, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::invalid("filter order must be positive"));
    }
    let nyq = fs / 2.0;
    let check = |f: f64| {
        if f > 0.0 && f < nyq {
            Ok(())
        } else {
            Err(Error::invalid(format!("cutoff {f} Hz outside (0, {nyq}) Hz")))
        }
    };
    match band {
        FilterBand::Lowpass(f) | FilterBand::Highpass(f) => check(f)?,
        FilterBand::Bandpass(lo, hi) => {
            check(lo)?;
            check(hi)?;
            if lo >= hi {
                return Err(Error::invalid("band-pass requires lo < hi"));
            }
        }
    }

    // analog prototype, unit cutoff
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let m = -(order as f64) + 1.0 + 2.0 * k as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * order as f64))
        })
        .collect();

    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (zeros, poles, gain): (Vec<Complex64>, Vec<Complex64>, f64) = match band {
        FilterBand::Lowpass(f) => {
            let wc = warp(f);
            (vec![], proto.iter().map(|p| p * wc).collect(), wc.powi(order as i32))
        }
        FilterBand::Highpass(f) => {
            let wc = warp(f);
            let prod: Complex64 = proto.iter().map(|p| -p).product();
            (
                vec![Complex64::new(0.0, 0.0); order],
                proto.iter().map(|p| wc / p).collect(),
                1.0 / prod.re,
            )
        }
        FilterBand::Bandpass(lo, hi) => {
            let (w1, w2) = (warp(lo), warp(hi));
            let bw = w2 - w1;
            let w0 = (w1 * w2).sqrt();
            let mut poles = Vec::with_capacity(2 * order);
            for p in &proto {
                let pl = p * (bw / 2.0);
                let disc = (pl * pl - w0 * w0).sqrt();
                poles.push(pl + disc);
                poles.push(pl - disc);
            }
            (vec![Complex64::new(0.0, 0.0); order], poles, bw.powi(order as i32))
        }
    };

    // bilinear transform
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let mut dz: Vec<Complex64> = zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    let dp: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    dz.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), dp.len() - zeros.len()));
    let num: Complex64 = zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
    let dgain = gain * (num / den).re;

    let mut sections = pair_sections(&dz, &dp);
    sections[0][0] *= dgain;
    sections[0][1] *= dgain;
    sections[0][2] *= dgain;

    let padlen = ((3.0 * fs / band.lowest_edge()).ceil() as usize).max(3 * (2 * sections.len() + 1));
    Ok(Sos { sections, padlen })
}

fn pair_sections(zeros: &[Complex64], poles: &[Complex64]) -> Vec<[f64; 6]> {
    const IMAG_TOL: f64 = 1e-12;
    // pole pairs: complex conjugates first, then real poles two at a time
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > IMAG_TOL).collect();
    complex.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= IMAG_TOL)
        .map(|p| p.re)
        .collect();
    real.sort_by(|a, b| b.abs().total_cmp(&a.abs()));

    let mut den: Vec<[f64; 3]> = complex
        .iter()
        .map(|p| [1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    for chunk in real.chunks(2) {
        den.push(match *chunk {
            [a, b] => [1.0, -(a + b), a * b],
            [a] => [1.0, -a, 0.0],
            _ => unreachable!(),
        });
    }

    // zeros are real (+1 / -1 / 0 mapped); pair from both ends of the sorted list
    let mut zr: Vec<f64> = zeros.iter().map(|z| z.re).collect();
    zr.sort_by(f64::total_cmp);
    let mut num = Vec::new();
    let (mut i, mut j) = (0usize, zr.len());
    while i < j {
        if j - i >= 2 {
            let (a, b) = (zr[i], zr[j - 1]);
            num.push([1.0, -(a + b), a * b]);
            i += 1;
            j -= 1;
        } else {
            num.push([1.0, -zr[i], 0.0]);
            i += 1;
        }
    }
    while num.len() < den.len() {
        num.push([1.0, 0.0, 0.0]);
    }
    den.iter()
        .zip(&num)
        .map(|(d, n)| [n[0], n[1], n[2], d[0], d[1], d[2]])
        .collect()
}

/// Forward-backward filtering with odd extension and steady-state initial
/// conditions. The result has zero phase and squared magnitude response.
pub fn filtfilt<T: Real>(sos: &Sos, x: &[T]) -> Vec<T> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let data: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
    let pad = sos.padlen.min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (data[0], data[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - data[i]));
    ext.extend_from_slice(&data);
    ext.extend((1..=pad).map(|i| 2.0 * last - data[n - 1 - i]));

    let zi = sos.step_states();
    let x0 = ext[0];
    sos.run(&mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    sos.run(&mut ext, &zi, y0);
    ext.reverse();
    ext[pad..pad + n].iter().map(|&v| T::lit(v)).collect()
}
