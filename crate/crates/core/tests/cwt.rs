use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use red_core::cwt::{cwt_with, scale_grid, CwtConfig, CwtMethod, MorletBank};
use red_core::sigio::Signal;

fn config(fs: f64) -> CwtConfig {
    let mut cfg = CwtConfig { n_scales: 6, f_min: 1.0, f_max: 20.0, ..CwtConfig::default() };
    cfg.border = MorletBank::new(&cfg, fs).unwrap().max_half_support();
    cfg
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// plain sum over the truncated support, written out per sample
fn oracle(x: &[f64], fs: f64, cfg: &CwtConfig, row: usize, t: usize) -> (f64, f64) {
    let s = scale_grid(cfg)[row];
    let k = (cfg.eta * s * (4.5 * cfg.beta).sqrt() * fs + 1e-9).floor() as i64;
    let (mut re, mut im) = (0.0, 0.0);
    for m in -k..=k {
        let u = m as f64 / fs;
        let w = (-u * u / (cfg.beta * s * s)).exp();
        let v = x[(cfg.border as i64 + t as i64 - m) as usize];
        re += v * w * (2.0 * PI * u / s).cos();
        im -= v * w * (2.0 * PI * u / s).sin();
    }
    (re, im)
}

#[test]
fn both_paths_match_the_double_sum() {
    let fs = 100.0;
    let cfg = config(fs);
    let x = noise(300 + 2 * cfg.border, 4);
    let sig = Signal::new(x.clone(), fs).unwrap();
    for method in [CwtMethod::Direct, CwtMethod::Fft] {
        let sp = cwt_with(&sig, &cfg, method).unwrap();
        for row in 0..cfg.n_scales {
            for t in (0..300).step_by(7) {
                let (re, im) = oracle(&x, fs, &cfg, row, t);
                let k = row * sp.n_times + t;
                assert!((sp.real[k] - re).abs() < 1e-9 * (1.0 + re.abs()), "{method:?} row {row} t {t}");
                assert!((sp.imag[k] - im).abs() < 1e-9 * (1.0 + im.abs()), "{method:?} row {row} t {t}");
            }
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let fs = 100.0;
    let cfg = config(fs);
    let x = noise(200 + 2 * cfg.border, 5);
    let a = cwt_with(&Signal::new(x.clone(), fs).unwrap(), &cfg, CwtMethod::Direct).unwrap();
    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let b = cwt_with(&Signal::new(xf, fs).unwrap(), &cfg, CwtMethod::Direct).unwrap();
    let peak = a.magnitude().into_iter().fold(0.0, f64::max);
    for (p, q) in a.real.iter().zip(&b.real) {
        assert!((p - *q as f64).abs() < 1e-4 * peak);
    }
}

#[test]
fn shifting_the_input_shifts_the_output() {
    let fs = 100.0;
    let cfg = config(fs);
    let x = noise(250 + 2 * cfg.border + 10, 6);
    let a = cwt_with(&Signal::new(x[..x.len() - 10].to_vec(), fs).unwrap(), &cfg, CwtMethod::Fft).unwrap();
    let b = cwt_with(&Signal::new(x[10..].to_vec(), fs).unwrap(), &cfg, CwtMethod::Fft).unwrap();
    for row in 0..cfg.n_scales {
        let (ra, rb) = (a.row_real(row), b.row_real(row));
        for t in 0..240 {
            assert!((ra[t + 10] - rb[t]).abs() < 1e-9);
        }
    }
}

#[test]
fn insufficient_border_is_rejected() {
    let fs = 100.0;
    let mut cfg = config(fs);
    cfg.border -= 1;
    let sig = Signal::new(noise(400, 7), fs).unwrap();
    assert!(cwt_with(&sig, &cfg, CwtMethod::Direct).is_err());
}
