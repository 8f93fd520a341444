//! Synthetic EEG with annotated spindles and K-complexes.
//!
//! Background is 1/f noise plus a band-limited theta component. Spindles are
//! Gaussian-windowed sinusoids; K-complexes are a negative Gaussian lobe
//! followed by a shorter positive rebound. Every annotation equals the
//! support of the injected waveform.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::EventKind;
use crate::sigio::{
    bandpass, write_events, write_manifest, write_signal, Event, EventList, Recording,
    RecordingManifest, Signal, EPOCH_SECONDS,
};

/// Placement attempts per event before giving up.
const MAX_ATTEMPTS: usize = 10_000;

/// Closed interval `(lo, hi)` with `lo < hi`.
pub type Range = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    /// Standard deviation of the 1/f component.
    pub noise_level: f64,
    /// Standard deviation of the 4-7 Hz component.
    pub theta_amplitude: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            noise_level: 10.0,
            theta_amplitude: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub rate_per_min: f64,
    pub freq: Range,
    pub duration: Range,
    /// Peak amplitude (the negative peak for K-complexes).
    pub amplitude: Range,
}

impl EventConfig {
    pub fn spindle() -> Self {
        EventConfig {
            rate_per_min: 3.0,
            freq: (11.0, 16.0),
            duration: (0.5, 2.0),
            amplitude: (15.0, 30.0),
        }
    }

    pub fn kcomplex() -> Self {
        EventConfig {
            rate_per_min: 1.5,
            freq: (0.5, 2.0),
            duration: (0.5, 1.5),
            amplitude: (40.0, 80.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub fs: f64,
    pub duration_sec: f64,
    pub background: BackgroundConfig,
    pub spindle: EventConfig,
    pub kcomplex: EventConfig,
    /// Minimum silence between any two events, of either type.
    pub min_gap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fs: 200.0,
            duration_sec: 600.0,
            background: BackgroundConfig::default(),
            spindle: EventConfig::spindle(),
            kcomplex: EventConfig::kcomplex(),
            min_gap: 1.0,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: Range, bounds: Range) -> Result<()> {
    if !(r.0 < r.1 && r.0 >= bounds.0 && r.1 <= bounds.1) {
        return Err(Error::invalid(format!(
            "{name} range ({}, {}) must be increasing and within ({}, {})",
            r.0, r.1, bounds.0, bounds.1
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.duration_sec > 0.0) {
            return Err(Error::invalid("fs and duration must be positive"));
        }
        if !(self.min_gap >= 0.0) {
            return Err(Error::invalid("min_gap must be non-negative"));
        }
        let b = &self.background;
        if !(b.noise_level >= 0.0 && b.theta_amplitude >= 0.0) {
            return Err(Error::invalid("background levels must be non-negative"));
        }
        for (name, ev, freq, dur) in [
            ("spindle", &self.spindle, (11.0, 16.0), (0.5, 2.0)),
            ("kcomplex", &self.kcomplex, (0.5, 2.0), (0.5, 1.5)),
        ] {
            if !(ev.rate_per_min >= 0.0 && ev.rate_per_min.is_finite()) {
                return Err(Error::invalid(format!("{name} rate must be non-negative")));
            }
            check_range(&format!("{name} frequency"), ev.freq, freq)?;
            check_range(&format!("{name} duration"), ev.duration, dur)?;
            check_range(&format!("{name} amplitude"), ev.amplitude, (0.0, f64::INFINITY))?;
        }
        // a K-complex's frequency is the inverse of its duration
        let k = &self.kcomplex;
        if 1.0 / k.duration.1 < k.freq.0 || 1.0 / k.duration.0 > k.freq.1 {
            return Err(Error::invalid(
                "kcomplex durations imply frequencies outside the frequency range",
            ));
        }
        if self.fs / 2.0 <= self.spindle.freq.1 {
            return Err(Error::invalid("fs too low for the spindle band"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    rng.gen_range(r.0..r.1)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rescale(x: &mut [f64], target_std: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let k = if sd > 0.0 { target_std / sd } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) * k);
}

/// Gaussian noise with power spectral density proportional to 1/f.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let mut spec: Vec<Complex64> = gaussian(rng, n).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    let df = fs / n as f64;
    for (k, c) in spec.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c = if bin == 0 {
            Complex64::new(0.0, 0.0)
        } else {
            *c / (bin as f64 * df).sqrt()
        };
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

fn background(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Result<Vec<f64>> {
    let b = &cfg.background;
    let mut x = pink_noise(rng, n, cfg.fs);
    rescale(&mut x, b.noise_level);
    let white = Signal::new(gaussian(rng, n), cfg.fs)?;
    let mut theta = bandpass(&white, 4.0, 7.0)?.into_samples();
    rescale(&mut theta, b.theta_amplitude);
    Ok(x.iter().zip(&theta).map(|(a, t)| a + t).collect())
}

/// Spindle waveform over `n` samples: a sinusoid under a Gaussian window
/// whose standard deviation is a quarter of the duration.
pub fn spindle_waveform(n: usize, fs: f64, freq: f64, amplitude: f64, phase: f64) -> Vec<f64> {
    let d = n as f64 / fs;
    let (c, sigma) = (d / 2.0, d / 4.0);
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / fs;
            amplitude * (-(t - c).powi(2) / (2.0 * sigma * sigma)).exp() * (2.0 * PI * freq * t + phase).sin()
        })
        .collect()
}

/// K-complex waveform over `n` samples: a negative lobe filling the first two
/// thirds and a positive rebound of half its height filling the last third.
pub fn kcomplex_waveform(n: usize, fs: f64, amplitude: f64) -> Vec<f64> {
    let d = n as f64 / fs;
    let (c_neg, s_neg) = (d / 3.0, d / 9.0);
    let (c_pos, s_pos) = (5.0 * d / 6.0, d / 18.0);
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / fs;
            let neg = (-(t - c_neg).powi(2) / (2.0 * s_neg * s_neg)).exp();
            let pos = (-(t - c_pos).powi(2) / (2.0 * s_pos * s_pos)).exp();
            amplitude * (0.5 * pos - neg)
        })
        .collect()
}

struct Placed {
    kind: EventKind,
    start: usize,
    len: usize,
}

/// Draw Poisson counts, then place events one by one at uniform positions
/// that keep `min_gap` to every event already placed.
fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Result<Vec<Placed>> {
    let gap = (cfg.min_gap * cfg.fs).ceil() as usize;
    let mut placed: Vec<Placed> = Vec::new();
    for (kind, ev) in [(EventKind::Kcomplex, &cfg.kcomplex), (EventKind::Spindle, &cfg.spindle)] {
        let lambda = ev.rate_per_min * cfg.duration_sec / 60.0;
        let count = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::invalid(format!("{kind} rate: {e}")))?
                .sample(rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let len = (uniform(rng, ev.duration) * cfg.fs).round() as usize;
            if len + 2 * gap > n {
                return Err(Error::Infeasible(format!(
                    "a {kind} of {len} samples does not fit in {n} samples"
                )));
            }
            let spot = (0..MAX_ATTEMPTS)
                .map(|_| rng.gen_range(gap..=n - gap - len))
                .find(|&s| {
                    placed
                        .iter()
                        .all(|p| s + len + gap <= p.start || p.start + p.len + gap <= s)
                })
                .ok_or_else(|| {
                    Error::Infeasible(format!(
                        "could not place {kind} #{} after {MAX_ATTEMPTS} attempts ({} events placed)",
                        placed.iter().filter(|p| p.kind == kind).count() + 1,
                        placed.len()
                    ))
                })?;
            placed.push(Placed { kind, start: spot, len });
        }
    }
    Ok(placed)
}

/// One synthetic recording with 20 s epochs and `spindle` / `kcomplex`
/// annotations.
pub fn generate(cfg: &SynthConfig) -> Result<Recording> {
    cfg.validate()?;
    let n = (cfg.duration_sec * cfg.fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let placed = place(&mut rng, cfg, n)?;
    let mut x = background(&mut rng, cfg, n)?;
    let mut lists: BTreeMap<EventKind, Vec<Event>> = BTreeMap::new();
    for p in &placed {
        let wave = match p.kind {
            EventKind::Spindle => {
                let s = &cfg.spindle;
                let f = uniform(&mut rng, s.freq);
                let a = uniform(&mut rng, s.amplitude);
                let phase = rng.gen_range(0.0..2.0 * PI);
                spindle_waveform(p.len, cfg.fs, f, a, phase)
            }
            EventKind::Kcomplex => kcomplex_waveform(p.len, cfg.fs, uniform(&mut rng, cfg.kcomplex.amplitude)),
        };
        x[p.start..p.start + p.len].iter_mut().zip(&wave).for_each(|(v, w)| *v += w);
        lists.entry(p.kind).or_default().push(Event::new(
            p.start as f64 / cfg.fs,
            (p.start + p.len) as f64 / cfg.fs,
        ));
    }
    let mut annotations = BTreeMap::new();
    for kind in [EventKind::Spindle, EventKind::Kcomplex] {
        let mut ev = lists.remove(&kind).unwrap_or_default();
        ev.sort_by(|a, b| a.start.total_cmp(&b.start));
        annotations.insert(kind.key().to_string(), EventList::new(ev)?);
    }
    let signal = Signal::new(x, cfg.fs)?;
    let epochs = Recording::tile_epochs(signal.duration(), EPOCH_SECONDS);
    Recording::new(signal, epochs, annotations)
}

/// Recording names and the manifest files that describe them, per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: SynthConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusManifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::invalid(format!("unknown split '{name}' (expected train, val or test)"))),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Seed of the `index`-th recording of a corpus.
pub fn recording_seed(base: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// Generate `train + val + test` recordings into `dir`, writing one recording
/// manifest per recording and `corpus.json` listing them.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig, counts: (usize, usize, usize)) -> Result<CorpusManifest> {
    use rayon::prelude::*;
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total = counts.0 + counts.1 + counts.2;
    let names: Vec<String> = (0..total)
        .into_par_iter()
        .map(|i| {
            let name = format!("rec{i:02}");
            let rec = generate(&SynthConfig {
                seed: recording_seed(cfg.seed, i),
                ..cfg.clone()
            })?;
            let sig = format!("{name}.sig");
            write_signal(&dir.join(&sig), &rec.signal)?;
            let mut annotations = BTreeMap::new();
            for (kind, list) in &rec.annotations {
                let file = format!("{name}.{kind}.csv");
                write_events(&dir.join(&file), list)?;
                annotations.insert(kind.clone(), file);
            }
            let manifest = RecordingManifest {
                signal: sig,
                epochs: rec.epochs.clone(),
                annotations,
            };
            let file = format!("{name}.json");
            write_manifest(&dir.join(&file), &manifest)?;
            Ok(file)
        })
        .collect::<Result<_>>()?;
    let corpus = CorpusManifest {
        config: cfg.clone(),
        train: names[..counts.0].to_vec(),
        val: names[counts.0..counts.0 + counts.1].to_vec(),
        test: names[counts.0 + counts.1..].to_vec(),
    };
    let path = dir.join("corpus.json");
    let text = serde_json::to_string_pretty(&corpus).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(corpus)
}

pub fn read_corpus(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
