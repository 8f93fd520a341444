//! Balanced segment sampling and the training loop with validation-driven
//! learning-rate halving.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::redmodel::{Network, DOWNSAMPLING};
use crate::sigio::{event_mask, sample_at_or_after, EventList, Recording};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Segments per batch (`M`); half come from each pool.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Iterations without validation improvement before halving (`I_lr`).
    pub patience: usize,
    /// Training stops at this many halvings (`N_lr`).
    pub max_halvings: usize,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub val_check_every: usize,
    /// Minimum decrease of the validation loss that counts as improvement.
    pub min_improvement: f64,
    /// Optional hard cap on iterations.
    pub max_iterations: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            patience: 1000,
            max_halvings: 4,
            max_grad_norm: 1.0,
            seed: 0,
            val_check_every: 50,
            min_improvement: 1e-5,
            max_iterations: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("batch size must be even and positive, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid("learning rate and gradient norm bound must be positive"));
        }
        if self.patience == 0 || self.val_check_every == 0 || self.max_halvings == 0 {
            return Err(Error::invalid("patience, validation cadence and halving budget must be positive"));
        }
        Ok(())
    }
}

/// Coarse labels for a window of `len` samples starting at sample `start`:
/// a step is positive when at least half of its `factor` samples are inside
/// an event.
pub fn label_sequence_samples(events: &EventList, start: usize, len: usize, fs: f64, factor: usize) -> Vec<u8> {
    let mut inside = vec![0usize; len / factor];
    for ev in events {
        let a = sample_at_or_after(ev.start, fs).max(start);
        let b = sample_at_or_after(ev.end, fs).min(start + len);
        for i in a..b {
            let k = (i - start) / factor;
            if k < inside.len() {
                inside[k] += 1;
            }
        }
    }
    inside.into_iter().map(|c| u8::from(2 * c >= factor)).collect()
}

/// [`label_sequence_samples`] for a window given in seconds.
pub fn label_sequence(events: &EventList, window: (f64, f64), fs: f64, factor: usize) -> Vec<u8> {
    let start = sample_at_or_after(window.0, fs);
    let end = sample_at_or_after(window.1, fs);
    label_sequence_samples(events, start, end.saturating_sub(start), fs, factor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub recording: usize,
    pub window: (f64, f64),
    pub event_samples: usize,
}

/// Training epochs split at the median event-sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPool {
    pub entries: Vec<PoolEntry>,
    pub median: f64,
    pub low: Vec<usize>,
    pub high: Vec<usize>,
}

fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

impl EpochPool {
    /// Split entries by count: below the median goes low, the rest high.
    pub fn from_entries(entries: Vec<PoolEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Pool("no training epochs".into()));
        }
        let counts: Vec<usize> = entries.iter().map(|e| e.event_samples).collect();
        let median = median(&counts);
        let (low, high): (Vec<usize>, Vec<usize>) =
            (0..entries.len()).partition(|&i| (entries[i].event_samples as f64) < median);
        Ok(EpochPool {
            entries,
            median,
            low,
            high,
        })
    }

    pub fn is_balanced(&self) -> bool {
        !self.low.is_empty() && !self.high.is_empty()
    }
}

/// Count event samples in every epoch of every training recording.
pub fn build_pool(recordings: &[Recording], kind: &str) -> Result<EpochPool> {
    let mut entries = Vec::new();
    for (r, rec) in recordings.iter().enumerate() {
        let events = rec.events(kind)?;
        let fs = rec.signal.fs();
        let mask = event_mask(events, fs, rec.signal.len());
        for &(s, e) in &rec.epochs {
            let a = sample_at_or_after(s, fs).min(mask.len());
            let b = sample_at_or_after(e, fs).min(mask.len());
            entries.push(PoolEntry {
                recording: r,
                window: (s, e),
                event_samples: mask[a..b].iter().filter(|&&m| m).count(),
            });
        }
    }
    EpochPool::from_entries(entries)
}

/// Batch of input segments with their coarse labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    /// Start sample (of the segment of interest) and recording per row.
    pub origins: Vec<(usize, usize)>,
    /// Pool entry each row was cropped from; `None` for tiled segments.
    pub epochs: Vec<Option<usize>>,
}

/// Geometry of segments cut from recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpec {
    pub len: usize,
    pub context: usize,
}

impl SegmentSpec {
    pub fn input_len(&self) -> usize {
        self.len + 2 * self.context
    }

    /// Valid range of segment starts in a recording of `n` samples.
    fn start_range(&self, n: usize) -> Result<(usize, usize)> {
        if n < self.input_len() {
            return Err(Error::SegmentLength {
                expected: self.input_len(),
                got: n,
            });
        }
        Ok((self.context, n - self.len - self.context))
    }

    /// Segment start for a crop centered at sample `center`, shifted inward
    /// so the segment and its context fit in the recording.
    pub fn start_for_center(&self, center: usize, n: usize) -> Result<usize> {
        let (lo, hi) = self.start_range(n)?;
        Ok(center.saturating_sub(self.len / 2).clamp(lo, hi))
    }
}

fn cut(
    recordings: &[Recording],
    kind: &str,
    spec: SegmentSpec,
    picks: &[(usize, usize)],
    epochs: Vec<Option<usize>>,
) -> Result<Batch> {
    let mut data = Vec::with_capacity(picks.len() * spec.input_len());
    let mut labels = Vec::with_capacity(picks.len() * spec.len / DOWNSAMPLING);
    for &(r, start) in picks {
        let rec = &recordings[r];
        let x = rec.signal.samples();
        data.extend_from_slice(&x[start - spec.context..start + spec.len + spec.context]);
        let lab = label_sequence_samples(rec.events(kind)?, start, spec.len, rec.signal.fs(), DOWNSAMPLING);
        labels.extend(lab.into_iter().map(usize::from));
    }
    Ok(Batch {
        inputs: Tensor::new(&[picks.len(), spec.input_len()], data),
        labels,
        origins: picks.to_vec(),
        epochs,
    })
}

fn random_crop(rec: &Recording, window: (f64, f64), spec: SegmentSpec, rng: &mut ChaCha8Rng) -> Result<usize> {
    let fs = rec.signal.fs();
    let n = rec.signal.len();
    let a = sample_at_or_after(window.0, fs).min(n - 1);
    let b = sample_at_or_after(window.1, fs).clamp(a + 1, n);
    let center = rng.gen_range(a..b);
    spec.start_for_center(center, n)
}

/// `M / 2` crops from each pool, each centered uniformly inside its epoch.
pub fn sample_batch(
    recordings: &[Recording],
    kind: &str,
    pool: &EpochPool,
    spec: SegmentSpec,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if !pool.is_balanced() {
        return Err(Error::Pool(format!(
            "cannot balance batches: {} epochs below the median, {} at or above",
            pool.low.len(),
            pool.high.len()
        )));
    }
    if !batch_size.is_multiple_of(2) {
        return Err(Error::invalid("batch size must be even"));
    }
    let mut picks = Vec::with_capacity(batch_size);
    let mut epochs = Vec::with_capacity(batch_size);
    for members in [&pool.low, &pool.high] {
        for _ in 0..batch_size / 2 {
            let idx = members[rng.gen_range(0..members.len())];
            let e = &pool.entries[idx];
            picks.push((e.recording, random_crop(&recordings[e.recording], e.window, spec, rng)?));
            epochs.push(Some(idx));
        }
    }
    cut(recordings, kind, spec, &picks, epochs)
}

/// Fallback when the pools cannot be balanced: epochs drawn uniformly.
pub fn sample_uniform(
    recordings: &[Recording],
    kind: &str,
    pool: &EpochPool,
    spec: SegmentSpec,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut picks = Vec::with_capacity(batch_size);
    let mut epochs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.gen_range(0..pool.entries.len());
        let e = &pool.entries[idx];
        picks.push((e.recording, random_crop(&recordings[e.recording], e.window, spec, rng)?));
        epochs.push(Some(idx));
    }
    cut(recordings, kind, spec, &picks, epochs)
}

/// Segments tiling each recording with stride `len`.
pub fn tiling_segments(recordings: &[Recording], kind: &str, spec: SegmentSpec) -> Result<Batch> {
    let mut picks = Vec::new();
    for (r, rec) in recordings.iter().enumerate() {
        let (lo, hi) = spec.start_range(rec.signal.len())?;
        picks.extend((lo..=hi).step_by(spec.len).map(|s| (r, s)));
    }
    let epochs = vec![None; picks.len()];
    cut(recordings, kind, spec, &picks, epochs)
}

/// Mean inference-mode cross-entropy over `set`, evaluated in chunks.
pub fn mean_loss(net: &Network<f64>, set: &Batch, chunk: usize) -> Result<f64> {
    let n = set.inputs.shape()[0];
    let width = set.inputs.shape()[1];
    let rows = set.labels.len() / n.max(1);
    let mut total = 0.0;
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk).min(n);
        let x = Tensor::new(&[end - start, width], set.inputs.data()[start * width..end * width].to_vec());
        let loss = net.eval_loss(x, &set.labels[start * rows..end * rows])?;
        total += loss * (end - start) as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    HalvingBudget,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss.
    pub network: Network<f64>,
    pub log: Vec<LogRow>,
    pub iterations: usize,
    pub halvings: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    pub stop: StopReason,
    pub uniform_fallback: bool,
}

impl TrainOutcome {
    /// Distinct learning rates in the order they were used.
    pub fn lr_trace(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for row in &self.log {
            if out.last() != Some(&row.lr) {
                out.push(row.lr);
            }
        }
        out
    }
}

/// Train `net` on `train` and pick the best parameters by validation loss.
/// `progress` is called after each validation check.
pub fn train(
    mut net: Network<f64>,
    train: &[Recording],
    val: &[Recording],
    kind: &str,
    config: &TrainConfig,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let spec = SegmentSpec {
        len: net.config.segment_len,
        context: net.config.context(),
    };
    let pool = build_pool(train, kind)?;
    let uniform_fallback = !pool.is_balanced();
    let val_set = tiling_segments(val, kind, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&net.store, config.learning_rate);

    let initial = mean_loss(&net, &val_set, config.batch_size)?;
    let mut log = vec![LogRow {
        iteration: 0,
        train_loss: None,
        val_loss: Some(initial),
        lr: adam.lr,
    }];
    progress(&log[0]);
    let mut best = (initial, 0usize, net.store.clone());
    let mut since_best = 0usize;
    let mut halvings = 0usize;
    let mut it = 0usize;
    let stop = loop {
        if config.max_iterations.is_some_and(|m| it >= m) {
            break StopReason::IterationCap;
        }
        it += 1;
        let batch = if uniform_fallback {
            sample_uniform(train, kind, &pool, spec, config.batch_size, &mut rng)?
        } else {
            sample_batch(train, kind, &pool, spec, config.batch_size, &mut rng)?
        };
        let dropout_seed = rng.gen::<u64>();
        let loss = net.loss_and_backward(batch.inputs, &batch.labels, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("training loss {loss} at learning rate {}", adam.lr),
            });
        }
        clip_global_norm(&mut net.store, config.max_grad_norm);
        let lr_used = adam.lr;
        adam.step(&mut net.store);
        let mut row = LogRow {
            iteration: it,
            train_loss: Some(loss),
            val_loss: None,
            lr: lr_used,
        };
        let mut halt = false;
        if it.is_multiple_of(config.val_check_every) {
            let v = mean_loss(&net, &val_set, config.batch_size)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    detail: format!("validation loss {v}"),
                });
            }
            row.val_loss = Some(v);
            if v < best.0 - config.min_improvement {
                best = (v, it, net.store.clone());
                since_best = 0;
            } else {
                since_best += config.val_check_every;
                if since_best >= config.patience {
                    halvings += 1;
                    since_best = 0;
                    if halvings >= config.max_halvings {
                        halt = true;
                    } else {
                        adam.lr /= 2.0;
                    }
                }
            }
            progress(&row);
        }
        log.push(row);
        if halt {
            break StopReason::HalvingBudget;
        }
    };
    net.store = best.2;
    Ok(TrainOutcome {
        network: net,
        log,
        iterations: it,
        halvings,
        initial_val_loss: initial,
        best_val_loss: best.0,
        best_iteration: best.1,
        stop,
        uniform_fallback,
    })
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    crate::cwt::ensure_dir(path)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    let mut out = String::from("iteration,train_loss,val_loss,lr\n");
    for r in log {
        out.push_str(&format!("{},{},{},{:e}\n", r.iteration, fmt(r.train_loss), fmt(r.val_loss), r.lr));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigio::Signal;
    use std::collections::BTreeMap;

    fn entries(counts: &[usize]) -> Vec<PoolEntry> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| PoolEntry {
                recording: 0,
                window: (i as f64, i as f64 + 1.0),
                event_samples: c,
            })
            .collect()
    }

    #[test]
    fn labels_follow_the_half_rule() {
        let ev = EventList::from_pairs(&[(0.0, 0.2)]).unwrap();
        let lab = label_sequence(&ev, (0.0, 1.0), 200.0, 8);
        assert_eq!(lab.len(), 25);
        assert_eq!(lab.iter().filter(|&&v| v == 1).count(), 5);
        assert!(lab[..5].iter().all(|&v| v == 1));
        // brute-force oracle on a ragged event
        let ev = EventList::from_pairs(&[(0.0125, 0.1525)]).unwrap();
        let lab = label_sequence(&ev, (0.0, 0.4), 200.0, 8);
        let mut oracle = Vec::new();
        for k in 0..10 {
            let inside = (8 * k..8 * k + 8)
                .filter(|&i| {
                    let t = i as f64 / 200.0;
                    (0.0125 - 1e-12..0.1525 - 1e-12).contains(&t)
                })
                .count();
            oracle.push(u8::from(inside >= 4));
        }
        assert_eq!(lab, oracle);
    }

    #[test]
    fn empty_and_full_windows() {
        assert!(label_sequence(&EventList::empty(), (0.0, 1.0), 200.0, 8).iter().all(|&v| v == 0));
        let ev = EventList::from_pairs(&[(0.0, 2.0)]).unwrap();
        assert!(label_sequence(&ev, (0.5, 1.5), 200.0, 8).iter().all(|&v| v == 1));
    }

    #[test]
    fn median_split_examples() {
        let p = EpochPool::from_entries(entries(&[0, 10, 20, 30, 100])).unwrap();
        assert_eq!(p.median, 20.0);
        assert_eq!((p.low.clone(), p.high.clone()), (vec![0, 1], vec![2, 3, 4]));
        let p = EpochPool::from_entries(entries(&[0, 4])).unwrap();
        assert_eq!((p.median, p.low.clone(), p.high.clone()), (2.0, vec![0], vec![1]));
        let p = EpochPool::from_entries(entries(&[7, 7, 7])).unwrap();
        assert!(!p.is_balanced());
        assert!(EpochPool::from_entries(vec![]).is_err());
    }

    fn recording(seconds: usize, events: &[(f64, f64)]) -> Recording {
        let fs = 100.0;
        let n = seconds * 100;
        let sig = Signal::new((0..n).map(|i| (i as f64 * 0.37).sin()).collect(), fs).unwrap();
        let mut ann = BTreeMap::new();
        ann.insert("spindle".to_string(), EventList::from_pairs(events).unwrap());
        Recording::new(sig, Recording::tile_epochs(seconds as f64, 20.0), ann).unwrap()
    }

    #[test]
    fn batches_split_evenly_and_repeat_with_seed() {
        let recs = vec![
            recording(100, &[(3.0, 4.0), (25.0, 26.0), (45.0, 46.5), (62.0, 62.5)]),
            recording(60, &[(5.0, 5.5), (40.0, 41.0)]),
        ];
        let pool = build_pool(&recs, "spindle").unwrap();
        assert!(pool.is_balanced());
        let spec = SegmentSpec { len: 400, context: 50 };
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = sample_batch(&recs, "spindle", &pool, spec, 8, &mut r1).unwrap();
            let b = sample_batch(&recs, "spindle", &pool, spec, 8, &mut r2).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.inputs.shape(), &[8, 500]);
            assert_eq!(a.labels.len(), 8 * 50);
            assert!(a.epochs[..4].iter().all(|e| pool.low.contains(&e.unwrap())));
            assert!(a.epochs[4..].iter().all(|e| pool.high.contains(&e.unwrap())));
            let low = a.origins[..4].iter().all(|&(r, s)| {
                let c = s + 200;
                pool.low.iter().any(|&i| {
                    let e = &pool.entries[i];
                    e.recording == r && (e.window.0 * 100.0 - 200.0..e.window.1 * 100.0 + 200.0).contains(&(c as f64))
                })
            });
            assert!(low);
        }
    }

    #[test]
    fn edge_crops_are_shifted_inward() {
        let spec = SegmentSpec { len: 400, context: 50 };
        assert_eq!(spec.start_for_center(0, 1000).unwrap(), 50);
        assert_eq!(spec.start_for_center(999, 1000).unwrap(), 550);
        assert!(spec.start_for_center(0, 480).is_err());
    }

    #[test]
    fn tiling_uses_stride_of_one_segment() {
        let recs = vec![recording(40, &[])];
        let b = tiling_segments(&recs, "spindle", SegmentSpec { len: 1000, context: 0 }).unwrap();
        assert_eq!(b.origins, vec![(0, 0), (0, 1000), (0, 2000), (0, 3000)]);
    }
}
