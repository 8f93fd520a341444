//! Whole-recording inference: overlapping segments stitched at the coarse
//! resolution, linear upsampling, thresholding, and threshold tuning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evalkit::af1;
use crate::postproc::{self, EventKind};
use crate::redmodel::{Network, DOWNSAMPLING};
use crate::sigio::{Event, EventList, Signal};

/// Segments per inference batch.
const PREDICT_BATCH: usize = 8;

/// One segment of the stitching plan, in coarse steps: the segment starts at
/// `offset` and supplies values for `keep.0..keep.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StitchSegment {
    pub offset: usize,
    pub keep: (usize, usize),
}

/// Segments at stride `seg / 2`, the last one right-aligned. Each keeps its
/// central half; the first and last also keep their outer quarters, and a
/// later segment takes over where its central half begins.
pub fn stitch_plan(n_coarse: usize, seg: usize) -> Result<Vec<StitchSegment>> {
    if seg < 2 || n_coarse < seg {
        return Err(Error::SegmentLength {
            expected: seg * DOWNSAMPLING,
            got: n_coarse * DOWNSAMPLING,
        });
    }
    let stride = seg / 2;
    let mut offsets: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + seg <= n_coarse).collect();
    let last = n_coarse - seg;
    if *offsets.last().expect("at least one segment") != last {
        offsets.push(last);
    }
    let starts: Vec<usize> = offsets
        .iter()
        .enumerate()
        .map(|(k, &o)| if k == 0 { 0 } else { o + seg / 4 })
        .collect();
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(k, &offset)| StitchSegment {
            offset,
            keep: (starts[k], starts.get(k + 1).copied().unwrap_or(n_coarse)),
        })
        .collect())
}

/// Class-1 probability per coarse step over a whole preprocessed recording.
/// Spectrogram context beyond the recording edges is zero.
pub fn predict_recording(net: &Network<f64>, samples: &[f64]) -> Result<Vec<f64>> {
    let cfg = &net.config;
    let seg = cfg.output_len();
    let n_coarse = samples.len() / DOWNSAMPLING;
    let plan = stitch_plan(n_coarse, seg)?;
    let ctx = cfg.context();
    let mut padded = vec![0.0; ctx];
    padded.extend_from_slice(samples);
    padded.resize(samples.len() + 2 * ctx, 0.0);
    let width = cfg.input_len();
    let outputs: Vec<Vec<f64>> = plan
        .par_chunks(PREDICT_BATCH)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * width);
            for s in chunk {
                let a = s.offset * DOWNSAMPLING;
                data.extend_from_slice(&padded[a..a + width]);
            }
            let p = net.predict(Tensor::new(&[chunk.len(), width], data))?;
            Ok(p.data().chunks(2).map(|r| r[1]).collect::<Vec<f64>>())
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = outputs.into_iter().flatten().collect();
    let mut out = vec![0.0; n_coarse];
    for (k, s) in plan.iter().enumerate() {
        let pred = &flat[k * seg..(k + 1) * seg];
        for j in s.keep.0..s.keep.1 {
            out[j] = pred[j - s.offset];
        }
    }
    Ok(out)
}

/// Linear interpolation from `L` coarse values to `factor * L` samples with
/// the first and last values on the first and last samples.
pub fn upsample_probs(coarse: &[f64], factor: usize) -> Vec<f64> {
    let l = coarse.len();
    let n = l * factor;
    if l < 2 {
        return vec![coarse.first().copied().unwrap_or(0.0); n];
    }
    let scale = (l - 1) as f64 / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let u = i as f64 * scale;
            let k = (u.floor() as usize).min(l - 2);
            let w = u - k as f64;
            coarse[k] * (1.0 - w) + coarse[k + 1] * w
        })
        .collect()
}

/// Upsample coarse probabilities to a recording of `n` samples, holding the
/// last value over a tail shorter than one coarse step.
pub fn per_sample_probs(coarse: &[f64], n: usize) -> Vec<f64> {
    let mut p = upsample_probs(coarse, DOWNSAMPLING);
    let last = p.last().copied().unwrap_or(0.0);
    p.resize(n, last);
    p
}

/// Maximal runs of samples with probability strictly above `mu`.
pub fn threshold_events(probs: &[f64], mu: f64, fs: f64) -> EventList {
    let mut events = Vec::new();
    let mut start = None;
    for (i, &p) in probs.iter().enumerate() {
        match (p > mu, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                events.push(Event::new(s as f64 / fs, i as f64 / fs));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        events.push(Event::new(s as f64 / fs, probs.len() as f64 / fs));
    }
    EventList::new(events).expect("runs are sorted and disjoint")
}

/// Candidate thresholds `0.02, 0.04, ..., 0.98`.
pub fn threshold_grid() -> Vec<f64> {
    (1..50).map(|k| k as f64 / 50.0).collect()
}

/// Per-sample probabilities of one annotated recording.
#[derive(Debug, Clone)]
pub struct TuneCase {
    pub probs: Vec<f64>,
    pub truth: EventList,
    pub signal: Signal<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub threshold: f64,
    pub af1: f64,
    /// `(threshold, mean AF1)` over the whole grid.
    pub curve: Vec<(f64, f64)>,
}

/// Detections for one threshold after postprocessing.
pub fn detect_events(probs: &[f64], signal: &Signal<f64>, mu: f64, kind: EventKind) -> Result<EventList> {
    postproc::apply(kind, &threshold_events(probs, mu, signal.fs()), signal)
}

/// Grid search for the threshold with the best mean AF1; ties go to the
/// candidate closest to 0.5.
pub fn tune_threshold(cases: &[TuneCase], kind: EventKind, iou_grid: &[f64]) -> Result<TuneResult> {
    if cases.is_empty() {
        return Err(Error::invalid("threshold tuning needs at least one recording"));
    }
    let curve: Vec<(f64, f64)> = threshold_grid()
        .into_par_iter()
        .map(|mu| {
            let mut total = 0.0;
            for c in cases {
                let pred = detect_events(&c.probs, &c.signal, mu, kind)?;
                total += af1(&c.truth, &pred, iou_grid).1;
            }
            Ok((mu, total / cases.len() as f64))
        })
        .collect::<Result<_>>()?;
    let best = curve
        .iter()
        .copied()
        .max_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| (b.0 - 0.5).abs().total_cmp(&(a.0 - 0.5).abs()))
        })
        .expect("non-empty grid");
    Ok(TuneResult {
        threshold: best.0,
        af1: best.1,
        curve,
    })
}

/// Predict, upsample and threshold one preprocessed recording.
pub fn detect(net: &Network<f64>, signal: &Signal<f64>, mu: f64, kind: EventKind) -> Result<(EventList, Vec<f64>)> {
    let coarse = predict_recording(net, signal.samples())?;
    let probs = per_sample_probs(&coarse, signal.len());
    let events = detect_events(&probs, signal, mu, kind)?;
    Ok((events, probs))
}
