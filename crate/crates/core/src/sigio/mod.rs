//! Signals, event annotations, recordings and the preprocessing chain.

mod filter;
mod io;
mod resample;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use filter::{butterworth, filtfilt, FilterBand, Sos};
pub use io::{
    read_events, read_manifest, read_signal, write_events, write_manifest, write_signal,
    RecordingManifest, SIGNAL_MAGIC,
};
pub use resample::resample;

/// Length of an annotation/analysis epoch in seconds.
pub const EPOCH_SECONDS: f64 = 20.0;

/// Clip bound applied after normalization.
pub const CLIP_BOUND: f64 = 10.0;

/// Default band-pass edges and target rate of the preprocessing chain.
pub const BANDPASS_LO_HZ: f64 = 0.3;
pub const BANDPASS_HI_HZ: f64 = 35.0;
pub const TARGET_FS: f64 = 200.0;

/// Uniformly sampled single-channel time series.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal<T: Real = f64> {
    samples: Vec<T>,
    fs: f64,
}

impl<T: Real> Signal<T> {
    pub fn new(samples: Vec<T>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Signal { samples, fs })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Samples `[start, end)` as a new signal.
    pub fn slice(&self, start: usize, end: usize) -> Signal<T> {
        Signal {
            samples: self.samples[start..end].to_vec(),
            fs: self.fs,
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Signal<U> {
        Signal {
            samples: self.samples.iter().map(|&v| f(v)).collect(),
            fs: self.fs,
        }
    }
}

/// Annotated interval in seconds, `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: f64,
    pub end: f64,
}

impl Event {
    pub fn new(start: f64, end: f64) -> Self {
        Event { start, end }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Sorted list of non-overlapping events.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        Self::validate(&events).map_err(|(i, msg)| Error::invalid(format!("event {i}: {msg}")))?;
        Ok(EventList { events })
    }

    pub fn empty() -> Self {
        EventList { events: Vec::new() }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(s, e)| Event::new(s, e)).collect())
    }

    /// Returns the index of the first offending event and a description.
    pub(crate) fn validate(events: &[Event]) -> std::result::Result<(), (usize, String)> {
        for (i, ev) in events.iter().enumerate() {
            if !(ev.start.is_finite() && ev.end.is_finite()) {
                return Err((i, "non-finite bound".into()));
            }
            if ev.start >= ev.end {
                return Err((i, format!("start {} is not before end {}", ev.start, ev.end)));
            }
            if i > 0 {
                let prev = events[i - 1];
                if ev.start < prev.start {
                    return Err((i, "events not sorted by start".into()));
                }
                if ev.start < prev.end {
                    return Err((i, format!("overlaps previous event ending at {}", prev.end)));
                }
            }
        }
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn total_duration(&self) -> f64 {
        self.events.iter().map(Event::duration).sum()
    }

    /// Events intersecting `[start, end)`, clipped to the window.
    pub fn clipped(&self, start: f64, end: f64) -> EventList {
        let events = self
            .events
            .iter()
            .filter(|e| e.end > start && e.start < end)
            .map(|e| Event::new(e.start.max(start), e.end.min(end)))
            .filter(|e| e.start < e.end)
            .collect();
        EventList { events }
    }
}

impl<'a> IntoIterator for &'a EventList {
    type Item = &'a Event;
    type IntoIter = std::slice::Iter<'a, Event>;
    fn into_iter(self) -> Self::IntoIter {
        self.events.iter()
    }
}

/// Index of the first sample whose time `n / fs` is at or after `t`.
pub fn sample_at_or_after(t: f64, fs: f64) -> usize {
    let x = t * fs;
    let r = x.round();
    // snap values that are integral up to rounding noise
    let n = if (x - r).abs() < 1e-7 { r } else { x.ceil() };
    n.max(0.0) as usize
}

/// Boolean mask of samples inside any event: sample `n` is inside `[start, end)`
/// when `start <= n / fs < end`.
pub fn event_mask(events: &EventList, fs: f64, n_samples: usize) -> Vec<bool> {
    let mut mask = vec![false; n_samples];
    for ev in events {
        let a = sample_at_or_after(ev.start, fs).min(n_samples);
        let b = sample_at_or_after(ev.end, fs).min(n_samples);
        mask[a..b].iter_mut().for_each(|m| *m = true);
    }
    mask
}

/// A signal with its analysis epochs and per-type annotations.
#[derive(Debug, Clone)]
pub struct Recording {
    pub signal: Signal<f64>,
    pub epochs: Vec<(f64, f64)>,
    pub annotations: BTreeMap<String, EventList>,
}

impl Recording {
    pub fn new(
        signal: Signal<f64>,
        epochs: Vec<(f64, f64)>,
        annotations: BTreeMap<String, EventList>,
    ) -> Result<Self> {
        let dur = signal.duration() + 1e-9;
        for (i, &(s, e)) in epochs.iter().enumerate() {
            if !(s >= 0.0 && s < e && e <= dur) {
                return Err(Error::invalid(format!(
                    "epoch {i} ({s}, {e}) does not lie within the {dur:.3} s signal"
                )));
            }
        }
        for (kind, list) in &annotations {
            if let Some(ev) = list.iter().find(|ev| ev.start < 0.0 || ev.end > dur) {
                return Err(Error::invalid(format!(
                    "{kind} event ({}, {}) lies outside the signal",
                    ev.start, ev.end
                )));
            }
        }
        Ok(Recording {
            signal,
            epochs,
            annotations,
        })
    }

    /// Consecutive fixed-length epochs covering the signal; a trailing partial
    /// window is dropped.
    pub fn tile_epochs(duration: f64, epoch_len: f64) -> Vec<(f64, f64)> {
        let n = ((duration + 1e-9) / epoch_len).floor() as usize;
        (0..n)
            .map(|i| (i as f64 * epoch_len, (i + 1) as f64 * epoch_len))
            .collect()
    }

    pub fn events(&self, kind: &str) -> Result<&EventList> {
        self.annotations
            .get(kind)
            .ok_or_else(|| Error::invalid(format!("recording has no '{kind}' annotations")))
    }
}

/// Zero-phase Butterworth band-pass (order 3, forward and backward).
pub fn bandpass<T: Real>(signal: &Signal<T>, lo: f64, hi: f64) -> Result<Signal<T>> {
    let fs = signal.fs();
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band-pass edges must satisfy 0 < lo < hi < fs/2, got lo={lo} hi={hi} fs={fs}"
        )));
    }
    let sos = butterworth(3, FilterBand::Bandpass(lo, hi), fs)?;
    Ok(Signal {
        samples: filtfilt(&sos, signal.samples()),
        fs,
    })
}

/// Zero-phase Butterworth low-pass (order 3).
pub fn lowpass<T: Real>(signal: &Signal<T>, cutoff: f64) -> Result<Signal<T>> {
    let fs = signal.fs();
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::invalid(format!(
            "low-pass cutoff must lie in (0, fs/2), got {cutoff} at fs={fs}"
        )));
    }
    let sos = butterworth(3, FilterBand::Lowpass(cutoff), fs)?;
    Ok(Signal {
        samples: filtfilt(&sos, signal.samples()),
        fs,
    })
}

/// Divide by a global standard deviation and clip to `[-10, 10]`.
pub fn normalize<T: Real>(signal: &Signal<T>, global_std: f64) -> Result<Signal<T>> {
    if !(global_std > 0.0 && global_std.is_finite()) {
        return Err(Error::invalid(format!(
            "global standard deviation must be positive, got {global_std}"
        )));
    }
    let inv = T::lit(1.0 / global_std);
    let bound = T::lit(CLIP_BOUND);
    Ok(signal.map(|v| {
        let q = v * inv;
        q.max(-bound).min(bound)
    }))
}

/// Standard deviation over the concatenation of all given signals.
pub fn global_std<T: Real>(signals: &[&Signal<T>]) -> Result<f64> {
    let n: usize = signals.iter().map(|s| s.len()).sum();
    if n < 2 {
        return Err(Error::invalid("global std needs at least two samples"));
    }
    let sum: f64 = signals
        .iter()
        .flat_map(|s| s.samples().iter())
        .map(|v| v.to_f64_lossy())
        .sum();
    let mean = sum / n as f64;
    let ss: f64 = signals
        .iter()
        .flat_map(|s| s.samples().iter())
        .map(|v| (v.to_f64_lossy() - mean).powi(2))
        .sum();
    let std = (ss / n as f64).sqrt();
    if std > 0.0 {
        Ok(std)
    } else {
        Err(Error::Degenerate("signals have zero variance".into()))
    }
}

/// Band-pass and resample; normalization is applied separately because its
/// scale comes from the whole non-testing set.
pub fn filter_and_resample<T: Real>(signal: &Signal<T>) -> Result<Signal<T>> {
    let filtered = bandpass(signal, BANDPASS_LO_HZ, BANDPASS_HI_HZ)?;
    resample(&filtered, TARGET_FS)
}

/// [`filter_and_resample`] applied to a recording. Epochs and annotations
/// are kept, clipped to the resampled duration.
pub fn preprocess_recording(rec: &Recording) -> Result<Recording> {
    let signal = filter_and_resample(&rec.signal)?;
    let dur = signal.duration();
    let epochs = rec
        .epochs
        .iter()
        .map(|&(s, e)| (s, e.min(dur)))
        .filter(|&(s, e)| s < e)
        .collect();
    let annotations = rec
        .annotations
        .iter()
        .map(|(k, v)| (k.clone(), v.clipped(0.0, dur)))
        .collect();
    Recording::new(signal, epochs, annotations)
}

/// Filter every recording, then normalize all of them by the global standard
/// deviation, computed over the filtered set unless given.
pub fn prepare_recordings(recs: &[Recording], scale: Option<f64>) -> Result<(Vec<Recording>, f64)> {
    use rayon::prelude::*;
    let filtered: Vec<Recording> = recs.par_iter().map(preprocess_recording).collect::<Result<_>>()?;
    let std = match scale {
        Some(s) => s,
        None => global_std(&filtered.iter().map(|r| &r.signal).collect::<Vec<_>>())?,
    };
    let out = filtered
        .into_iter()
        .map(|mut r| {
            r.signal = normalize(&r.signal, std)?;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok((out, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_rejects_bad_rate_and_nan() {
        assert!(Signal::new(vec![0.0f64; 4], 0.0).is_err());
        assert!(Signal::new(vec![0.0f64, f64::NAN], 100.0).is_err());
        assert!(Signal::new(vec![1.0f32, 2.0], 100.0).is_ok());
    }

    #[test]
    fn event_list_invariants() {
        assert!(EventList::from_pairs(&[(1.0, 1.5)]).is_ok());
        assert!(EventList::from_pairs(&[(1.5, 1.0)]).is_err());
        assert!(EventList::from_pairs(&[(2.0, 3.0), (1.0, 1.5)]).is_err());
        assert!(EventList::from_pairs(&[(1.0, 2.0), (1.5, 3.0)]).is_err());
        // touching is allowed
        assert!(EventList::from_pairs(&[(1.0, 2.0), (2.0, 3.0)]).is_ok());
    }

    #[test]
    fn normalize_divides_and_clips() {
        let s = Signal::new(vec![2.0, -4.0], 100.0).unwrap();
        assert_eq!(normalize(&s, 2.0).unwrap().samples(), &[1.0, -2.0]);
        let s = Signal::new(vec![25.0, -25.0], 100.0).unwrap();
        assert_eq!(normalize(&s, 1.0).unwrap().samples(), &[10.0, -10.0]);
        assert!(normalize(&s, 0.0).is_err());
        assert!(normalize(&s, -1.0).is_err());
    }

    #[test]
    fn normalize_is_idempotent_in_range() {
        let s = Signal::new(vec![0.5, -3.0, 9.9, -10.0], 100.0).unwrap();
        let once = normalize(&s, 1.0).unwrap();
        assert_eq!(normalize(&once, 1.0).unwrap(), once);
    }

    #[test]
    fn global_std_uses_concatenation() {
        let a = Signal::new(vec![1.0, 1.0], 1.0).unwrap();
        let b = Signal::new(vec![-1.0, -1.0], 1.0).unwrap();
        // each recording alone has zero variance; together std is 1
        assert!((global_std(&[&a, &b]).unwrap() - 1.0).abs() < 1e-12);
        assert!(global_std(&[&a]).is_err());
    }

    #[test]
    fn bandpass_rejects_invalid_band() {
        let s = Signal::new(vec![0.0f64; 100], 200.0).unwrap();
        assert!(bandpass(&s, 0.0, 35.0).is_err());
        assert!(bandpass(&s, 40.0, 35.0).is_err());
        assert!(bandpass(&s, 0.3, 100.0).is_err());
    }

    #[test]
    fn bandpass_of_zero_is_zero() {
        let s = Signal::new(vec![0.0f64; 2000], 200.0).unwrap();
        let y = bandpass(&s, 0.3, 35.0).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_uses_half_open_sample_rule() {
        let ev = EventList::from_pairs(&[(0.0, 0.2)]).unwrap();
        let m = event_mask(&ev, 200.0, 100);
        assert_eq!(m.iter().filter(|&&b| b).count(), 40);
        assert!(m[39] && !m[40]);
    }

    #[test]
    fn recording_rejects_out_of_range() {
        let sig = Signal::new(vec![0.0; 4000], 200.0).unwrap();
        assert!(Recording::new(sig.clone(), vec![(0.0, 30.0)], BTreeMap::new()).is_err());
        let mut ann = BTreeMap::new();
        ann.insert("spindle".to_string(), EventList::from_pairs(&[(19.0, 21.0)]).unwrap());
        assert!(Recording::new(sig.clone(), vec![(0.0, 20.0)], ann).is_err());
        assert_eq!(Recording::tile_epochs(45.0, 20.0), vec![(0.0, 20.0), (20.0, 40.0)]);
    }
}
