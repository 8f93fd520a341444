//! Event-specific cleanup of raw detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigio::{lowpass, sample_at_or_after, Event, EventList, Signal};

/// Slack for comparisons on durations and gaps, so that values produced by
/// cropping (e.g. `c + 1.5 - (c - 1.5)`) compare equal to their nominal bound.
const TOL: f64 = 1e-9;

pub const SPINDLE_MERGE_GAP: f64 = 0.3;
pub const SPINDLE_MIN_DURATION: f64 = 0.3;
pub const SPINDLE_MAX_DURATION: f64 = 5.0;
pub const SPINDLE_CROP_DURATION: f64 = 3.0;
pub const KCOMPLEX_MIN_DURATION: f64 = 0.3;
pub const KCOMPLEX_LOWPASS_HZ: f64 = 4.0;
pub const KCOMPLEX_IGNORE_START: f64 = 0.05;
pub const KCOMPLEX_IGNORE_END: f64 = 0.2;
/// Filter context added on each side of an event.
pub const KCOMPLEX_CONTEXT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Spindle,
    Kcomplex,
}

impl EventKind {
    /// Annotation key used in manifests.
    pub fn key(self) -> &'static str {
        match self {
            EventKind::Spindle => "spindle",
            EventKind::Kcomplex => "kcomplex",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spindle" => Ok(EventKind::Spindle),
            "kcomplex" => Ok(EventKind::Kcomplex),
            other => Err(Error::invalid(format!("unknown event type {other:?} (expected spindle or kcomplex)"))),
        }
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

fn rebuild(events: Vec<Event>) -> EventList {
    EventList::new(events).expect("postprocessing keeps events sorted and disjoint")
}

/// Merge close detections, then drop too short or too long ones, then crop
/// long survivors to their central part.
pub fn spindle_rules(events: &EventList) -> EventList {
    let mut merged: Vec<Event> = Vec::with_capacity(events.len());
    for ev in events {
        match merged.last_mut() {
            Some(prev) if ev.start - prev.end < SPINDLE_MERGE_GAP - TOL => prev.end = ev.end,
            _ => merged.push(*ev),
        }
    }
    let out = merged
        .into_iter()
        .filter(|e| e.duration() >= SPINDLE_MIN_DURATION - TOL && e.duration() <= SPINDLE_MAX_DURATION + TOL)
        .map(|e| {
            if e.duration() > SPINDLE_CROP_DURATION + TOL {
                let c = e.center();
                Event::new(c - SPINDLE_CROP_DURATION / 2.0, c + SPINDLE_CROP_DURATION / 2.0)
            } else {
                e
            }
        })
        .collect();
    rebuild(out)
}

/// Positions (seconds) where `event` should be split, from the negative
/// peaks of the low-passed signal.
pub fn kcomplex_split_points(event: &Event, signal: &Signal<f64>) -> Result<Vec<f64>> {
    let fs = signal.fs();
    let n = signal.len();
    let a = sample_at_or_after(event.start, fs).min(n);
    let b = sample_at_or_after(event.end, fs).min(n);
    let ctx = (KCOMPLEX_CONTEXT * fs).round() as usize;
    let (wa, wb) = (a.saturating_sub(ctx), (b + ctx).min(n));
    if wb - wa < 3 {
        return Ok(Vec::new());
    }
    let filtered = lowpass(&signal.slice(wa, wb), KCOMPLEX_LOWPASS_HZ)?;
    let y = filtered.samples();
    let peaks: Vec<usize> = (a.max(wa + 1)..b.min(wb - 1))
        .filter(|&i| {
            let k = i - wa;
            y[k] < 0.0 && y[k] < y[k - 1] && y[k] < y[k + 1]
        })
        .filter(|&i| {
            let t = i as f64 / fs;
            t - event.start >= KCOMPLEX_IGNORE_START && event.end - t >= KCOMPLEX_IGNORE_END
        })
        .collect();
    // peaks with no zero crossing between them form one cluster
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &p in &peaks {
        match clusters.last_mut() {
            Some(c) if !crosses_zero(&y[*c.last().unwrap() - wa..=p - wa]) => c.push(p),
            _ => clusters.push(vec![p]),
        }
    }
    let reps: Vec<f64> = clusters
        .iter()
        .map(|c| c.iter().map(|&i| i as f64 / fs).sum::<f64>() / c.len() as f64)
        .collect();
    Ok(reps.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect())
}

fn crosses_zero(y: &[f64]) -> bool {
    y.windows(2).any(|w| (w[0] < 0.0) != (w[1] < 0.0))
}

/// Drop short detections, then split detections holding several separate
/// negative deflections at the midpoints between them.
pub fn kcomplex_rules(events: &EventList, signal: &Signal<f64>) -> Result<EventList> {
    let mut out = Vec::new();
    for ev in events.iter().filter(|e| e.duration() >= KCOMPLEX_MIN_DURATION - TOL) {
        if ev.end > signal.duration() + TOL {
            return Err(Error::invalid(format!(
                "event ({}, {}) extends past the {:.3} s signal",
                ev.start,
                ev.end,
                signal.duration()
            )));
        }
        let mut start = ev.start;
        for cut in kcomplex_split_points(ev, signal)? {
            if cut > start && cut < ev.end {
                out.push(Event::new(start, cut));
                start = cut;
            }
        }
        out.push(Event::new(start, ev.end));
    }
    Ok(rebuild(out))
}

/// Apply the rules for `kind`; `signal` is needed for K-complexes.
pub fn apply(kind: EventKind, events: &EventList, signal: &Signal<f64>) -> Result<EventList> {
    match kind {
        EventKind::Spindle => Ok(spindle_rules(events)),
        EventKind::Kcomplex => kcomplex_rules(events, signal),
    }
}
