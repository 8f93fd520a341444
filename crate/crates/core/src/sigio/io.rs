//! File formats: binary/CSV signals, event CSVs and recording manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Event, EventList, Recording, Signal};

/// Magic prefix of the binary signal format; followed by `fs` as f64 LE and
/// then little-endian f32 samples.
pub const SIGNAL_MAGIC: &[u8; 8] = b"REDSIG1\0";
const EVENT_HEADER: &str = "start_sec,end_sec";

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Write a signal; `.csv` paths use the text fallback, anything else the
/// binary format.
pub fn write_signal(path: &Path, signal: &Signal<f64>) -> Result<()> {
    let bytes = if is_csv(path) {
        let mut s = format!("# fs={}\n", signal.fs());
        for v in signal.samples() {
            writeln!(s, "{v}").expect("write to string");
        }
        s.into_bytes()
    } else {
        let mut b = Vec::with_capacity(16 + 4 * signal.len());
        b.extend_from_slice(SIGNAL_MAGIC);
        b.extend_from_slice(&signal.fs().to_le_bytes());
        for &v in signal.samples() {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        b
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_signal(path: &Path) -> Result<Signal<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if bytes.starts_with(SIGNAL_MAGIC) {
        if bytes.len() < 16 {
            return Err(parse_err(0, "truncated header".into()));
        }
        let fs = f64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if body.len() % 4 != 0 {
            return Err(parse_err(0, format!("payload of {} bytes is not a whole number of f32", body.len())));
        }
        let samples = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        return Signal::new(samples, fs);
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(0, "neither binary signal nor UTF-8 CSV".into()))?;
    let mut lines = text.lines().enumerate();
    let fs = match lines.next() {
        Some((_, l)) => l
            .trim()
            .strip_prefix("# fs=")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| parse_err(1, format!("expected '# fs=<Hz>' header, found '{l}'")))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let mut samples = Vec::new();
    for (i, l) in lines {
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let v: f64 = l
            .parse()
            .map_err(|_| parse_err(i + 1, format!("invalid sample '{l}'")))?;
        samples.push(v);
    }
    Signal::new(samples, fs)
}

pub fn write_events(path: &Path, events: &EventList) -> Result<()> {
    let mut s = String::from(EVENT_HEADER);
    s.push('\n');
    for ev in events {
        writeln!(s, "{:.6},{:.6}", ev.start, ev.end).expect("write to string");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<EventList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text, path)
}

pub(crate) fn parse_events(text: &str, path: &Path) -> Result<EventList> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut events: Vec<Event> = Vec::new();
    let mut lines_of = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if i == 0 && l.replace(' ', "") == EVENT_HEADER {
            continue;
        }
        let mut parts = l.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => return Err(parse_err(line_no, format!("expected two columns, found '{l}'"))),
        };
        let start: f64 = a
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid start '{a}'")))?;
        let end: f64 = b
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid end '{b}'")))?;
        events.push(Event::new(start, end));
        lines_of.push(line_no);
    }
    EventList::validate(&events).map_err(|(i, msg)| parse_err(lines_of[i], msg))?;
    EventList::new(events)
}

/// On-disk description of a recording. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub signal: String,
    pub epochs: Vec<(f64, f64)>,
    pub annotations: BTreeMap<String, String>,
}

impl RecordingManifest {
    /// Load the signal and annotations referenced by a manifest stored at `path`.
    pub fn load(&self, path: &Path) -> Result<Recording> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let signal = read_signal(&resolve(dir, &self.signal))?;
        let mut annotations = BTreeMap::new();
        for (kind, p) in &self.annotations {
            annotations.insert(kind.clone(), read_events(&resolve(dir, p))?);
        }
        Recording::new(signal, self.epochs.clone(), annotations)
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        dir.join(pb)
    }
}

pub fn read_manifest(path: &Path) -> Result<RecordingManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_manifest(path: &Path, manifest: &RecordingManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
