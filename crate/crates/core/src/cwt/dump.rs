//! Spectrogram export: a JSON header next to a raw plane file.
//!
//! `<stem>.json` describes the array; `<stem>.bin` holds the real plane then
//! the imaginary plane, each row-major `(n_scales, n_times)` little-endian f64.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ensure_dir, Spectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramHeader {
    pub n_scales: usize,
    pub n_times: usize,
    pub fs: f64,
    pub scales: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub dtype: String,
    pub layout: String,
    pub data_file: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_spectrogram(stem: &Path, sp: &Spectrogram<f64>) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    ensure_dir(&json_path)?;
    let header = SpectrogramHeader {
        n_scales: sp.n_scales(),
        n_times: sp.n_times,
        fs: sp.fs,
        scales: sp.scales.clone(),
        frequencies: sp.frequencies(),
        dtype: "f64le".into(),
        layout: "real plane then imaginary plane, each row-major (n_scales, n_times)".into(),
        data_file: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(16 * sp.real.len());
    for v in sp.real.iter().chain(&sp.imag) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn read_spectrogram(stem: &Path) -> Result<Spectrogram<f64>> {
    let (json_path, bin_path) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: SpectrogramHeader =
        serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let n = header.n_scales * header.n_times;
    if bytes.len() != 16 * n {
        return Err(Error::Parse {
            path: bin_path,
            line: 0,
            msg: format!("expected {} bytes, found {}", 16 * n, bytes.len()),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Spectrogram {
        real: vals[..n].to_vec(),
        imag: vals[n..].to_vec(),
        scales: header.scales,
        n_times: header.n_times,
        fs: header.fs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sp = Spectrogram {
            real: vec![1.0, -0.1, 3.5, 1e-300],
            imag: vec![0.0, 2.0, -7.25, f64::MIN_POSITIVE],
            scales: vec![0.1, 0.2],
            n_times: 2,
            fs: 200.0,
        };
        let stem = dir.path().join("out/spec");
        write_spectrogram(&stem, &sp).unwrap();
        assert_eq!(read_spectrogram(&stem).unwrap(), sp);
    }
}
