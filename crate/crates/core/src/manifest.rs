//! Corpus manifests: JSON Lines, one utterance per line.
//!
//! Frames are stored either inline (`"frames": [[...], ...]`) or in a
//! separate raw file of little-endian `f32`, row-major `rows x cols`, whose
//! path is relative to the manifest's directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Utterance;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub words: Vec<String>,
    pub end_times_ms: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStorage {
    Inline,
    /// Raw files under `<manifest stem>_frames/`.
    External,
}

pub fn write_manifest(path: &Path, corpus: &[Utterance], storage: FrameStorage) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("bad manifest path {}", path.display())))?;
    let frame_dir = format!("{stem}_frames");
    if storage == FrameStorage::External {
        fs::create_dir_all(base.join(&frame_dir))?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (i, u) in corpus.iter().enumerate() {
        let (rows, cols) = u.frames.dim();
        let mut record = ManifestRecord {
            words: u.words.clone(),
            end_times_ms: u.end_times_ms.clone(),
            rows,
            cols,
            frames_path: None,
            frames: None,
        };
        match storage {
            FrameStorage::Inline => {
                record.frames = Some(
                    u.frames
                        .rows()
                        .into_iter()
                        .map(|r| r.iter().map(|&x| x as f32).collect())
                        .collect(),
                );
            }
            FrameStorage::External => {
                let rel = format!("{frame_dir}/{i:06}.f32");
                write_frames(&base.join(&rel), &u.frames)?;
                record.frames_path = Some(rel);
            }
        }
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let base: PathBuf = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let frames = match (&record.frames, &record.frames_path) {
            (Some(rows), _) => {
                if rows.len() != record.rows || rows.iter().any(|r| r.len() != record.cols) {
                    return Err(Error::Shape(format!(
                        "{}:{}: inline frames do not match {}x{}",
                        path.display(),
                        lineno + 1,
                        record.rows,
                        record.cols
                    )));
                }
                Array2::from_shape_fn((record.rows, record.cols), |(r, c)| rows[r][c] as f64)
            }
            (None, Some(rel)) => read_frames(&base.join(rel), record.rows, record.cols)?,
            (None, None) => {
                return Err(Error::Format(format!(
                    "{}:{}: record has neither frames nor frames_path",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        corpus.push(Utterance::new(record.words, record.end_times_ms, frames)?);
    }
    Ok(corpus)
}

pub fn write_frames(path: &Path, frames: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(frames.len() * 4);
    for &x in frames.iter() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_frames(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Shape(format!(
            "{}: {} bytes, expected {rows}x{cols} f32",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
}
