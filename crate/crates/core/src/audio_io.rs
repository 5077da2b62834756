//! Waveform and manifest I/O.
//!
//! Clips are fixed-rate mono waveforms. The reader accepts RIFF/WAVE files
//! holding 16-bit PCM or 32-bit IEEE float samples (any channel count,
//! averaged to mono); the writer always emits 32-bit float mono. Clips are
//! never resampled: a dataset manifest declares one sample rate and loading
//! a clip with a different rate is an error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-rate mono waveform with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// Amplitudes, nominally in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Class index in `[0, n_classes)`.
    pub label: u32,
    /// Opaque origin tag (file path, generator id, ...).
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, label: u32, source_id: impl Into<String>) -> Self {
        AudioClip { samples, sample_rate, label, source_id: source_id.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Truncate or zero-pad a clip to exactly `target_len` samples.
///
/// Longer clips keep their head; shorter clips get trailing zeros. Label and
/// provenance are preserved.
pub fn normalize_length(clip: &AudioClip, target_len: usize) -> AudioClip {
    let mut samples = clip.samples.clone();
    samples.resize(target_len, 0.0);
    AudioClip { samples, ..clip.clone() }
}

// ---------------------------------------------------------------------------
// WAV container
// ---------------------------------------------------------------------------

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;

struct WavFmt {
    audio_format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn read_u16(buf: &[u8], at: usize) -> Result<u16> {
    let b = buf
        .get(at..at + 2)
        .ok_or_else(|| Error::format("unexpected end of file"))?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(buf: &[u8], at: usize) -> Result<u32> {
    let b = buf
        .get(at..at + 4)
        .ok_or_else(|| Error::format("unexpected end of file"))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Load a WAV file as a mono clip.
///
/// Multi-channel audio is averaged to mono. 16-bit PCM samples are scaled by
/// 1/32768; float samples pass through unchanged. The returned clip carries
/// label 0 and the path as its source id; callers attach real labels from a
/// manifest.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let clip = parse_wav(&buf)?;
    Ok(AudioClip { source_id: path.to_string_lossy().into_owned(), ..clip })
}

fn parse_wav(buf: &[u8]) -> Result<AudioClip> {
    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file"));
    }

    let mut fmt: Option<WavFmt> = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= buf.len() {
        let id = &buf[at..at + 4];
        let size = read_u32(buf, at + 4)? as usize;
        let body_start = at + 8;
        if body_start + size > buf.len() {
            return Err(Error::format(format!(
                "chunk {:?} declares {} bytes but only {} remain",
                String::from_utf8_lossy(id),
                size,
                buf.len() - body_start
            )));
        }
        let body = &buf[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt chunk too small"));
                }
                fmt = Some(WavFmt {
                    audio_format: read_u16(body, 0)?,
                    channels: read_u16(body, 2)?,
                    sample_rate: read_u32(body, 4)?,
                    bits_per_sample: read_u16(body, 14)?,
                });
            }
            b"data" => data = Some(body),
            _ => {} // fact, LIST, etc.
        }
        // chunks are word-aligned
        at = body_start + size + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::format("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("missing data chunk"))?;
    if fmt.channels == 0 {
        return Err(Error::format("zero channels"));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::format("zero sample rate"));
    }

    let interleaved: Vec<f64> = match (fmt.audio_format, fmt.bits_per_sample) {
        (FMT_PCM, 16) => {
            if data.len() % 2 != 0 {
                return Err(Error::format("data chunk not a whole number of 16-bit samples"));
            }
            data.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                .collect()
        }
        (FMT_IEEE_FLOAT, 32) => {
            if data.len() % 4 != 0 {
                return Err(Error::format("data chunk not a whole number of 32-bit samples"));
            }
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        }
        (f, b) => {
            return Err(Error::Unsupported(format!(
                "wav format {} with {} bits per sample (expected PCM16 or float32)",
                f, b
            )))
        }
    };

    let ch = fmt.channels as usize;
    if interleaved.len() % ch != 0 {
        return Err(Error::format("data chunk not a whole number of frames"));
    }
    let samples: Vec<f64> = interleaved
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();

    Ok(AudioClip { samples, sample_rate: fmt.sample_rate, label: 0, source_id: String::new() })
}

/// Write a clip as a mono 32-bit float WAV.
///
/// Non-finite samples violate the precondition and are rejected before any
/// bytes are written.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    if let Some(bad) = clip.samples.iter().find(|s| !s.is_finite()) {
        return Err(Error::Precondition(format!("non-finite sample {bad} in clip")));
    }
    let n = clip.samples.len();
    let data_bytes = (n * 4) as u32;
    // RIFF size: WAVE + fmt(8+16) + fact(8+4) + data(8+payload)
    let riff_size = 4 + 24 + 12 + 8 + data_bytes;

    let mut out: Vec<u8> = Vec::with_capacity(riff_size as usize + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_size.to_le_bytes());
    out.extend_from_slice(b"WAVE");

    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FMT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 4).to_le_bytes()); // byte rate
    out.extend_from_slice(&4u16.to_le_bytes()); // block align
    out.extend_from_slice(&32u16.to_le_bytes());

    out.extend_from_slice(b"fact");
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());

    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }

    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    classes: Vec<String>,
    sample_rate: u32,
    target_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    label: u32,
}

/// Dataset manifest: an ordered list of (path, label) pairs plus the
/// dataset-wide sample-rate and clip-length contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, u32)>,
    pub class_names: Vec<String>,
    pub sample_rate: u32,
    pub target_len: usize,
}

impl Manifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Parse the JSON-lines manifest format: one header line followed by one
    /// entry object per clip. Fails unless labels cover exactly
    /// `{0, .., K-1}` and paths are unique.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("empty manifest"))?;
        let header: ManifestHeader = serde_json::from_str(header_line)?;
        let mut entries = Vec::new();
        for line in lines {
            let e: ManifestEntry = serde_json::from_str(line)?;
            entries.push((e.path, e.label));
        }
        let m = Manifest {
            entries,
            class_names: header.classes,
            sample_rate: header.sample_rate,
            target_len: header.target_len,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let mut out = String::new();
        let header = ManifestHeader {
            classes: self.class_names.clone(),
            sample_rate: self.sample_rate,
            target_len: self.target_len,
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for (p, l) in &self.entries {
            out.push_str(&serde_json::to_string(&ManifestEntry { path: p.clone(), label: *l })?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        if k == 0 {
            return Err(Error::format("manifest declares no classes"));
        }
        let mut seen = vec![false; k];
        for (p, l) in &self.entries {
            let l = *l as usize;
            if l >= k {
                return Err(Error::format(format!("label {l} out of range for {k} classes ({p})")));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::format(format!("class {missing} has no clips")));
        }
        let mut paths: Vec<&String> = self.entries.iter().map(|(p, _)| p).collect();
        paths.sort_unstable();
        if paths.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("duplicate paths in manifest"));
        }
        Ok(())
    }

    /// Load every clip, enforce the sample-rate contract, attach labels, and
    /// normalize lengths. Paths are resolved relative to `base_dir`.
    pub fn load_clips(&self, base_dir: impl AsRef<Path>) -> Result<Vec<AudioClip>> {
        let base = base_dir.as_ref();
        let mut clips = Vec::with_capacity(self.entries.len());
        for (p, label) in &self.entries {
            let full: PathBuf = base.join(p);
            let mut clip = load_wav(&full)?;
            if clip.sample_rate != self.sample_rate {
                return Err(Error::format(format!(
                    "{p}: sample rate {} != manifest rate {}",
                    clip.sample_rate, self.sample_rate
                )));
            }
            clip.label = *label;
            clips.push(normalize_length(&clip, self.target_len));
        }
        Ok(clips)
    }
}
