use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{BandSpec, FeatureSample, RawTrial};
use crate::error::{Error, Result};
use crate::montage::{load_montage, ChannelMontage};

pub const FEATURES_MAGIC: &[u8; 8] = b"CLDTAFB1";
pub const RAW_MAGIC: &[u8; 8] = b"CLDTARW1";
pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const FEATURES: &str = "features.bin";
const MONTAGE: &str = "montage.csv";
const RAW_DIR: &str = "raw";

/// Labelled DE samples with the metadata needed to interpret them, and
/// optionally the raw trials they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBank {
    pub dataset: String,
    pub classes: Vec<String>,
    pub bands: BandSpec,
    pub montage: ChannelMontage,
    pub samples: Vec<FeatureSample>,
    pub raw: Vec<RawTrial>,
}

impl SampleBank {
    pub fn new(
        dataset: impl Into<String>,
        classes: Vec<String>,
        bands: BandSpec,
        montage: ChannelMontage,
        samples: Vec<FeatureSample>,
    ) -> Result<Self> {
        let bank = Self {
            dataset: dataset.into(),
            classes,
            bands,
            montage,
            samples,
            raw: Vec::new(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("bank has no classes".into()));
        }
        let dim = (self.montage.len(), self.bands.len());
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.classes.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: label {} with {} classes",
                    s.label,
                    self.classes.len()
                )));
            }
            if s.de.dim() != dim {
                return Err(Error::Shape(format!("sample {i}: {:?}, bank expects {dim:?}", s.de.dim())));
            }
        }
        for (i, t) in self.raw.iter().enumerate() {
            t.validate()?;
            if t.n_channels() != self.montage.len() {
                return Err(Error::Shape(format!(
                    "raw trial {i}: {} channels, montage has {}",
                    t.n_channels(),
                    self.montage.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.montage.len()
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.subject_id).collect();
        set.into_iter().collect()
    }

    pub fn subject_samples(&self, subject: u32) -> Vec<FeatureSample> {
        self.samples.iter().filter(|s| s.subject_id == subject).cloned().collect()
    }

    /// Same metadata, different samples and no raw trials.
    pub fn with_samples(&self, samples: Vec<FeatureSample>) -> Self {
        Self {
            dataset: self.dataset.clone(),
            classes: self.classes.clone(),
            bands: self.bands.clone(),
            montage: self.montage.clone(),
            samples,
            raw: Vec::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    samples: usize,
    channels: usize,
    bands: usize,
    raw_trials: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRow {
    subject: u32,
    session: u32,
    trial: u32,
    window: u32,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRow {
    subject: u32,
    session: u32,
    trial: u32,
    label: usize,
    file: String,
    channels: usize,
    samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dataset: String,
    classes: Vec<String>,
    bands: BandSpec,
    montage_file: String,
    counts: Counts,
    samples: Vec<SampleRow>,
    #[serde(default)]
    raw_trials: Vec<RawRow>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn strip_magic<'a>(path: &Path, bytes: &'a [u8], magic: &'static [u8; 8]) -> Result<&'a [u8]> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).expect("ascii magic"),
        });
    }
    Ok(&bytes[magic.len()..])
}

fn f32_payload(values: impl Iterator<Item = f32>, magic: &[u8; 8], capacity: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(magic.len() + 4 * capacity);
    out.extend_from_slice(magic);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `bank` into `dir` (created if missing): `manifest.json`,
/// `features.bin`, `montage.csv` and, when raw trials are present,
/// `raw/t<index>.bin`.
pub fn write_bank(bank: &SampleBank, dir: &Path) -> Result<()> {
    bank.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, b) = (bank.n_channels(), bank.n_bands());
    let mut raw_rows = Vec::with_capacity(bank.raw.len());
    if !bank.raw.is_empty() {
        let raw_dir = dir.join(RAW_DIR);
        fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
        for (i, t) in bank.raw.iter().enumerate() {
            let file = format!("{RAW_DIR}/t{i}.bin");
            let mut bytes = Vec::with_capacity(16 + 4 * t.data.len());
            bytes.extend_from_slice(RAW_MAGIC);
            bytes.extend_from_slice(&t.fs.to_le_bytes());
            for v in t.data.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            write_file(&dir.join(&file), &bytes)?;
            raw_rows.push(RawRow {
                subject: t.subject_id,
                session: t.session_id,
                trial: t.trial_id,
                label: t.label,
                file,
                channels: t.n_channels(),
                samples: t.n_samples(),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dataset: bank.dataset.clone(),
        classes: bank.classes.clone(),
        bands: bank.bands.clone(),
        montage_file: MONTAGE.into(),
        counts: Counts {
            samples: bank.len(),
            channels: n,
            bands: b,
            raw_trials: bank.raw.len(),
        },
        samples: bank
            .samples
            .iter()
            .map(|s| SampleRow {
                subject: s.subject_id,
                session: s.session_id,
                trial: s.trial_id,
                window: s.window_index,
                label: s.label,
            })
            .collect(),
        raw_trials: raw_rows,
    };
    bank.montage.save(&dir.join(MONTAGE))?;
    let values = bank.samples.iter().flat_map(|s| s.de.iter().copied());
    write_file(&dir.join(FEATURES), &f32_payload(values, FEATURES_MAGIC, bank.len() * n * b))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST), json.as_bytes())
}

/// Reads a bank written by [`write_bank`].
///
/// Errors: [`Error::BadMagic`] for a payload without its magic bytes,
/// [`Error::Truncated`] when a payload is shorter than the manifest implies
/// by less than one whole record, and [`Error::ManifestMismatch`] when the
/// manifest disagrees with itself or with a payload by whole records.
pub fn read_bank(dir: &Path) -> Result<SampleBank> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ManifestMismatch(format!(
            "format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let c = &manifest.counts;
    if manifest.samples.len() != c.samples {
        return Err(Error::ManifestMismatch(format!(
            "counts.samples = {} but the sample table has {} rows",
            c.samples,
            manifest.samples.len()
        )));
    }
    if manifest.raw_trials.len() != c.raw_trials {
        return Err(Error::ManifestMismatch(format!(
            "counts.raw_trials = {} but the raw table has {} rows",
            c.raw_trials,
            manifest.raw_trials.len()
        )));
    }
    if manifest.bands.len() != c.bands {
        return Err(Error::ManifestMismatch(format!(
            "counts.bands = {} but {} bands are listed",
            c.bands,
            manifest.bands.len()
        )));
    }
    let montage = load_montage(&dir.join(&manifest.montage_file))?;
    if montage.len() != c.channels {
        return Err(Error::ManifestMismatch(format!(
            "counts.channels = {} but the montage has {}",
            c.channels,
            montage.len()
        )));
    }

    let fpath = dir.join(FEATURES);
    let bytes = read_file(&fpath)?;
    let payload = strip_magic(&fpath, &bytes, FEATURES_MAGIC)?;
    let record = 4 * c.channels * c.bands;
    let expected = record * c.samples;
    if payload.len() != expected {
        let whole = record > 0 && payload.len() % record == 0;
        return Err(if payload.len() < expected && !whole {
            Error::Truncated {
                path: fpath,
                expected: expected + FEATURES_MAGIC.len(),
                found: bytes.len(),
            }
        } else {
            Error::ManifestMismatch(format!(
                "manifest lists {} samples, features.bin holds {} bytes ({} samples of {record} bytes)",
                c.samples,
                payload.len(),
                payload.len() as f64 / record.max(1) as f64
            ))
        });
    }
    let values = read_f32s(payload);
    let samples = manifest
        .samples
        .iter()
        .zip(values.chunks_exact((c.channels * c.bands).max(1)))
        .map(|(row, v)| FeatureSample {
            subject_id: row.subject,
            session_id: row.session,
            trial_id: row.trial,
            window_index: row.window,
            label: row.label,
            de: Array2::from_shape_vec((c.channels, c.bands), v.to_vec()).expect("record size"),
        })
        .collect();

    let mut raw = Vec::with_capacity(manifest.raw_trials.len());
    for row in &manifest.raw_trials {
        let path = dir.join(&row.file);
        let bytes = read_file(&path)?;
        let body = strip_magic(&path, &bytes, RAW_MAGIC)?;
        let expected = 8 + 4 * row.channels * row.samples;
        if body.len() < expected {
            return Err(Error::Truncated {
                path,
                expected: expected + RAW_MAGIC.len(),
                found: bytes.len(),
            });
        }
        if body.len() > expected {
            return Err(Error::ManifestMismatch(format!(
                "{} holds {} bytes, manifest implies {}",
                row.file,
                bytes.len(),
                expected + RAW_MAGIC.len()
            )));
        }
        let fs = f64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
        let data: Vec<f64> = read_f32s(&body[8..]).into_iter().map(f64::from).collect();
        let data = Array2::from_shape_vec((row.channels, row.samples), data).expect("payload size");
        raw.push(RawTrial::new(row.subject, row.session, row.trial, row.label, fs, data)?);
    }

    let bank = SampleBank {
        dataset: manifest.dataset,
        classes: manifest.classes,
        bands: manifest.bands,
        montage,
        samples,
        raw,
    };
    bank.validate()
        .map_err(|e| Error::ManifestMismatch(format!("bank contents inconsistent: {e}")))?;
    Ok(bank)
}
