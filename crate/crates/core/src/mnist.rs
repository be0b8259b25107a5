//! MNIST IDX ingestion and latency encoding.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::neuron::{time_to_z, z_to_time, NeuronParams, SpikeTrain};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const ROWS: usize = 28;
pub const COLS: usize = 28;
pub const PIXELS: usize = ROWS * COLS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxContent {
    /// Row-major pixels, `PIXELS` bytes per image.
    Images { count: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

fn header_u32(bytes: &[u8], word: usize) -> Result<u32> {
    let end = 4 * (word + 1);
    if bytes.len() < end {
        return Err(Error::Truncated { expected: end, found: bytes.len() });
    }
    Ok(BigEndian::read_u32(&bytes[4 * word..end]))
}

/// Parses an IDX image (`0x803`) or label (`0x801`) container.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxContent> {
    match header_u32(bytes, 0)? {
        IMAGE_MAGIC => {
            let count = header_u32(bytes, 1)? as usize;
            let rows = header_u32(bytes, 2)? as usize;
            let cols = header_u32(bytes, 3)? as usize;
            if rows != ROWS || cols != COLS {
                return Err(Error::BadDimensions(format!("expected {ROWS}x{COLS} images, found {rows}x{cols}")));
            }
            let payload = &bytes[16..];
            let expected = count * PIXELS;
            if payload.len() < expected {
                return Err(Error::Truncated { expected, found: payload.len() });
            }
            Ok(IdxContent::Images { count, pixels: payload[..expected].to_vec() })
        }
        LABEL_MAGIC => {
            let count = header_u32(bytes, 1)? as usize;
            let payload = &bytes[8..];
            if payload.len() < count {
                return Err(Error::Truncated { expected: count, found: payload.len() });
            }
            let labels = payload[..count].to_vec();
            if let Some(bad) = labels.iter().find(|&&l| l > 9) {
                return Err(Error::BadDimensions(format!("label {bad} outside 0-9")));
            }
            Ok(IdxContent::Labels(labels))
        }
        found => Err(Error::BadMagic { expected: IMAGE_MAGIC, found }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::DimensionMismatch {
                what: "image/label count",
                expected: labels.len(),
                found: pixels.len() / PIXELS,
            });
        }
        Ok(Self { pixels, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` samples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }
}

/// File names of the four standard IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

/// Reads `dir/name`, falling back to `dir/name.gz`; gzip is detected by content.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let path = if plain.exists() { plain } else { PathBuf::from(format!("{}.gz", plain.display())) };
    let raw = fs::read(&path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_split(dir: &Path, files: &MnistFiles, split: Split) -> Result<Dataset> {
    let (img, lbl) = match split {
        Split::Train => (&files.train_images, &files.train_labels),
        Split::Test => (&files.test_images, &files.test_labels),
    };
    let pixels = match parse_idx(&read_maybe_gz(dir, img)?)? {
        IdxContent::Images { pixels, .. } => pixels,
        IdxContent::Labels(_) => return Err(Error::BadMagic { expected: IMAGE_MAGIC, found: LABEL_MAGIC }),
    };
    let labels = match parse_idx(&read_maybe_gz(dir, lbl)?)? {
        IdxContent::Labels(l) => l,
        IdxContent::Images { .. } => return Err(Error::BadMagic { expected: LABEL_MAGIC, found: IMAGE_MAGIC }),
    };
    Dataset::new(pixels, labels, split)
}

/// Latency code: intensity `v` fires once at `t_min + (t_max - t_min) (255 - v) / 255`,
/// so ink fires early and background fires at `t_max`.
pub fn latency_encode<T: Copy + Into<f64>>(image: &[T], t_min: f64, t_max: f64, params: &NeuronParams) -> Result<SpikeTrain> {
    encode_with(image, t_min, t_max, params, false)
}

/// As [`latency_encode`], optionally omitting spikes at exactly `t_max`.
/// With `t_max = t_out` those spikes cannot affect any readout.
pub fn encode_with<T: Copy + Into<f64>>(
    image: &[T],
    t_min: f64,
    t_max: f64,
    params: &NeuronParams,
    drop_background: bool,
) -> Result<SpikeTrain> {
    if !(t_min < t_max) {
        return Err(Error::Config(format!("latency window [{t_min}, {t_max}] is empty")));
    }
    let mut spikes = Vec::with_capacity(image.len());
    for (i, &px) in image.iter().enumerate() {
        let v: f64 = px.into();
        if !(0.0..=255.0).contains(&v) {
            return Err(Error::IntensityOutOfRange(v));
        }
        if drop_background && v == 0.0 {
            continue;
        }
        let t = t_min + (t_max - t_min) * (255.0 - v) / 255.0;
        spikes.push((time_to_z(t, params)?, i));
    }
    SpikeTrain::from_unsorted(image.len(), spikes)
}

/// Inverse of the latency code (for diagnostics).
pub fn latency_decode(train: &SpikeTrain, t_min: f64, t_max: f64, params: &NeuronParams) -> Vec<f64> {
    let mut out = vec![0.0; train.n_sources()];
    for ev in train.events() {
        let t = z_to_time(ev.z, params);
        out[ev.source] = 255.0 * (1.0 - (t - t_min) / (t_max - t_min));
    }
    out
}
