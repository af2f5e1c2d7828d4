//! MNIST in IDX format, normalised to `[0, 1]`, with seeded minibatching.
//!
//! Gzipped files are detected by their magic bytes and decompressed
//! transparently.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Environment variable that overrides the data directory.
pub const DATA_DIR_ENV: &str = "LMT_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn image_file(self) -> String {
        format!("{}-images-idx3-ubyte", self.prefix())
    }

    pub fn label_file(self) -> String {
        format!("{}-labels-idx1-ubyte", self.prefix())
    }

    pub fn expected_len(self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split {s:?} (train|test)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count × rows·cols` pixels scaled to `[0, 1]`.
    pub pixels: Vec<f64>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompressing {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: format!("truncated header while reading {what}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("magic mismatch: found {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let count = be_u32(bytes, 4, path, "image count")? as usize;
    let rows = be_u32(bytes, 8, path, "row count")? as usize;
    let cols = be_u32(bytes, 12, path, "column count")? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: 4,
            reason: "image dimensions overflow".into(),
        })?;
    let body = &bytes[16..];
    if body.len() != need {
        let reason = if body.len() < need {
            format!("truncated payload: expected {need} pixel bytes, found {}", body.len())
        } else {
            format!("dimension mismatch: {} trailing bytes", body.len() - need)
        };
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 16 + body.len().min(need) as u64,
            reason,
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let count = be_u32(bytes, 4, path, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 8 + body.len().min(count) as u64,
            reason: format!("expected {count} labels, found {} bytes", body.len()),
        });
    }
    body.iter()
        .enumerate()
        .map(|(i, &b)| {
            if usize::from(b) < NUM_CLASSES {
                Ok(usize::from(b))
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    offset: 8 + i as u64,
                    reason: format!("label {b} at index {i} is not a digit"),
                })
            }
        })
        .collect()
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gz(path)?, path)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    parse_idx_labels(&read_maybe_gz(path)?, path)
}

/// Images `[m × 784]` in `[0, 1]` and their digit labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        images.dims2("dataset")?;
        if images.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn from_idx(images: IdxImages, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::contract(format!(
                "image file has {} entries but label file has {}",
                images.count,
                labels.len()
            )));
        }
        let dim = images.rows * images.cols;
        Self::new(Tensor::matrix(images.count, dim, images.pixels)?, labels, split)
    }

    /// Loads `split` from `dir`, accepting either raw or `.gz` file names.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let images = locate(dir, &split.image_file())?;
        let labels = locate(dir, &split.label_file())?;
        Self::from_idx(load_idx_images(&images)?, load_idx_labels(&labels)?, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Seeded per-epoch shuffle, cut into batches of `batch_size` (the last
    /// batch may be shorter).
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok(Batches {
            data: self,
            order: epoch_permutation(self.len(), seed, epoch),
            batch_size,
            pos: 0,
        })
    }
}

/// Permutation of `0..n` determined by `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.data.images.select_rows(&indices),
            labels: indices.iter().map(|&i| self.data.labels[i]).collect(),
            indices,
        })
    }
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    if plain.is_file() {
        Ok(plain)
    } else if gz.is_file() {
        Ok(gz)
    } else {
        Err(Error::io(
            format!(
                "MNIST file not found in {}: expected {name} or {name}.gz \
                 (train-images-idx3-ubyte, train-labels-idx1-ubyte, \
                 t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte)",
                dir.display()
            ),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ))
    }
}

/// `explicit`, else `$LMT_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}
