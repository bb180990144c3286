//! IDX dataset loading, minibatching and the NSNN1 checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! "NSNN1"
//! u64 LE   header length in bytes
//! [u8]     UTF-8 TOML header
//! repeated per parameter tensor, in declared layer order:
//!   u64 LE   byte length of the array
//!   [f32 LE] values
//! u64 LE   checksum: first 8 bytes of SHA-256 over the parameter section
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{parse_arch, NetworkSpec, ParamSet, Readout};
use crate::autodiff::SurrogateParams;
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedTree};
use crate::runtime::{RunMode, Stage};
use crate::spiking::{LIFParams, NoiseSpec, RenormParams};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Images `[n, 1, rows, cols]` in `[0, 1]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} images but {} labels", images.batch(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Validation(format!("label {l} out of range 0..{CLASSES}")));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-image shape without the batch axis.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Records `start..end` as a new dataset with the same split tag.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        Dataset {
            images: self.images.rows(start, end),
            labels: self.labels[start..end].to_vec(),
            split: self.split,
        }
    }

    /// First `n` records (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        self.slice(0, n)
    }

    /// Holds out the last `n` records as a validation set.
    pub fn split_validation(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n} of {} records for validation",
                self.len()
            )));
        }
        let cut = self.len() - n;
        let train = self.slice(0, cut);
        let mut val = self.slice(cut, self.len());
        val.split = Split::Val;
        Ok((train, val))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < header_len {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let seen = be_u32(bytes, 0);
    if seen != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected magic {magic:#010x}, found bytes {:02x} {:02x} {:02x} {:02x}",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        });
    }
    Ok(())
}

/// Parses an IDX image file; returns `[n, 1, rows, cols]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    check_header(bytes, path, IMAGE_MAGIC, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("empty image dimensions {n}x{rows}x{cols}"),
        });
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_header(bytes, path, LABEL_MAGIC, 8)?;
    let n = be_u32(bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an image/label file pair; gzip-compressed files are detected by
/// their magic bytes. The split tag defaults to [`Split::Train`].
pub fn load_idx(path_images: impl AsRef<Path>, path_labels: impl AsRef<Path>) -> Result<Dataset> {
    let (pi, pl) = (path_images.as_ref(), path_labels.as_ref());
    let images = parse_idx_images(&read_maybe_gz(pi)?, pi)?;
    let labels = parse_idx_labels(&read_maybe_gz(pl)?, pl)?;
    if images.batch() != labels.len() {
        return Err(Error::Format {
            path: pl.to_path_buf(),
            message: format!("{} labels for {} images in {}", labels.len(), images.batch(), pi.display()),
        });
    }
    Dataset::new(images, labels, Split::Train).map_err(|e| Error::Format {
        path: pl.to_path_buf(),
        message: e.to_string(),
    })
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (also tried .gz)"),
    ))
}

/// Loads the conventional `train-*` / `t10k-*` file pair from `dir`.
pub fn load_standard(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Test => "t10k",
        _ => "train",
    };
    let images = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let mut ds = load_idx(images, labels)?;
    ds.split = split;
    Ok(ds)
}

/// `[n, classes]` with a single 1 per row at the label index; `labels` must
/// be non-empty.
pub fn one_hot(labels: &[u8], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l as usize] = 1.0;
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub labels: Vec<u8>,
    /// Dataset indices of the records in this batch.
    pub indices: Vec<usize>,
}

/// Single-pass iterator over shuffled minibatches.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

/// Minibatches for one epoch. With a seed the order is a permutation drawn
/// from `(seed, epoch)`; without one it is the stored order. The final batch
/// may be short.
pub fn batch_iterator(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = SeedTree::new(seed).simple(Purpose::Shuffle, epoch);
        order.shuffle(&mut rng);
    }
    BatchIter {
        ds,
        order,
        pos: 0,
        batch_size,
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let row = self.ds.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in &indices {
            data.extend_from_slice(self.ds.images.row(i));
        }
        let mut shape = self.ds.images.shape().to_vec();
        shape[0] = indices.len();
        let labels: Vec<u8> = indices.iter().map(|&i| self.ds.labels[i]).collect();
        Some(Batch {
            images: Tensor::new(&shape, data).expect("batch shape"),
            targets: one_hot(&labels, CLASSES),
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// A trained network with everything needed to rebuild and run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub mode: RunMode,
    pub seed: u64,
    /// Free-form provenance (dataset, epochs, ...). Kept sorted.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: ParamSet, seed: u64) -> Result<Self> {
        params.check(&spec)?;
        Ok(Self {
            spec,
            params,
            mode: RunMode::stage1(),
            seed,
            metadata: BTreeMap::new(),
        })
    }
}

const MAGIC_PREFIX: &[u8; 4] = b"NSNN";
const VERSION: u8 = b'1';

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    arch: String,
    input_shape: Vec<usize>,
    bias: bool,
    readout: Readout,
}

#[derive(Serialize, Deserialize)]
struct ModeHeader {
    stage: Stage,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    network: NetworkHeader,
    lif: LIFParams,
    noise: NoiseSpec,
    surrogate: SurrogateParams,
    mode: ModeHeader,
    renorm: RenormParams,
    metadata: BTreeMap<String, String>,
    params: Vec<ParamHeader>,
}

fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Serializes a checkpoint. Output depends only on the checkpoint's fields.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.check(&ckpt.spec)?;
    let header = Header {
        seed: ckpt.seed,
        network: NetworkHeader {
            arch: ckpt.spec.arch_string(),
            input_shape: ckpt.spec.input_shape.clone(),
            bias: ckpt.spec.bias,
            readout: ckpt.spec.readout,
        },
        lif: ckpt.spec.lif,
        noise: ckpt.spec.noise,
        surrogate: ckpt.spec.surrogate,
        mode: ModeHeader {
            stage: ckpt.mode.stage,
            steps: ckpt.mode.steps,
        },
        renorm: ckpt.mode.renorm,
        metadata: ckpt.metadata.clone(),
        params: ckpt
            .params
            .names
            .iter()
            .zip(&ckpt.params.tensors)
            .map(|(n, t)| ParamHeader {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("header encoding: {e}")))?;

    let mut payload = Vec::new();
    for t in &ckpt.params.tensors {
        payload.extend_from_slice(&((t.len() * 4) as u64).to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(5 + 8 + text.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC_PREFIX);
    out.push(VERSION);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum(&payload).to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Corruption(format!("truncated while reading {what} at byte {}", *at))
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u64(bytes: &[u8], at: &mut usize, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, at, 8, what)?.try_into().expect("8 bytes")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC_PREFIX {
        let shown: Vec<String> = bytes.iter().take(5).map(|b| format!("{b:02x}")).collect();
        return Err(Error::Version(format!("not an NSNN checkpoint (leading bytes {})", shown.join(" "))));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version(format!(
            "format NSNN{} is not supported (expected NSNN1)",
            bytes[4] as char
        )));
    }
    let mut at = 5;
    let header_len = read_u64(bytes, &mut at, "header length")? as usize;
    let text = take(bytes, &mut at, header_len, "header")?;
    let text = std::str::from_utf8(text).map_err(|e| Error::Corruption(format!("header is not UTF-8: {e}")))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Corruption(format!("header: {e}")))?;

    if bytes.len() < at + 8 {
        return Err(Error::Corruption("missing checksum".into()));
    }
    let payload = &bytes[at..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let actual = checksum(payload);
    if stored != actual {
        return Err(Error::Corruption(format!(
            "payload checksum {actual:016x} does not match stored {stored:016x}"
        )));
    }

    let mut spec = parse_arch(&header.network.arch, &header.network.input_shape)
        .map_err(|e| Error::Corruption(format!("header architecture: {e}")))?;
    spec.bias = header.network.bias;
    spec.readout = header.network.readout;
    spec.lif = header.lif;
    spec.noise = header.noise;
    spec.surrogate = header.surrogate;
    spec.validate()
        .map_err(|e| Error::Corruption(format!("header describes an invalid network: {e}")))?;

    let mut pos = 0;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for p in &header.params {
        let len = read_u64(payload, &mut pos, &p.name)? as usize;
        let want = p.shape.iter().product::<usize>() * 4;
        if len != want {
            return Err(Error::Corruption(format!(
                "{}: declared {len} bytes, shape {:?} needs {want}",
                p.name, p.shape
            )));
        }
        let raw = take(payload, &mut pos, len, &p.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        names.push(p.name.clone());
        tensors.push(Tensor::new(&p.shape, data)?);
    }
    if pos != payload.len() {
        return Err(Error::Corruption(format!(
            "{} trailing payload bytes",
            payload.len() - pos
        )));
    }
    let params = ParamSet { names, tensors };
    params
        .check(&spec)
        .map_err(|e| Error::Corruption(format!("payload does not fit the header: {e}")))?;

    let mode = RunMode {
        stage: header.mode.stage,
        steps: header.mode.steps,
        renorm: header.renorm,
    };
    mode.validate(&spec.noise)
        .map_err(|e| Error::Corruption(format!("header run mode: {e}")))?;
    Ok(Checkpoint {
        spec,
        params,
        mode,
        seed: header.seed,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// The TOML header block of an encoded checkpoint.
pub fn header_text(bytes: &[u8]) -> Result<&str> {
    let mut at = 5;
    if bytes.len() < 5 || &bytes[..4] != MAGIC_PREFIX {
        return Err(Error::Version("not an NSNN checkpoint".into()));
    }
    let n = read_u64(bytes, &mut at, "header length")? as usize;
    let text = take(bytes, &mut at, n, "header")?;
    std::str::from_utf8(text).map_err(|e| Error::Corruption(e.to_string()))
}
