//! Dataset ingestion (IDX, CIFAR-10 binary, synthetic shapes), input
//! adaptation, and the persistence formats: the binary checkpoint container
//! and P6 PPM images.
//!
//! Pixel bytes normalize to [-1, 1] via (v / 127.5) - 1 at load time.

use crate::arch::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::ops::{space_to_depth, upsample, UpsampleMode};
use crate::tensor::{Rng, Shape4, Tensor};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Stream id for synthetic data generation.
pub const STREAM_SYNTH: u64 = 0x20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Idx,
    CifarBinary,
    Synthetic,
}

/// In-memory dataset: images as one flat NCHW buffer plus labels.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    /// (channels, height, width) per image.
    pub image_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub source: SourceFormat,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Assemble a batch tensor (len(indices), c, h, w) in index order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_shape;
        let per = c * h * w;
        let shape = Shape4::new(indices.len(), c, h, w)?;
        let mut data = Vec::with_capacity(shape.elems());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(shape, data)?, labels))
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("idx: truncated while reading {what}")))
}

/// Standard big-endian IDX pair (ubyte images rank 3, ubyte labels rank 1).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<DatasetHandle> {
    let img_bytes = fs::read(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "rows")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format(format!(
            "idx: image file has {} bytes, expected {expected}",
            img_bytes.len()
        )));
    }

    let lbl_bytes = fs::read(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if lbl_count != count {
        return Err(Error::Format(format!(
            "idx: {count} images but {lbl_count} labels"
        )));
    }
    if lbl_bytes.len() != 8 + count {
        return Err(Error::Format("idx: truncated label payload".to_string()));
    }

    let images: Vec<f32> = img_bytes[16..]
        .iter()
        .map(|&v| v as f32 / 127.5 - 1.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&v| v as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(DatasetHandle {
        name: images_path.display().to_string(),
        split,
        image_shape: (1, rows, cols),
        num_classes,
        source: SourceFormat::Idx,
        images,
        labels,
    })
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// One CIFAR-10 binary batch file, or a directory of *.bin batches (sorted
/// by name).
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<DatasetHandle> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Data(format!(
                "no .bin files under {}",
                path.display()
            )));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = fs::read(file)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "cifar: {} has {} bytes, not a multiple of {CIFAR_RECORD}",
                file.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Format(format!(
                    "cifar: label {label} out of range in {}",
                    file.display()
                )));
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&v| v as f32 / 127.5 - 1.0));
        }
    }
    Ok(DatasetHandle {
        name: path.display().to_string(),
        split,
        image_shape: (3, 32, 32),
        num_classes: 10,
        source: SourceFormat::CifarBinary,
        images,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

pub const SYNTH_MAX_CLASSES: usize = 8;

/// Deterministic labeled geometric images rendered analytically at any
/// resolution: the class decides the shape family, per-sample jitter comes
/// from the (seed, sample) stream before any pixels are drawn, so the same
/// sample index depicts the same scene at every resolution.
pub fn synth_shapes(
    seed: u64,
    n: usize,
    classes: usize,
    resolution: usize,
    split: Split,
) -> Result<DatasetHandle> {
    if classes < 2 || classes > SYNTH_MAX_CLASSES {
        return Err(Error::Config(format!(
            "synth_shapes supports 2..={SYNTH_MAX_CLASSES} classes, got {classes}"
        )));
    }
    if resolution == 0 || n == 0 {
        return Err(Error::Config("need n >= 1 and resolution >= 1".to_string()));
    }
    // Eval split draws from a disjoint sample-index range.
    let index_base = match split {
        Split::Train => 0u64,
        Split::Eval => 1u64 << 32,
    };
    let base = Rng::new(seed).split(STREAM_SYNTH);
    let mut images = Vec::with_capacity(n * 3 * resolution * resolution);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mut rng = base.split(index_base + i as u64);
        render_sample(label, &mut rng, resolution, &mut images);
        labels.push(label);
    }
    Ok(DatasetHandle {
        name: format!("synth(seed={seed},classes={classes},res={resolution})"),
        split,
        image_shape: (3, resolution, resolution),
        num_classes: classes,
        source: SourceFormat::Synthetic,
        images,
        labels,
    })
}

fn render_sample(label: usize, rng: &mut Rng, res: usize, out: &mut Vec<f32>) {
    // Scene parameters first: identical draws at every resolution.
    let cx = 0.38 + 0.24 * rng.next_uniform();
    let cy = 0.38 + 0.24 * rng.next_uniform();
    let size = 0.20 + 0.12 * rng.next_uniform();
    let tilt = rng.next_uniform() * 0.5 - 0.25;
    // Texture classes: a coarse-pitch band and a fine-pitch band. The fine
    // band sits above the Nyquist rate of sub-20-pixel renders, where it
    // aliases into the coarse band; only high-resolution inputs separate
    // the two.
    let freq_low = 2.6 + 0.8 * rng.next_uniform();
    let freq_high = 10.2 + 1.0 * rng.next_uniform();
    let fg: Vec<f64> = (0..3).map(|_| 0.65 + 0.35 * rng.next_uniform()).collect();
    let bg: Vec<f64> = (0..3).map(|_| 0.05 + 0.12 * rng.next_uniform()).collect();

    let inside = |x: f64, y: f64| -> bool {
        let dx = x - cx;
        let dy = y - cy;
        let striped_disk = |freq: f64| {
            dx * dx + dy * dy <= (size * 1.15) * (size * 1.15)
                && ((x + y + tilt) * freq).rem_euclid(1.0) < 0.5
        };
        match label {
            // filled disk
            0 => dx * dx + dy * dy <= size * size,
            // filled square
            1 => dx.abs().max(dy.abs()) <= size * 0.9,
            // plus cross
            2 => {
                (dx.abs() <= size * 0.33 && dy.abs() <= size)
                    || (dy.abs() <= size * 0.33 && dx.abs() <= size)
            }
            // X cross
            3 => {
                let u = (dx + dy) * core::f64::consts::FRAC_1_SQRT_2;
                let v = (dx - dy) * core::f64::consts::FRAC_1_SQRT_2;
                (u.abs() <= size * 0.28 && v.abs() <= size)
                    || (v.abs() <= size * 0.28 && u.abs() <= size)
            }
            // coarse-striped disk
            4 => striped_disk(freq_low),
            // fine-striped disk (aliases into the coarse band at low res)
            5 => striped_disk(freq_high),
            // ring
            6 => {
                let d2 = dx * dx + dy * dy;
                d2 <= size * size && d2 >= (size * 0.55) * (size * 0.55)
            }
            // two disks side by side
            _ => {
                let r = size * 0.45;
                let left = (dx + size * 0.55).powi(2) + dy * dy <= r * r;
                let right = (dx - size * 0.55).powi(2) + dy * dy <= r * r;
                left || right
            }
        }
    };

    let inv = 1.0 / res as f64;
    for c in 0..3 {
        for py in 0..res {
            for px in 0..res {
                let x = (px as f64 + 0.5) * inv;
                let y = (py as f64 + 0.5) * inv;
                let base = if inside(x, y) { fg[c] } else { bg[c] };
                let noisy = (base + rng.next_normal() * 0.02).clamp(0.0, 1.0);
                out.push((noisy * 2.0 - 1.0) as f32);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Input adaptation
// ---------------------------------------------------------------------------

/// The input-feeding variants. `Native` is the plain resolution-multiplier
/// feed; `SkipStride` feeds a low-resolution image straight into a trunk
/// built without an input adapter; `Upsample` resamples low-resolution data
/// up to the model input; `S2d` validates the high-resolution-input wiring
/// where the architecture's own space-to-depth layer does the rearranging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputAdapter {
    Native,
    SkipStride,
    Upsample { mode: UpsampleMode, factor: usize },
    S2d { block: usize },
}

/// Produces the tensor to present at the architecture input and validates
/// the adapter/arch wiring. Variants that only rearrange or pass through
/// preserve the pixel multiset.
pub fn adapt_input(x: &Tensor, adapter: InputAdapter, arch: &ArchSpec) -> Result<Tensor> {
    let s = x.shape();
    if s.c != arch.input_channels {
        return Err(Error::shape(format!(
            "dataset has {} channels, arch expects {}",
            s.c, arch.input_channels
        )));
    }
    let arch_has_adapter = arch
        .layers
        .first()
        .is_some_and(|l| matches!(l.kind, LayerKind::S2d { .. } | LayerKind::UpsampleInput { .. }));
    match adapter {
        InputAdapter::Native => {
            require_res(s, arch.input_res, "native")?;
            Ok(x.clone())
        }
        InputAdapter::SkipStride => {
            require_res(s, arch.input_res, "skip-stride")?;
            if arch.input_res != arch.internal_res || arch_has_adapter {
                return Err(Error::Config(
                    "skip-stride feed requires a trunk built without an input adapter \
                     (input resolution == internal resolution)"
                        .to_string(),
                ));
            }
            Ok(x.clone())
        }
        InputAdapter::Upsample { mode, factor } => {
            if s.h * factor != arch.input_res {
                return Err(Error::Config(format!(
                    "upsample feed: {} * {factor} != arch input {}",
                    s.h, arch.input_res
                )));
            }
            upsample(x, factor, mode)
        }
        InputAdapter::S2d { block } => {
            require_res(s, arch.input_res, "s2d")?;
            match arch.layers.first().map(|l| &l.kind) {
                Some(LayerKind::S2d { block: arch_block }) if *arch_block == block => Ok(x.clone()),
                _ => Err(Error::Config(format!(
                    "s2d feed expects the arch to start with an s2d layer of block {block}"
                ))),
            }
        }
    }
}

fn require_res(s: Shape4, want: usize, what: &str) -> Result<()> {
    if s.h != want || s.w != want {
        return Err(Error::shape(format!(
            "{what} feed: dataset delivers {}x{}, arch input is {want}x{want}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Convenience used by tests and the filter dump: the tensor the first
/// trainable layer consumes (arch adapter applied when present).
pub fn first_trainable_input(x: &Tensor, arch: &ArchSpec) -> Result<Tensor> {
    match arch.layers.first().map(|l| &l.kind) {
        Some(LayerKind::S2d { block }) => space_to_depth(x, *block),
        Some(LayerKind::UpsampleInput { factor, mode }) => upsample(x, *factor, *mode),
        _ => Ok(x.clone()),
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ISON";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Named-tensor container. Layout: magic "ISON", u32 version, u32 entry
/// count; per entry u16 name length + UTF-8 name, u8 rank, rank x u32 dims,
/// then the row-major little-endian f32 payload. All integers little-endian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let elems: u64 = dims.iter().map(|&d| d as u64).product();
        if elems != data.len() as u64 {
            return Err(Error::Format(format!(
                "checkpoint entry {name}: {} values but dims {:?} need {elems}",
                data.len(),
                dims
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Format(format!("duplicate checkpoint entry {name}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {name}")));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format("entry rank exceeds u8".to_string()));
        }
        self.entries.push(CheckpointEntry { name, dims, data });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "checkpoint magic {:02x?} != {:02x?}",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let version = cur.u32_le("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = cur.u32_le("entry count")? as usize;
        let mut ckpt = Checkpoint::default();
        for i in 0..count {
            let name_len = cur.u16_le(&format!("entry {i} name length"))? as usize;
            let name_bytes = cur.take(name_len, &format!("entry {i} name"))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = cur.take(1, &format!("entry {name} rank"))?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut elems: u64 = 1;
            for d in 0..rank {
                let dim = cur.u32_le(&format!("entry {name} dim {d}"))?;
                elems = elems.saturating_mul(dim as u64);
                dims.push(dim);
            }
            let payload = cur.take(elems as usize * 4, &format!("entry {name} payload"))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ckpt.push(name, dims, data)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(ckpt)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            ))),
        }
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PPM
// ---------------------------------------------------------------------------

/// Binary P6 PPM: header "P6\n{w} {h}\n255\n" followed by RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Format(format!(
            "ppm: {} bytes for {width}x{height} RGB (need {})",
            rgb.len(),
            width * height * 3
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    write_atomic(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Format("ppm: incomplete header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format("ppm: non-utf8 header".to_string()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("P6") {
        return Err(Error::Format("ppm: not a P6 file".to_string()));
    }
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("ppm: bad width".to_string()))?;
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("ppm: bad height".to_string()))?;
    let data = bytes[header_end + 1..].to_vec();
    if data.len() != w * h * 3 {
        return Err(Error::Format("ppm: payload size mismatch".to_string()));
    }
    Ok((w, h, data))
}
