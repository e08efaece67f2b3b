//! CIFAR-10/100 binary ingestion, augmentation, and a synthetic
//! position-probe task.
//!
//! Images are kept as raw bytes and normalized when a batch is built, so a
//! loaded record can always be written back byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{patchify, InputSpec};
use crate::rng::{rng_from, rng_indexed};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn record_len(self) -> usize {
        match self {
            CifarKind::Cifar10 => PIXELS + 1,
            CifarKind::Cifar100 => PIXELS + 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    pub fn train_files(self) -> &'static [&'static str] {
        match self {
            CifarKind::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarKind::Cifar100 => &["train.bin"],
        }
    }

    pub fn test_file(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "test_batch.bin",
            CifarKind::Cifar100 => "test.bin",
        }
    }

    /// Directory name used by the official binary archives.
    fn archive_dir(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "cifar-10-batches-bin",
            CifarKind::Cifar100 => "cifar-100-binary",
        }
    }
}

/// One image as stored on disk: channel-planar R, G, B bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub pixels: Vec<u8>,
    pub label: usize,
    /// CIFAR-100 coarse label, kept only for faithful re-serialization.
    pub coarse: Option<u8>,
}

impl RawImage {
    /// `[3, 32, 32]` scaled to `[0, 1]` and normalized per channel.
    pub fn normalized(&self) -> Tensor {
        let data = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = i / (SIDE * SIDE);
                (b as f64 / 255.0 - MEAN[c]) / STD[c]
            })
            .collect();
        Tensor::new(vec![3, SIDE, SIDE], data).expect("3072 pixels")
    }

    pub fn to_record(&self, kind: CifarKind) -> Vec<u8> {
        let mut out = Vec::with_capacity(kind.record_len());
        if kind == CifarKind::Cifar100 {
            out.push(self.coarse.unwrap_or(0));
        }
        out.push(self.label as u8);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses a buffer of fixed-length records. `path` is used in errors only.
pub fn parse_records(bytes: &[u8], kind: CifarKind, path: &Path) -> Result<Vec<RawImage>> {
    let rec = kind.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let offset = bytes.len() - bytes.len() % rec;
        return Err(Error::Data {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - offset
            ),
        });
    }
    bytes
        .chunks(rec)
        .enumerate()
        .map(|(i, r)| {
            let (coarse, label, pixels) = match kind {
                CifarKind::Cifar10 => (None, r[0], &r[1..]),
                CifarKind::Cifar100 => (Some(r[0]), r[1], &r[2..]),
            };
            if label as usize >= kind.classes() {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    offset: (i * rec) as u64,
                    detail: format!("label {label} out of range for {} classes", kind.classes()),
                });
            }
            Ok(RawImage {
                pixels: pixels.to_vec(),
                label: label as usize,
                coarse,
            })
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct ImageSet {
    pub kind: CifarKind,
    pub images: Vec<RawImage>,
}

#[derive(Clone, Debug)]
pub struct CifarData {
    pub train: ImageSet,
    pub test: ImageSet,
}

/// Accepts either the directory holding the `.bin` files or its parent
/// containing the official archive directory.
fn resolve_dir(dir: &Path, kind: CifarKind) -> PathBuf {
    let nested = dir.join(kind.archive_dir());
    if !dir.join(kind.test_file()).is_file() && nested.join(kind.test_file()).is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn load_cifar(dir: &Path, kind: CifarKind) -> Result<CifarData> {
    let dir = resolve_dir(dir, kind);
    let mut train = Vec::new();
    for f in kind.train_files() {
        let p = dir.join(f);
        train.extend(parse_records(&read_file(&p)?, kind, &p)?);
    }
    let p = dir.join(kind.test_file());
    let test = parse_records(&read_file(&p)?, kind, &p)?;
    Ok(CifarData {
        train: ImageSet {
            kind,
            images: train,
        },
        test: ImageSet { kind, images: test },
    })
}

pub fn load_cifar10(dir: &Path) -> Result<CifarData> {
    load_cifar(dir, CifarKind::Cifar10)
}

pub fn load_cifar100(dir: &Path) -> Result<CifarData> {
    load_cifar(dir, CifarKind::Cifar100)
}

/// Writes `data` in the on-disk layout of `kind` under `dir`, splitting the
/// CIFAR-10 training set evenly over the five batch files.
pub fn write_cifar(dir: &Path, kind: CifarKind, data: &CifarData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = kind.train_files();
    let per = data.train.images.len().div_ceil(files.len());
    for (i, f) in files.iter().enumerate() {
        let chunk = data.train.images.iter().skip(i * per).take(per);
        let bytes: Vec<u8> = chunk.flat_map(|im| im.to_record(kind)).collect();
        let p = dir.join(f);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let bytes: Vec<u8> = data
        .test
        .images
        .iter()
        .flat_map(|im| im.to_record(kind))
        .collect();
    let p = dir.join(kind.test_file());
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
}

/// A random crop offset and flip decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_from(seed, "augment");
        AugmentDraw {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Zero-pads `image [C, H, W]` by [`PAD`], takes the `H x W` window at
/// `(dy, dx)` and optionally mirrors it horizontally.
pub fn crop_flip(image: &Tensor, draw: AugmentDraw) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "augment",
            format!("expected [C, H, W], got {:?}", image.shape()),
        ));
    };
    if draw.dy > 2 * PAD || draw.dx > 2 * PAD {
        return Err(Error::shape(
            "augment",
            format!("crop offset {draw:?} exceeds padding {PAD}"),
        ));
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + draw.dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + draw.dx) as isize - PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let ox = if draw.flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + ox] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Pad-and-crop plus horizontal flip with probability 1/2, fixed by `seed`.
pub fn augment(image: &Tensor, seed: u64) -> Result<Tensor> {
    crop_flip(image, AugmentDraw::sample(seed))
}

/// Sequences of one-hot symbols; the label is the position of the marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSet {
    pub len: usize,
    pub vocab: usize,
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

pub const MARKER: usize = 0;
/// Marker plus three filler symbols.
pub const PROBE_VOCAB: usize = 4;

/// Position-probe task: each sequence holds exactly one marker among random
/// fillers, and the label is the marker's index. The multiset of symbols is
/// independent of the label, so an order-blind model is at chance.
///
/// Marker positions cycle through `0..len`, so each class appears
/// `count / len` or one more times.
pub fn synthetic_position_task(len: usize, count: usize, seed: u64) -> Result<TokenSet> {
    if len < 2 {
        return Err(Error::Config(format!(
            "position task needs at least 2 tokens, got {len}"
        )));
    }
    let mut rng = rng_from(seed, "position-task");
    let mut order: Vec<usize> = (0..count).map(|i| i % len).collect();
    order.shuffle(&mut rng);
    let mut sequences = Vec::with_capacity(count);
    for &pos in &order {
        let seq: Vec<usize> = (0..len)
            .map(|t| {
                if t == pos {
                    MARKER
                } else {
                    rng.random_range(1..PROBE_VOCAB)
                }
            })
            .collect();
        sequences.push(seq);
    }
    Ok(TokenSet {
        len,
        vocab: PROBE_VOCAB,
        sequences,
        labels: order,
    })
}

/// A labelled split in either modality.
#[derive(Clone, Debug)]
pub enum Dataset {
    Images(ImageSet),
    Tokens(TokenSet),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(s) => s.images.len(),
            Dataset::Tokens(s) => s.labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> usize {
        match self {
            Dataset::Images(s) => s.images[i].label,
            Dataset::Tokens(s) => s.labels[i],
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Dataset::Images(s) => s.kind.classes(),
            Dataset::Tokens(s) => s.len,
        }
    }

    /// The first `n` items.
    pub fn subset(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Config(format!(
                "subset of {n} exceeds dataset size {}",
                self.len()
            )));
        }
        Ok(match self {
            Dataset::Images(s) => Dataset::Images(ImageSet {
                kind: s.kind,
                images: s.images[..n].to_vec(),
            }),
            Dataset::Tokens(s) => Dataset::Tokens(TokenSet {
                sequences: s.sequences[..n].to_vec(),
                labels: s.labels[..n].to_vec(),
                ..s.clone()
            }),
        })
    }

    /// Model input `[B, L, F]` for items `indices`. For images, `augment`
    /// supplies a per-item seed; `None` disables augmentation.
    pub fn batch(
        &self,
        indices: &[usize],
        input: InputSpec,
        augment: Option<&dyn Fn(usize) -> u64>,
    ) -> Result<Tensor> {
        match (self, input) {
            (
                Dataset::Images(s),
                InputSpec::Image {
                    size,
                    patch,
                    channels,
                },
            ) => {
                if size != SIDE || channels != 3 {
                    return Err(Error::Config(format!(
                        "CIFAR images are 3x{SIDE}x{SIDE}, model expects {channels}x{size}x{size}"
                    )));
                }
                let mut data = Vec::new();
                let mut l = 0;
                for &i in indices {
                    let mut img = s.images[i].normalized();
                    if let Some(seed) = augment {
                        img = crop_flip(&img, AugmentDraw::sample(seed(i)))?;
                    }
                    let p = patchify(&img, patch)?;
                    l = p.shape()[0];
                    data.extend_from_slice(p.data());
                }
                Tensor::new(vec![indices.len(), l, channels * patch * patch], data)
            }
            (Dataset::Tokens(s), InputSpec::Tokens { len, vocab }) => {
                if len != s.len || vocab != s.vocab {
                    return Err(Error::Config(format!(
                        "token data is {}x{}, model expects {len}x{vocab}",
                        s.len, s.vocab
                    )));
                }
                let mut data = vec![0.0; indices.len() * len * vocab];
                for (b, &i) in indices.iter().enumerate() {
                    for (t, &sym) in s.sequences[i].iter().enumerate() {
                        data[(b * len + t) * vocab + sym] = 1.0;
                    }
                }
                Tensor::new(vec![indices.len(), len, vocab], data)
            }
            _ => Err(Error::Config(
                "dataset modality does not match the model input".into(),
            )),
        }
    }
}

/// Procedural CIFAR-format images whose class is encoded in a bright
/// square at a class-dependent grid cell over noise. Used as a stand-in
/// when the real archives are absent.
pub fn synthetic_images(kind: CifarKind, count: usize, seed: u64) -> Vec<RawImage> {
    let classes = kind.classes();
    (0..count)
        .map(|i| {
            let label = i % classes;
            let mut rng = rng_indexed(seed, "synthetic-images", i as u64);
            let mut pixels: Vec<u8> = (0..PIXELS).map(|_| rng.random_range(0..96u8)).collect();
            let cell = label % 16;
            let (cy, cx) = (cell / 4 * 8, cell % 4 * 8);
            let channel = (label / 16) % 3;
            for y in cy..cy + 8 {
                for x in cx..cx + 8 {
                    pixels[(channel * SIDE + y) * SIDE + x] = 255;
                }
            }
            RawImage {
                pixels,
                label,
                coarse: (kind == CifarKind::Cifar100).then_some((label / 5) as u8),
            }
        })
        .collect()
}
