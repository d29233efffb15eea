//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), image-grid export
//! (binary PGM/PPM), experiment configuration files, CSV reports, and the
//! content hashes used for provenance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, LabelKnowledge};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------
// sha256
// ---------------------------------------------------------------------

const SHA256_K: [u32; 64] = [
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
    0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
    0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
    0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
    0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2,
];

/// SHA-256 of a byte slice, hex-encoded.
pub fn sha256_hex(data: &[u8]) -> String {
    let mut h: [u32; 8] = [
        0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab,
        0x5be0cd19,
    ];
    let bitlen = (data.len() as u64).wrapping_mul(8);
    let mut msg = data.to_vec();
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&bitlen.to_be_bytes());

    let mut w = [0u32; 64];
    for chunk in msg.chunks_exact(64) {
        for i in 0..16 {
            w[i] = u32::from_be_bytes([chunk[4 * i], chunk[4 * i + 1], chunk[4 * i + 2], chunk[4 * i + 3]]);
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16]
                .wrapping_add(s0)
                .wrapping_add(w[i - 7])
                .wrapping_add(s1);
        }
        let (mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh) =
            (h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]);
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ ((!e) & g);
            let t1 = hh
                .wrapping_add(s1)
                .wrapping_add(ch)
                .wrapping_add(SHA256_K[i])
                .wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            hh = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }
        h[0] = h[0].wrapping_add(a);
        h[1] = h[1].wrapping_add(b);
        h[2] = h[2].wrapping_add(c);
        h[3] = h[3].wrapping_add(d);
        h[4] = h[4].wrapping_add(e);
        h[5] = h[5].wrapping_add(f);
        h[6] = h[6].wrapping_add(g);
        h[7] = h[7].wrapping_add(hh);
    }
    h.iter().map(|v| format!("{:08x}", v)).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Each image is `(channels, h, w)` with pixels in [0, 1] (exactly
    /// `v / 255`).
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: String,
    pub checksum: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stack a subset into a `(b, c, h, w)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let shape = self.image_shape().to_vec();
        let mut values = Vec::with_capacity(indices.len() * self.images[0].len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::Config(format!("index {} out of dataset", i)))?;
            values.extend_from_slice(img.values());
            labels.push(self.labels[i]);
        }
        let mut bshape = vec![indices.len()];
        bshape.extend_from_slice(&shape);
        Ok((Tensor::new(bshape, values)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.push(
                self.images
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("index {} out of dataset", i)))?
                    .clone(),
            );
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            name: self.name.clone(),
            images,
            labels,
            classes: self.classes,
            source: self.source.clone(),
            checksum: self.checksum.clone(),
        })
    }

    /// Double resolution by pixel replication (desk-scale stand-in when a
    /// higher-resolution corpus is wanted from 8×8 sources).
    pub fn upscale2x(&self) -> Result<Dataset> {
        let images = self
            .images
            .iter()
            .map(|img| {
                let s = img.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * 2, w * 2);
                let mut out = vec![0.0; c * oh * ow];
                for cc in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            out[(cc * oh + i) * ow + j] = img.values()[(cc * h + i / 2) * w + j / 2];
                        }
                    }
                }
                Tensor::new(vec![c, oh, ow], out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: format!("{}-2x", self.name),
            images,
            labels: self.labels.clone(),
            classes: self.classes,
            source: self.source.clone(),
            checksum: self.checksum.clone(),
        })
    }

    /// Halve resolution by 2×2 average pooling (attack acceptance runs at
    /// 16×16 instead of 32×32).
    pub fn downscale2x(&self) -> Result<Dataset> {
        let images = self
            .images
            .iter()
            .map(|img| {
                let s = img.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!("cannot halve {}x{}", h, w)));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c * oh * ow];
                for cc in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut s4 = 0.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    s4 += img.values()[(cc * h + 2 * i + di) * w + 2 * j + dj];
                                }
                            }
                            out[(cc * oh + i) * ow + j] = s4 / 4.0;
                        }
                    }
                }
                Tensor::new(vec![c, oh, ow], out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            name: format!("{}-half", self.name),
            images,
            labels: self.labels.clone(),
            classes: self.classes,
            source: self.source.clone(),
            checksum: self.checksum.clone(),
        })
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: format!("truncated header at byte {}", off),
        })
}

/// IDX image file: magic 0x00000803, then count, rows, cols (big endian),
/// then row-major u8 pixels.
pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("bad magic {:#010x}, want {:#010x}", magic, IDX_IMAGES_MAGIC),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expect = 16 + n * rows * cols;
    if bytes.len() != expect {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected {} bytes for {} images, got {}", expect, n, bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = 16 + i * rows * cols;
        let values: Vec<f64> = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], values)?);
    }
    Ok(images)
}

/// IDX label file: magic 0x00000801, count, then u8 labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("bad magic {:#010x}, want {:#010x}", magic, IDX_LABELS_MAGIC),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected {} bytes for {} labels, got {}", 8 + n, n, bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Write IDX image/label files (used for fixtures and the bundled digit
/// set).
pub fn save_idx(images: &[Tensor], labels: &[usize], img_path: &Path, lbl_path: &Path) -> Result<()> {
    let n = images.len();
    let s = images[0].shape();
    let (rows, cols) = (s[1], s[2]);
    let mut ib = Vec::with_capacity(16 + n * rows * cols);
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ib.extend_from_slice(&(n as u32).to_be_bytes());
    ib.extend_from_slice(&(rows as u32).to_be_bytes());
    ib.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        for v in img.values() {
            ib.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(img_path, ib)?;

    let mut lb = Vec::with_capacity(8 + n);
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(n as u32).to_be_bytes());
    lb.extend(labels.iter().map(|&l| l as u8));
    fs::write(lbl_path, lb)?;
    Ok(())
}

/// Load an MNIST-format dataset from a directory holding
/// `{stem}-images-idx3-ubyte` and `{stem}-labels-idx1-ubyte`.
pub fn load_mnist(dir: &Path, stem: &str) -> Result<Dataset> {
    let img_path = dir.join(format!("{}-images-idx3-ubyte", stem));
    let lbl_path = dir.join(format!("{}-labels-idx1-ubyte", stem));
    let images = load_idx_images(&img_path)?;
    let labels = load_idx_labels(&lbl_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            path: dir.display().to_string(),
            reason: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    let checksum = sha256_hex(&[fs::read(&img_path)?, fs::read(&lbl_path)?].concat());
    Ok(Dataset {
        name: format!("mnist/{}", stem),
        images,
        labels,
        classes: 10,
        source: dir.display().to_string(),
        checksum,
    })
}

const CIFAR_RECORD: usize = 3073;

/// One CIFAR-10 binary batch file: records of 1 label byte + 3×1024
/// pixel bytes.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("size {} not a multiple of {}", bytes.len(), CIFAR_RECORD),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("record {}: label byte {} out of range", i, label),
            });
        }
        labels.push(label);
        let values: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], values)?);
    }
    let checksum = sha256_hex(&bytes);
    Ok(Dataset {
        name: "cifar10".into(),
        images,
        labels,
        classes: 10,
        source: path.display().to_string(),
        checksum,
    })
}

// ---------------------------------------------------------------------
// image grids
// ---------------------------------------------------------------------

const GRID_GAP: usize = 2;

pub struct SavedGrid {
    pub path: PathBuf,
    /// Pixels that fell outside [0, 1] and were clamped.
    pub clamped: usize,
    pub width: usize,
    pub height: usize,
}

/// Tile images row-major into one binary PGM (grayscale) or PPM (3-channel)
/// file with 2-pixel separators. Pixels outside [0, 1] clamp with a
/// warning count in the result.
pub fn save_image_grid(images: &[Tensor], path: &Path) -> Result<SavedGrid> {
    if images.is_empty() {
        return Err(Error::Config("no images to save".into()));
    }
    let s = images[0].shape().to_vec();
    let (c, h, w) = match s.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::InvalidShape {
                op: "save_image_grid",
                shape: s,
                reason: "expected (channels, h, w)".into(),
            })
        }
    };
    if c != 1 && c != 3 {
        return Err(Error::InvalidShape {
            op: "save_image_grid",
            shape: s,
            reason: "PGM/PPM support 1 or 3 channels".into(),
        });
    }
    for img in images {
        if img.shape() != images[0].shape() {
            return Err(Error::ShapeMismatch {
                op: "save_image_grid",
                lhs: images[0].shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
    }
    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * GRID_GAP;
    let height = rows * h + (rows - 1) * GRID_GAP;

    let mut pixels = vec![0u8; width * height * c];
    let mut clamped = 0usize;
    for (i, img) in images.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        let (y0, x0) = (gr * (h + GRID_GAP), gc * (w + GRID_GAP));
        for cc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = img.values()[(cc * h + y) * w + x];
                    if !(0.0..=1.0).contains(&v) {
                        clamped += 1;
                    }
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    pixels[((y0 + y) * width + (x0 + x)) * c + cc] = byte;
                }
            }
        }
    }
    if clamped > 0 {
        eprintln!(
            "warning: {} pixels outside [0,1] clamped while writing {}",
            clamped,
            path.display()
        );
    }

    let mut f = fs::File::create(path)?;
    if c == 1 {
        write!(f, "P5\n{} {}\n255\n", width, height)?;
    } else {
        write!(f, "P6\n{} {}\n255\n", width, height)?;
    }
    f.write_all(&pixels)?;
    Ok(SavedGrid {
        path: path.to_path_buf(),
        clamped,
        width,
        height,
    })
}

/// Read back a PGM/PPM written by [`save_image_grid`] (round-trip checks).
pub fn load_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header_err = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    // header tokens are ASCII separated by single whitespace bytes
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let c = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(header_err("unknown magic")),
    };
    let w: usize = token()?.parse().map_err(|_| header_err("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| header_err("bad height"))?;
    let maxv = token()?;
    if maxv != "255" {
        return Err(header_err("only 8-bit supported"));
    }
    let data = bytes[pos + 1..].to_vec();
    if data.len() != w * h * c {
        return Err(header_err("payload size mismatch"));
    }
    Ok((w, h, c, data))
}

// ---------------------------------------------------------------------
// CSV (RFC-4180 quoting)
// ---------------------------------------------------------------------

fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.iter().map(|h| csv_quote(h)).collect::<Vec<_>>().join(","));
    out.push_str("\r\n");
    for row in rows {
        out.push_str(&row.iter().map(|v| csv_quote(v)).collect::<Vec<_>>().join(","));
        out.push_str("\r\n");
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------
// experiment configuration
// ---------------------------------------------------------------------

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSelection {
    pub arch: String,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSelection {
    /// "mnist", "cifar10", "digits" (bundled), or "synthetic".
    pub name: String,
    #[serde(default)]
    pub path: Option<String>,
    /// Explicit image indices; otherwise the first `take`.
    #[serde(default)]
    pub subset: Option<Vec<usize>>,
    #[serde(default)]
    pub take: Option<usize>,
    /// Halve resolution this many times by 2×2 average pooling.
    #[serde(default)]
    pub downscale: u32,
    /// Double resolution this many times by pixel replication.
    #[serde(default)]
    pub upscale: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BnKnowledge {
    None,
    Exact,
    Proxy,
    Infer,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ThreatModelConfig {
    /// What the attacker knows about BatchNorm statistics.
    pub bn: BnKnowledge,
    /// Whether labels are granted, inferred, or jointly optimized.
    pub labels: LabelKnowledge,
    /// Client ships private-batch BN statistics in the packet.
    pub bn_sharing: bool,
    /// Strongest-attacker grants for encoding defenses.
    #[serde(default = "default_true")]
    pub grant_encoding_records: bool,
    #[serde(default = "default_true")]
    pub grant_sign_patterns: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ThreatModelConfig {
    fn default() -> Self {
        ThreatModelConfig {
            bn: BnKnowledge::None,
            labels: LabelKnowledge::Granted,
            bn_sharing: false,
            grant_encoding_records: true,
            grant_sign_patterns: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub model: ModelSelection,
    pub dataset: DatasetSelection,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub threat: ThreatModelConfig,
    pub batch_size: usize,
    /// Epochs the eavesdropper collects for encoding defenses (T).
    #[serde(default = "default_epochs")]
    pub eavesdrop_epochs: usize,
    pub seed: u64,
    pub out_dir: String,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_epochs() -> usize {
    20
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (want {})",
                self.version, CONFIG_VERSION
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.defense.validate()?;
        if matches!(self.threat.bn, BnKnowledge::Exact) && !self.threat.bn_sharing {
            return Err(Error::Config(
                "threat.bn = exact requires threat.bn_sharing = true".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_config<T: Serialize>(cfg: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn sha256_reference_vectors() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn fake_digit_set(n: usize) -> (Vec<Tensor>, Vec<usize>) {
        let images = (0..n)
            .map(|i| Tensor::full(&[1, 6, 6], (i % 256) as f64 / 255.0))
            .collect();
        let labels = (0..n).map(|i| i % 10).collect();
        (images, labels)
    }

    #[test]
    fn idx_round_trip_and_normalization() {
        let dir = tmpdir();
        let (images, labels) = fake_digit_set(12);
        let ip = dir.path().join("train-images-idx3-ubyte");
        let lp = dir.path().join("train-labels-idx1-ubyte");
        save_idx(&images, &labels, &ip, &lp).unwrap();
        let ds = load_mnist(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.labels, labels);
        assert_eq!(ds.image_shape(), &[1, 6, 6]);
        // pixel 255 -> exactly 1.0
        let bright = Tensor::full(&[1, 2, 2], 1.0);
        save_idx(&[bright], &[3], &ip, &lp).unwrap();
        let ds = load_mnist(dir.path(), "train").unwrap();
        assert_eq!(ds.images[0].values()[0], 1.0);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let dir = tmpdir();
        let p = dir.path().join("bad");
        fs::write(&p, [0u8, 0, 8, 4, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2]).unwrap();
        let err = load_idx_images(&p).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{}", err);

        let mut good = Vec::new();
        good.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        good.extend_from_slice(&2u32.to_be_bytes());
        good.extend_from_slice(&2u32.to_be_bytes());
        good.extend_from_slice(&2u32.to_be_bytes());
        good.extend_from_slice(&[1, 2, 3]); // should be 8 bytes
        fs::write(&p, &good).unwrap();
        let err = load_idx_images(&p).unwrap_err().to_string();
        assert!(err.contains("expected 24 bytes"), "{}", err);
    }

    #[test]
    fn cifar_record_arithmetic() {
        let dir = tmpdir();
        let p = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(9 - i); // labels 9, 8, 7
            bytes.extend(std::iter::repeat_n(i * 10, 3072));
        }
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar10(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![9, 8, 7]);
        assert_eq!(ds.image_shape(), &[3, 32, 32]);
        assert_eq!(ds.images[1].values()[0], 10.0 / 255.0);

        // stride check: drop one byte
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_cifar10(&p).is_err());
    }

    #[test]
    fn grid_dims_match_tiling_arithmetic() {
        let dir = tmpdir();
        let images: Vec<Tensor> = (0..16).map(|_| Tensor::full(&[1, 28, 28], 0.5)).collect();
        let saved = save_image_grid(&images, &dir.path().join("g.pgm")).unwrap();
        assert_eq!(saved.width, 4 * 28 + 3 * 2);
        assert_eq!(saved.height, 4 * 28 + 3 * 2);
        let (w, h, c, _) = load_pnm(&saved.path).unwrap();
        assert_eq!((w, h, c), (118, 118, 1));
    }

    #[test]
    fn white_image_saves_as_255_and_clamps_warn() {
        let dir = tmpdir();
        let white = Tensor::full(&[3, 2, 2], 1.0);
        let saved = save_image_grid(&[white], &dir.path().join("w.ppm")).unwrap();
        let (_, _, c, data) = load_pnm(&saved.path).unwrap();
        assert_eq!(c, 3);
        assert!(data.iter().all(|&b| b == 255));
        assert_eq!(saved.clamped, 0);

        let hot = Tensor::full(&[1, 2, 2], 1.5);
        let saved = save_image_grid(&[hot], &dir.path().join("h.pgm")).unwrap();
        assert_eq!(saved.clamped, 4);
        let (_, _, _, data) = load_pnm(&saved.path).unwrap();
        assert!(data.iter().all(|&b| b == 255));
    }

    #[test]
    fn grid_round_trip_lossless_at_8bit() {
        let dir = tmpdir();
        let img = Tensor::new(
            vec![1, 2, 2],
            vec![0.0, 10.0 / 255.0, 128.0 / 255.0, 1.0],
        )
        .unwrap();
        let saved = save_image_grid(&[img.clone()], &dir.path().join("r.pgm")).unwrap();
        let (_, _, _, data) = load_pnm(&saved.path).unwrap();
        let back: Vec<f64> = data.iter().map(|&b| b as f64 / 255.0).collect();
        for (a, b) in img.values().iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_quoting_follows_rfc4180() {
        let dir = tmpdir();
        let p = dir.path().join("t.csv");
        write_csv(
            &p,
            &["plain", "with,comma"],
            &[vec!["a\"b".into(), "line\nbreak".into()]],
        )
        .unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("plain,\"with,comma\"\r\n"));
        assert!(text.contains("\"a\"\"b\",\"line\nbreak\""));
    }

    fn sample_config() -> ExperimentConfig {
        ExperimentConfig {
            version: CONFIG_VERSION,
            model: ModelSelection {
                arch: "mlp2".into(),
                classes: 10,
                seed: 1,
            },
            dataset: DatasetSelection {
                name: "digits".into(),
                path: None,
                subset: None,
                take: Some(8),
                downscale: 0,
                upscale: 0,
            },
            defense: DefenseConfig::default(),
            attack: AttackConfig::default(),
            threat: ThreatModelConfig::default(),
            batch_size: 4,
            eavesdrop_epochs: 4,
            seed: 9,
            out_dir: "out".into(),
        }
    }

    #[test]
    fn config_parse_serialize_idempotent() {
        let dir = tmpdir();
        let p = dir.path().join("cfg.json");
        let cfg = sample_config();
        save_config(&cfg, &p).unwrap();
        let loaded: ExperimentConfig = load_config(&p).unwrap();
        let p2 = dir.path().join("cfg2.json");
        save_config(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tmpdir();
        let p = dir.path().join("cfg.json");
        let mut v = serde_json::to_value(sample_config()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("alpha_tvv".into(), serde_json::json!(0.1));
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(load_config::<ExperimentConfig>(&p).is_err());
    }

    #[test]
    fn exact_bn_requires_sharing() {
        let mut cfg = sample_config();
        cfg.threat.bn = BnKnowledge::Exact;
        cfg.threat.bn_sharing = false;
        assert!(cfg.validate().is_err());
        cfg.threat.bn_sharing = true;
        assert!(cfg.validate().is_ok());
    }
}
