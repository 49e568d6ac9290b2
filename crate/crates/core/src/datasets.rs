//! Synthetic corpora, PGM/PPM ingestion and the on-disk dataset layout.
//!
//! A dataset directory holds NTB shards `images-NNN.ntb` (`[n, H, W, ch]`,
//! pixels in `[0, 1]`) and `labels-NNN.ntb` (`[n]`), plus `manifest.json`,
//! which is written last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallel::{map_indices, Execution};
use crate::tensor::Tensor;
use crate::tokenizer::ImageBatch;

pub const SHARD_SIZE: usize = 1000;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Procedural textures only; the class picks the texture family.
    Textures,
    /// Shapes over flat backgrounds; the class picks the shape.
    Shapes,
    /// Shapes over textures shared across classes.
    Mixed,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textures" => Ok(CorpusKind::Textures),
            "shapes" => Ok(CorpusKind::Shapes),
            "mixed" => Ok(CorpusKind::Mixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            kind: CorpusKind::Mixed,
            count: 5000,
            height: 32,
            width: 32,
            channels: 3,
            classes: 10,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !(self.channels == 1 || self.channels == 3)
            || self.classes == 0
        {
            return Err(Error::Config(format!("invalid corpus spec {self:?}")));
        }
        Ok(())
    }
}

/// Images, labels and the train/val split, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Option<ImageBatch>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn images(&self) -> Result<&ImageBatch> {
        self.images
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))
    }

    pub fn train_images(&self) -> Result<ImageBatch> {
        self.images()?.select(&self.train)
    }

    pub fn val_images(&self) -> Result<ImageBatch> {
        self.images()?.select(&self.val)
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn val_labels(&self) -> Vec<usize> {
        self.val.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub images: String,
    pub labels: String,
    pub count: usize,
    pub images_sha256: String,
    pub labels_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<CorpusSpec>,
    pub source: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_counts: BTreeMap<usize, usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub shards: Vec<ShardEntry>,
}

/// Train/val ids: a seeded shuffle, the first 10% (rounded) to validation.
pub fn split_ids(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED));
    let n_val = ((count as f64) * 0.1).round() as usize;
    let mut val = ids[..n_val].to_vec();
    let mut train = ids[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

const SHAPES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "cross", "hbar", "vbar", "diamond", "ellipse", "x",
];

fn shape_hit(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let t = r * 0.35;
    match kind % SHAPES.len() {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r * 0.9 + 1.6 * ax,
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r * 0.55
        }
        4 => (ax <= t && ay <= r) || (ay <= t && ax <= r),
        5 => ay <= t && ax <= r,
        6 => ax <= t && ay <= r,
        7 => ax + ay <= r,
        8 => (dx / r).powi(2) + (dy / (0.5 * r)).powi(2) <= 1.0,
        _ => ((dx - dy).abs() <= t || (dx + dy).abs() <= t) && ax <= r && ay <= r,
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Procedural background `family` evaluated at pixel `(y, x)`.
fn texture(family: usize, y: f64, x: f64, params: &[f64; 4], a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    let period = 3.0 + params[0] * 6.0;
    let t = match family % 4 {
        0 => ((x * params[1] + y * (1.0 - params[1])) / period).floor() as i64 % 2 == 0,
        1 => ((x / period).floor() as i64 + (y / period).floor() as i64) % 2 == 0,
        2 => return lerp(a, b, ((x * params[1] + y * params[2]) / 40.0).fract()),
        _ => ((x * 0.37 * (1.0 + params[2])).sin() * (y * 0.41 * (1.0 + params[3])).cos()) > 0.0,
    };
    if t {
        a
    } else {
        b
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Renders image `index` of the corpus. Depends only on `(spec, index)`.
pub fn render_image(spec: &CorpusSpec, index: usize) -> (Vec<f64>, usize) {
    let class = index % spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_add(1),
    );
    let (hh, ww) = (spec.height as f64, spec.width as f64);
    let family = match spec.kind {
        CorpusKind::Textures => class,
        _ => rng.gen_range(0..4),
    };
    let params = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
    let (ca, cb) = (random_color(&mut rng), random_color(&mut rng));
    let flat = random_color(&mut rng);
    let fg = random_color(&mut rng);
    let r = hh.min(ww) * rng.gen_range(0.2..0.38);
    let cy = rng.gen_range(r..(hh - r).max(r + 1e-9));
    let cx = rng.gen_range(r..(ww - r).max(r + 1e-9));
    let mut px = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let bg = match spec.kind {
                CorpusKind::Shapes => flat,
                _ => texture(family, fy, fx, &params, ca, cb),
            };
            let rgb = match spec.kind {
                CorpusKind::Textures => bg,
                _ if shape_hit(class, fx - cx, fy - cy, r) => fg,
                _ => bg,
            };
            if spec.channels == 1 {
                px.push((rgb[0] + rgb[1] + rgb[2]) / 3.0);
            } else {
                px.extend_from_slice(&rgb);
            }
        }
    }
    (px, class)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes images/labels as shards plus the manifest, which goes last.
fn write_dataset(
    dir: &Path,
    spec: Option<CorpusSpec>,
    source: &str,
    dims: (usize, usize, usize),
    images: &[f64],
    labels: &[usize],
    split_seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, ch) = dims;
    let per = h * w * ch;
    let count = labels.len();
    let mut shards = Vec::new();
    for (s, start) in (0..count).step_by(SHARD_SIZE).enumerate() {
        let end = (start + SHARD_SIZE).min(count);
        let n = end - start;
        let img = Tensor::new(vec![n, h, w, ch], images[start * per..end * per].to_vec())?;
        let lab = Tensor::from_vec(labels[start..end].iter().map(|&l| l as f64).collect());
        let (iname, lname) = (format!("images-{s:03}.ntb"), format!("labels-{s:03}.ntb"));
        img.save(&dir.join(&iname))?;
        lab.save(&dir.join(&lname))?;
        shards.push(ShardEntry {
            images_sha256: sha256_file(&dir.join(&iname))?,
            labels_sha256: sha256_file(&dir.join(&lname))?,
            images: iname,
            labels: lname,
            count: n,
        });
    }
    let mut class_counts = BTreeMap::new();
    for &l in labels {
        *class_counts.entry(l).or_insert(0) += 1;
    }
    let (train, val) = split_ids(count, split_seed);
    let manifest = Manifest {
        spec,
        source: source.to_string(),
        count,
        height: h,
        width: w,
        channels: ch,
        class_counts,
        train,
        val,
        shards,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Renders the corpus in memory.
pub fn render_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let rendered = map_indices(Execution::auto(), spec.count, |i| render_image(spec, i));
    let labels: Vec<usize> = rendered.iter().map(|r| r.1).collect();
    let data: Vec<f64> = rendered.into_iter().flat_map(|r| r.0).collect();
    let (train, val) = split_ids(spec.count, spec.seed);
    let images = if spec.count == 0 {
        None
    } else {
        Some(ImageBatch::new(Tensor::new(
            vec![spec.count, spec.height, spec.width, spec.channels],
            data,
        )?)?)
    };
    Ok(Dataset {
        images,
        labels,
        train,
        val,
    })
}

/// Renders the corpus and writes it under `dir`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    let ds = render_corpus(spec)?;
    let data: &[f64] = ds.images.as_ref().map_or(&[], |b| b.pixels().data());
    write_dataset(
        dir,
        Some(*spec),
        "synthetic",
        (spec.height, spec.width, spec.channels),
        data,
        &ds.labels,
        spec.seed,
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let mut data = Vec::with_capacity(m.count * m.height * m.width * m.channels);
    let mut labels = Vec::with_capacity(m.count);
    for s in &m.shards {
        data.extend_from_slice(Tensor::load(&dir.join(&s.images))?.data());
        labels.extend(
            Tensor::load(&dir.join(&s.labels))?
                .data()
                .iter()
                .map(|&v| v as usize),
        );
    }
    if labels.len() != m.count {
        return Err(Error::Format {
            format: "dataset",
            detail: format!(
                "manifest says {} images, shards hold {}",
                m.count,
                labels.len()
            ),
        });
    }
    let images = if m.count == 0 {
        None
    } else {
        Some(ImageBatch::new(Tensor::new(
            vec![m.count, m.height, m.width, m.channels],
            data,
        )?)?)
    };
    Ok(Dataset {
        images,
        labels,
        train: m.train,
        val: m.val,
    })
}

/// A decoded PGM (1 channel) or PPM (3 channels) image with 8/16-bit samples
/// kept as integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

fn pnm_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "PNM",
        detail: detail.into(),
    }
}

/// Parses binary (P5/P6) and ASCII (P2/P3) PGM/PPM.
pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(pnm_err("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(pnm_err(format!("unsupported magic {other:?}"))),
    };
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| pnm_err(format!("bad number {s:?}")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)? as u32;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(pnm_err(format!("bad header {width}x{height} max {maxval}")));
    }
    let n = width * height * channels;
    let mut samples = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates header and raster
        let start = pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| pnm_err("truncated raster"))?;
        if wide {
            samples.extend(
                raster
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32),
            );
        } else {
            samples.extend(raster.iter().map(|&b| b as u32));
        }
    } else {
        for _ in 0..n {
            samples.push(num(token()?)? as u32);
        }
    }
    if samples.iter().any(|&s| s > maxval) {
        return Err(pnm_err("sample exceeds maxval"));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval,
        samples,
    })
}

/// Encodes `[H, W, ch]` pixels in `[0, 1]` as binary PGM/PPM (maxval 255).
pub fn encode_pnm(pixels: &[f64], height: usize, width: usize, channels: usize) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(pnm_err(format!("{channels} channels"))),
    };
    if pixels.len() != height * width * channels {
        return Err(pnm_err("pixel count does not match geometry"));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pnm(
    path: &Path,
    pixels: &[f64],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<()> {
    std::fs::write(path, encode_pnm(pixels, height, width, channels)?)
        .map_err(|e| Error::io(path, e))
}

/// Centre crop to the target aspect ratio, then area-weighted resize. An
/// upsample replicates pixels; a same-size image passes through unchanged.
pub fn crop_resize(src: &[f64], h: usize, w: usize, ch: usize, th: usize, tw: usize) -> Vec<f64> {
    // crop box keeping the target aspect ratio
    let (ch_h, cw_w) = if h * tw > w * th {
        ((w * th + tw / 2) / tw, w)
    } else {
        (h, (h * tw + th / 2) / th)
    };
    let (ch_h, cw_w) = (ch_h.clamp(1, h), cw_w.clamp(1, w));
    let (oy, ox) = ((h - ch_h) / 2, (w - cw_w) / 2);
    let mut out = vec![0.0; th * tw * ch];
    let sy = ch_h as f64 / th as f64;
    let sx = cw_w as f64 / tw as f64;
    for ty in 0..th {
        let (y0, y1) = (ty as f64 * sy, (ty + 1) as f64 * sy);
        for tx in 0..tw {
            let (x0, x1) = (tx as f64 * sx, (tx + 1) as f64 * sx);
            let mut acc = [0.0; 3];
            let mut area = 0.0;
            let mut yy = y0.floor() as usize;
            while (yy as f64) < y1 && yy < ch_h {
                let wy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
                let mut xx = x0.floor() as usize;
                while (xx as f64) < x1 && xx < cw_w {
                    let wx = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                    let wgt = wy * wx;
                    if wgt > 0.0 {
                        let base = ((oy + yy) * w + ox + xx) * ch;
                        for c in 0..ch {
                            acc[c] += wgt * src[base + c];
                        }
                        area += wgt;
                    }
                    xx += 1;
                }
                yy += 1;
            }
            let dst = (ty * tw + tx) * ch;
            for c in 0..ch {
                out[dst + c] = acc[c] / area;
            }
        }
    }
    out
}

/// Result of [`ingest_directory`].
#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub manifest: Manifest,
    pub ingested: Vec<PathBuf>,
    pub rejected: Vec<(PathBuf, String)>,
}

/// Reads every `.pgm`/`.ppm` file in `src` (sorted by name), crops and
/// resizes to `height x width`, converts to `channels` and writes a dataset
/// to `dst`. Unreadable files are reported, not fatal. All labels are 0.
pub fn ingest_directory(
    src: &Path,
    dst: &Path,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<IngestSummary> {
    if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
        return Err(Error::Config(format!(
            "bad ingest target {height}x{width}x{channels}"
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    let mut data = Vec::new();
    let mut ingested = Vec::new();
    let mut rejected = Vec::new();
    for path in paths {
        let parsed = std::fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|b| parse_pnm(&b).map_err(|e| e.to_string()));
        let pnm = match parsed {
            Ok(p) => p,
            Err(e) => {
                rejected.push((path, e));
                continue;
            }
        };
        let max = pnm.maxval as f64;
        let unit: Vec<f64> = pnm.samples.iter().map(|&s| s as f64 / max).collect();
        let converted: Vec<f64> = match (pnm.channels, channels) {
            (a, b) if a == b => unit,
            (1, 3) => unit.iter().flat_map(|&v| [v, v, v]).collect(),
            _ => unit.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        };
        data.extend(crop_resize(
            &converted, pnm.height, pnm.width, channels, height, width,
        ));
        ingested.push(path);
    }
    let labels = vec![0; ingested.len()];
    let manifest = write_dataset(
        dst,
        None,
        &src.display().to_string(),
        (height, width, channels),
        &data,
        &labels,
        seed,
    )?;
    Ok(IngestSummary {
        manifest,
        ingested,
        rejected,
    })
}
