//! Datasets: seeded synthetic generators, IDX ingestion and the JSON cache.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::EncodedTensor;
use crate::{Error, Exec, Result, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Labelled (ID) or unlabelled (OOD) examples stored as rows of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    /// Per-example shape, e.g. `[28, 28, 1]` for images or `[d]` for vectors.
    sample_shape: Vec<usize>,
    /// `[n, prod(sample_shape)]`.
    examples: Tensor,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        sample_shape: Vec<usize>,
        examples: Tensor,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let (n, d) = examples.dims2()?;
        if sample_shape.iter().product::<usize>() != d {
            return Err(Error::shape(format!(
                "sample shape {sample_shape:?} does not match {d} columns"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::data(format!("{} labels for {n} examples", l.len())));
            }
            let k =
                num_classes.ok_or_else(|| Error::data("labelled dataset without a class count"))?;
            if let Some(bad) = l.iter().find(|y| **y >= k) {
                return Err(Error::data(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            sample_shape,
            examples,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.examples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.shape()[1]
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    /// `[H, W, C]` when examples are images.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        match self.sample_shape.as_slice() {
            [h, w, c] => Some([*h, *w, *c]),
            [h, w] => Some([*h, *w, 1]),
            _ => None,
        }
    }

    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::data(format!("empty subset of '{}'", self.name)));
        }
        Ok(Dataset {
            name: self.name.clone(),
            sample_shape: self.sample_shape.clone(),
            examples: self.examples.select_rows(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        })
    }

    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded hold-out split `(train, val)`; both keep the original order.
    pub fn split_train_val(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0 < val_fraction && val_fraction < 1.0) {
            return Err(Error::config(format!(
                "validation fraction {val_fraction} outside (0, 1)"
            )));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::data("need at least 2 examples to split"));
        }
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut val = idx[..n_val].to_vec();
        let mut train = idx[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&val)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CachedDataset {
            format_version: DATASET_FORMAT_VERSION,
            name: self.name.clone(),
            sample_shape: self.sample_shape.clone(),
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            examples: EncodedTensor::encode(&self.examples),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Dataset> {
        let c: CachedDataset = serde_json::from_str(s)?;
        if c.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset format_version {}",
                c.format_version
            )));
        }
        Dataset::new(
            c.name,
            c.sample_shape,
            c.examples.decode()?,
            c.labels,
            c.num_classes,
        )
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedDataset {
    format_version: u32,
    name: String,
    sample_shape: Vec<usize>,
    num_classes: Option<usize>,
    labels: Option<Vec<usize>>,
    examples: EncodedTensor,
}

/// Scale of the random blob centers.
pub const BLOB_CENTER_SCALE: f64 = 4.0;

/// Gaussian clusters around seeded centers `~ N(0, 4² I)`; examples are
/// grouped by class.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::config(
            "blobs need at least 2 classes and 2 dimensions",
        ));
    }
    if per_class == 0 {
        return Err(Error::config("examples per class must be positive"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config(format!("invalid spread {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| BLOB_CENTER_SCALE * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(
                c.iter()
                    .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)),
            );
            labels.push(k);
        }
    }
    let examples = Tensor::new(vec![num_classes * per_class, dim], data)?;
    Dataset::new(
        "blobs",
        vec![dim],
        examples,
        Some(labels),
        Some(num_classes),
    )
}

/// Unlabelled unit-variance Gaussian points centred `offset` away from the
/// origin along a seeded random direction.
pub fn synth_ood(dim: usize, n: usize, offset: f64, seed: u64) -> Result<Dataset> {
    if dim < 2 || n == 0 {
        return Err(Error::config("OOD set needs dim ≥ 2 and a positive count"));
    }
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::config(format!("invalid offset {offset}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        data.extend(
            dir.iter()
                .map(|u| offset * u + rng.sample::<f64, _>(StandardNormal)),
        );
    }
    Dataset::new(
        "ood",
        vec![dim],
        Tensor::new(vec![n, dim], data)?,
        None,
        None,
    )
}

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(format!("truncated IDX header: missing {field}")))
}

/// Parses an unsigned-byte IDX buffer of the given rank into
/// `(dimension sizes, payload)`.
pub fn parse_idx(bytes: &[u8], expected_rank: u8) -> Result<(Vec<usize>, &[u8])> {
    let magic = bytes
        .get(..4)
        .ok_or_else(|| Error::format("truncated IDX header: missing magic"))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::format(format!(
            "bad IDX magic: leading bytes {:#04x} {:#04x}",
            magic[0], magic[1]
        )));
    }
    if magic[2] != 0x08 {
        return Err(Error::format(format!(
            "bad IDX magic: data type {:#04x}, expected 0x08",
            magic[2]
        )));
    }
    if magic[3] != expected_rank {
        return Err(Error::format(format!(
            "bad IDX magic: rank {}, expected {expected_rank}",
            magic[3]
        )));
    }
    let mut dims = Vec::with_capacity(expected_rank as usize);
    for d in 0..expected_rank as usize {
        dims.push(read_u32(bytes, 4 + 4 * d, &format!("dimension {d} size"))? as usize);
    }
    let start = 4 + 4 * expected_rank as usize;
    let need: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::format(format!(
            "truncated IDX data: expected {need} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(Error::format(format!(
            "IDX data has {} trailing bytes",
            payload.len() - need
        )));
    }
    Ok((dims, payload))
}

/// Loads an IDX image file (rank 3) and optional label file (rank 1);
/// pixels are scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: Option<&Path>) -> Result<Dataset> {
    let path = images_path.as_ref();
    let bytes = fs::read(path)?;
    let (dims, payload) = parse_idx(&bytes, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format("IDX image file has a zero dimension"));
    }
    let pixels = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let examples = Tensor::new(vec![n, h * w], pixels)?;
    let (labels, classes) = match labels_path {
        Some(lp) => {
            let lbytes = fs::read(lp)?;
            let (ldims, lpayload) = parse_idx(&lbytes, 1)?;
            if ldims[0] != n {
                return Err(Error::format(format!(
                    "label count {} does not match image count {n}",
                    ldims[0]
                )));
            }
            let labels: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
            let classes = labels.iter().copied().max().unwrap_or(0) + 1;
            (Some(labels), Some(classes.max(2)))
        }
        None => (None, None),
    };
    let name = path
        .file_stem()
        .map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, vec![h, w, 1], examples, labels, classes)
}

/// IDX unsigned-byte encoding of `n` images of `h × w`.
pub fn encode_idx_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 3];
    for d in [n, h, w] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 1];
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a `[H, W, 1]` image dataset (and its labels, if any) as IDX,
/// quantizing pixels to bytes.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let (images, labels) = encode_idx(data)?;
    fs::write(images_path, images)?;
    if let (Some(lp), Some(bytes)) = (labels_path, labels) {
        fs::write(lp, bytes)?;
    }
    Ok(())
}

/// IDX bytes for the images and, when present, the labels of `data`.
/// Pixels are rescaled to bytes with rounding.
pub fn encode_idx(data: &Dataset) -> Result<(Vec<u8>, Option<Vec<u8>>)> {
    let [h, w, c] = data
        .image_shape()
        .ok_or_else(|| Error::config("IDX output needs image-shaped examples"))?;
    if c != 1 {
        return Err(Error::config(
            "IDX output supports single-channel images only",
        ));
    }
    let pixels: Vec<u8> = data
        .examples()
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels = match data.labels() {
        Some(labels) => {
            let bytes: Vec<u8> = labels
                .iter()
                .map(|&l| u8::try_from(l).map_err(|_| Error::config("label does not fit a byte")))
                .collect::<Result<_>>()?;
            Some(encode_idx_labels(&bytes))
        }
        None => None,
    };
    Ok((encode_idx_images(&pixels, data.len(), h, w), labels))
}

/// Families of procedurally rendered 28×28 stroke glyphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphFamily {
    /// Ten handwritten-style digit shapes.
    Digits,
    /// Eight geometric shapes sharing no template with the digits.
    Shapes,
}

pub const GLYPH_SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let steps = 20;
    (0..=steps)
        .map(|i| {
            let a = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn templates(family: GlyphFamily) -> Vec<Vec<Stroke>> {
    use std::f64::consts::{PI, TAU};
    match family {
        GlyphFamily::Digits => vec![
            vec![ellipse(0.5, 0.5, 0.26, 0.38, 0.0, TAU)],
            vec![vec![(0.38, 0.26), (0.52, 0.12), (0.52, 0.88)]],
            vec![vec![
                (0.25, 0.3),
                (0.35, 0.15),
                (0.6, 0.12),
                (0.74, 0.28),
                (0.7, 0.45),
                (0.25, 0.88),
                (0.78, 0.88),
            ]],
            vec![vec![
                (0.25, 0.15),
                (0.7, 0.15),
                (0.48, 0.45),
                (0.72, 0.6),
                (0.68, 0.82),
                (0.45, 0.9),
                (0.25, 0.82),
            ]],
            vec![vec![(0.65, 0.88), (0.65, 0.12), (0.22, 0.62), (0.8, 0.62)]],
            vec![vec![
                (0.75, 0.12),
                (0.3, 0.12),
                (0.27, 0.45),
                (0.6, 0.42),
                (0.75, 0.6),
                (0.68, 0.83),
                (0.45, 0.9),
                (0.25, 0.82),
            ]],
            vec![vec![
                (0.7, 0.12),
                (0.4, 0.3),
                (0.27, 0.6),
                (0.35, 0.85),
                (0.6, 0.88),
                (0.72, 0.68),
                (0.55, 0.5),
                (0.3, 0.6),
            ]],
            vec![vec![(0.22, 0.12), (0.78, 0.12), (0.42, 0.88)]],
            vec![
                ellipse(0.5, 0.3, 0.17, 0.17, 0.0, TAU),
                ellipse(0.5, 0.68, 0.21, 0.21, 0.0, TAU),
            ],
            vec![
                ellipse(0.5, 0.33, 0.2, 0.2, 0.0, TAU),
                vec![(0.7, 0.35), (0.6, 0.88)],
            ],
        ],
        GlyphFamily::Shapes => vec![
            vec![vec![(0.5, 0.15), (0.85, 0.85), (0.15, 0.85), (0.5, 0.15)]],
            vec![vec![
                (0.2, 0.2),
                (0.8, 0.2),
                (0.8, 0.8),
                (0.2, 0.8),
                (0.2, 0.2),
            ]],
            vec![
                vec![(0.18, 0.18), (0.82, 0.82)],
                vec![(0.82, 0.18), (0.18, 0.82)],
            ],
            vec![
                vec![(0.5, 0.12), (0.5, 0.88)],
                vec![(0.12, 0.5), (0.88, 0.5)],
            ],
            vec![
                vec![(0.25, 0.12), (0.25, 0.88)],
                vec![(0.75, 0.12), (0.75, 0.88)],
                vec![(0.25, 0.5), (0.75, 0.5)],
            ],
            vec![vec![
                (0.1, 0.5),
                (0.26, 0.25),
                (0.42, 0.75),
                (0.58, 0.25),
                (0.74, 0.75),
                (0.9, 0.5),
            ]],
            vec![vec![
                (0.5, 0.1),
                (0.88, 0.5),
                (0.5, 0.9),
                (0.12, 0.5),
                (0.5, 0.1),
            ]],
            vec![
                ellipse(0.5, 0.5, 0.35, 0.2, 0.0, PI),
                vec![(0.15, 0.5), (0.85, 0.5)],
            ],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render_glyph(strokes: &[Stroke], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = GLYPH_SIZE as f64;
    let angle: f64 = rng.random_range(-0.3..0.3);
    let scale: f64 = rng.random_range(0.75..1.05);
    let shear: f64 = rng.random_range(-0.25..0.25);
    let (tx, ty): (f64, f64) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let width: f64 = rng.random_range(1.4..3.0);
    let jitter = Normal::new(0.0, 0.025).unwrap();
    let (ca, sa) = (angle.cos(), angle.sin());
    // template unit square to pixel coordinates
    let place = |(x, y): (f64, f64)| {
        let (u, v) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        let (u, v) = (scale * (ca * u - sa * v), scale * (sa * u + ca * v));
        ((u + 0.5 + tx) * s, (v + 0.5 + ty) * s)
    };
    let placed: Vec<Stroke> = strokes
        .iter()
        .map(|st| {
            st.iter()
                .map(|&(x, y)| place((x + jitter.sample(rng), y + jitter.sample(rng))))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.04).unwrap();
    let mut px = Vec::with_capacity(GLYPH_SIZE * GLYPH_SIZE);
    for r in 0..GLYPH_SIZE {
        for c in 0..GLYPH_SIZE {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = placed
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.0 - (d - width / 2.0)).clamp(0.0, 1.0);
            let v = (ink + noise.sample(rng)).clamp(0.0, 1.0);
            // quantize like an 8-bit image
            px.push((v * 255.0).round() / 255.0);
        }
    }
    px
}

/// `n` seeded 28×28 glyph images; classes cycle through the family's
/// templates. Each image draws from its own RNG stream, so the result does
/// not depend on `exec`.
pub fn synth_glyphs(exec: Exec, family: GlyphFamily, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("glyph count must be positive"));
    }
    let tpl = templates(family);
    let k = tpl.len();
    let mut order: Vec<usize> = (0..n).map(|i| i % k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let images = exec.map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        render_glyph(&tpl[order[i]], &mut rng)
    });
    let data: Vec<f64> = images.into_iter().flatten().collect();
    let examples = Tensor::new(vec![n, GLYPH_SIZE * GLYPH_SIZE], data)?;
    let name = match family {
        GlyphFamily::Digits => "digits",
        GlyphFamily::Shapes => "shapes",
    };
    Dataset::new(
        name,
        vec![GLYPH_SIZE, GLYPH_SIZE, 1],
        examples,
        Some(order),
        Some(k),
    )
}
