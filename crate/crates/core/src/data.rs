//! Labeled image datasets: synthetic shapes, IDX files, raw tensor directories, proxy subsets.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian as BE, LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Shape;

/// Images in CHW layout with values in `[0, 1]`, one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    num_classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: Shape,
        num_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if shape.numel() == 0 || images.len() != labels.len() * shape.numel() {
            return Err(Error::Format(format!(
                "{} pixel values for {} images of shape {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.shape.numel());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Train and test splits of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Disjoint random train/validation subsets, reproducible by seed.
pub fn make_proxy(
    d: &Dataset,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 {
        return Err(Error::EmptyDataset("proxy training split"));
    }
    if n_val == 0 {
        return Err(Error::EmptyDataset("proxy validation split"));
    }
    if n_train + n_val > d.len() {
        return Err(Error::InsufficientSamples {
            requested: n_train + n_val,
            available: d.len(),
        });
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        d.subset(&idx[..n_train]),
        d.subset(&idx[n_train..n_train + n_val]),
    ))
}

pub const SHAPE_CLASSES: [&str; 10] = [
    "disk",
    "ring",
    "square",
    "hollow_square",
    "triangle",
    "horizontal_bar",
    "vertical_bar",
    "plus",
    "cross",
    "two_dots",
];

fn inside(class: usize, dx: f64, dy: f64, r: f64, t: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let cheb = dx.abs().max(dy.abs());
    match class {
        0 => d <= r,
        1 => (d - r).abs() <= t / 2.0,
        2 => cheb <= r,
        3 => (cheb - r).abs() <= t / 2.0,
        4 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        5 => dy.abs() <= t && dx.abs() <= r,
        6 => dx.abs() <= t && dy.abs() <= r,
        7 => (dy.abs() <= t / 2.0 + 0.5 || dx.abs() <= t / 2.0 + 0.5) && cheb <= r,
        8 => ((dx - dy).abs() <= t || (dx + dy).abs() <= t) && cheb <= r,
        _ => {
            let rr = r / 2.5;
            let a = ((dx - r / 2.0).powi(2) + dy * dy).sqrt();
            let b = ((dx + r / 2.0).powi(2) + dy * dy).sqrt();
            a <= rr || b <= rr
        }
    }
}

/// One noisy 1×`side`×`side` image of the given shape class.
pub fn render_shape<R: Rng + ?Sized>(rng: &mut R, class: usize, side: usize) -> Vec<f64> {
    let s = side as f64;
    let r = rng.random_range(0.2 * s..0.32 * s);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let t = rng.random_range(1.5..2.5);
    let level = rng.random_range(0.6..1.0);
    let noise = Normal::new(0.0f64, 0.08).expect("finite std");
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let v = if inside(class, dx, dy, r, t) {
                level
            } else {
                0.0
            };
            img.push((v + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    img
}

/// Balanced synthetic 10-class shape dataset of 28×28 grayscale images.
pub fn synthetic_shapes(n_train: usize, n_test: usize, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % SHAPE_CLASSES.len()).collect();
        labels.shuffle(&mut rng);
        let mut images = Vec::with_capacity(n * 28 * 28);
        for &l in &labels {
            images.extend(render_shape(&mut rng, l, 28));
        }
        Dataset::new(Shape::new(1, 28, 28), SHAPE_CLASSES.len(), images, labels)
            .expect("generator output is valid")
    };
    let train = make(n_train);
    let test = make(n_test);
    Splits { train, test }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

pub const IDX_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image file (u8 pixels, big-endian header) into `[0, 1]` values.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = bytes;
    let bad = |e: std::io::Error| Error::Format(format!("IDX image header: {e}"));
    let magic = r.read_u32::<BE>().map_err(bad)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("IDX image magic {magic:#010x}")));
    }
    let n = r.read_u32::<BE>().map_err(bad)? as usize;
    let h = r.read_u32::<BE>().map_err(bad)? as usize;
    let w = r.read_u32::<BE>().map_err(bad)? as usize;
    if r.len() != n * h * w {
        return Err(Error::Format(format!(
            "IDX image payload is {} bytes, header says {}",
            r.len(),
            n * h * w
        )));
    }
    Ok((n, h, w, r.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = bytes;
    let bad = |e: std::io::Error| Error::Format(format!("IDX label header: {e}"));
    let magic = r.read_u32::<BE>().map_err(bad)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("IDX label magic {magic:#010x}")));
    }
    let n = r.read_u32::<BE>().map_err(bad)? as usize;
    if r.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload is {} bytes, header says {n}",
            r.len()
        )));
    }
    Ok(r.iter().map(|&l| l as usize).collect())
}

pub fn encode_idx_images(d: &Dataset) -> Vec<u8> {
    let s = d.image_shape();
    let mut out = Vec::with_capacity(16 + d.images.len());
    out.write_u32::<BE>(IDX_IMAGES).unwrap();
    out.write_u32::<BE>(d.len() as u32).unwrap();
    out.write_u32::<BE>(s.h as u32).unwrap();
    out.write_u32::<BE>(s.w as u32).unwrap();
    out.extend(d.images.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + d.len());
    out.write_u32::<BE>(IDX_LABELS).unwrap();
    out.write_u32::<BE>(d.len() as u32).unwrap();
    out.extend(d.labels.iter().map(|&l| l as u8));
    out
}

/// Write train/test splits as MNIST-layout IDX files into `dir`.
pub fn write_idx_dir(dir: impl AsRef<Path>, s: &Splits) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if s.train.image_shape().c != 1 || s.test.image_shape().c != 1 {
        return Err(Error::Unsupported(
            "IDX files hold single-channel images only".into(),
        ));
    }
    for ((imgs, labs), d) in IDX_FILES.iter().zip([&s.train, &s.test]) {
        for (name, bytes) in [(imgs, encode_idx_images(d)), (labs, encode_idx_labels(d))] {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn load_idx_dir(dir: &Path) -> Result<Splits> {
    let mut parts = Vec::new();
    for (imgs, labs) in IDX_FILES {
        let (n, h, w, pixels) = parse_idx_images(&read_file(&dir.join(imgs))?)?;
        let labels = parse_idx_labels(&read_file(&dir.join(labs))?)?;
        if labels.len() != n {
            return Err(Error::Format(format!(
                "{imgs}: {n} images but {} labels",
                labels.len()
            )));
        }
        parts.push((Shape::new(1, h, w), pixels, labels));
    }
    let classes = parts
        .iter()
        .flat_map(|p| p.2.iter())
        .max()
        .map_or(0, |m| m + 1);
    let mut it = parts
        .into_iter()
        .map(|(s, px, l)| Dataset::new(s, classes, px, l));
    Ok(Splits {
        train: it.next().unwrap()?,
        test: it.next().unwrap()?,
    })
}

/// Metadata of the raw tensor directory format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

/// Write splits as `meta.json` plus `{train,test}.images.f32` (little-endian CHW) and
/// `{train,test}.labels.u8`.
pub fn write_raw_dir(dir: impl AsRef<Path>, s: &Splits) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sh = s.train.image_shape();
    let meta = RawMeta {
        channels: sh.c,
        height: sh.h,
        width: sh.w,
        num_classes: s.train.num_classes(),
    };
    let p = dir.join("meta.json");
    fs::write(
        &p,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(&p, e))?;
    for (name, d) in [("train", &s.train), ("test", &s.test)] {
        let mut buf = Vec::with_capacity(d.images.len() * 4);
        for &v in &d.images {
            buf.write_f32::<LE>(v as f32).unwrap();
        }
        let p = dir.join(format!("{name}.images.f32"));
        fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("{name}.labels.u8"));
        let labels: Vec<u8> = d.labels.iter().map(|&l| l as u8).collect();
        fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn load_raw_dir(dir: &Path) -> Result<Splits> {
    let p = dir.join("meta.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: RawMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        what: p.display().to_string(),
        source,
    })?;
    let shape = Shape::new(meta.channels, meta.height, meta.width);
    let mut out = Vec::new();
    for name in ["train", "test"] {
        let bytes = read_file(&dir.join(format!("{name}.images.f32")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format(format!(
                "{name}.images.f32 length is not a multiple of 4"
            )));
        }
        let mut r = bytes.as_slice();
        let mut images = Vec::with_capacity(bytes.len() / 4);
        while !r.is_empty() {
            images.push(r.read_f32::<LE>().expect("length checked") as f64);
        }
        let mut labels = Vec::new();
        fs::File::open(dir.join(format!("{name}.labels.u8")))
            .and_then(|mut f| f.read_to_end(&mut labels))
            .map_err(|e| Error::io(dir.join(format!("{name}.labels.u8")), e))?;
        out.push(Dataset::new(
            shape,
            meta.num_classes,
            images,
            labels.into_iter().map(usize::from).collect(),
        )?);
    }
    let test = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Splits { train, test })
}

/// Load a dataset directory holding either MNIST-layout IDX files or the raw tensor format.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let s = if dir.join("meta.json").exists() {
        load_raw_dir(dir)?
    } else {
        load_idx_dir(dir)?
    };
    if s.train.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    if s.test.is_empty() {
        return Err(Error::EmptyDataset("test split"));
    }
    Ok(s)
}
