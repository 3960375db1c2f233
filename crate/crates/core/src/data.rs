//! Dataset ingestion: class-per-directory image folders, CIFAR binary
//! batches and a procedural synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{0}: class directory has no images")]
    EmptyClass(PathBuf),
    #[error("{0}: no class directories found")]
    NoClasses(PathBuf),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("synthetic spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Eval,
}

/// Images with ground-truth labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// All images resized to `size x size`.
    pub fn resized(&self, size: usize) -> Vec<Image> {
        self.images.iter().map(|i| i.resize(size, size)).collect()
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        out.push(entry.map_err(|e| io_err(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` files. Classes are numbered by sorted
/// directory name, images are visited in sorted path order, and every image
/// is resized to `resolution x resolution`.
pub fn load_image_folder(root: &Path, resolution: usize) -> Result<LabeledImageSet, DataError> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir.clone()));
        }
        for path in files {
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let decoded = image::load_from_memory(&bytes).map_err(|e| DataError::Decode {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let rgb = decoded.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
            let img = Image::new(w, h, data).expect("decoder returns w*h*3 bytes");
            images.push(img.resize(resolution, resolution));
            labels.push(label);
        }
    }
    Ok(LabeledImageSet {
        images,
        labels,
        classes: classes.len(),
        split: Split::Eval,
    })
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarVariant {
    #[default]
    /// one label byte, 10 classes
    Cifar10,
    /// coarse + fine label bytes; use the 20 coarse superclasses
    Cifar100Coarse,
    /// coarse + fine label bytes; use the 100 fine classes
    Cifar100Fine,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            _ => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100Coarse => 20,
            Self::Cifar100Fine => 100,
        }
    }
}

/// One raw record: label bytes as stored, pixels channel-planar (1024 red,
/// 1024 green, 1024 blue, each row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn label(&self, variant: CifarVariant) -> usize {
        match variant {
            CifarVariant::Cifar10 | CifarVariant::Cifar100Coarse => self.labels[0] as usize,
            CifarVariant::Cifar100Fine => self.labels[1] as usize,
        }
    }

    pub fn to_image(&self) -> Image {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let data = (0..plane)
            .flat_map(|i| (0..3).map(move |ch| (ch, i)))
            .map(|(ch, i)| self.pixels[ch * plane + i] as f32 / 255.0)
            .collect();
        Image::new(CIFAR_SIDE, CIFAR_SIDE, data).expect("fixed size")
    }
}

/// Parses a CIFAR binary batch bit-exactly.
pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<Vec<CifarRecord>, DataError> {
    let len = variant.record_len();
    let mut out = Vec::with_capacity(bytes.len() / len);
    for (i, rec) in bytes.chunks(len).enumerate() {
        let offset = i * len;
        if rec.len() != len {
            return Err(DataError::Format {
                offset,
                message: format!("truncated record: {} of {len} bytes", rec.len()),
            });
        }
        let (labels, pixels) = rec.split_at(variant.label_bytes());
        if variant == CifarVariant::Cifar10 {
            if labels[0] as usize >= 10 {
                return Err(DataError::Format {
                    offset,
                    message: format!("label {} out of range for 10 classes", labels[0]),
                });
            }
        } else {
            if labels[0] >= 20 {
                return Err(DataError::Format {
                    offset,
                    message: format!("coarse label {} out of range for 20 classes", labels[0]),
                });
            }
            if labels[1] >= 100 {
                return Err(DataError::Format {
                    offset: offset + 1,
                    message: format!("fine label {} out of range for 100 classes", labels[1]),
                });
            }
        }
        out.push(CifarRecord {
            labels: labels.to_vec(),
            pixels: pixels.to_vec(),
        });
    }
    Ok(out)
}

pub fn encode_cifar_records(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&r.labels);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<LabeledImageSet, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let records = parse_cifar_records(&bytes, variant)?;
    Ok(LabeledImageSet {
        labels: records.iter().map(|r| r.label(variant)).collect(),
        images: records.iter().map(CifarRecord::to_image).collect(),
        classes: variant.classes(),
        split: Split::Eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Rings,
    Solid,
}

/// Look of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    /// hue in `[0, 1)`
    pub hue: f64,
    /// HSV value of the bright phase
    pub value: f64,
    pub pattern: Pattern,
    /// pattern period in pixels
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub resolution: usize,
    /// per-pixel noise amplitude in `[0, 1)`
    pub noise: f64,
    pub seed: u64,
    /// explicit class looks; generated from the class index when empty
    pub styles: Vec<ClassStyle>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            per_cluster: 150,
            resolution: 16,
            noise: 0.1,
            seed: 0,
            styles: Vec::new(),
        }
    }
}

const PATTERNS: [Pattern; 4] = [
    Pattern::HorizontalStripes,
    Pattern::VerticalStripes,
    Pattern::Checker,
    Pattern::Rings,
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.clusters < 2 {
            return bad(format!("clusters must be >= 2, got {}", self.clusters));
        }
        if self.per_cluster == 0 || self.resolution == 0 {
            return bad("per_cluster and resolution must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 1), got {}", self.noise));
        }
        if !self.styles.is_empty() && self.styles.len() != self.clusters {
            return bad(format!("{} styles given for {} clusters", self.styles.len(), self.clusters));
        }
        for s in &self.styles {
            if !(0.0..=1.0).contains(&s.value) || !(s.period > 0.0) || !s.hue.is_finite() {
                return bad(format!("invalid class style {s:?}"));
            }
        }
        Ok(())
    }

    /// Style of class `k`: evenly spaced hues, alternating bright and dark
    /// classes (so grayscale views stay apart) and a distinct pattern.
    pub fn style(&self, k: usize) -> ClassStyle {
        if let Some(s) = self.styles.get(k) {
            return s.clone();
        }
        let c = self.clusters;
        ClassStyle {
            hue: k as f64 / c as f64,
            value: if k % 2 == 0 { 1.0 } else { 0.2 },
            pattern: PATTERNS[k % PATTERNS.len()],
            period: 4.0 + (k / PATTERNS.len()) as f64 * 2.0,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const SATURATION: f64 = 0.7;
/// value of the dark pattern phase relative to the bright one
const PATTERN_DEPTH: f64 = 0.7;

fn render(style: &ClassStyle, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let phase_x = rng.random_range(0.0..style.period);
    let phase_y = rng.random_range(0.0..style.period);
    let hue = style.hue + rng.random_range(-0.02..0.02);
    let bright = hsv(hue, SATURATION, style.value);
    let dark = hsv(hue, SATURATION, style.value * PATTERN_DEPTH);
    let tau = std::f64::consts::TAU;
    let centre = size as f64 / 2.0;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + phase_x, y as f64 + phase_y);
            let wave = match style.pattern {
                Pattern::HorizontalStripes => (tau * fy / style.period).sin(),
                Pattern::VerticalStripes => (tau * fx / style.period).sin(),
                Pattern::Checker => (tau * fx / style.period).sin() * (tau * fy / style.period).sin(),
                Pattern::Rings => {
                    let r = ((x as f64 - centre).powi(2) + (y as f64 - centre).powi(2)).sqrt();
                    (tau * (r + phase_x) / style.period).sin()
                }
                Pattern::Solid => 1.0,
            };
            let mix = 0.5 + 0.5 * wave;
            for ch in 0..3 {
                let v = dark[ch] + (bright[ch] - dark[ch]) * mix + noise * rng.random_range(-1.0..1.0);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(size, size, data).expect("size * size * 3 values")
}

/// Deterministic balanced synthetic set, class-major order.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledImageSet, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.clusters * spec.per_cluster);
    let mut labels = Vec::with_capacity(images.capacity());
    for k in 0..spec.clusters {
        let style = spec.style(k);
        for _ in 0..spec.per_cluster {
            images.push(render(&style, spec.resolution, spec.noise, &mut rng));
            labels.push(k);
        }
    }
    Ok(LabeledImageSet {
        images,
        labels,
        classes: spec.clusters,
        split: Split::Eval,
    })
}
