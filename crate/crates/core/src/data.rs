//! Datasets, augmentation and batching.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ViewLayout;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    /// `n × D`, every entry in `[0, 1]`.
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        let name = name.into();
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::config(format!("dataset {name} is empty")));
        }
        if y.len() != x.rows() {
            return Err(Error::config(format!(
                "dataset {name}: {} labels for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if let Some((i, &l)) = y.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::config(format!(
                "dataset {name}: label {l} at row {i} outside 0..{classes}"
            )));
        }
        for r in 0..x.rows() {
            if let Some(c) = x.row(r).iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config(format!(
                    "dataset {name}: feature {} at row {r}, column {c} outside [0, 1]",
                    x.get(r, c)
                )));
            }
        }
        Ok(Self {
            name,
            split,
            x,
            y,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for c in 0..self.dim() {
            write!(out, ",f{c}").unwrap();
        }
        out.push('\n');
        for r in 0..self.len() {
            write!(out, "{}", self.y[r]).unwrap();
            for &v in self.x.row(r) {
                out.push(',');
                out.push_str(&format_f64(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Decimal text with at least 17 significant digits, enough for an exact
/// round trip through `str::parse`.
pub fn format_f64(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mut e = v.abs().log10().floor() as i32;
    if 10f64.powi(e) > v.abs() {
        e -= 1;
    }
    let prec = (16 - e).max(0) as usize;
    format!("{v:.prec$}")
}

/// Reads `label,f0,f1,...` rows. The class count is the largest label + 1.
pub fn load_csv_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    parse_csv_dataset(&text, &name, split)
}

pub fn parse_csv_dataset(text: &str, name: &str, split: Split) -> Result<Dataset> {
    let err = |line: u64, msg: String| Error::Data {
        path: name.to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(err(1, "header must be label,f0,f1,...".into()));
    }
    let dim = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(err(line, format!("expected {} fields, got {}", dim + 1, record.len())));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| err(line, format!("label {:?} is not a class index", &record[0])))?;
        labels.push(label);
        for (c, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| err(line, format!("column f{c}: {field:?} is not a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(line, format!("column f{c}: {v} outside [0, 1]")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let x = Matrix::new(labels.len(), dim, data)?;
    Dataset::new(name, split, x, labels, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation around the class center.
    pub spread: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            train_per_class: 200,
            test_per_class: 50,
            spread: 0.1,
        }
    }
}

impl BlobsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes must be >= 2"));
        }
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("data.dim and per-class counts must be >= 1"));
        }
        if self.classes > self.dim && (self.dim >= 63 || self.classes as u64 >= (1u64 << self.dim)) {
            return Err(Error::config(format!(
                "data: cannot place {} distinct centers in {} dimensions",
                self.classes, self.dim
            )));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::config("data.spread must be >= 0"));
        }
        Ok(())
    }
}

const CENTER_LO: f64 = 0.2;
const CENTER_HI: f64 = 0.8;

/// Class centers: scaled simplex vertices `0.2 + 0.6·e_c` when `C ≤ D`,
/// otherwise distinct corners of `[0.2, 0.8]^D`.
pub fn blob_centers(classes: usize, dim: usize) -> Matrix {
    let mut m = Matrix::filled(classes, dim, CENTER_LO);
    for c in 0..classes {
        if classes <= dim {
            m.set(c, c, CENTER_HI);
        } else {
            let code = c + 1;
            for d in 0..dim {
                if code >> d & 1 == 1 {
                    m.set(c, d, CENTER_HI);
                }
            }
        }
    }
    m
}

/// Gaussian blobs around [`blob_centers`], clipped to `[0, 1]`, class-major
/// row order. Train and test splits come from separate seeded streams.
pub fn gen_blobs(cfg: &BlobsConfig, seed: u64, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_per_class,
    };
    let centers = blob_centers(cfg.classes, cfg.dim);
    let mut rng = stream(seed, Stream::Data, &[split as u64]);
    let n = cfg.classes * per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.classes {
        for _ in 0..per_class {
            for &mu in centers.row(c) {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push((mu + cfg.spread * e).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let name = format!("blobs-{}x{}", cfg.classes, cfg.dim);
    Dataset::new(name, split, Matrix::new(n, cfg.dim, data)?, labels, cfg.classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub brightness: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            mask_prob: 0.1,
            brightness: [0.8, 1.2],
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            brightness: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.brightness;
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.mask_prob) || !(0.0 <= lo && lo <= hi) {
            return Err(Error::config(format!("invalid augmentation policy {self:?}")));
        }
        Ok(())
    }
}

/// Brightness scale, additive Gaussian noise, random coordinate masking,
/// then clipping to `[0, 1]`.
pub fn augment(x: &[f64], rng: &mut Rng, policy: &AugmentPolicy) -> Vec<f64> {
    let [lo, hi] = policy.brightness;
    let scale = if lo < hi { rng.random_range(lo..hi) } else { lo };
    x.iter()
        .map(|&v| {
            let mut v = v * scale;
            if policy.noise_sigma > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                v += policy.noise_sigma * e;
            }
            if policy.mask_prob > 0.0 && rng.random::<f64>() < policy.mask_prob {
                v = 0.0;
            }
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Two clean views per instance plus the originals the attack starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub indices: Vec<usize>,
    pub view1: Matrix,
    pub view2: Matrix,
    pub original: Matrix,
    pub labels: Vec<usize>,
    pub layout: ViewLayout,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Both clean views stacked, `2B × D`.
    pub fn clean(&self) -> Matrix {
        Matrix::vstack(&[&self.view1, &self.view2]).expect("same width")
    }

    /// Full `3B × D` input once the adversarial views exist.
    pub fn with_adversarial(&self, adv: &Matrix) -> Result<Matrix> {
        if adv.shape() != self.original.shape() {
            return Err(Error::Shape {
                op: "with_adversarial",
                lhs: adv.shape(),
                rhs: self.original.shape(),
            });
        }
        Matrix::vstack(&[&self.view1, &self.view2, adv])
    }
}

pub fn make_batch(data: &Dataset, indices: &[usize], rng: &mut Rng, policy: &AugmentPolicy) -> Result<ContrastiveBatch> {
    let mut seen = vec![false; data.len()];
    for &i in indices {
        if i >= data.len() {
            return Err(Error::config(format!("batch index {i} out of range for {} rows", data.len())));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::config(format!("duplicate batch index {i}")));
        }
    }
    let layout = ViewLayout::new(indices.len())?;
    let original = data.x.select_rows(indices);
    let mut views = [Vec::new(), Vec::new()];
    for view in &mut views {
        for &i in indices {
            view.extend(augment(data.x.row(i), rng, policy));
        }
    }
    let [v1, v2] = views;
    Ok(ContrastiveBatch {
        indices: indices.to_vec(),
        view1: Matrix::new(indices.len(), data.dim(), v1)?,
        view2: Matrix::new(indices.len(), data.dim(), v2)?,
        original,
        labels: indices.iter().map(|&i| data.y[i]).collect(),
        layout,
    })
}

/// Seeded permutation of `0..n` cut into batches; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, tags: &[u64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Shuffle, tags));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
