//! Dataset manifests and the synthetic lesion generator.
//!
//! A manifest is a UTF-8 file with one JSON object per line:
//! `{"image":"a.png","mask":null,"label":"nevus","split":"val"}`.
//! Relative paths resolve against the manifest's directory.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, RgbImage};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Melanoma = 0,
    Nevus = 1,
    SeborrheicKeratosis = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Melanoma, Label::Nevus, Label::SeborrheicKeratosis];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        crate::recnet::CLASS_NAMES[self.index()]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub image: String,
    pub mask: Option<String>,
    pub label: Option<Label>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    records: Vec<DatasetRecord>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<DatasetRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self { records, base_dir: base_dir.into() }
    }

    /// Parses manifest text; blank lines are ignored.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| Error::Manifest { line: i + 1, msg: e.to_string() })?;
            records.push(rec);
        }
        Ok(Self::new(records, base_dir))
    }

    /// Image and mask files are not checked here.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialize") + "\n")
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Labeled records per class in `split`.
    pub fn class_counts(&self, split: Split) -> [usize; 3] {
        let mut c = [0; 3];
        for l in self.records.iter().filter(|r| r.split == split).filter_map(|r| r.label) {
            c[l.index()] += 1;
        }
        c
    }

    /// Errors (with the 1-based record position) if a `split` record has no mask.
    pub fn require_masks(&self, split: Split) -> Result<()> {
        match self.records.iter().position(|r| r.split == split && r.mask.is_none()) {
            Some(i) => Err(Error::Manifest {
                line: i + 1,
                msg: format!("{split} record {} has no mask", self.records[i].image),
            }),
            None => Ok(()),
        }
    }

    /// Errors if a `split` record has no label.
    pub fn require_labels(&self, split: Split) -> Result<()> {
        match self.records.iter().position(|r| r.split == split && r.label.is_none()) {
            Some(i) => Err(Error::Manifest {
                line: i + 1,
                msg: format!("{split} record {} has no label", self.records[i].image),
            }),
            None => Ok(()),
        }
    }

    pub fn load_image(&self, rec: &DatasetRecord) -> Result<RgbImage> {
        imaging::load_image(self.resolve(&rec.image))
    }

    /// Mask of `rec`, `None` if the record carries none.
    pub fn load_mask(&self, rec: &DatasetRecord) -> Result<Option<BinaryMask>> {
        rec.mask.as_deref().map(|m| load_mask(self.resolve(m))).transpose()
    }

    /// Inverse-frequency weights over the train split, see [`class_weights_from_counts`].
    pub fn class_weights(&self) -> Result<[f64; 3]> {
        class_weights_from_counts(self.class_counts(Split::Train))
    }
}

/// Reads a mask image; gray values ≥ 128 are lesion.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(imaging::binarize_mask(&imaging::load_gray(path)?, 128))
}

/// `w_k = T / (3·n_k)`. Each class then carries total weight `T/3`, so the
/// per-sample mean weight is 1 (the per-class mean is 1 only for equal counts).
pub fn class_weights_from_counts(counts: [usize; 3]) -> Result<[f64; 3]> {
    let total: usize = counts.iter().sum();
    let mut w = [0.0; 3];
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("class {} has no training records", Label::ALL[k])));
        }
        w[k] = total as f64 / (3.0 * n as f64);
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Class proportions of the reference training split (374 / 1372 / 254).
pub const DEFAULT_CLASS_MIX: [f64; 3] = [374.0, 1372.0, 254.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    /// Relative class weights; need not sum to 1.
    pub class_mix: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 0, train: 200, val: 40, test: 0, size: crate::INPUT_SIZE, class_mix: DEFAULT_CLASS_MIX }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("synthetic image size must be ≥ 16, got {}", self.size)));
        }
        if self.class_mix.iter().any(|&m| m < 0.0 || !m.is_finite()) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid class mix {:?}", self.class_mix)));
        }
        Ok(())
    }
}

/// Splits `n` into per-class counts proportional to `mix` by largest remainder;
/// remainder ties go to the lower class index.
pub fn class_allocation(n: usize, mix: [f64; 3]) -> [usize; 3] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|m| n as f64 * m / total).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(n - assigned) {
        counts[k] += 1;
    }
    counts
}

/// Geometry of one synthetic lesion: a rotated ellipse whose radius is
/// modulated by a few low-frequency harmonics. The mask is the set of pixel
/// centers inside the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionShape {
    pub cy: f64,
    pub cx: f64,
    pub semi_y: f64,
    pub semi_x: f64,
    pub angle: f64,
    /// `(amplitude, frequency, phase)`; empty for a smooth border.
    pub harmonics: Vec<(f64, u32, f64)>,
}

impl LesionShape {
    /// Normalized radius at `(y, x)`; the lesion is where this is ≤ 1.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.semi_x;
        let v = (-s * dx + c * dy) / self.semi_y;
        let theta = v.atan2(u);
        let scale = 1.0 + self.harmonics.iter().map(|&(a, f, p)| a * (f as f64 * theta + p).sin()).sum::<f64>();
        (u * u + v * v).sqrt() / scale
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.radius(y as f64 + 0.5, x as f64 + 0.5) <= 1.0
    }

    pub fn render(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| self.contains(y, x))
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub label: Label,
    pub shape: LesionShape,
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| c + rng.gen_range(-amount..=amount))
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn sample_shape(rng: &mut ChaCha8Rng, label: Label, size: usize) -> LesionShape {
    let s = size as f64 / 150.0;
    let harmonics = match label {
        Label::Melanoma => (0..3)
            .map(|_| (rng.gen_range(0.04..0.09), rng.gen_range(3..=7), rng.gen_range(0.0..2.0 * PI)))
            .collect(),
        _ => Vec::new(),
    };
    LesionShape {
        cy: rng.gen_range(55.0..=95.0) * s,
        cx: rng.gen_range(55.0..=95.0) * s,
        semi_y: rng.gen_range(24.0..=45.0) * s,
        semi_x: rng.gen_range(24.0..=45.0) * s,
        angle: rng.gen_range(0.0..PI),
        harmonics,
    }
}

/// Deterministic sample for `(seed, index)`.
pub fn synth_sample(seed: u64, index: u64, label: Label, size: usize) -> SynthSample {
    let mut rng = rng::stream(seed, 0x5e7_0000_0000 + index);
    let area = (size * size) as f64;
    let (shape, mask) = loop {
        let shape = sample_shape(&mut rng, label, size);
        let mask = shape.render(size, size);
        let frac = mask.count() as f64 / area;
        let inside = mask.bounding_box().is_some_and(|b| b.top > 0 && b.left > 0 && b.bottom < size && b.right < size);
        if (0.05..=0.40).contains(&frac) && inside && imaging::largest_component(&mask) == mask {
            break (shape, mask);
        }
    };

    // Skin background with a slow two-wave shading field.
    let skin = jitter(&mut rng, [224.0, 178.0, 150.0], 10.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let a = rng.gen_range(0.0..2.0 * PI);
            let f = rng.gen_range(0.5..1.5) * 2.0 * PI / size as f64;
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(4.0..9.0))
        })
        .collect();
    let (lesion, speckle_p) = match label {
        Label::Melanoma => (jitter(&mut rng, [62.0, 38.0, 34.0], 8.0), 0.0),
        Label::Nevus => (jitter(&mut rng, [146.0, 94.0, 62.0], 8.0), 0.0),
        Label::SeborrheicKeratosis => (jitter(&mut rng, [206.0, 156.0, 72.0], 8.0), 0.18),
    };
    let speckle = [118.0, 84.0, 52.0];

    let mut image = RgbImage::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let shade: f64 =
                waves.iter().map(|&(fy, fx, p, amp)| amp * (fy * y as f64 + fx * x as f64 + p).sin()).sum();
            let noise = rng.gen_range(-3.0..=3.0);
            let px = if mask.get(y, x) {
                let base = if speckle_p > 0.0 && rng.gen_bool(speckle_p) { speckle } else { lesion };
                // Melanoma gets an uneven, blotchy interior.
                let blotch = if label == Label::Melanoma { 10.0 * shape.radius(y as f64, x as f64) } else { 0.0 };
                base.map(|c| to_u8(c + blotch + 0.5 * shade + noise))
            } else {
                skin.map(|c| to_u8(c + shade + noise))
            };
            image.set(y, x, px);
        }
    }
    SynthSample { image, mask, label, shape }
}

/// Labels for one split: class counts by [`class_allocation`], order shuffled
/// from `(seed, split)`.
fn split_labels(spec: &SynthSpec, split: Split, n: usize) -> Vec<Label> {
    let counts = class_allocation(n, spec.class_mix);
    let mut labels: Vec<Label> = Label::ALL.iter().zip(counts).flat_map(|(&l, c)| std::iter::repeat_n(l, c)).collect();
    labels.shuffle(&mut rng::stream(spec.seed, 0x5e7_5000 + split as u64));
    labels
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out_dir` and returns
/// the manifest. Output bytes depend only on `spec`.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
    }
    let mut records = Vec::new();
    let mut index = 0u64;
    for (split, n) in [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)] {
        for (i, label) in split_labels(spec, split, n).into_iter().enumerate() {
            let sample = synth_sample(spec.seed, index, label, spec.size);
            index += 1;
            let image = format!("images/{split}_{i:04}.png");
            let mask = format!("masks/{split}_{i:04}.png");
            let write = |rel: &str, bytes: Vec<u8>| {
                let p = out.join(rel);
                std::fs::write(&p, bytes).map_err(|e| Error::file(&p, e))
            };
            write(&image, imaging::encode_rgb_png(&sample.image))?;
            write(&mask, imaging::encode_mask_png(&sample.mask))?;
            records.push(DatasetRecord { image, mask: Some(mask), label: Some(label), split });
        }
    }
    let manifest = Manifest::new(records, out);
    manifest.save(out.join("manifest.jsonl"))?;
    Ok(manifest)
}
