//! Image datasets: an in-memory container, a synthetic generator, and the
//! on-disk bundle (`manifest.csv` + `meta.json` + one AGT1 tensor per image).

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use aggrnet_tensor::io::{self as tio, Record};
use aggrnet_tensor::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub class_names: Vec<String>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: impl Into<String>,
    ) -> Result<Self> {
        let d = Self { images, labels, class_names, split: split.into() };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("images must be [N,C,H,W], got {s:?}")));
        }
        if self.labels.is_empty() || self.labels.len() != s[0] {
            return Err(Error::Data(format!("{} labels for {} images", self.labels.len(), s[0])));
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= self.num_classes()) {
            return Err(Error::Data(format!(
                "sample {i} has label {} but there are {} classes",
                self.labels[i],
                self.num_classes()
            )));
        }
        if !self.images.all_finite() {
            return Err(Error::Data("images contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn meta(&self) -> Meta {
        let s = self.image_shape();
        Meta {
            class_names: self.class_names.clone(),
            num_classes: self.num_classes(),
            channels: s[0],
            height: s[1],
            width: s[2],
            split: self.split.clone(),
        }
    }

    /// Gathers samples `indices` into one batch.
    pub fn batch<F: Element>(&self, indices: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
        let per: usize = self.image_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&v| F::lit(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Copies the samples at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Self> {
        let (images, labels) = self.batch::<f32>(indices)?;
        Self::new(images, labels, self.class_names.clone(), split)
    }
}

/// Class-conditional toy images.
///
/// Each class gets its own blob position (on a ring around the centre),
/// colour and stripe frequency. Every sample jitters the blob by up to one
/// pixel; `difficulty` scales additive Gaussian noise and shrinks the class
/// signal.
pub fn generate_synthetic(
    k: usize,
    n_per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {k}")));
    }
    if n_per_class == 0 || h == 0 || w == 0 {
        return Err(Error::Config("synthetic data needs a positive sample count and image size".into()));
    }
    if !(difficulty >= 0.0 && difficulty.is_finite()) {
        return Err(Error::Config(format!("difficulty must be non-negative, got {difficulty}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25 * difficulty.max(f64::MIN_POSITIVE)).expect("positive std");
    let contrast = 1.0 / (1.0 + difficulty);
    let (hf, wf) = (h as f64, w as f64);
    let sigma = 0.15 * hf.min(wf);
    let n = k * n_per_class;
    let mut data = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let angle = std::f64::consts::TAU * c as f64 / k as f64;
        let cy = hf / 2.0 + 0.25 * hf * angle.sin() + rng.gen_range(-1.0..=1.0);
        let cx = wf / 2.0 + 0.25 * wf * angle.cos() + rng.gen_range(-1.0..=1.0);
        let hue = c as f64 / k as f64;
        let color = [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|o| 0.5 + 0.5 * (std::f64::consts::TAU * (hue + o)).cos());
        let freq = (c + 1) as f64 * std::f64::consts::PI / wf;
        for &col in &color {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    let stripes = 0.5 + 0.5 * (freq * x as f64).sin();
                    let mut v = 0.1 + contrast * (0.6 * col * blob + 0.2 * stripes);
                    if difficulty > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(vec![n, 3, h, w], data)?;
    Dataset::new(images, labels, (0..k).map(|c| format!("class{c}")).collect(), "synthetic")
}

fn image_file(i: usize) -> String {
    format!("images/{i:06}.agt")
}

/// Writes `dir/manifest.csv`, `dir/meta.json` and `dir/images/*.agt`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(Error::io(&img_dir))?;
    let per: usize = ds.image_shape().iter().product();
    let mut manifest = String::from("# relative_path,label_index\n");
    for (i, &label) in ds.labels.iter().enumerate() {
        let rel = image_file(i);
        let t = Tensor::new(ds.image_shape().to_vec(), ds.images.data()[i * per..(i + 1) * per].to_vec())?;
        let path = dir.join(&rel);
        fs::write(&path, tio::encode(&t)?).map_err(Error::io(&path))?;
        manifest.push_str(&format!("{rel},{label}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(Error::io(&path))?;
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&ds.meta())?).map_err(Error::io(&path))?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if meta.num_classes != meta.class_names.len() || meta.num_classes < 2 {
        return Err(Error::Data(format!(
            "{}: num_classes {} does not match {} class names",
            path.display(),
            meta.num_classes,
            meta.class_names.len()
        )));
    }
    Ok(meta)
}

/// Reads a bundle written by [`save_dataset`] (or by hand).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    let meta = load_meta(dir)?;
    load_manifest(&dir.join(MANIFEST_FILE), &meta)
}

/// Parses `relative_path,label_index` rows (blank lines and `#` comments are
/// skipped); paths are relative to the manifest's directory.
pub fn load_manifest(path: &Path, meta: &Meta) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let shape = [meta.channels, meta.height, meta.width];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        // The reader's line numbers skip comments, so count entries instead.
        let bad = |msg: String| Error::Data(format!("{} entry {}: {msg}", path.display(), i + 1));
        if record.len() != 2 {
            return Err(bad(format!("expected `path,label`, got {} fields", record.len())));
        }
        let label: usize = record[1].parse().map_err(|_| bad(format!("label {:?} is not an integer", &record[1])))?;
        if label >= meta.num_classes {
            return Err(bad(format!("label {label} is out of range for {} classes", meta.num_classes)));
        }
        let file: PathBuf = base.join(&record[0]);
        let f = fs::File::open(&file).map_err(|e| bad(format!("cannot open {}: {e}", file.display())))?;
        let rec = tio::read_record(&mut BufReader::new(f)).map_err(|e| bad(format!("{}: {e}", file.display())))?;
        let t: Tensor<f32> = match rec {
            Record::F32(t) => t,
            Record::F64(t) => t.cast(),
            Record::I64 { .. } => return Err(bad(format!("{} holds integers, not an image", file.display()))),
        };
        if t.shape() != shape {
            return Err(bad(format!("image shape {:?} differs from {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", path.display())));
    }
    let images = Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)?;
    Dataset::new(images, labels, meta.class_names.clone(), meta.split.clone())
}

/// Splits off `holdout` samples per class (the last ones of each class)
/// into a second dataset.
pub fn holdout_split(ds: &Dataset, holdout_per_class: usize) -> Result<(Dataset, Dataset)> {
    let k = ds.num_classes();
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in &by_class {
        let cut = idx.len().saturating_sub(holdout_per_class);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "cannot hold out {holdout_per_class} samples per class from {} samples",
            ds.len()
        )));
    }
    Ok((ds.subset(&train, "train")?, ds.subset(&test, "test")?))
}
