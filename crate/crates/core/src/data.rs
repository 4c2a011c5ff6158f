//! Dataset ingestion, preprocessing recipes, augmentation and batching.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use image::imageops::{self, FilterType};
use image::{ImageReader, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{normalize, sample_mask, CompletionBatch, ImageTensor, MaskSpec};
use crate::scalar::Scalar;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// Random 160x160 crop (scaled with the target size), resized to the target.
    Celeba,
    /// Resize so the short side equals the target, then crop a square.
    Streetview,
    /// Same as streetview; meant for small synthetic sets.
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub recipe: Recipe,
    /// Newline-delimited paths relative to `root`.
    pub train_list: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
    pub target_size: usize,
    pub seed: u64,
    pub flip_prob: f64,
    /// Largest translation, in pixels, of the shift augmentation.
    pub max_shift: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            recipe: Recipe::Generic,
            train_list: None,
            test_list: None,
            target_size: 128,
            seed: 0,
            flip_prob: 0.5,
            max_shift: 8,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("dataset.target_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("dataset.flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.max_shift >= self.target_size {
            return Err(Error::Config(format!(
                "dataset.max_shift {} must be below target_size {}",
                self.max_shift, self.target_size
            )));
        }
        Ok(())
    }

    pub fn augment(&self) -> Augment {
        Augment { flip_prob: self.flip_prob, max_shift: self.max_shift }
    }

    /// Smallest source image the recipe accepts.
    pub fn min_source_size(&self) -> usize {
        match self.recipe {
            Recipe::Celeba => celeba_crop(self.target_size),
            Recipe::Streetview | Recipe::Generic => 1,
        }
    }
}

fn celeba_crop(target: usize) -> usize {
    target * 5 / 4
}

#[derive(Debug, Clone)]
enum Source {
    File(PathBuf),
    Memory(RgbImage),
}

/// An ordered collection of source images with a preprocessing recipe.
#[derive(Debug, Clone)]
pub struct Dataset {
    ids: Vec<String>,
    sources: Vec<Source>,
    recipe: Recipe,
    target_size: usize,
}

/// Reject split lists that share an entry.
pub fn validate_splits(train: &[String], test: &[String]) -> Result<()> {
    let train_set: HashSet<&str> = train.iter().map(String::as_str).collect();
    let shared: Vec<&str> = test.iter().map(String::as_str).filter(|t| train_set.contains(t)).collect();
    if !shared.is_empty() {
        let shown: Vec<&str> = shared.iter().take(5).copied().collect();
        return Err(Error::Validation(format!(
            "train and test splits overlap in {} file(s), e.g. {}",
            shared.len(),
            shown.join(", ")
        )));
    }
    Ok(())
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn list_images(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::Load { path: root.to_path_buf(), reason: e.to_string() })? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if entry.file_type()?.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Open one split of a dataset. Missing list files default to every image in
/// `root` not claimed by the other split. Every file's header is checked up
/// front; all failures are reported together.
pub fn ingest_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let train = spec.train_list.as_deref().map(read_list).transpose()?;
    let test = spec.test_list.as_deref().map(read_list).transpose()?;
    if let (Some(a), Some(b)) = (&train, &test) {
        validate_splits(a, b)?;
    }
    let (mine, other) = match split {
        Split::Train => (train, test),
        Split::Test => (test, train),
    };
    let names = match mine {
        Some(list) => list,
        None => {
            let exclude: HashSet<String> = other.unwrap_or_default().into_iter().collect();
            list_images(&spec.root)?.into_iter().filter(|n| !exclude.contains(n)).collect()
        }
    };
    let min = spec.min_source_size() as u32;
    let mut bad = Vec::new();
    let mut sources = Vec::with_capacity(names.len());
    for name in &names {
        let path = spec.root.join(name);
        let dims = ImageReader::open(&path)
            .ok()
            .and_then(|r| r.with_guessed_format().ok())
            .and_then(|r| r.into_dimensions().ok());
        match dims {
            Some((w, h)) if w >= min && h >= min => sources.push(Source::File(path)),
            _ => bad.push(path),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Ingestion {
            paths: bad,
            reason: format!("unreadable, undecodable or smaller than {min}x{min}"),
        });
    }
    Ok(Dataset { ids: names, sources, recipe: spec.recipe, target_size: spec.target_size })
}

impl Dataset {
    /// In-memory dataset, e.g. of procedural textures.
    pub fn from_images(items: Vec<(String, RgbImage)>, recipe: Recipe, target_size: usize) -> Self {
        let (ids, sources) = items.into_iter().map(|(id, img)| (id, Source::Memory(img))).unzip();
        Self { ids, sources, recipe, target_size }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn load_raw(&self, index: usize) -> Result<RgbImage> {
        match &self.sources[index] {
            Source::Memory(img) => Ok(img.clone()),
            Source::File(path) => Ok(image::open(path)
                .map_err(|e| Error::Ingestion { paths: vec![path.clone()], reason: e.to_string() })?
                .to_rgb8()),
        }
    }

    /// Preprocessed signed image; random crop with `Some(rng)`, center crop otherwise.
    pub fn preprocessed<T: Scalar, R: Rng + ?Sized>(&self, index: usize, rng: Option<&mut R>) -> Result<ImageTensor<T>> {
        preprocess(self.recipe, &self.load_raw(index)?, self.target_size, rng)
    }
}

fn crop_origin<R: Rng + ?Sized>(slack_x: u32, slack_y: u32, rng: Option<&mut R>) -> (u32, u32) {
    match rng {
        Some(r) => (r.random_range(0..=slack_x), r.random_range(0..=slack_y)),
        None => (slack_x / 2, slack_y / 2),
    }
}

fn to_signed<T: Scalar>(img: &RgbImage) -> Result<ImageTensor<T>> {
    normalize(&ImageTensor::from_rgb8(img))
}

/// Apply a recipe to a raw image. `rng` selects random crops; `None` takes
/// the center crop used at test time.
pub fn preprocess<T: Scalar, R: Rng + ?Sized>(recipe: Recipe, img: &RgbImage, target: usize, rng: Option<&mut R>) -> Result<ImageTensor<T>> {
    let (w, h) = img.dimensions();
    let t = target as u32;
    match recipe {
        Recipe::Celeba => {
            let c = celeba_crop(target) as u32;
            if w < c || h < c {
                return Err(Error::Preprocess(format!("celeba recipe needs at least {c}x{c}, got {w}x{h}")));
            }
            let (x, y) = crop_origin(w - c, h - c, rng);
            let crop = imageops::crop_imm(img, x, y, c, c).to_image();
            to_signed(&imageops::resize(&crop, t, t, FilterType::Triangle))
        }
        Recipe::Streetview | Recipe::Generic => {
            let short = w.min(h) as f64;
            let (nw, nh) = (
                ((w as f64 * t as f64 / short).round() as u32).max(t),
                ((h as f64 * t as f64 / short).round() as u32).max(t),
            );
            let resized = if (nw, nh) == (w, h) { img.clone() } else { imageops::resize(img, nw, nh, FilterType::Triangle) };
            let (x, y) = crop_origin(nw - t, nh - t, rng);
            to_signed(&imageops::crop_imm(&resized, x, y, t, t).to_image())
        }
    }
}

pub fn preprocess_celeba<T: Scalar, R: Rng + ?Sized>(img: &RgbImage, rng: &mut R) -> Result<ImageTensor<T>> {
    preprocess(Recipe::Celeba, img, 128, Some(rng))
}

pub fn preprocess_streetview<T: Scalar, R: Rng + ?Sized>(img: &RgbImage, rng: &mut R) -> Result<ImageTensor<T>> {
    preprocess(Recipe::Streetview, img, 128, Some(rng))
}

/// Training-time augmentation: horizontal flip and a small translation with
/// reflected borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip_prob: f64,
    pub max_shift: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { flip_prob: 0.0, max_shift: 0 };

    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, img: &ImageTensor<T>, rng: &mut R) -> Result<ImageTensor<T>> {
        let flip = self.flip_prob > 0.0 && rng.random::<f64>() < self.flip_prob;
        let s = self.max_shift as i64;
        let (dy, dx) = if s > 0 { (rng.random_range(-s..=s), rng.random_range(-s..=s)) } else { (0, 0) };
        if !flip && dx == 0 && dy == 0 {
            return Ok(img.clone());
        }
        let (c, h, w) = (img.channels(), img.height(), img.width());
        let src = img.values();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            for y in 0..h {
                let sy = reflect(y as i64 - dy, h);
                for x in 0..w {
                    let xf = if flip { w - 1 - x } else { x };
                    let sx = reflect(xf as i64 - dx, w);
                    out.push(src[(ch * h + sy) * w + sx]);
                }
            }
        }
        ImageTensor::new(h, w, c, out, img.range())
    }
}

/// Mirror an index into `0..n` without repeating the edge pixel.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Epoch-based index order with optional reshuffling and wrap-around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
    pub shuffle: bool,
    pub repeat: bool,
}

impl Sampler {
    pub fn new<R: Rng + ?Sized>(len: usize, shuffle: bool, repeat: bool, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        if shuffle {
            order.shuffle(rng);
        }
        Self { order, cursor: 0, epoch: 0, shuffle, repeat }
    }

    /// Up to `n` indices. Without repeat, a short final batch is returned
    /// and then [`Error::EndOfData`].
    pub fn next_indices<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.order.is_empty() {
            return Err(Error::EndOfData);
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                if !self.repeat {
                    break;
                }
                self.cursor = 0;
                self.epoch += 1;
                if self.shuffle {
                    self.order.shuffle(rng);
                }
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        if out.is_empty() {
            return Err(Error::EndOfData);
        }
        Ok(out)
    }
}

/// Draw one training batch: random crop, augmentation and a fresh square
/// mask per sample.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset,
    sampler: &mut Sampler,
    batch_size: usize,
    mask_spec: &MaskSpec,
    augment: &Augment,
    rng: &mut R,
) -> Result<CompletionBatch<T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let size = dataset.target_size;
    mask_spec.validate(size, size)?;
    let indices = sampler.next_indices(batch_size, rng)?;
    let mut items = Vec::with_capacity(indices.len());
    for i in indices {
        let img = dataset.preprocessed::<T, R>(i, Some(&mut *rng))?;
        let img = augment.apply(&img, rng)?;
        let mask = sample_mask(mask_spec, size, size, rng)?;
        items.push((img, mask, dataset.id(i).to_string()));
    }
    CompletionBatch::from_samples(&items)
}

/// Background batch producer feeding a bounded queue. Batches are produced
/// from the given sampler and seed, but the generator state lives on the
/// worker thread, so runs using it are not checkpoint-resumable bit for bit.
pub struct Prefetcher<T: Scalar> {
    rx: Receiver<Result<CompletionBatch<T>>>,
    handle: Option<JoinHandle<()>>,
}

impl<T: Scalar> Prefetcher<T> {
    pub fn spawn(
        dataset: Arc<Dataset>,
        mut sampler: Sampler,
        seed: u64,
        batch_size: usize,
        mask_spec: MaskSpec,
        augment: Augment,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let batch = make_batch(&dataset, &mut sampler, batch_size, &mask_spec, &augment, &mut rng);
                let done = batch.is_err();
                if tx.send(batch).is_err() || done {
                    break;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }

    pub fn next_batch(&self) -> Result<CompletionBatch<T>> {
        self.rx.recv().unwrap_or(Err(Error::EndOfData))
    }
}

impl<T: Scalar> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        // Unblock the worker before joining it.
        let (_, dead) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Smooth procedural textures: two coloured sinusoidal gratings per image.
pub fn synthetic_textures(count: usize, size: usize, seed: u64) -> Vec<(String, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut waves = Vec::new();
            for _ in 0..2 {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let period = rng.random_range(6.0..18.0);
                let k = 2.0 * std::f64::consts::PI / period;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-60.0..60.0));
                waves.push((k * theta.cos(), k * theta.sin(), phase, amp));
            }
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..185.0));
            let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
                let mut px = base;
                for &(kx, ky, phase, amp) in &waves {
                    let s = (kx * x as f64 + ky * y as f64 + phase).sin();
                    for c in 0..3 {
                        px[c] += amp[c] * s;
                    }
                }
                Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
            });
            (format!("texture_{i:04}.png"), img)
        })
        .collect()
}

/// Write textures as PNGs under `dir` plus `train.txt` / `test.txt` lists
/// holding the first `train` and remaining names.
pub fn write_texture_dataset(dir: &Path, count: usize, train: usize, size: usize, seed: u64) -> Result<DatasetSpec> {
    fs::create_dir_all(dir)?;
    let textures = synthetic_textures(count, size, seed);
    for (name, img) in &textures {
        img.save_with_format(dir.join(name), image::ImageFormat::Png)?;
    }
    let names: Vec<&str> = textures.iter().map(|(n, _)| n.as_str()).collect();
    let split = train.min(count);
    fs::write(dir.join("train.txt"), names[..split].join("\n"))?;
    fs::write(dir.join("test.txt"), names[split..].join("\n"))?;
    Ok(DatasetSpec {
        root: dir.to_path_buf(),
        recipe: Recipe::Generic,
        train_list: Some(dir.join("train.txt")),
        test_list: Some(dir.join("test.txt")),
        target_size: size,
        ..Default::default()
    })
}

/// Signed test image with the deterministic center crop.
pub fn test_image<T: Scalar>(dataset: &Dataset, index: usize) -> Result<ImageTensor<T>> {
    dataset.preprocessed::<T, ChaCha8Rng>(index, None)
}
