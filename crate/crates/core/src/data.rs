//! Per-domain image sets: folder loading, synthetic generators, the
//! train/test split, batch sampling and pixel normalization.
//!
//! On disk a dataset is `root/<domain name>/*.png|jpg`, one subdirectory per
//! domain of the sequence, optionally with a `manifest.json` at the root.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::model::ImageBatch;
use crate::rng::{self, Rng};
use crate::seq::{SequenceSpec, StepIndex};
use crate::tensor::{Float, Tensor};

/// Percentage of files assigned to the test split.
pub const TEST_PERCENT: u64 = 5;

/// Crop augmentation first upsamples by this factor.
pub const LOAD_SCALE: f64 = 1.125;

pub fn normalize<T: Float>(v: u8) -> T {
    T::lit(f64::from(v) / 127.5 - 1.0)
}

pub fn denormalize<T: Float>(v: T) -> u8 {
    let x = (v.to_f64().unwrap_or(0.0) + 1.0) * 127.5;
    x.round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic split assignment from a hash of the file name.
pub fn split_of(file_name: &str) -> Split {
    let digest = Sha256::digest(file_name.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    if v % 100 < TEST_PERCENT {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub file: String,
    pub image: RgbImage,
}

/// Images of one domain, all at `resolution x resolution`.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub name: String,
    pub domain: StepIndex,
    pub resolution: usize,
    /// Horizontal flips would move images to another domain.
    pub orientation_sensitive: bool,
    samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        domain: StepIndex,
        resolution: usize,
        orientation_sensitive: bool,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let r = resolution as u32;
        if let Some(bad) = samples.iter().find(|s| s.image.dimensions() != (r, r)) {
            return Err(Error::Data(format!(
                "{} is {:?}, expected {r}x{r}",
                bad.file,
                bad.image.dimensions()
            )));
        }
        Ok(Self {
            name: name.into(),
            domain,
            resolution,
            orientation_sensitive,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self, which: Split) -> DomainDataset {
        DomainDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| split_of(&s.file) == which)
                .cloned()
                .collect(),
            ..self.clone_meta()
        }
    }

    /// First `k` samples (for quick runs).
    pub fn truncated(&self, k: usize) -> DomainDataset {
        DomainDataset {
            samples: self.samples.iter().take(k).cloned().collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> DomainDataset {
        DomainDataset {
            name: self.name.clone(),
            domain: self.domain,
            resolution: self.resolution,
            orientation_sensitive: self.orientation_sensitive,
            samples: Vec::new(),
        }
    }

    /// Unaugmented batch of the given samples.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> Result<ImageBatch<T>> {
        let imgs = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .map(|s| &s.image)
                    .ok_or_else(|| Error::Data(format!("index {i} out of range for domain {:?} ({} images)", self.name, self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        images_to_batch(&imgs)
    }

    /// All samples in order, in batches of at most `size`.
    pub fn batches<T: Float>(&self, size: usize) -> impl Iterator<Item = Result<ImageBatch<T>>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Hex SHA-256 over domain names, file names and pixels, in order.
pub fn fingerprint(datasets: &[DomainDataset]) -> String {
    let mut h = Sha256::new();
    for d in datasets {
        h.update(d.name.as_bytes());
        for s in &d.samples {
            h.update(s.file.as_bytes());
            h.update(s.image.as_raw());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn images_to_batch<T: Float>(imgs: &[&RgbImage]) -> Result<ImageBatch<T>> {
    let first = imgs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![T::zero(); imgs.len() * 3 * plane];
    for (b, img) in imgs.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + p] = normalize(px[c]);
            }
        }
    }
    ImageBatch::new(Tensor::from_vec(&[imgs.len(), 3, h as usize, w as usize], data)?)
}

/// Image `i` of a batch, mapped back to 8-bit RGB.
pub fn batch_image<T: Float>(batch: &ImageBatch<T>, i: usize) -> RgbImage {
    let [_, c, h, w] = batch.dims();
    let plane = h * w;
    let d = &batch.tensor().data()[i * c * plane..(i + 1) * c * plane];
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let ch = |k: usize| denormalize(d[k.min(c - 1) * plane + p]);
        Rgb([ch(0), ch(1), ch(2)])
    })
}

/// Random crop and horizontal flip settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub crop: bool,
    pub flip: bool,
}

impl Augment {
    pub fn from_flag(on: bool) -> Self {
        Self { crop: on, flip: on }
    }

    /// Flips are dropped for orientation-sensitive datasets.
    pub fn effective(self, ds: &DomainDataset) -> Self {
        Self {
            crop: self.crop,
            flip: self.flip && !ds.orientation_sensitive,
        }
    }
}

pub(crate) fn augment_image(img: &RgbImage, res: usize, aug: Augment, rng: &mut Rng) -> RgbImage {
    let mut out = if aug.crop {
        let load = (res as f64 * LOAD_SCALE).round() as u32;
        let big = imageops::resize(img, load, load, FilterType::Triangle);
        let x = rng.random_range(0..=load - res as u32);
        let y = rng.random_range(0..=load - res as u32);
        imageops::crop_imm(&big, x, y, res as u32, res as u32).to_image()
    } else {
        img.clone()
    };
    if aug.flip && rng.random::<bool>() {
        imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Batch drawn uniformly with replacement.
pub fn sample_batch<T: Float>(ds: &DomainDataset, batch_size: usize, rng: &mut Rng, augment: bool) -> Result<ImageBatch<T>> {
    if ds.is_empty() {
        return Err(Error::Data(format!("domain {:?} is empty", ds.name)));
    }
    let aug = Augment::from_flag(augment).effective(ds);
    let imgs: Vec<RgbImage> = (0..batch_size)
        .map(|_| {
            let i = rng.random_range(0..ds.len());
            augment_image(&ds.samples[i].image, ds.resolution, aug, rng)
        })
        .collect();
    images_to_batch(&imgs.iter().collect::<Vec<_>>())
}

/// Walks a domain in shuffled order, reshuffling when exhausted.
#[derive(Clone, Debug)]
pub struct DomainSampler {
    order: Vec<usize>,
    pos: usize,
}

impl DomainSampler {
    pub fn new(ds: &DomainDataset, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub fn next_batch<T: Float>(
        &mut self,
        ds: &DomainDataset,
        batch_size: usize,
        augment: Augment,
        rng: &mut Rng,
    ) -> Result<ImageBatch<T>> {
        if self.order.is_empty() {
            return Err(Error::Data(format!("domain {:?} is empty", ds.name)));
        }
        let aug = augment.effective(ds);
        let mut imgs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            imgs.push(augment_image(&ds.samples[i].image, ds.resolution, aug, rng));
        }
        images_to_batch(&imgs.iter().collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Random flat-shaded scenes; domain `k` has its hues rotated by `k * 360 / n` degrees.
    HueCycle,
    /// A rendered chair; domain `k` shows it at azimuth `k * 360 / n` degrees.
    RotationCycle,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hue-cycle" => Ok(Self::HueCycle),
            "rotation-cycle" => Ok(Self::RotationCycle),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?} (expected hue-cycle or rotation-cycle)"
            ))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::HueCycle => "hue-cycle",
            Self::RotationCycle => "rotation-cycle",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_domains: usize,
    pub per_domain: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(Error::Config("n_domains must be >= 2".into()));
        }
        if self.per_domain == 0 {
            return Err(Error::Config("per_domain must be >= 1".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config("resolution must be >= 8".into()));
        }
        Ok(())
    }

    pub fn sequence(&self) -> Result<SequenceSpec> {
        SequenceSpec::lettered(self.n_domains)
    }

    /// Rotation (degrees) that defines domain `k`.
    pub fn domain_angle(&self, k: usize) -> f64 {
        k as f64 * 360.0 / self.n_domains as f64
    }
}

/// Generate every domain. A pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let seq = spec.sequence()?;
    seq.steps()
        .map(|d| {
            let k = d.value();
            let samples = (0..spec.per_domain)
                .map(|j| {
                    let mut rng = rng::stream(spec.seed, &format!("synth/{}", spec.kind), (k * spec.per_domain + j) as u64);
                    let angle = spec.domain_angle(k);
                    let image = match spec.kind {
                        SynthKind::HueCycle => render_hue_scene(&mut rng, spec.resolution, angle),
                        SynthKind::RotationCycle => render_chair(&mut rng, spec.resolution, angle),
                    };
                    Sample {
                        file: format!("{}_{j:05}.png", seq.name(d)),
                        image,
                    }
                })
                .collect();
            DomainDataset::new(
                seq.name(d),
                d,
                spec.resolution,
                spec.kind == SynthKind::RotationCycle,
                samples,
            )
        })
        .collect()
}

/// `manifest.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sequence: SequenceSpec,
    pub resolution: usize,
    pub counts: Vec<usize>,
    pub orientation_sensitive: bool,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

/// Write `root/<name>/<file>` PNGs and the manifest.
pub fn write_dataset(root: &Path, seq: &SequenceSpec, datasets: &[DomainDataset], synth: Option<&SynthSpec>) -> Result<DatasetManifest> {
    if datasets.len() != seq.n() {
        return Err(Error::Data(format!("{} datasets for {} domains", datasets.len(), seq.n())));
    }
    for ds in datasets {
        let dir = root.join(&ds.name);
        fs::create_dir_all(&dir).at(&dir)?;
        for s in &ds.samples {
            s.image.save(dir.join(&s.file))?;
        }
    }
    let manifest = DatasetManifest {
        sequence: seq.clone(),
        resolution: datasets[0].resolution,
        counts: datasets.iter().map(DomainDataset::len).collect(),
        orientation_sensitive: datasets.iter().any(|d| d.orientation_sensitive),
        synth: synth.cloned(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

/// Result of [`load_domain_folders`].
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub domains: Vec<DomainDataset>,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
    pub manifest: Option<DatasetManifest>,
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Load `root/<name>/*.{png,jpg}` for every domain of `seq`, resizing to
/// `resolution`. Undecodable files are skipped and reported.
pub fn load_domain_folders(root: &Path, seq: &SequenceSpec, resolution: usize) -> Result<LoadedData> {
    let layout = || {
        format!(
            "expected layout: {}/<domain>/*.png|jpg with one folder per domain ({})",
            root.display(),
            seq.names().join(", ")
        )
    };
    let manifest_path = root.join("manifest.json");
    let manifest: Option<DatasetManifest> = if manifest_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&manifest_path).at(&manifest_path)?)?)
    } else {
        None
    };
    let sensitive = manifest.as_ref().is_some_and(|m| m.orientation_sensitive);
    let mut domains = Vec::with_capacity(seq.n());
    let mut skipped = Vec::new();
    for d in seq.steps() {
        let dir = root.join(seq.name(d));
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing domain folder {}; {}", dir.display(), layout())));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        let mut samples = Vec::with_capacity(files.len());
        for path in files {
            let img = match image::open(&path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push(path);
                    continue;
                }
            };
            let r = resolution as u32;
            let image = if img.dimensions() == (r, r) {
                img
            } else {
                imageops::resize(&img, r, r, FilterType::Triangle)
            };
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
            samples.push(Sample { file, image });
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("domain folder {} contains no readable images; {}", dir.display(), layout())));
        }
        domains.push(DomainDataset::new(seq.name(d), d, resolution, sensitive, samples)?);
    }
    Ok(LoadedData {
        domains,
        skipped,
        manifest,
    })
}

/// HSV (hue in degrees, s and v in [0, 1]) to RGB in [0, 1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// RGB in [0, 1] to (hue degrees, saturation, value).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Saturation-weighted circular mean hue of an image, in degrees.
pub fn mean_hue(img: &RgbImage) -> f64 {
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in img.pixels() {
        let (h, s, v) = rgb_to_hsv([p[0], p[1], p[2]].map(|c| f64::from(c) / 255.0));
        let w = s * v;
        sx += w * h.to_radians().cos();
        sy += w * h.to_radians().sin();
    }
    sy.atan2(sx).to_degrees().rem_euclid(360.0)
}

const SUPERSAMPLE: usize = 3;

/// Supersampled RGB buffer with painter-order fills.
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(res: usize, bg: [f64; 3]) -> Self {
        let size = res * SUPERSAMPLE;
        Self {
            size,
            px: vec![bg; size * size],
        }
    }

    /// Fill every subsample whose center (in unit coordinates, y down)
    /// satisfies `inside`, restricted to the bounding box.
    fn fill(&mut self, bbox: [f64; 4], color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        let lo = |v: f64| ((v * s).floor().max(0.0) as usize).min(self.size);
        let hi = |v: f64| ((v * s).ceil().max(0.0) as usize).min(self.size);
        for y in lo(bbox[1])..hi(bbox[3]) {
            for x in lo(bbox[0])..hi(bbox[2]) {
                let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
                if inside(u, v) {
                    self.px[y * self.size + x] = color;
                }
            }
        }
    }

    fn fill_polygon(&mut self, pts: &[(f64, f64)], color: [f64; 3]) {
        let bbox = pts.iter().fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |b, &(x, y)| {
            [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)]
        });
        let inside = |u: f64, v: f64| {
            let mut sign = 0.0;
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                let c = (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
                if c != 0.0 {
                    if sign == 0.0 {
                        sign = c.signum();
                    } else if c.signum() != sign {
                        return false;
                    }
                }
            }
            true
        };
        self.fill(bbox, color, inside);
    }

    fn into_image(self, res: usize) -> RgbImage {
        let ss = SUPERSAMPLE;
        RgbImage::from_fn(res as u32, res as u32, |x, y| {
            let mut acc = [0.0; 3];
            for dy in 0..ss {
                for dx in 0..ss {
                    let p = self.px[(y as usize * ss + dy) * self.size + x as usize * ss + dx];
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            Rgb(acc.map(|a| (a / (ss * ss) as f64 * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }
}

fn jitter(rng: &mut Rng, amp: f64) -> f64 {
    rng.random_range(-amp..=amp)
}

fn render_hue_scene(rng: &mut Rng, res: usize, hue: f64) -> RgbImage {
    let bg = hsv_to_rgb(hue + jitter(rng, 20.0), rng.random_range(0.3..0.5), rng.random_range(0.35..0.55));
    let mut canvas = Canvas::new(res, bg);
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let color = hsv_to_rgb(hue + jitter(rng, 25.0), rng.random_range(0.65..1.0), rng.random_range(0.65..1.0));
        let (cx, cy) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let r = rng.random_range(0.08..0.25);
        match rng.random_range(0..3) {
            0 => canvas.fill([cx - r, cy - r, cx + r, cy + r], color, |u, v| (u - cx).powi(2) + (v - cy).powi(2) <= r * r),
            1 => {
                let (w, h) = (r * rng.random_range(0.6..1.4), r * rng.random_range(0.6..1.4));
                canvas.fill([cx - w, cy - h, cx + w, cy + h], color, |_, _| true);
            }
            _ => {
                let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let pts: Vec<(f64, f64)> = (0..3)
                    .map(|i| {
                        let a = a0 + i as f64 * std::f64::consts::TAU / 3.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                canvas.fill_polygon(&pts, color);
            }
        }
    }
    canvas.into_image(res)
}

type Vec3 = [f64; 3];

fn cuboid(lo: Vec3, hi: Vec3) -> [[Vec3; 4]; 6] {
    let c = |x: usize, y: usize, z: usize| [[lo[0], hi[0]][x], [lo[1], hi[1]][y], [lo[2], hi[2]][z]];
    [
        [c(0, 0, 1), c(1, 0, 1), c(1, 1, 1), c(0, 1, 1)], // +z
        [c(1, 0, 0), c(0, 0, 0), c(0, 1, 0), c(1, 1, 0)], // -z
        [c(1, 0, 1), c(1, 0, 0), c(1, 1, 0), c(1, 1, 1)], // +x
        [c(0, 0, 0), c(0, 0, 1), c(0, 1, 1), c(0, 1, 0)], // -x
        [c(0, 1, 1), c(1, 1, 1), c(1, 1, 0), c(0, 1, 0)], // +y
        [c(0, 0, 0), c(1, 0, 0), c(1, 0, 1), c(0, 0, 1)], // -y
    ]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn render_chair(rng: &mut Rng, res: usize, azimuth: f64) -> RgbImage {
    let bg_v = rng.random_range(0.82..0.95);
    let bg = hsv_to_rgb(rng.random_range(0.0..360.0), 0.08, bg_v);
    let base = hsv_to_rgb(rng.random_range(0.0..360.0), rng.random_range(0.45..0.8), rng.random_range(0.55..0.85));
    let (w, d) = (rng.random_range(0.5..0.7), rng.random_range(0.5..0.7));
    let seat_h = rng.random_range(0.35..0.5);
    let back_h = rng.random_range(0.4..0.6);
    let (t, leg) = (0.08, 0.07);
    let (hw, hd) = (w / 2.0, d / 2.0);
    let y0 = -(seat_h + back_h) / 2.0;
    let mut boxes = vec![
        cuboid([-hw, y0 + seat_h - t, -hd], [hw, y0 + seat_h, hd]),
        cuboid([-hw, y0 + seat_h, -hd], [hw, y0 + seat_h + back_h, -hd + t]),
    ];
    for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let (x, z) = (sx * (hw - leg / 2.0), sz * (hd - leg / 2.0));
        boxes.push(cuboid([x - leg / 2.0, y0, z - leg / 2.0], [x + leg / 2.0, y0 + seat_h - t, z + leg / 2.0]));
    }
    let theta = (azimuth + jitter(rng, 8.0)).to_radians();
    let phi = rng.random_range(18.0f64..30.0).to_radians();
    let view = |p: Vec3| -> Vec3 {
        let x = p[0] * theta.cos() + p[2] * theta.sin();
        let z = -p[0] * theta.sin() + p[2] * theta.cos();
        [x, p[1] * phi.cos() - z * phi.sin(), p[1] * phi.sin() + z * phi.cos()]
    };
    let light = {
        let l: Vec3 = [-0.4, 0.8, 0.6];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / n)
    };
    let scale = 0.62;
    let mut faces: Vec<(f64, Vec<(f64, f64)>, [f64; 3])> = Vec::new();
    for quad in boxes.iter().flatten() {
        let q = quad.map(view);
        let nrm = cross(sub(q[1], q[0]), sub(q[2], q[1]));
        if nrm[2] <= 0.0 {
            continue;
        }
        let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
        let lambert = (nrm[0] * light[0] + nrm[1] * light[1] + nrm[2] * light[2]) / len;
        let shade = 0.45 + 0.55 * lambert.max(0.0);
        let depth = q.iter().map(|p| p[2]).sum::<f64>() / 4.0;
        let pts = q.iter().map(|p| (0.5 + p[0] * scale, 0.5 - p[1] * scale)).collect();
        faces.push((depth, pts, base.map(|c| c * shade)));
    }
    faces.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut canvas = Canvas::new(res, bg);
    for (_, pts, color) in &faces {
        canvas.fill_polygon(pts, *color);
    }
    canvas.into_image(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_round_trip_is_exact() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize::<f32>(v)), v);
            assert_eq!(denormalize(normalize::<f64>(v)), v);
        }
        assert_eq!(normalize::<f32>(0), -1.0);
        assert_eq!(normalize::<f32>(255), 1.0);
    }

    #[test]
    fn hsv_round_trip() {
        for h in [0.0, 37.0, 120.0, 200.0, 300.0, 359.0] {
            let rgb = hsv_to_rgb(h, 0.8, 0.7);
            let (h2, s2, v2) = rgb_to_hsv(rgb);
            assert!((h2 - h).abs() < 1e-9 && (s2 - 0.8).abs() < 1e-9 && (v2 - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_deterministic_and_about_five_percent() {
        let names: Vec<String> = (0..4000).map(|i| format!("A_{i:05}.png")).collect();
        let test = names.iter().filter(|n| split_of(n) == Split::Test).count();
        assert!((120..=280).contains(&test), "{test}");
        assert!(names.iter().all(|n| split_of(n) == split_of(n)));
    }

    #[test]
    fn synthetic_is_pure_and_hue_centred() {
        let spec = SynthSpec {
            kind: SynthKind::HueCycle,
            n_domains: 4,
            per_domain: 6,
            resolution: 32,
            seed: 9,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (da, db) in a.iter().zip(&b) {
            for (sa, sb) in da.samples().iter().zip(db.samples()) {
                assert_eq!(sa.image, sb.image);
            }
        }
        for (k, ds) in a.iter().enumerate() {
            for s in ds.samples() {
                let h = mean_hue(&s.image);
                let off = (h - 90.0 * k as f64 + 540.0).rem_euclid(360.0) - 180.0;
                assert!(off.abs() < 30.0, "domain {k}: hue {h}");
            }
        }
    }

    #[test]
    fn chair_views_differ_by_domain() {
        let spec = SynthSpec {
            kind: SynthKind::RotationCycle,
            n_domains: 4,
            per_domain: 2,
            resolution: 32,
            seed: 1,
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert!(ds.iter().all(|d| d.orientation_sensitive));
        assert_ne!(ds[1].samples()[0].image, ds[3].samples()[0].image);
    }

    #[test]
    fn flips_are_disabled_for_orientation_sensitive_data() {
        let ds = DomainDataset::new("A", StepIndex::new(0), 8, true, vec![]).unwrap();
        assert_eq!(Augment::from_flag(true).effective(&ds), Augment { crop: true, flip: false });
    }

    #[test]
    fn batch_round_trips_pixels() {
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb([(x * 40) as u8, (y * 50) as u8, 7]));
        let b: ImageBatch<f32> = images_to_batch(&[&img, &img]).unwrap();
        assert_eq!(b.dims(), [2, 3, 4, 4]);
        assert!(b.in_range());
        assert_eq!(batch_image(&b, 1), img);
    }

    #[test]
    fn sampler_covers_domain_each_pass() {
        let samples = (0..5)
            .map(|i| Sample {
                file: format!("{i}.png"),
                image: RgbImage::from_pixel(8, 8, Rgb([i as u8 * 10, 0, 0])),
            })
            .collect();
        let ds = DomainDataset::new("A", StepIndex::new(0), 8, false, samples).unwrap();
        let mut rng = rng::stream(0, "t", 0);
        let mut s = DomainSampler::new(&ds, &mut rng);
        let mut seen: Vec<u8> = (0..5)
            .map(|_| {
                let b: ImageBatch<f32> = s.next_batch(&ds, 1, Augment::default(), &mut rng).unwrap();
                batch_image(&b, 0).get_pixel(0, 0)[0]
            })
            .collect();
        seen.sort();
        assert_eq!(seen, vec![0, 10, 20, 30, 40]);
    }
}
