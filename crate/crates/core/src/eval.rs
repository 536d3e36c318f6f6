//! Evaluation: held-out loop error, a small domain classifier, translation
//! accuracy, score-distribution reports and sequence grids.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, Augment, DomainDataset};
use crate::error::{Error, IoContext, Result};
use crate::graph::{softmax_rows, Bound, Graph, Var};
use crate::kernels::{ConvGeom, Padding};
use crate::model::{Generator, ImageBatch};
use crate::objective::Adam;
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::seq::{SequenceSpec, StepIndex};
use crate::tensor::Float;

/// Anything that maps an image batch to every domain of a sequence.
pub trait Translator<T: Float> {
    /// Translation into every domain (entry `src` is the zero-step
    /// reconstruction) plus the full loop back to `src`.
    fn translate_all(&self, x: &ImageBatch<T>, src: StepIndex, spec: &SequenceSpec) -> Result<(Vec<ImageBatch<T>>, ImageBatch<T>)>;
}

impl<T: Float> Translator<T> for Generator<T> {
    fn translate_all(&self, x: &ImageBatch<T>, src: StepIndex, spec: &SequenceSpec) -> Result<(Vec<ImageBatch<T>>, ImageBatch<T>)> {
        self.translate_sequence(x, src, spec)
    }
}

/// Returns its input for every target.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl<T: Float> Translator<T> for IdentityTranslator {
    fn translate_all(&self, x: &ImageBatch<T>, src: StepIndex, spec: &SequenceSpec) -> Result<(Vec<ImageBatch<T>>, ImageBatch<T>)> {
        spec.check(src)?;
        Ok((vec![x.clone(); spec.n()], x.clone()))
    }
}

/// Batch size used when running translators over whole datasets.
pub const EVAL_BATCH: usize = 8;

fn check_sets(sets: &[DomainDataset], spec: &SequenceSpec) -> Result<()> {
    if sets.len() != spec.n() {
        return Err(Error::Eval(format!("{} evaluation sets for {} domains", sets.len(), spec.n())));
    }
    if let Some(e) = sets.iter().find(|s| s.is_empty()) {
        return Err(Error::Eval(format!("evaluation set for domain {:?} is empty", e.name)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    /// Mean L1 per source domain.
    pub per_domain: Vec<f64>,
    /// Mean L1 over all images.
    pub overall: f64,
}

/// Mean absolute difference between each held-out image and its full-loop
/// reconstruction, in normalized pixel units.
pub fn loop_reconstruction_error<T: Float>(tr: &dyn Translator<T>, sets: &[DomainDataset], spec: &SequenceSpec) -> Result<LoopReport> {
    check_sets(sets, spec)?;
    let mut per_domain = Vec::with_capacity(sets.len());
    let (mut total, mut count) = (0.0, 0usize);
    for (d, set) in spec.steps().zip(sets) {
        let mut sum = 0.0;
        for batch in set.batches::<T>(EVAL_BATCH) {
            let x = batch?;
            let (_, back) = tr.translate_all(&x, d, spec)?;
            let [b, ..] = x.dims();
            let per_image = x.tensor().len() / b;
            for i in 0..b {
                let a = &x.tensor().data()[i * per_image..(i + 1) * per_image];
                let r = &back.tensor().data()[i * per_image..(i + 1) * per_image];
                let l1: f64 = a.iter().zip(r).map(|(&p, &q)| (p - q).abs().to_f64().unwrap_or(f64::NAN)).sum();
                sum += l1 / per_image as f64;
            }
        }
        per_domain.push(sum / set.len() as f64);
        total += sum;
        count += set.len();
    }
    Ok(LoopReport {
        per_domain,
        overall: total / count as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Output channels of the stride-2 convolutions.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Minimum held-out accuracy for the classifier to be used as a judge.
    pub validity_threshold: f64,
    pub augment: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            epochs: 8,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            validity_threshold: 0.95,
            augment: true,
        }
    }
}

pub const CLASSIFIER_KIND: &str = "domain-classifier";
const CLS_GEOM: ConvGeom = ConvGeom::new(3, 2, 1, Padding::Zero);

/// Small CNN mapping an image to a domain label.
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    cfg: ClassifierConfig,
    spec: SequenceSpec,
    store: ParamStore<f32>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl DomainClassifier {
    fn build(cfg: &ClassifierConfig, spec: &SequenceSpec) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Config("classifier needs channels and a batch size >= 1".into()));
        }
        let mut r = rng::stream(cfg.seed, "classifier", 0);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            store.add_normal(format!("conv{i}.weight"), &[c, cin, 3, 3], std, &mut r);
            store.add_const(format!("conv{i}.bias"), &[c], 0.0);
            cin = c;
        }
        store.add_normal("fc.weight", &[spec.n(), cin], (1.0 / cin as f64).sqrt(), &mut r);
        store.add_const("fc.bias", &[spec.n()], 0.0);
        Ok(Self {
            cfg: cfg.clone(),
            spec: spec.clone(),
            store,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn is_valid(&self) -> bool {
        self.test_accuracy >= self.cfg.validity_threshold
    }

    fn logits_g(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        let mut v = x;
        for i in 0..self.cfg.channels.len() {
            v = g.conv2d(v, p.var(2 * i), p.var(2 * i + 1), CLS_GEOM)?;
            v = g.leaky_relu(v, 0.2);
        }
        let pooled = g.global_avg_pool(v);
        let k = self.cfg.channels.len();
        g.linear(pooled, p.var(2 * k), p.var(2 * k + 1))
    }

    /// Softmax probabilities, one row per image.
    pub fn predict_proba(&self, x: &ImageBatch<f32>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let xv = g.constant(x.tensor().clone());
        let l = self.logits_g(&mut g, &p, xv)?;
        let k = self.spec.n();
        Ok(softmax_rows(g.value(l).data(), k)
            .chunks(k)
            .map(|row| row.iter().map(|&v| f64::from(v)).collect())
            .collect())
    }

    /// Probabilities for every image of a dataset.
    pub fn predict_dataset(&self, ds: &DomainDataset) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(ds.len());
        for b in ds.batches::<f32>(64) {
            out.extend(self.predict_proba(&b?)?);
        }
        Ok(out)
    }

    /// Fraction of images whose most probable class is their domain.
    pub fn accuracy(&self, sets: &[DomainDataset]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for ds in sets {
            for row in self.predict_dataset(ds)? {
                hit += usize::from(argmax(&row) == ds.domain.value());
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::Eval("no images to score".into()));
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arrays: Vec<(String, crate::Tensor<f32>)> = self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        checkpoint::write_atomically(dir, |tmp| {
            let entries = checkpoint::write_arrays(tmp, &arrays)?;
            checkpoint::write_manifest(
                tmp,
                &checkpoint::Manifest {
                    schema_version: checkpoint::SCHEMA_VERSION,
                    kind: CLASSIFIER_KIND.into(),
                    sequence: self.spec.clone(),
                    arch: serde_json::to_value(&self.cfg)?,
                    epoch: self.cfg.epochs,
                    iteration: 0,
                    seed: self.cfg.seed,
                    train: None,
                    optimizer: None,
                    arrays: entries,
                    extra: serde_json::json!({
                        "train_accuracy": self.train_accuracy,
                        "test_accuracy": self.test_accuracy,
                    }),
                },
            )
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        if m.kind != CLASSIFIER_KIND {
            return Err(Error::Checkpoint(format!("{} holds a {:?} checkpoint, not {CLASSIFIER_KIND:?}", dir.display(), m.kind)));
        }
        let cfg: ClassifierConfig = serde_json::from_value(m.arch.clone()).map_err(|e| Error::Checkpoint(format!("arch: {e}")))?;
        let mut c = Self::build(&cfg, &m.sequence)?;
        let mut loaded = ParamStore::new();
        for name in c.store.names() {
            loaded.add(name.clone(), checkpoint::read_array(dir, m.entry(name)?)?);
        }
        c.store.assign(&loaded)?;
        let acc = |k: &str| m.extra.get(k).and_then(serde_json::Value::as_f64).unwrap_or(0.0);
        c.train_accuracy = acc("train_accuracy");
        c.test_accuracy = acc("test_accuracy");
        Ok(c)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Train a domain classifier on `train` and measure it on `test`.
pub fn fit_domain_classifier(train: &[DomainDataset], test: &[DomainDataset], spec: &SequenceSpec, cfg: &ClassifierConfig) -> Result<DomainClassifier> {
    check_sets(train, spec)?;
    check_sets(test, spec)?;
    let mut clf = DomainClassifier::build(cfg, spec)?;
    let mut opt = Adam::new(&clf.store, 0.9, 0.999);
    let items: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| (0..ds.len()).map(move |i| (d, i)))
        .collect();
    let mut r = rng::stream(cfg.seed, "classifier-batches", 0);
    let aug = Augment::from_flag(cfg.augment);
    for epoch in 0..cfg.epochs {
        let mut order = items.clone();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<image::RgbImage> = chunk
                .iter()
                .map(|&(d, i)| augmented(&train[d], i, aug, &mut r))
                .collect();
            let x = data::images_to_batch::<f32>(&imgs.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|&(d, _)| train[d].domain.value()).collect();
            let mut g = Graph::new();
            let p = g.bind(&clf.store, true);
            let xv = g.constant(x.into_tensor());
            let logits = clf.logits_g(&mut g, &p, xv)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            loss_sum += f64::from(g.value(loss).item()) * chunk.len() as f64;
            let grads = g.backward(loss)?.for_store(&p, &clf.store);
            opt.step(&mut clf.store, &grads, cfg.learning_rate);
        }
        log::debug!("classifier epoch {epoch}: loss {:.4}", loss_sum / items.len() as f64);
    }
    clf.train_accuracy = clf.accuracy(train)?;
    clf.test_accuracy = clf.accuracy(test)?;
    Ok(clf)
}

fn augmented(ds: &DomainDataset, i: usize, aug: Augment, r: &mut Rng) -> image::RgbImage {
    data::augment_image(&ds.samples()[i].image, ds.resolution, aug.effective(ds), r)
}

/// Classifier probabilities for every held-out image and every translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationScores {
    pub names: Vec<String>,
    /// `real[d][image][class]`.
    pub real: Vec<Vec<Vec<f64>>>,
    /// `translated[s][t][image][class]`; the diagonal holds full loops.
    pub translated: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn score_translations(tr: &dyn Translator<f32>, clf: &DomainClassifier, sets: &[DomainDataset], spec: &SequenceSpec) -> Result<TranslationScores> {
    check_sets(sets, spec)?;
    if clf.spec.n() != spec.n() {
        return Err(Error::Eval(format!("classifier knows {} domains, sequence has {}", clf.spec.n(), spec.n())));
    }
    if !clf.is_valid() {
        return Err(Error::Eval(format!(
            "classifier held-out accuracy {:.3} is below the validity threshold {:.3}",
            clf.test_accuracy, clf.cfg.validity_threshold
        )));
    }
    let n = spec.n();
    let mut real = Vec::with_capacity(n);
    let mut translated = vec![vec![Vec::new(); n]; n];
    for (s, set) in spec.steps().zip(sets) {
        real.push(clf.predict_dataset(set)?);
        for batch in set.batches::<f32>(EVAL_BATCH) {
            let (outs, full) = tr.translate_all(&batch?, s, spec)?;
            for (t, y) in outs.iter().enumerate() {
                let y = if t == s.value() { &full } else { y };
                translated[s.value()][t].extend(clf.predict_proba(y)?);
            }
        }
    }
    Ok(TranslationScores {
        names: spec.names().to_vec(),
        real,
        translated,
    })
}

/// `values[s][t]`: fraction of translations from `s` to `t` classified as
/// `t`; `histograms[s][t][c]`: fraction classified as `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub histograms: Vec<Vec<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn from_scores(scores: &TranslationScores) -> Self {
        let n = scores.names.len();
        let mut values = vec![vec![0.0; n]; n];
        let mut histograms = vec![vec![vec![0.0; n]; n]; n];
        for s in 0..n {
            for t in 0..n {
                let rows = &scores.translated[s][t];
                for row in rows {
                    histograms[s][t][argmax(row)] += 1.0 / rows.len() as f64;
                }
                values[s][t] = histograms[s][t][t];
            }
        }
        Self {
            names: scores.names.clone(),
            values,
            histograms,
        }
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.values.len();
        let sum: f64 = (0..n).flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t))).map(|(s, t)| self.values[s][t]).sum();
        sum / (n * (n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("source,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }

    pub fn histograms_csv(&self) -> String {
        let mut out = format!("source,target,{}\n", self.names.join(","));
        for (s, rows) in self.histograms.iter().enumerate() {
            for (t, hist) in rows.iter().enumerate() {
                let cells: Vec<String> = hist.iter().map(f64::to_string).collect();
                out.push_str(&format!("{},{},{}\n", self.names[s], self.names[t], cells.join(",")));
            }
        }
        out
    }
}

pub fn translation_accuracy(tr: &dyn Translator<f32>, clf: &DomainClassifier, sets: &[DomainDataset], spec: &SequenceSpec) -> Result<AccuracyMatrix> {
    Ok(AccuracyMatrix::from_scores(&score_translations(tr, clf, sets, spec)?))
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn mean_rows(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for row in rows {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v / rows.len() as f64;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDistribution {
    pub domain: String,
    /// Mean classifier probabilities over real held-out images.
    pub real: Vec<f64>,
    /// Mean probabilities over images translated into this domain from
    /// every other domain.
    pub generated: Vec<f64>,
    pub tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub domains: Vec<DomainDistribution>,
}

impl DistributionReport {
    pub fn from_scores(scores: &TranslationScores) -> Self {
        let n = scores.names.len();
        let domains = (0..n)
            .map(|d| {
                let real = mean_rows(&scores.real[d], n);
                let gen_rows: Vec<Vec<f64>> = (0..n).filter(|&s| s != d).flat_map(|s| scores.translated[s][d].iter().cloned()).collect();
                let generated = mean_rows(&gen_rows, n);
                DomainDistribution {
                    domain: scores.names[d].clone(),
                    tv: total_variation(&real, &generated),
                    real,
                    generated,
                }
            })
            .collect();
        Self { domains }
    }

    pub fn max_tv(&self) -> f64 {
        self.domains.iter().map(|d| d.tv).fold(0.0, f64::max)
    }
}

pub fn distribution_report(tr: &dyn Translator<f32>, clf: &DomainClassifier, sets: &[DomainDataset], spec: &SequenceSpec) -> Result<DistributionReport> {
    Ok(DistributionReport::from_scores(&score_translations(tr, clf, sets, spec)?))
}

/// Pixel geometry of a sequence grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    /// `n` domain columns, plus one for the full loop if requested.
    pub cols: usize,
    pub cell: usize,
    pub margin: usize,
    pub width: u32,
    pub height: u32,
}

pub const GRID_MARGIN: usize = 4;
pub const GRID_BORDER: usize = 2;
pub const SOURCE_BORDER: image::Rgb<u8> = image::Rgb([220, 40, 40]);
const GRID_BACKGROUND: image::Rgb<u8> = image::Rgb([255, 255, 255]);

/// One row per input: column `t` holds the translation into domain `t`
/// (the source column shows the input itself, framed). With `loop_column`
/// an extra last column holds the full-loop reconstruction.
pub fn render_sequence_grid(
    tr: &dyn Translator<f32>,
    inputs: &[(ImageBatch<f32>, StepIndex)],
    spec: &SequenceSpec,
    loop_column: bool,
) -> Result<(image::RgbImage, GridLayout)> {
    let first = inputs.first().ok_or_else(|| Error::Eval("grid needs at least one input".into()))?;
    let [_, _, h, w] = first.0.dims();
    if h != w {
        return Err(Error::Shape("grid inputs must be square".into()));
    }
    let (cell, m) = (h, GRID_MARGIN);
    let cols = spec.n() + usize::from(loop_column);
    let width = (cols * (cell + m) + m) as u32;
    let height = (inputs.len() * (cell + m) + m) as u32;
    let mut canvas = image::RgbImage::from_pixel(width, height, GRID_BACKGROUND);
    for (r, (x, src)) in inputs.iter().enumerate() {
        if x.dims() != [1, 3, h, w] {
            return Err(Error::Shape(format!("grid input {r} is {:?}, expected one {h}x{w} image", x.dims())));
        }
        let (outs, full) = tr.translate_all(x, *src, spec)?;
        let y0 = (m + r * (cell + m)) as i64;
        for c in 0..cols {
            let x0 = (m + c * (cell + m)) as i64;
            let img = if c == src.value() {
                data::batch_image(x, 0)
            } else if c == spec.n() {
                data::batch_image(&full, 0)
            } else {
                data::batch_image(&outs[c], 0)
            };
            if c == src.value() {
                let b = GRID_BORDER as i64;
                for yy in (y0 - b).max(0)..(y0 + cell as i64 + b).min(i64::from(height)) {
                    for xx in (x0 - b).max(0)..(x0 + cell as i64 + b).min(i64::from(width)) {
                        canvas.put_pixel(xx as u32, yy as u32, SOURCE_BORDER);
                    }
                }
            }
            image::imageops::replace(&mut canvas, &img, x0, y0);
        }
    }
    let layout = GridLayout {
        rows: inputs.len(),
        cols,
        cell,
        margin: m,
        width,
        height,
    };
    Ok((canvas, layout))
}

/// [`render_sequence_grid`] written as PNG.
pub fn emit_sequence_grid(
    tr: &dyn Translator<f32>,
    inputs: &[(ImageBatch<f32>, StepIndex)],
    spec: &SequenceSpec,
    loop_column: bool,
    path: &Path,
) -> Result<GridLayout> {
    let (img, layout) = render_sequence_grid(tr, inputs, spec, loop_column)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(layout)
}
