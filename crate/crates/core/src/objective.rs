//! Losses, the n-loop training step, optimizers and the learning-rate
//! schedule.
//!
//! One training iteration unrolls the full loop from every start domain.
//! Loop `k` encodes a real batch of domain `k` once, applies the trunk `n`
//! times and decodes after every application, so each visited domain
//! receives one fake. The last fake returns to domain `k` and is compared to
//! the input by the L1 loop loss.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Augment, DomainDataset, DomainSampler};
use crate::error::{Error, IoContext, Result};
use crate::graph::{Bound, Graph, Var};
use crate::model::{ArchConfig, DiscriminatorSet, Generator, ImageBatch, Trace};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::seq::{self, SequenceSpec, StepIndex};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    #[default]
    LeastSquares,
    /// Log-likelihood discriminator with the non-saturating generator loss.
    NonsaturatingLog,
}

impl FromStr for GanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least-squares" => Ok(Self::LeastSquares),
            "nonsaturating-log" => Ok(Self::NonsaturatingLog),
            other => Err(Error::Config(format!(
                "unknown gan_mode {other:?} (expected least-squares or nonsaturating-log)"
            ))),
        }
    }
}

impl fmt::Display for GanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LeastSquares => "least-squares",
            Self::NonsaturatingLog => "nonsaturating-log",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_loop: f64,
    pub gan_mode: GanMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Prior over domains; uniform when absent.
    pub domain_prior: Option<Vec<f64>>,
    /// Capacity of the per-domain fake image buffer; 0 disables it.
    pub image_buffer: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_loop: 10.0,
            gan_mode: GanMode::LeastSquares,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs_flat: 50,
            epochs_decay: 10,
            batch_size: 1,
            seed: 0,
            domain_prior: None,
            image_buffer: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.lambda_loop >= 0.0 && self.lambda_loop.is_finite()) {
            return Err(Error::Config("lambda_loop must be a finite value >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(p) = &self.domain_prior {
            if p.len() != n {
                return Err(Error::Config(format!(
                    "domain_prior has {} entries for {n} domains",
                    p.len()
                )));
            }
            if p.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config("domain_prior entries must be nonnegative".into()));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("domain_prior sums to {sum}, not 1")));
            }
        }
        Ok(())
    }

    pub fn prior(&self, n: usize) -> Vec<f64> {
        self.domain_prior.clone().unwrap_or_else(|| vec![1.0 / n as f64; n])
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }
}

/// Per-term scalars of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: Vec<f64>,
    #[serde(rename = "loop")]
    pub loop_: Vec<f64>,
    pub total_g: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.adv_g.is_finite()
            && self.total_g.is_finite()
            && self.adv_d.iter().chain(&self.loop_).all(|v| v.is_finite())
    }
}

/// `mean |x - x_loop|` over all elements.
pub fn loop_loss<T: Float>(x: &ImageBatch<T>, x_loop: &ImageBatch<T>) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(x.tensor().clone());
    let b = g.constant(x_loop.tensor().clone());
    let l = g.mean_abs_diff(a, b)?;
    Ok(g.value(l).item())
}

/// Discriminator loss on raw patch scores.
pub fn adversarial_loss_d<T: Float>(real: &Tensor<T>, fake: &Tensor<T>, mode: GanMode) -> T {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let l = adv_d_g(&mut g, r, f, mode);
    g.value(l).item()
}

/// Generator loss on raw patch scores of generated images.
pub fn adversarial_loss_g<T: Float>(fake: &Tensor<T>, mode: GanMode) -> T {
    let mut g = Graph::new();
    let f = g.constant(fake.clone());
    let l = adv_g_g(&mut g, f, mode);
    g.value(l).item()
}

pub fn adv_d_g<T: Float>(g: &mut Graph<T>, real: Var, fake: Var, mode: GanMode) -> Var {
    let (r, f) = match mode {
        GanMode::LeastSquares => (g.mean_squared_to(real, 1.0), g.mean_squared_to(fake, 0.0)),
        GanMode::NonsaturatingLog => (g.bce_with_logits(real, 1.0), g.bce_with_logits(fake, 0.0)),
    };
    g.weighted_sum(vec![(r, T::one()), (f, T::one())])
}

pub fn adv_g_g<T: Float>(g: &mut Graph<T>, fake: Var, mode: GanMode) -> Var {
    match mode {
        GanMode::LeastSquares => g.mean_squared_to(fake, 1.0),
        GanMode::NonsaturatingLog => g.bce_with_logits(fake, 1.0),
    }
}

/// Nodes of the generator objective built by [`generator_objective`].
pub struct GeneratorObjective {
    pub total: Var,
    pub adv: Var,
    pub loops: Vec<Var>,
    /// Fakes indexed by the domain they landed in.
    pub fakes: Vec<Vec<Var>>,
    pub trace: Trace,
}

/// Build `adv_g + lambda * sum_k q_k loop_k` for one batch per domain.
///
/// The adversarial term sums the generator loss of every (fake, domain)
/// pair, each weighted by the prior `q_d` of the domain it landed in.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Float>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    gp: &Bound,
    dset: &DiscriminatorSet<T>,
    dps: &[Bound],
    batches: &[ImageBatch<T>],
    spec: &SequenceSpec,
    cfg: &TrainConfig,
) -> Result<GeneratorObjective> {
    let n = spec.n();
    if batches.len() != n {
        return Err(Error::Data(format!(
            "train step needs one batch per domain: got {} for {n} domains",
            batches.len()
        )));
    }
    let prior = cfg.prior(n);
    let mut trace = Trace::default();
    let mut adv_terms = Vec::new();
    let mut loops = Vec::with_capacity(n);
    let mut fakes: Vec<Vec<Var>> = vec![Vec::new(); n];
    for start in spec.steps() {
        let x = g.constant(batches[start.value()].tensor().clone());
        let mut h = gen.encode_g(g, gp, x)?;
        trace.encode_calls += 1;
        let mut step = start;
        for m in 1..=n {
            h = gen.transform_step_g(g, gp, h, step, None)?;
            trace.trunk_steps.push(step);
            step = seq::advance(step, spec)?;
            let fake = gen.decode_g(g, gp, h)?;
            trace.decode_calls += 1;
            let d = step.value();
            let scores = dset.members()[d].forward_g(g, &dps[d], fake)?;
            let l = adv_g_g(g, scores, cfg.gan_mode);
            adv_terms.push((l, T::lit(prior[d])));
            fakes[d].push(fake);
            if m == n {
                loops.push(g.mean_abs_diff(x, fake)?);
            }
        }
    }
    let adv = g.weighted_sum(adv_terms);
    let mut total_terms = vec![(adv, T::one())];
    total_terms.extend(
        loops
            .iter()
            .zip(&prior)
            .map(|(&l, &q)| (l, T::lit(cfg.lambda_loop * q))),
    );
    let total = g.weighted_sum(total_terms);
    Ok(GeneratorObjective {
        total,
        adv,
        loops,
        fakes,
        trace,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let step_size = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// History of generated images replayed to a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Float> ImagePool<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn restore(capacity: usize, images: Vec<Tensor<T>>) -> Self {
        Self { capacity, images }
    }

    /// Per sample: while filling, store and return it; afterwards, with
    /// probability 1/2 return a stored image and keep the new one in its
    /// place, otherwise return the new one.
    pub fn query(&mut self, batch: &Tensor<T>, rng: &mut Rng) -> Tensor<T> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let nb = batch.shape()[0];
        let out: Vec<Tensor<T>> = (0..nb)
            .map(|i| {
                let img = batch.sample(i);
                if self.images.len() < self.capacity {
                    self.images.push(img.clone());
                    img
                } else if rng.random::<f64>() > 0.5 {
                    let j = rng.random_range(0..self.capacity);
                    std::mem::replace(&mut self.images[j], img)
                } else {
                    img
                }
            })
            .collect();
        let refs: Vec<&Tensor<T>> = out.iter().collect();
        Tensor::concat(&refs).expect("uniform sample shapes")
    }
}

/// Counts from one train step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Generated images per destination domain.
    pub fakes_per_domain: Vec<usize>,
    pub encode_calls: usize,
    pub decode_calls: usize,
}

impl StepReport {
    pub fn fakes_generated(&self) -> usize {
        self.fakes_per_domain.iter().sum()
    }
}

/// Generator, discriminators and optimizer state for one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub spec: SequenceSpec,
    pub arch: ArchConfig,
    pub cfg: TrainConfig,
    pub gen: Generator<T>,
    pub dset: DiscriminatorSet<T>,
    pub gen_opt: Adam<T>,
    pub disc_opts: Vec<Adam<T>>,
    pub pools: Vec<ImagePool<T>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
}

impl<T: Float> Trainer<T> {
    pub fn new(spec: &SequenceSpec, arch: &ArchConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(spec.n())?;
        let gen = Generator::new(arch, spec, &mut rng::stream(cfg.seed, "generator", 0))?;
        let dset = DiscriminatorSet::new(arch, spec, cfg.seed)?;
        Ok(Self::assemble(spec, arch, cfg, gen, dset))
    }

    pub(crate) fn assemble(
        spec: &SequenceSpec,
        arch: &ArchConfig,
        cfg: &TrainConfig,
        gen: Generator<T>,
        dset: DiscriminatorSet<T>,
    ) -> Self {
        let gen_opt = Adam::new(gen.store(), cfg.beta1, cfg.beta2);
        let disc_opts = dset
            .members()
            .iter()
            .map(|m| Adam::new(m.store(), cfg.beta1, cfg.beta2))
            .collect();
        Self {
            spec: spec.clone(),
            arch: arch.clone(),
            cfg: cfg.clone(),
            gen,
            dset,
            gen_opt,
            disc_opts,
            pools: (0..spec.n()).map(|_| ImagePool::new(cfg.image_buffer)).collect(),
            epoch: 0,
            iteration: 0,
        }
    }

    /// One generator update followed by one update of every discriminator.
    ///
    /// Losses are checked before any parameter changes; a non-finite value
    /// aborts with [`Error::NonFinite`] and leaves the state untouched.
    pub fn train_step(&mut self, batches: &[ImageBatch<T>], lr: f64, rng: &mut Rng) -> Result<StepReport> {
        let n = self.spec.n();
        // Generator step: discriminators are bound as constants.
        let mut g = Graph::new();
        let gp = g.bind(self.gen.store(), true);
        let dps: Vec<Bound> = self.dset.members().iter().map(|m| g.bind(m.store(), false)).collect();
        let obj = generator_objective(&mut g, &self.gen, &gp, &self.dset, &dps, batches, &self.spec, &self.cfg)?;
        let fakes: Vec<Vec<Tensor<T>>> = obj
            .fakes
            .iter()
            .map(|fs| fs.iter().map(|&f| g.value(f).clone()).collect())
            .collect();
        let mut losses = LossBreakdown {
            adv_g: to_f64(g.value(obj.adv).item()),
            adv_d: vec![0.0; n],
            loop_: obj.loops.iter().map(|&l| to_f64(g.value(l).item())).collect(),
            total_g: to_f64(g.value(obj.total).item()),
        };
        if !losses.is_finite() {
            return Err(self.non_finite(&losses));
        }
        let grads = g.backward(obj.total)?.for_store(&gp, self.gen.store());
        drop(g);

        // Discriminator steps on detached fakes.
        let mut disc_grads = Vec::with_capacity(n);
        for d in 0..n {
            let refs: Vec<&Tensor<T>> = fakes[d].iter().collect();
            let fake_batch = self.pools[d].query(&Tensor::concat(&refs)?, rng);
            let member = &self.dset.members()[d];
            let mut g = Graph::new();
            let p = g.bind(member.store(), true);
            let real = g.constant(batches[d].tensor().clone());
            let fake = g.constant(fake_batch);
            let sr = member.forward_g(&mut g, &p, real)?;
            let sf = member.forward_g(&mut g, &p, fake)?;
            let l = adv_d_g(&mut g, sr, sf, self.cfg.gan_mode);
            losses.adv_d[d] = to_f64(g.value(l).item());
            disc_grads.push(g.backward(l)?.for_store(&p, member.store()));
        }
        if !losses.is_finite() {
            return Err(self.non_finite(&losses));
        }
        self.gen_opt.step(self.gen.store_mut(), &grads, lr);
        for ((m, opt), gr) in self.dset.members_mut().iter_mut().zip(&mut self.disc_opts).zip(&disc_grads) {
            opt.step(m.store_mut(), gr, lr);
        }
        self.iteration += 1;
        Ok(StepReport {
            losses,
            fakes_per_domain: fakes.iter().map(|f| f.iter().map(|t| t.shape()[0]).sum()).collect(),
            encode_calls: obj.trace.encode_calls,
            decode_calls: obj.trace.decode_calls,
        })
    }

    fn non_finite(&self, losses: &LossBreakdown) -> Error {
        Error::NonFinite {
            iteration: self.iteration,
            detail: serde_json::to_string(losses).unwrap_or_default(),
        }
    }
}

fn to_f64<T: Float>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Learning rate for `epoch`: constant for `epochs_flat` epochs, then linear
/// decay reaching 0 at `epochs_flat + epochs_decay`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.epochs_flat {
        return cfg.learning_rate;
    }
    if cfg.epochs_decay == 0 {
        return 0.0;
    }
    let done = (epoch - cfg.epochs_flat) as f64 / cfg.epochs_decay as f64;
    cfg.learning_rate * (1.0 - done).max(0.0)
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub trait FitCallback<T: Float> {
    fn on_iteration(&mut self, _trainer: &Trainer<T>, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }

    /// Called after `trainer.epoch` has been advanced.
    fn on_epoch_end(&mut self, _trainer: &Trainer<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoCallback;

impl<T: Float> FitCallback<T> for NoCallback {}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub augment: bool,
    /// Run directory for checkpoints, the loss CSV and failure dumps.
    pub out_dir: Option<PathBuf>,
    /// Save `checkpoints/epoch_XXXX` every this many epochs (0: only the
    /// final checkpoint).
    pub checkpoint_every: usize,
    /// Stop after this many iterations in total (for smoke runs).
    pub max_iterations: Option<u64>,
}

/// Iterations per epoch: enough batches to cover the largest domain once.
pub fn iterations_per_epoch(datasets: &[DomainDataset], batch_size: usize) -> usize {
    let largest = datasets.iter().map(DomainDataset::len).max().unwrap_or(0);
    largest.div_ceil(batch_size)
}

/// Train from `trainer.epoch` to `epochs_flat + epochs_decay`.
///
/// Each epoch draws its randomness from its own stream of the root seed, so
/// resuming from an epoch checkpoint reproduces an uninterrupted run.
pub fn fit<T: Float>(
    trainer: &mut Trainer<T>,
    datasets: &[DomainDataset],
    opts: &FitOptions,
    callback: &mut dyn FitCallback<T>,
) -> Result<Vec<IterationRecord>> {
    let n = trainer.spec.n();
    if datasets.len() != n {
        return Err(Error::Data(format!("{} datasets for {n} domains", datasets.len())));
    }
    if let Some(empty) = datasets.iter().find(|d| d.is_empty()) {
        return Err(Error::Data(format!("domain {:?} has no training images", empty.name)));
    }
    let cfg = trainer.cfg.clone();
    let per_epoch = iterations_per_epoch(datasets, cfg.batch_size);
    let augment = Augment::from_flag(opts.augment);
    let mut csv = match &opts.out_dir {
        Some(dir) => Some(LossCsv::open(&dir.join("loss_history.csv"), n, trainer.iteration > 0)?),
        None => None,
    };
    let meta = serde_json::json!({ "resolution": datasets[0].resolution });
    let mut history = Vec::new();
    'epochs: while trainer.epoch < cfg.total_epochs() {
        let epoch = trainer.epoch;
        let lr = lr_schedule(epoch, &cfg);
        let mut rng = rng::stream(cfg.seed, "epoch", epoch as u64);
        let mut samplers: Vec<DomainSampler> = datasets.iter().map(|d| DomainSampler::new(d, &mut rng)).collect();
        for _ in 0..per_epoch {
            if opts.max_iterations.is_some_and(|m| trainer.iteration >= m) {
                break 'epochs;
            }
            let batches = samplers
                .iter_mut()
                .zip(datasets)
                .map(|(s, d)| s.next_batch(d, cfg.batch_size, augment, &mut rng))
                .collect::<Result<Vec<ImageBatch<T>>>>()?;
            let report = match trainer.train_step(&batches, lr, &mut rng) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = &opts.out_dir {
                        let dump = dir.join("nonfinite_dump");
                        checkpoint::save_trainer(trainer, &dump, true)?;
                        log::error!("non-finite loss; state dumped to {}", dump.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let record = IterationRecord {
                iteration: trainer.iteration,
                epoch,
                losses: report.losses,
                lr,
            };
            if let Some(csv) = csv.as_mut() {
                csv.write(&record)?;
            }
            callback.on_iteration(trainer, &record)?;
            history.push(record);
        }
        trainer.epoch += 1;
        if let Some(csv) = csv.as_mut() {
            csv.flush()?;
        }
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && trainer.epoch % opts.checkpoint_every == 0 {
                checkpoint::save_trainer_with(trainer, &dir.join(format!("checkpoints/epoch_{:04}", trainer.epoch)), true, meta.clone())?;
            }
        }
        callback.on_epoch_end(trainer)?;
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save_trainer_with(trainer, &dir.join("final"), true, meta)?;
    }
    Ok(history)
}

/// Loss history CSV: `iteration, epoch, adv_g, adv_d_0.., loop_0.., total_g, lr`.
pub struct LossCsv {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl LossCsv {
    pub fn header(n: usize) -> String {
        let mut cols = vec!["iteration".to_string(), "epoch".into(), "adv_g".into()];
        cols.extend((0..n).map(|i| format!("adv_d_{i}")));
        cols.extend((0..n).map(|i| format!("loop_{i}")));
        cols.push("total_g".into());
        cols.push("lr".into());
        cols.join(",")
    }

    pub fn row(r: &IterationRecord) -> String {
        let mut cols = vec![r.iteration.to_string(), r.epoch.to_string(), r.losses.adv_g.to_string()];
        cols.extend(r.losses.adv_d.iter().map(f64::to_string));
        cols.extend(r.losses.loop_.iter().map(f64::to_string));
        cols.push(r.losses.total_g.to_string());
        cols.push(r.lr.to_string());
        cols.join(",")
    }

    /// Open for writing; `append` continues an existing file (resume).
    pub fn open(path: &Path, n: usize, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .at(path)?;
        let mut out = std::io::BufWriter::new(file);
        if !(append && exists) {
            writeln!(out, "{}", Self::header(n)).at(path)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn write(&mut self, r: &IterationRecord) -> Result<()> {
        writeln!(self.out, "{}", Self::row(r)).at(&self.path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().at(&self.path)
    }
}

/// Parse a loss history CSV back into records.
pub fn read_loss_csv(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty loss CSV".into()))?;
    let n = header.split(',').filter(|c| c.starts_with("loop_")).count();
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 + 2 * n {
                return Err(Error::Data(format!("malformed loss CSV row: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("{s}: {e}")));
            Ok(IterationRecord {
                iteration: f[0].parse().map_err(|e| Error::Data(format!("{}: {e}", f[0])))?,
                epoch: f[1].parse().map_err(|e| Error::Data(format!("{}: {e}", f[1])))?,
                losses: LossBreakdown {
                    adv_g: num(f[2])?,
                    adv_d: f[3..3 + n].iter().map(|s| num(s)).collect::<Result<_>>()?,
                    loop_: f[3 + n..3 + 2 * n].iter().map(|s| num(s)).collect::<Result<_>>()?,
                    total_g: num(f[3 + 2 * n])?,
                },
                lr: num(f[4 + 2 * n])?,
            })
        })
        .collect()
}

/// Convenience for tests and examples: the step index of every domain.
pub fn all_steps(spec: &SequenceSpec) -> Vec<StepIndex> {
    spec.steps().collect()
}
