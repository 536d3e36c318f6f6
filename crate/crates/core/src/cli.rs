//! The `loopgan` command line.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, DomainDataset, Split, SynthKind, SynthSpec};
use crate::error::{Error, IoContext, Result};
use crate::eval::{self, ClassifierConfig, DomainClassifier};
use crate::model::{ArchConfig, DiscriminatorSet, Generator, ParamCount};
use crate::objective::{self, FitOptions, NoCallback, TrainConfig, Trainer};
use crate::rng;
use crate::seq::SequenceSpec;

#[derive(Parser, Debug)]
#[command(name = "loopgan", version, about = "Loop-consistent sequential image translation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (or file, for single translations).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Continue training from a checkpoint directory, or from the newest
    /// checkpoint under `--out` when no path is given.
    #[arg(long, global = true, num_args = 0..=1)]
    pub resume: Option<Option<PathBuf>>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a run configuration (a synthetic hue cycle by default).
    Train(TrainArgs),
    /// Translate images with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a checkpoint on held-out data.
    Evaluate(EvaluateArgs),
    /// Print parameter counts and checkpoint metadata.
    Inspect(InspectArgs),
    /// Write a synthetic dataset in the folder layout.
    Synth(SynthArgs),
}

/// Command-line overrides of the training section of the config.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub lambda_loop: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs_flat: Option<usize>,
    #[arg(long)]
    pub epochs_decay: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `least-squares` or `nonsaturating-log`.
    #[arg(long)]
    pub gan_mode: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Source domain name.
    #[arg(long)]
    pub src: String,
    /// Comma-separated target domains; all other domains by default.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
    /// Also write the full loop back to the source domain.
    #[arg(long)]
    pub full_loop: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root in the folder layout; the held-out split is scored.
    /// Defaults to the data section of `--config`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// A saved domain classifier.
    #[arg(long, conflicts_with = "fit_classifier")]
    pub classifier: Option<PathBuf>,
    /// Train a classifier on the training split and save it under `--out`.
    #[arg(long)]
    pub fit_classifier: bool,
    /// Write only the sequence grid.
    #[arg(long)]
    pub grid_only: bool,
    /// Add a full-loop reconstruction column to the grid.
    #[arg(long)]
    pub loop_column: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint directory; without it a fresh model is described.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of domains for a fresh model.
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "hue-cycle")]
    pub kind: String,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    #[arg(long, default_value_t = 200)]
    pub per_domain: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

/// Where training images come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Folder-layout dataset root.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Generate a synthetic dataset instead of reading folders.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

fn default_resolution() -> usize {
    64
}

fn default_true() -> bool {
    true
}

/// Contents of `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Domain names; derived from `data.synth` when absent.
    #[serde(default)]
    pub sequence: Option<SequenceSpec>,
    pub data: DataConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sequence: None,
            data: DataConfig {
                root: None,
                resolution: 64,
                synth: Some(SynthSpec {
                    kind: SynthKind::HueCycle,
                    n_domains: 4,
                    per_domain: 200,
                    resolution: 64,
                    seed: 0,
                }),
            },
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            augment: true,
            checkpoint_every: 5,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn sequence(&self) -> Result<SequenceSpec> {
        match (&self.sequence, &self.data.synth) {
            (Some(s), Some(syn)) if s.n() != syn.n_domains => Err(Error::Config(format!(
                "sequence has {} domains but data.synth.n_domains is {}",
                s.n(),
                syn.n_domains
            ))),
            (Some(s), _) => Ok(s.clone()),
            (None, Some(syn)) => syn.sequence(),
            (None, None) => Err(Error::Config("config needs a sequence (or data.synth)".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let seq = self.sequence()?;
        self.arch.validate()?;
        self.train.validate(seq.n())?;
        match (&self.data.root, &self.data.synth) {
            (Some(_), Some(_)) => Err(Error::Config("data.root and data.synth are mutually exclusive".into())),
            (None, None) => Err(Error::Config("data needs either root or synth".into())),
            (None, Some(s)) => s.validate(),
            (Some(_), None) => Ok(()),
        }
    }

    /// Full datasets for every domain (both splits).
    pub fn datasets(&self) -> Result<Vec<DomainDataset>> {
        let seq = self.sequence()?;
        match (&self.data.root, &self.data.synth) {
            (Some(root), _) => {
                let loaded = data::load_domain_folders(root, &seq, self.data.resolution)?;
                if !loaded.skipped.is_empty() {
                    log::warn!("skipped {} unreadable files", loaded.skipped.len());
                }
                Ok(loaded.domains)
            }
            (None, Some(s)) => data::generate_synthetic(s),
            (None, None) => Err(Error::Config("data needs either root or synth".into())),
        }
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Range { .. } => 1,
        _ => 2,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.common.device != "cpu" {
        return Err(Error::Config(format!("device {:?} is not available; use cpu", cli.common.device)));
    }
    match &cli.command {
        Command::Train(a) => train(&cli.common, a),
        Command::Translate(a) => translate(&cli.common, a),
        Command::Evaluate(a) => evaluate(&cli.common, a),
        Command::Inspect(a) => inspect(&cli.common, a),
        Command::Synth(a) => synth(&cli.common, a),
    }
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// `--config` (or the default run) with `--seed` applied.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(checkpoint::MANIFEST).exists())
        .collect();
    dirs.sort();
    dirs.pop()
}

fn train(c: &Common, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(c)?;
    let t = &mut cfg.train;
    t.lambda_loop = a.lambda_loop.unwrap_or(t.lambda_loop);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.epochs_flat = a.epochs_flat.unwrap_or(t.epochs_flat);
    t.epochs_decay = a.epochs_decay.unwrap_or(t.epochs_decay);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    if let Some(m) = &a.gan_mode {
        t.gan_mode = m.parse()?;
    }
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    cfg.validate()?;
    let out = require_out(c)?;
    let seq = cfg.sequence()?;
    let all = cfg.datasets()?;
    let train_sets: Vec<DomainDataset> = all.iter().map(|d| d.split(Split::Train)).collect();
    let mut trainer = match &c.resume {
        None => Trainer::<f32>::new(&seq, &cfg.arch, &cfg.train)?,
        Some(dir) => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => latest_checkpoint(out).ok_or_else(|| Error::Config(format!("no checkpoint under {}/checkpoints to resume", out.display())))?,
            };
            log::info!("resuming from {}", dir.display());
            let mut t = checkpoint::load_trainer::<f32>(&dir)?;
            if t.spec != seq {
                return Err(Error::Config("checkpoint sequence differs from the configuration".into()));
            }
            if t.arch != cfg.arch {
                return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            // Weights and optimizer state come from the checkpoint, the
            // schedule from the current configuration.
            if t.cfg != cfg.train {
                log::info!("training settings differ from the checkpoint; using the configuration");
            }
            t.cfg = cfg.train.clone();
            t
        }
    };
    fs::create_dir_all(out).at(out)?;
    let flip_forced_off = cfg.augment && all.iter().any(|d| d.orientation_sensitive);
    if flip_forced_off {
        log::info!("horizontal flips disabled: the dataset is orientation-sensitive");
    }
    let manifest = serde_json::json!({
        "config": cfg,
        "seed": cfg.train.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "data_fingerprint": data::fingerprint(&train_sets),
        "flip_forced_off": flip_forced_off,
        "train_counts": train_sets.iter().map(DomainDataset::len).collect::<Vec<_>>(),
        "resumed_from_epoch": c.resume.as_ref().map(|_| trainer.epoch),
    });
    let path = out.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    let opts = FitOptions {
        augment: cfg.augment,
        out_dir: Some(out.to_path_buf()),
        checkpoint_every: cfg.checkpoint_every,
        max_iterations: None,
    };
    let history = objective::fit(&mut trainer, &train_sets, &opts, &mut NoCallback)?;
    if let Some(last) = history.last() {
        println!(
            "trained to epoch {} ({} iterations); last total_g {:.4}",
            trainer.epoch, trainer.iteration, last.losses.total_g
        );
    }
    println!("final checkpoint: {}", out.join("final").display());
    Ok(())
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Config(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .at(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Training resolution recorded in a checkpoint.
fn checkpoint_resolution(m: &checkpoint::Manifest) -> usize {
    m.extra.get("resolution").and_then(serde_json::Value::as_u64).unwrap_or(64) as usize
}

fn translate(c: &Common, a: &TranslateArgs) -> Result<()> {
    let out = require_out(c)?;
    let (gen, seq, manifest) = checkpoint::load_generator::<f32>(&a.checkpoint)?;
    let res = checkpoint_resolution(&manifest) as u32;
    let src = seq.index_of(&a.src)?;
    let targets = if a.targets.is_empty() {
        seq.steps().filter(|&d| d != src).collect()
    } else {
        a.targets.iter().map(|t| seq.index_of(t)).collect::<Result<Vec<_>>>()?
    };
    let files = image_files(&a.input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", a.input.display())));
    }
    fs::create_dir_all(out).at(out)?;
    for f in &files {
        let mut img = image::open(f)?.to_rgb8();
        if img.dimensions() != (res, res) {
            log::warn!("{}: {}x{} resized to {res}x{res}", f.display(), img.width(), img.height());
            img = image::imageops::resize(&img, res, res, image::imageops::FilterType::Triangle);
        }
        let x = data::images_to_batch::<f32>(&[&img])?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for &d in &targets {
            let y = gen.translate(&x, src, d, &seq, false)?;
            let target = out.join(format!("{stem}_{}.png", seq.name(d)));
            data::batch_image(&y, 0).save(&target)?;
            println!("{}", target.display());
        }
        if a.full_loop {
            let y = gen.translate(&x, src, src, &seq, true)?;
            let target = out.join(format!("{stem}_loop.png"));
            data::batch_image(&y, 0).save(&target)?;
            println!("{} (loop L1 to input {:.5})", target.display(), objective::loop_loss(&x, &y)?);
        }
    }
    Ok(())
}

fn evaluate(c: &Common, a: &EvaluateArgs) -> Result<()> {
    let out = require_out(c)?;
    let (gen, seq, manifest) = checkpoint::load_generator::<f32>(&a.checkpoint)?;
    let classifier = match (&a.classifier, a.fit_classifier, a.grid_only) {
        (Some(dir), _, _) => Some(DomainClassifier::load(dir)?),
        (None, false, false) => {
            return Err(Error::Config(
                "translation accuracy needs a domain classifier: pass --classifier DIR, or --fit-classifier to train one first".into(),
            ))
        }
        _ => None,
    };
    let all = match (&a.data, &c.config) {
        (Some(root), _) => data::load_domain_folders(root, &seq, checkpoint_resolution(&manifest))?.domains,
        (None, Some(_)) => load_config(c)?.datasets()?,
        (None, None) => return Err(Error::Config("evaluate needs --data or --config".into())),
    };
    let test: Vec<DomainDataset> = all.iter().map(|d| d.split(Split::Test)).collect();
    if let Some(d) = test.iter().find(|d| d.is_empty()) {
        return Err(Error::Data(format!("held-out split of domain {:?} is empty", d.name)));
    }
    fs::create_dir_all(out).at(out)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).at(&p)
    };

    let inputs: Vec<_> = test
        .iter()
        .map(|d| Ok((d.batch::<f32>(&[0])?, d.domain)))
        .collect::<Result<_>>()?;
    eval::emit_sequence_grid(&gen, &inputs, &seq, a.loop_column, &out.join("grid.png"))?;
    println!("{}", out.join("grid.png").display());
    if a.grid_only {
        return Ok(());
    }

    let loop_report = eval::loop_reconstruction_error(&gen, &test, &seq)?;
    let mut csv = String::from("domain,loop_l1\n");
    for (name, v) in seq.names().iter().zip(&loop_report.per_domain) {
        csv += &format!("{name},{v}\n");
    }
    csv += &format!("all,{}\n", loop_report.overall);
    write("loop.csv", csv)?;
    println!("held-out loop L1: {:.5}", loop_report.overall);

    let clf = match classifier {
        Some(clf) => clf,
        None => {
            let train: Vec<DomainDataset> = all.iter().map(|d| d.split(Split::Train)).collect();
            let mut ccfg = match &c.config {
                Some(_) => load_config(c)?.classifier,
                None => ClassifierConfig::default(),
            };
            if let Some(s) = c.seed {
                ccfg.seed = s;
            }
            let clf = eval::fit_domain_classifier(&train, &test, &seq, &ccfg)?;
            clf.save(&out.join("classifier"))?;
            clf
        }
    };
    println!("classifier held-out accuracy: {:.4}", clf.test_accuracy);
    let scores = eval::score_translations(&gen, &clf, &test, &seq)?;
    let acc = eval::AccuracyMatrix::from_scores(&scores);
    let dist = eval::DistributionReport::from_scores(&scores);
    write("accuracy.csv", acc.to_csv())?;
    write("histograms.csv", acc.histograms_csv())?;
    let mut csv = String::from("domain,tv\n");
    for d in &dist.domains {
        csv += &format!("{},{}\n", d.domain, d.tv);
    }
    write("distribution.csv", csv)?;
    println!("mean off-diagonal translation accuracy: {:.4}", acc.mean_off_diagonal());
    for d in &dist.domains {
        println!("TV real vs generated [{}]: {:.4}", d.domain, d.tv);
    }
    Ok(())
}

fn print_counts(title: &str, counts: &ParamCount) {
    println!("{title}");
    for (layer, n) in &counts.layers {
        println!("  {layer:<28} {n:>12}");
    }
    println!("  {:<28} {:>12}", "total", counts.total);
}

fn inspect(c: &Common, a: &InspectArgs) -> Result<()> {
    let (gen, dset, manifest) = match &a.checkpoint {
        Some(dir) => {
            let t = checkpoint::load_trainer::<f32>(dir)?;
            (t.gen, t.dset, Some(checkpoint::read_manifest(dir)?))
        }
        None => {
            let arch = match &c.config {
                Some(_) => load_config(c)?.arch,
                None => ArchConfig::default(),
            };
            let seq = SequenceSpec::lettered(a.domains)?;
            let seed = c.seed.unwrap_or(0);
            let gen = Generator::<f32>::new(&arch, &seq, &mut rng::stream(seed, "generator", 0))?;
            let dset = DiscriminatorSet::<f32>::new(&arch, &seq, seed)?;
            (gen, dset, None)
        }
    };
    let g = gen.count_parameters();
    let d = dset.count_parameters();
    if a.json {
        let v = serde_json::json!({
            "generator": g,
            "discriminators": d,
            "total": g.total + d.total,
            "manifest": manifest,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    if let Some(m) = &manifest {
        println!("sequence: {}", m.sequence.names().join(" -> "));
        println!("epoch {}, iteration {}, seed {}", m.epoch, m.iteration, m.seed);
    }
    print_counts("generator", &g);
    print_counts("discriminators", &d);
    println!("total parameters: {}", g.total + d.total);
    Ok(())
}

fn synth(c: &Common, a: &SynthArgs) -> Result<()> {
    let out = require_out(c)?;
    let spec = SynthSpec {
        kind: a.kind.parse::<SynthKind>()?,
        n_domains: a.domains,
        per_domain: a.per_domain,
        resolution: a.resolution,
        seed: c.seed.unwrap_or(0),
    };
    spec.validate()?;
    let sets = data::generate_synthetic(&spec)?;
    let m = data::write_dataset(out, &spec.sequence()?, &sets, Some(&spec))?;
    println!("wrote {} images per domain for {} to {}", a.per_domain, m.sequence.names().join(", "), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["loopgan", "frobnicate"]), 1);
        assert_eq!(run(["loopgan", "train", "--lambda-loop", "-1"]), 1);
        assert_eq!(run(["loopgan", "train", "--config", "/nonexistent.json"]), 1);
        assert_eq!(run(["loopgan", "inspect", "--device", "tpu"]), 1);
        assert_eq!(run(["loopgan", "--help"]), 0);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let bad = r#"{"data": {"synth": {"kind": "hue-cycle", "n_domains": 2, "per_domain": 1, "resolution": 8, "seed": 0}}, "lamda": 3}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let good = r#"{"data": {"synth": {"kind": "hue-cycle", "n_domains": 2, "per_domain": 1, "resolution": 8, "seed": 0}}}"#;
        let cfg: RunConfig = serde_json::from_str(good).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sequence().unwrap().n(), 2);
    }
}
