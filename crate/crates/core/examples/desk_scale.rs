//! Desk-scale training run on the hue-cycle synthetic dataset.
//!
//! Trains the default architecture on four hue-rotated domains and records
//! the held-out loop error along the way:
//!
//! ```text
//! cargo run --release --example desk_scale -- --out runs/hue_cycle
//! cargo run --release --example desk_scale -- --out runs/hue_cycle --resume
//! ```
//!
//! Outputs under `--out`: `loss_history.csv`, `heldout_loop.csv`,
//! `checkpoints/epoch_XXXX/`, `final/` and `run.json`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use loopgan::checkpoint;
use loopgan::data::{self, DomainDataset, SynthKind, SynthSpec};
use loopgan::eval;
use loopgan::objective::{self, FitCallback, FitOptions, IterationRecord, TrainConfig, Trainer};
use loopgan::{ArchConfig, SequenceSpec};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "runs/hue_cycle")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    per_domain: usize,
    /// Size of the separately generated held-out set per domain.
    #[arg(long, default_value_t = 50)]
    heldout: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 30)]
    epochs_flat: usize,
    #[arg(long, default_value_t = 10)]
    epochs_decay: usize,
    #[arg(long, default_value_t = 5)]
    checkpoint_every: usize,
    /// Stop after this many iterations (timing and smoke runs).
    #[arg(long)]
    max_iterations: Option<u64>,
    /// Continue from the newest checkpoint under `--out/checkpoints`.
    #[arg(long)]
    resume: bool,
}

/// Evaluates the held-out loop error at each quarter of the first and last
/// epochs and at every epoch end.
struct HeldOut {
    sets: Vec<DomainDataset>,
    spec: SequenceSpec,
    per_epoch: u64,
    total_epochs: usize,
    csv: fs::File,
    last: Option<u64>,
    started: Instant,
}

impl HeldOut {
    fn record(&mut self, trainer: &Trainer<f32>, epoch: usize) -> loopgan::Result<()> {
        if self.last == Some(trainer.iteration) {
            return Ok(());
        }
        let r = eval::loop_reconstruction_error(&trainer.gen, &self.sets, &self.spec)?;
        writeln!(self.csv, "{},{},{}", trainer.iteration, epoch, r.overall).ok();
        self.csv.flush().ok();
        log::info!(
            "iteration {} epoch {} held-out loop L1 {:.5} ({:.0}s)",
            trainer.iteration,
            epoch,
            r.overall,
            self.started.elapsed().as_secs_f64()
        );
        self.last = Some(trainer.iteration);
        Ok(())
    }
}

impl FitCallback<f32> for HeldOut {
    fn on_iteration(&mut self, trainer: &Trainer<f32>, rec: &IterationRecord) -> loopgan::Result<()> {
        let within = rec.iteration - rec.epoch as u64 * self.per_epoch;
        let quarter = (self.per_epoch / 4).max(1);
        if (rec.epoch == 0 || rec.epoch + 1 == self.total_epochs) && within % quarter == 0 {
            self.record(trainer, rec.epoch)?;
        }
        if rec.iteration % 50 == 0 {
            log::info!(
                "iteration {} lr {:.2e} adv_g {:.4} loop {:.4} total_g {:.4}",
                rec.iteration,
                rec.lr,
                rec.losses.adv_g,
                rec.losses.loop_.iter().sum::<f64>() / rec.losses.loop_.len() as f64,
                rec.losses.total_g
            );
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, trainer: &Trainer<f32>) -> loopgan::Result<()> {
        self.record(trainer, trainer.epoch - 1)
    }
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

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let train_spec = SynthSpec {
        kind: SynthKind::HueCycle,
        n_domains: 4,
        per_domain: args.per_domain,
        resolution: args.resolution,
        seed: args.seed,
    };
    let heldout_spec = SynthSpec {
        per_domain: args.heldout,
        seed: args.seed + 1,
        ..train_spec.clone()
    };
    let spec = train_spec.sequence()?;
    let train = data::generate_synthetic(&train_spec)?;
    let heldout = data::generate_synthetic(&heldout_spec)?;
    let cfg = TrainConfig {
        lambda_loop: 10.0,
        learning_rate: 2e-4,
        epochs_flat: args.epochs_flat,
        epochs_decay: args.epochs_decay,
        batch_size: 1,
        seed: args.seed,
        ..TrainConfig::default()
    };
    fs::create_dir_all(&args.out)?;
    let mut trainer = match args.resume.then(|| latest_checkpoint(&args.out)).flatten() {
        Some(dir) => {
            log::info!("resuming from {}", dir.display());
            checkpoint::load_trainer::<f32>(&dir)?
        }
        None => Trainer::<f32>::new(&spec, &ArchConfig::default(), &cfg)?,
    };
    let run = serde_json::json!({
        "train_data": train_spec,
        "heldout_data": heldout_spec,
        "train": cfg,
        "arch": trainer.arch,
        "augment": true,
    });
    fs::write(args.out.join("run.json"), serde_json::to_string_pretty(&run)?)?;

    let csv_path = args.out.join("heldout_loop.csv");
    let fresh = trainer.iteration == 0;
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&csv_path)
        .with_context(|| csv_path.display().to_string())?;
    if fresh {
        writeln!(csv, "iteration,epoch,loop_l1")?;
    }
    let mut cb = HeldOut {
        sets: heldout,
        spec: spec.clone(),
        per_epoch: objective::iterations_per_epoch(&train, cfg.batch_size) as u64,
        total_epochs: cfg.total_epochs(),
        csv,
        last: None,
        started: Instant::now(),
    };
    if fresh {
        cb.record(&trainer, 0)?;
    }
    let opts = FitOptions {
        augment: true,
        out_dir: Some(args.out.clone()),
        checkpoint_every: args.checkpoint_every,
        max_iterations: args.max_iterations,
    };
    let t0 = Instant::now();
    let done_before = trainer.iteration;
    objective::fit(&mut trainer, &train, &opts, &mut cb)?;
    let steps = trainer.iteration - done_before;
    if steps > 0 {
        log::info!("{steps} iterations, {:.3}s per iteration", t0.elapsed().as_secs_f64() / steps as f64);
    }
    Ok(())
}
