//! Score a finished `desk_scale` run: held-out loop error curve, a domain
//! classifier, the translation accuracy matrix, real-vs-generated TV
//! distances and a sequence grid.
//!
//! ```text
//! cargo run --release --example evaluate_run -- --run runs/hue_cycle
//! cargo run --release --example evaluate_run -- --run runs/hue_cycle --write-bars
//! ```
//!
//! Writes `report.json`, `accuracy.csv`, `histograms.csv`, `grid.png` and
//! the classifier under `<run>/report/`. With `--write-bars` the pass bars
//! derived from this run go to `<run>/bars.json`. `--export DIR` copies what
//! is needed to re-score the run (weights without optimizer state,
//! classifier, curves, bars, report) into `DIR`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;
use loopgan::checkpoint;
use loopgan::data::{self, SynthSpec};
use loopgan::eval::{self, ClassifierConfig, DomainClassifier};
use serde::Deserialize;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "runs/hue_cycle")]
    run: PathBuf,
    /// Checkpoint to score; `<run>/final` by default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reuse a saved classifier instead of training one.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    write_bars: bool,
    /// Slack added to the measured TV distance to form its bar.
    #[arg(long, default_value_t = 0.05)]
    tv_slack: f64,
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RunInfo {
    train_data: SynthSpec,
    heldout_data: SynthSpec,
}

struct Point {
    epoch: usize,
    loop_l1: f64,
}

fn read_curve(path: &std::path::Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            // iteration,epoch,loop_l1
            let f: Vec<&str> = l.split(',').collect();
            Ok(Point {
                epoch: f[1].parse()?,
                loop_l1: f[2].parse()?,
            })
        })
        .collect()
}

/// Mean of the `loop_*` columns over the last epoch of `loss_history.csv`.
fn training_loop_loss(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let epoch_col = header.iter().position(|h| *h == "epoch").context("no epoch column")?;
    let loop_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("loop_")).collect();
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.parse::<f64>()).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let last = rows.iter().map(|r| r[epoch_col]).fold(f64::MIN, f64::max);
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r[epoch_col] == last)
        .flat_map(|r| loop_cols.iter().map(move |&c| r[c]))
        .collect();
    anyhow::ensure!(!vals.is_empty(), "no loop columns in {}", path.display());
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn mean_of(points: &[&Point]) -> f64 {
    points.iter().map(|p| p.loop_l1).sum::<f64>() / points.len().max(1) as f64
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let info: RunInfo = serde_json::from_str(&fs::read_to_string(a.run.join("run.json"))?)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join("final"));
    let (gen, spec, manifest) = checkpoint::load_generator::<f32>(&ckpt)?;
    let out = a.run.join("report");
    fs::create_dir_all(&out)?;

    let curve = read_curve(&a.run.join("heldout_loop.csv"))?;
    let last_epoch = curve.iter().map(|p| p.epoch).max().unwrap_or(0);
    let first: Vec<&Point> = curve.iter().filter(|p| p.epoch == 0).collect();
    let last: Vec<&Point> = curve.iter().filter(|p| p.epoch == last_epoch).collect();
    let (first_avg, final_avg) = (mean_of(&first), mean_of(&last));
    println!(
        "held-out loop L1: first epoch {first_avg:.5} ({} points), epoch {last_epoch} {final_avg:.5} ({} points), ratio {:.2}",
        first.len(),
        last.len(),
        first_avg / final_avg
    );

    let train = data::generate_synthetic(&info.train_data)?;
    let heldout = data::generate_synthetic(&info.heldout_data)?;
    let loop_report = eval::loop_reconstruction_error(&gen, &heldout, &spec)?;
    println!("held-out loop L1 of the scored checkpoint: {:.5}", loop_report.overall);
    let train_loop = training_loop_loss(&a.run.join("loss_history.csv"))?;
    let consistency = loop_report.overall / train_loop;
    println!(
        "training loop loss over the last epoch {train_loop:.5}, held-out/training {consistency:.2} ({})",
        if (0.5..=2.0).contains(&consistency) { "within 2x" } else { "outside 2x" }
    );

    let clf = match &a.classifier {
        Some(dir) => DomainClassifier::load(dir)?,
        None => {
            let cfg = ClassifierConfig {
                seed: info.train_data.seed,
                ..ClassifierConfig::default()
            };
            let clf = eval::fit_domain_classifier(&train, &heldout, &spec, &cfg)?;
            clf.save(&out.join("classifier"))?;
            clf
        }
    };
    println!("classifier held-out accuracy {:.4}", clf.test_accuracy);

    let scores = eval::score_translations(&gen, &clf, &heldout, &spec)?;
    let acc = eval::AccuracyMatrix::from_scores(&scores);
    let dist = eval::DistributionReport::from_scores(&scores);
    fs::write(out.join("accuracy.csv"), acc.to_csv())?;
    fs::write(out.join("histograms.csv"), acc.histograms_csv())?;
    println!("mean off-diagonal accuracy {:.4}", acc.mean_off_diagonal());
    for d in &dist.domains {
        println!("TV [{}] {:.4}", d.domain, d.tv);
    }

    let inputs = heldout
        .iter()
        .map(|d| Ok((d.batch::<f32>(&[0])?, d.domain)))
        .collect::<loopgan::Result<Vec<_>>>()?;
    eval::emit_sequence_grid(&gen, &inputs, &spec, true, &out.join("grid.png"))?;

    let report = serde_json::json!({
        "checkpoint": { "epoch": manifest.epoch, "iteration": manifest.iteration },
        "heldout_loop": {
            "first_epoch_avg": first_avg,
            "final_epoch_avg": final_avg,
            "final_epoch": last_epoch,
            "ratio": first_avg / final_avg,
        },
        "loop": loop_report,
        "training_loop_loss": train_loop,
        "heldout_over_training_loop": consistency,
        "classifier_test_accuracy": clf.test_accuracy,
        "accuracy_matrix": acc.values,
        "mean_off_diagonal_accuracy": acc.mean_off_diagonal(),
        "distribution": dist,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    if a.write_bars {
        let bars = serde_json::json!({
            "loop_ratio_min": 5.0,
            "mean_off_diagonal_accuracy_min": 0.8,
            "tv_max": dist.max_tv() + a.tv_slack,
            "measured": {
                "loop_ratio": first_avg / final_avg,
                "mean_off_diagonal_accuracy": acc.mean_off_diagonal(),
                "max_tv": dist.max_tv(),
                "classifier_test_accuracy": clf.test_accuracy,
            },
        });
        fs::write(a.run.join("bars.json"), serde_json::to_string_pretty(&bars)?)?;
        println!("bars written to {}", a.run.join("bars.json").display());
    }
    if let Some(dir) = &a.export {
        export(&a.run, &ckpt, &out, &clf, dir)?;
    }
    Ok(())
}

fn export(run: &Path, ckpt: &Path, report: &Path, clf: &DomainClassifier, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let trainer = checkpoint::load_trainer::<f32>(ckpt)?;
    let extra = checkpoint::read_manifest(ckpt)?.extra;
    checkpoint::save_trainer_with(&trainer, &dir.join("final"), false, extra)?;
    clf.save(&dir.join("classifier"))?;
    for f in ["run.json", "heldout_loop.csv", "loss_history.csv", "bars.json"] {
        fs::copy(run.join(f), dir.join(f)).with_context(|| run.join(f).display().to_string())?;
    }
    for f in ["report.json", "accuracy.csv", "histograms.csv", "grid.png"] {
        fs::copy(report.join(f), dir.join(f)).with_context(|| report.join(f).display().to_string())?;
    }
    println!("exported to {}", dir.display());
    Ok(())
}
