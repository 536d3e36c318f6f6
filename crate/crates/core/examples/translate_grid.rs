//! Translate images through the domain cycle with a trained checkpoint (or
//! a freshly initialized generator) and render a sequence grid: one row per
//! input, one column per domain, the source cell outlined, and optionally a
//! full-loop column.
//!
//! ```text
//! cargo run --release --example translate_grid -- --checkpoint runs/hue_cycle/final --out grid.png
//! ```

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use loopgan::data::{self, SynthKind, SynthSpec};
use loopgan::{checkpoint, eval, objective, rng, ArchConfig, Generator};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "grid.png")]
    out: PathBuf,
    /// Inputs per source domain.
    #[arg(long, default_value_t = 1)]
    per_domain: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Add a column with the full-loop reconstruction.
    #[arg(long)]
    loop_column: bool,
}

fn main() -> Result<()> {
    let a = Args::parse();
    let synth = SynthSpec {
        kind: SynthKind::HueCycle,
        n_domains: 4,
        per_domain: a.per_domain,
        resolution: a.resolution,
        seed: a.seed,
    };
    let (gen, spec) = match &a.checkpoint {
        Some(dir) => {
            let (g, s, _) = checkpoint::load_generator::<f32>(dir)?;
            (g, s)
        }
        None => {
            let s = synth.sequence()?;
            (Generator::new(&ArchConfig::default(), &s, &mut rng::stream(a.seed, "generator", 0))?, s)
        }
    };
    let sets = data::generate_synthetic(&SynthSpec { n_domains: spec.n(), ..synth })?;

    let mut inputs = Vec::new();
    for ds in &sets {
        for i in 0..ds.len() {
            let x = ds.batch::<f32>(&[i])?;
            let loop_back = gen.translate(&x, ds.domain, ds.domain, &spec, true)?;
            println!("{} #{i}: full-loop L1 {:.4}", ds.name, objective::loop_loss(&x, &loop_back)?);
            inputs.push((x, ds.domain));
        }
    }
    let layout = eval::emit_sequence_grid(&gen, &inputs, &spec, a.loop_column, &a.out)?;
    println!("{}x{} grid written to {}", layout.width, layout.height, a.out.display());
    Ok(())
}
