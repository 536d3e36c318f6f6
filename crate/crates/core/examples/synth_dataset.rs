//! Generate a synthetic domain cycle and write it in the folder layout
//! (`<root>/<domain>/*.png` plus `manifest.json`).
//!
//! ```text
//! cargo run --release --example synth_dataset -- --kind hue-cycle --out data/hue
//! cargo run --release --example synth_dataset -- --kind rotation-cycle --domains 6 --out data/chairs
//! ```

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use loopgan::data::{self, Split, SynthKind, SynthSpec};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "hue-cycle")]
    kind: SynthKind,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 200)]
    per_domain: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/synthetic")]
    out: PathBuf,
}

fn main() -> Result<()> {
    let a = Args::parse();
    let spec = SynthSpec {
        kind: a.kind,
        n_domains: a.domains,
        per_domain: a.per_domain,
        resolution: a.resolution,
        seed: a.seed,
    };
    let sets = data::generate_synthetic(&spec)?;
    let seq = spec.sequence()?;
    data::write_dataset(&a.out, &seq, &sets, Some(&spec))?;
    for (d, ds) in sets.iter().enumerate() {
        let center = spec.domain_angle(d);
        let measured = match a.kind {
            SynthKind::HueCycle => {
                let hues: Vec<f64> = ds.samples().iter().map(|s| data::mean_hue(&s.image)).collect();
                format!(", mean image hue {:.1} deg", circular_mean(&hues))
            }
            SynthKind::RotationCycle => String::new(),
        };
        println!(
            "{}: {} images ({} train / {} test), center {center:.1} deg{measured}",
            ds.name,
            ds.len(),
            ds.split(Split::Train).len(),
            ds.split(Split::Test).len(),
        );
    }
    println!("fingerprint {}", data::fingerprint(&sets));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn circular_mean(deg: &[f64]) -> f64 {
    let (s, c) = deg.iter().fold((0.0, 0.0), |(s, c), d| (s + d.to_radians().sin(), c + d.to_radians().cos()));
    s.atan2(c).to_degrees().rem_euclid(360.0)
}
