//! Parameter accounting for the default architecture, checked against a
//! layer-by-layer closed form and set next to the reference LoopGAN total
//! of 11.008 M.
//!
//! ```text
//! cargo run --example param_count -- 4
//! ```

use anyhow::{ensure, Result};
use loopgan::{rng, ArchConfig, DiscriminatorSet, Generator, SequenceSpec};

const REFERENCE_TOTAL: f64 = 11.008e6;

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn generator_closed_form(n: usize) -> usize {
    let encoder = conv(7, 3, 32) + conv(3, 32, 64) + conv(3, 64, 128);
    let trunk = 6 * 2 * conv(3, 128, 128);
    let adain = n * 6 * 2 * 128 * 2;
    // Upsampling layers carry a per-channel scale and shift of their norm.
    let decoder = conv(3, 128, 128) + 2 * 128 + conv(3, 128, 64) + 2 * 64 + conv(7, 64, 3);
    encoder + trunk + adain + decoder
}

fn discriminator_closed_form() -> usize {
    conv(4, 3, 64) + conv(4, 64, 128) + conv(4, 128, 256) + conv(4, 256, 1)
}

fn main() -> Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let spec = SequenceSpec::lettered(n)?;
    let arch = ArchConfig::default();
    let gen = Generator::<f32>::new(&arch, &spec, &mut rng::stream(0, "generator", 0))?;
    let dset = DiscriminatorSet::<f32>::new(&arch, &spec, 0)?;
    let g = gen.count_parameters();
    let d = dset.count_parameters();

    for (layer, count) in &g.layers {
        println!("{layer:<24} {count:>10}");
    }
    let (g_oracle, d_oracle) = (generator_closed_form(n), n * discriminator_closed_form());
    println!("generator      {:>10} (closed form {g_oracle})", g.total);
    println!("discriminators {:>10} (closed form {d_oracle}, {} each)", d.total, discriminator_closed_form());
    ensure!(g.total == g_oracle && d.total == d_oracle, "count_parameters disagrees with the closed form");

    let total = g.total + d.total;
    println!(
        "total {:.3} M vs reference {:.3} M ({:+.1}%)",
        total as f64 / 1e6,
        REFERENCE_TOTAL / 1e6,
        100.0 * (total as f64 - REFERENCE_TOTAL) / REFERENCE_TOTAL
    );
    Ok(())
}
