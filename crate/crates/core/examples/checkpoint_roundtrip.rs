//! Save a trainer to the manifest + raw-array format, list what was
//! written, load it back and confirm the round trip is bit-exact.
//!
//! ```text
//! cargo run --example checkpoint_roundtrip -- /tmp/ckpt
//! ```

use std::path::PathBuf;

use anyhow::{ensure, Result};
use loopgan::checkpoint;
use loopgan::objective::{TrainConfig, Trainer};
use loopgan::{ArchConfig, SequenceSpec};

fn main() -> Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("loopgan_ckpt"));
    let spec = SequenceSpec::new(["spring", "summer", "fall", "winter"])?;
    let trainer = Trainer::<f32>::new(&spec, &ArchConfig::default(), &TrainConfig::default())?;
    checkpoint::save_trainer(&trainer, &dir, true)?;

    let manifest = checkpoint::read_manifest(&dir)?;
    let bytes: usize = manifest.arrays.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    println!(
        "{}: schema {}, kind {}, {} arrays, {:.1} MB",
        dir.display(),
        manifest.schema_version,
        manifest.kind,
        manifest.arrays.len(),
        bytes as f64 / 1e6
    );
    for e in manifest.arrays.iter().take(5) {
        println!("  {:<32} {:?}", e.name, e.shape);
    }

    let back = checkpoint::load_trainer::<f32>(&dir)?;
    ensure!(back.gen.store().tensors() == trainer.gen.store().tensors(), "generator differs");
    for (x, y) in back.dset.members().iter().zip(trainer.dset.members()) {
        ensure!(x.store().tensors() == y.store().tensors(), "discriminator differs");
    }
    ensure!(back.gen_opt == trainer.gen_opt, "optimizer state differs");
    println!("reloaded bit-exactly");
    Ok(())
}
