//! Closed-form values of the loop, discriminator and generator losses in
//! both adversarial modes, and the learning-rate schedule.
//!
//! ```text
//! cargo run --example losses
//! ```

use anyhow::Result;
use loopgan::model::ImageBatch;
use loopgan::objective::{self, GanMode, TrainConfig};
use loopgan::Tensor;

fn full(v: f64) -> Tensor<f64> {
    Tensor::from_vec(&[2, 1, 4, 4], vec![v; 32]).expect("shape matches")
}

fn image(v: f64) -> Result<ImageBatch<f64>> {
    Ok(ImageBatch::new(Tensor::from_vec(&[1, 3, 8, 8], vec![v; 192])?)?)
}

fn main() -> Result<()> {
    let ones = image(1.0)?;
    println!("loop L1, x == x_loop        {}", objective::loop_loss(&ones, &ones)?);
    println!("loop L1, +1 vs -1           {}", objective::loop_loss(&ones, &image(-1.0)?)?);

    let ls = GanMode::LeastSquares;
    let log = GanMode::NonsaturatingLog;
    // Logits of 0 put the logistic at 0.5.
    println!("D, least squares, 1 / 0     {}", objective::adversarial_loss_d(&full(1.0), &full(0.0), ls));
    println!("D, least squares, .5 / .5   {}", objective::adversarial_loss_d(&full(0.5), &full(0.5), ls));
    println!("D, log, sigmoid .5 / .5     {:.4}", objective::adversarial_loss_d(&full(0.0), &full(0.0), log));
    println!("G, least squares, fake 1    {}", objective::adversarial_loss_g(&full(1.0), ls));
    println!("G, least squares, fake 0    {}", objective::adversarial_loss_g(&full(0.0), ls));
    println!("G, log, sigmoid .5          {:.4}", objective::adversarial_loss_g(&full(0.0), log));

    let cfg = TrainConfig {
        epochs_flat: 50,
        epochs_decay: 10,
        ..TrainConfig::default()
    };
    println!("\nlearning rate (50 flat + 10 decay)");
    for epoch in [0, 49, 50, 55, 59, 60, 70] {
        println!("  epoch {epoch:>2}: {:.6}", objective::lr_schedule(epoch, &cfg));
    }
    Ok(())
}
