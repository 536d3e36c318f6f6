//! Index algebra of a domain cycle: successors, step distances and the
//! per-start translation schedule used for the loop term.
//!
//! ```text
//! cargo run --example loop_schedule -- 4
//! cargo run --example loop_schedule -- Spring Summer Fall Winter
//! ```

use anyhow::Result;
use loopgan::seq::{self, SequenceSpec};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spec = match args.as_slice() {
        [] => SequenceSpec::lettered(4)?,
        [n] if n.parse::<usize>().is_ok() => SequenceSpec::lettered(n.parse()?)?,
        names => SequenceSpec::new(names.iter().cloned())?,
    };
    let n = spec.n();
    println!("{n} domains: {}", spec.names().join(" -> "));

    println!("\nsuccessor");
    for i in spec.steps() {
        println!("  {} -> {}", spec.name(i), spec.name(seq::advance(i, &spec)?));
    }

    println!("\nstep distance (row = source, column = target; diagonal is the full loop)");
    print!("{:>8}", "");
    for j in spec.steps() {
        print!("{:>8}", spec.name(j));
    }
    println!();
    for i in spec.steps() {
        print!("{:>8}", spec.name(i));
        for j in spec.steps() {
            print!("{:>8}", seq::step_distance(i, j, &spec, i == j)?);
        }
        println!();
    }

    println!("\nloop schedule");
    for path in seq::loop_schedule(&spec) {
        let names: Vec<&str> = path.iter().map(|&i| spec.name(i)).collect();
        println!("  {}", names.join(" -> "));
    }
    println!("\nper iteration: {n} loops, {} generated images, {n} fakes per discriminator", n * n);
    Ok(())
}
