//! Decoding time and peak memory with and without a value network.

use deltalogit::cli::bench_models;
use deltalogit::eval::{bench_inference, bench_to_text};
use deltalogit::Result;

fn main() -> Result<()> {
    let lengths = [128, 512, 1024];
    let configs = bench_models(128, 1025)?;
    let rows = bench_inference(&configs, &lengths, 3)?;
    print!("{}", bench_to_text(&rows));
    Ok(())
}
