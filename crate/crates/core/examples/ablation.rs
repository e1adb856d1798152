//! Trains every flag configuration on identical data streams and prints the
//! mean test accuracy of each.
//!
//! `cargo run --release --example ablation -- [epochs] [seeds]`

use lsanet::network::{Flags, NetworkConfig};
use lsanet::pipeline::analysis::write_ablation_csv;
use lsanet::pipeline::{run_ablation, synth_dataset, SyntheticOptions, TrainOptions};

fn main() -> lsanet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(2, |a| a.parse().expect("epochs"));
    let n_seeds: u64 = args.next().map_or(3, |a| a.parse().expect("seeds"));

    let (train, test) = synth_dataset::<f32>(&SyntheticOptions::default())?;
    let options = TrainOptions {
        epochs,
        checkpoint_every: 0,
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let rows = run_ablation(&NetworkConfig::desk(), &Flags::ablations(), &seeds, &options, &train, &test)?;
    write_ablation_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
