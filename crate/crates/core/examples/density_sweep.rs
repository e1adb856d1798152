//! Trains with random input dropout, then evaluates the same model on
//! sparser inputs and prints the sweep as CSV.
//!
//! `cargo run --release --example density_sweep -- [epochs] [seed]`

use lsanet::network::NetworkConfig;
use lsanet::pipeline::analysis::write_density_csv;
use lsanet::pipeline::{density_sweep, synth_dataset, SyntheticOptions, TrainOptions, Trainer, DENSITY_POINTS};

fn main() -> lsanet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(6, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));

    let (train, test) = synth_dataset::<f32>(&SyntheticOptions {
        seed,
        ..Default::default()
    })?;
    let mut options = TrainOptions {
        epochs,
        ..Default::default()
    };
    options.augment.dropout_max_ratio = 0.875;
    let mut trainer = Trainer::new(NetworkConfig::desk(), seed, options, None)?;
    trainer.run(&train, &test)?;

    let rows = density_sweep(&trainer.model, seed, &test, &DENSITY_POINTS)?;
    write_density_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
