//! Writes the first-level spatial distribution weights of a briefly trained
//! model to CSV for plotting.
//!
//! `cargo run --release --example export_sdw -- [out.csv] [layer]`

use std::fs::File;
use std::io::BufWriter;

use lsanet::network::NetworkConfig;
use lsanet::pipeline::analysis::write_sdw_csv;
use lsanet::pipeline::{export_sdw, synth_dataset, SyntheticOptions, TrainOptions, Trainer};

fn main() -> lsanet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "sdw.csv".into());
    let layer = args.next().map_or(0, |a| a.parse().expect("layer"));

    let (train, test) = synth_dataset::<f32>(&SyntheticOptions {
        n_train: 128,
        n_test: 4,
        ..Default::default()
    })?;
    let options = TrainOptions {
        epochs: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(NetworkConfig::desk(), 0, options, None)?;
    trainer.run(&train, &[])?;

    let rows = export_sdw(&trainer.model, &test[0], layer)?;
    write_sdw_csv(&rows, BufWriter::new(File::create(&out)?))?;
    let (lo, hi) = rows
        .iter()
        .flat_map(|r| &r.weights)
        .fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("{} rows to {out}; weights span ({lo:.4}, {hi:.4})", rows.len());
    Ok(())
}
