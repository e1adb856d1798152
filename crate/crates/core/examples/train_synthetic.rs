//! Trains the reduced network on the synthetic four-class shapes.
//!
//! `cargo run --release --example train_synthetic -- [epochs] [seed]`

use lsanet::network::NetworkConfig;
use lsanet::pipeline::{synth_dataset, SyntheticOptions, TrainOptions, Trainer};

fn main() -> lsanet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(20, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));

    let (train, test) = synth_dataset::<f32>(&SyntheticOptions {
        seed,
        ..Default::default()
    })?;
    let options = TrainOptions {
        epochs,
        target_accuracy: Some(0.95),
        ..Default::default()
    };
    let mut trainer = Trainer::new(NetworkConfig::desk(), seed, options, None)?;
    for r in trainer.run(&train, &test)? {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}  {:.1}s",
            r.epoch,
            r.loss,
            r.train_accuracy,
            r.test.as_ref().map_or(f64::NAN, |m| m.overall_accuracy),
            r.seconds
        );
    }
    Ok(())
}
