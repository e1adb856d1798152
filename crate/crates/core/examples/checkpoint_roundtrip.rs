//! Saves a checkpoint mid-run, reloads it, and shows that the forward pass
//! and the next epoch reproduce exactly.

use lsanet::network::NetworkConfig;
use lsanet::pipeline::{synth_dataset, Model, SyntheticOptions, TrainOptions, Trainer, CHECKPOINT_FILE};

fn main() -> lsanet::Result<()> {
    let dir = std::env::temp_dir().join("lsanet-roundtrip");
    let (train, test) = synth_dataset::<f32>(&SyntheticOptions {
        n_train: 64,
        n_test: 8,
        ..Default::default()
    })?;
    let options = TrainOptions {
        epochs: 1,
        ..Default::default()
    };
    let mut a = Trainer::new(NetworkConfig::desk(), 5, options, Some(dir.clone()))?;
    a.run(&train, &[])?;
    let ckpt = dir.join(CHECKPOINT_FILE);

    let (loaded, _) = Model::load(&ckpt)?;
    let before = a.model.network.infer_logits(&a.model.params, &test)?;
    let after = loaded.network.infer_logits(&loaded.params, &test)?;
    println!("reloaded logits identical: {}", before.data() == after.data());

    let mut b = Trainer::resume(&ckpt, None)?;
    a.options.epochs = 2;
    b.options.epochs = 2;
    let la = a.train_epoch(&train)?.loss;
    let lb = b.train_epoch(&train)?.loss;
    println!("next epoch loss: original {la:.10}, resumed {lb:.10}, identical: {}", la.to_bits() == lb.to_bits());
    Ok(())
}
