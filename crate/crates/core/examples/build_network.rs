//! Builds the preset networks, counts their parameters and classifies a
//! batch with freshly initialized weights.

use lsanet::network::{Network, NetworkConfig};
use lsanet::pipeline::{synth_dataset, SyntheticOptions};

fn main() -> lsanet::Result<()> {
    for (name, config) in [
        ("toy", NetworkConfig::toy()),
        ("desk", NetworkConfig::desk()),
        ("modelnet40", NetworkConfig::modelnet40()),
    ] {
        let net = Network::new(config)?;
        let params = net.init_params::<f32>(0)?;
        let count = Network::count_parameters(&params);
        println!("{name:<11} {:>9} parameters, feature width {}", count.total, net.feature_width());
    }

    let (_, test) = synth_dataset::<f32>(&SyntheticOptions {
        n_train: 4,
        n_test: 8,
        ..Default::default()
    })?;
    let net = Network::new(NetworkConfig::desk())?;
    let params = net.init_params::<f32>(1)?;
    let logits = net.infer_logits(&params, &test)?;
    println!("logits {:?}", logits.shape());
    println!("untrained predictions {:?}", net.predict(&params, &test, 4)?);
    println!("{}", net.config().to_json());
    Ok(())
}
