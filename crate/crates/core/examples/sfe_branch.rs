//! One SFE stage: lift relative coordinates, inject them into the backbone
//! input and pass a pooled state on.

use lsanet::nn::Ctx;
use lsanet::sfe::{inject_spatial, Combine, SfeStage, SfeStageConfig};
use lsanet::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lsanet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (regions, k) = (4, 8);
    let rel = Tensor::from_fn(&[regions, k, 3], |_| rng.random_range(-0.2..0.2));
    let features = Tensor::from_fn(&[regions, k, 16], |_| rng.random_range(0.0..1.0));

    for combine in [Combine::Concat, Combine::ProjectedSum] {
        let stage = SfeStage::new(
            "sfe",
            SfeStageConfig {
                in_dim: 3,
                lift_width: 32,
                forward_width: Some(32),
                combine,
            },
        )?;
        let mut params = ParamStore::<f64>::new();
        stage.init(&mut params, &mut rng)?;
        let mut ctx = Ctx::infer(&params);
        let s = ctx.constant(rel.clone());
        let out = stage.forward(&mut ctx, s)?;
        let x = ctx.constant(features.clone());
        let joined = inject_spatial(&mut ctx.tape, Some(x), out.inject)?;
        println!(
            "{combine:?}: inject {:?}, backbone input {:?}, next state {:?}",
            ctx.tape.shape(out.inject),
            ctx.tape.shape(joined),
            out.next_state.map(|v| ctx.tape.shape(v).to_vec())
        );
    }
    Ok(())
}
