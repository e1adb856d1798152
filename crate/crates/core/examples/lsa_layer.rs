//! Runs one LSA layer on grouped regions and inspects its spatial features
//! and spatial distribution weights.

use lsanet::geometry::{ball_query_indices, farthest_point_sample};
use lsanet::lsa::{LsaConfig, LsaInput, LsaLayer};
use lsanet::nn::{Ctx, SdwHooks};
use lsanet::pipeline::synthetic::{synth_cloud, ShapeClass, SyntheticShapeSpec};
use lsanet::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lsanet::Result<()> {
    let cloud = synth_cloud::<f64>(&SyntheticShapeSpec {
        class: ShapeClass::Torus,
        n_points: 256,
        noise_sigma: 0.0,
        seed: 1,
    })?;
    let centroids = farthest_point_sample(&cloud.coords, 8)?;
    let g = ball_query_indices(&cloud.coords, &centroids, 0.3, 16)?;
    let rel = g.relative_tensor();

    let layer = LsaLayer::new("demo", LsaConfig::new(3, vec![16, 16, 32]))?;
    let mut params = ParamStore::new();
    layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0))?;

    let mut ctx = Ctx::infer(&params);
    ctx.hooks = SdwHooks {
        freeze: None,
        record: true,
    };
    let out = layer.forward(
        &mut ctx,
        LsaInput {
            rel: &rel,
            valid_counts: Some(&g.valid_counts),
            features: None,
        },
    )?;
    println!("pooled features {:?}", ctx.tape.shape(out.y));
    let record = out.record.expect("recorded");
    let s = record.spatial.expect("spatial feature");
    println!("spatial feature {:?} (per-point half + region half)", s.combined.shape());
    for (level, e) in record.sdw.iter().enumerate() {
        let (lo, hi) = e.data().iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!("SDW level {}: {:?}, range ({lo:.4}, {hi:.4})", level + 1, e.shape());
    }
    Ok(())
}
