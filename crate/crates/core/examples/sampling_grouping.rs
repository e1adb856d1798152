//! Farthest point sampling and ball-query grouping on a synthetic sphere.

use lsanet::geometry::{ball_query_indices, farthest_point_sample, group_all};
use lsanet::pipeline::synthetic::{synth_cloud, ShapeClass, SyntheticShapeSpec};

fn main() -> lsanet::Result<()> {
    let cloud = synth_cloud::<f64>(&SyntheticShapeSpec {
        class: ShapeClass::Sphere,
        n_points: 512,
        noise_sigma: 0.0,
        seed: 7,
    })?;
    let centroids = farthest_point_sample(&cloud.coords, 16)?;
    println!("FPS picked {centroids:?}");

    let g = ball_query_indices(&cloud.coords, &centroids, 0.4, 24)?;
    for region in 0..4 {
        println!(
            "region {region}: {} of {} slots filled, neighbors {:?}",
            g.valid_counts[region],
            g.k,
            &g.neighbors(region)[..6]
        );
    }
    let all = group_all(&cloud.coords)?;
    println!("group_all: one region of {} points around {:?}", all.k, all.centroids[0]);
    Ok(())
}
