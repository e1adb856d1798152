//! Synthetic four-class shape data: sphere, cube surface, torus, disk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, Point, PointCloud};
use crate::seeds;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
    Plane,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus, ShapeClass::Plane];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Torus => "torus",
            ShapeClass::Plane => "plane",
        }
    }
}

pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub class: ShapeClass,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Uniform surface samples, before noise and normalization.
pub fn sample_surface<R: Rng>(class: ShapeClass, n: usize, rng: &mut R) -> Vec<Point<f64>> {
    (0..n)
        .map(|_| match class {
            ShapeClass::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-12 {
                    break [v[0] / norm, v[1] / norm, v[2] / norm];
                }
            },
            ShapeClass::Cube => {
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            ShapeClass::Torus => loop {
                // area element is proportional to R + r cos(phi)
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let accept = rng.random_range(0.0..1.0) * (TORUS_MAJOR + TORUS_MINOR);
                if accept <= TORUS_MAJOR + TORUS_MINOR * phi.cos() {
                    let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                    break [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()];
                }
            },
            ShapeClass::Plane => {
                let r = rng.random_range(0.0f64..1.0).sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin(), 0.0]
            }
        })
        .collect()
}

/// One labelled, noisy, unit-sphere-normalized cloud.
pub fn synth_cloud<T: Scalar>(spec: &SyntheticShapeSpec) -> Result<PointCloud<T>> {
    if spec.n_points < 64 {
        return Err(Error::Invalid(format!("synthetic clouds need >= 64 points, got {}", spec.n_points)));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Invalid(format!("noise sigma {} must be non-negative", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pts = sample_surface(spec.class, spec.n_points, &mut rng);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let cloud = PointCloud::new(pts)?.with_label(spec.class.label());
    let normalized = normalize_unit_sphere(&cloud);
    Ok(PointCloud {
        coords: normalized.coords.iter().map(|p| p.map(T::lit)).collect(),
        features: None,
        label: normalized.label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            n_train: 512,
            n_test: 128,
            n_points: 1024,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Train and test clouds.
pub type TrainTest<T> = (Vec<PointCloud<T>>, Vec<PointCloud<T>>);

/// Class-balanced train and test splits; cloud `i` of a split has label `i mod 4`.
pub fn synth_dataset<T: Scalar>(opts: &SyntheticOptions) -> Result<TrainTest<T>> {
    let classes = ShapeClass::ALL.len();
    if !opts.n_train.is_multiple_of(classes) || !opts.n_test.is_multiple_of(classes) {
        return Err(Error::Invalid(format!(
            "split sizes must be multiples of {classes} to stay balanced"
        )));
    }
    let split = |purpose: &str, n: usize| -> Result<Vec<PointCloud<T>>> {
        (0..n)
            .map(|i| {
                synth_cloud(&SyntheticShapeSpec {
                    class: ShapeClass::ALL[i % classes],
                    n_points: opts.n_points,
                    noise_sigma: opts.noise_sigma,
                    seed: seeds::derive(opts.seed, purpose, 0, i as u64),
                })
            })
            .collect()
    };
    Ok((split("synth-train", opts.n_train)?, split("synth-test", opts.n_test)?))
}
