//! Where training and test clouds come from.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::off::load_off_dir;
use super::synthetic::{synth_dataset, SyntheticOptions};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticOptions),
    /// `root/<class>/{train,test}/*.off`. Without split directories every
    /// mesh lands in both splits.
    Off { root: PathBuf, n_points: usize, seed: u64 },
}

pub struct Splits<T> {
    pub train: Vec<PointCloud<T>>,
    pub test: Vec<PointCloud<T>>,
    pub classes: Vec<String>,
}

fn in_split(path: &Path, split: &str) -> bool {
    path.components().any(|c| matches!(c, Component::Normal(s) if s == split))
}

impl DataSource {
    /// `"synthetic"` (default options with `seed`) or a mesh directory.
    pub fn parse(spec: &str, n_points: usize, seed: u64) -> Result<Self> {
        if spec == "synthetic" {
            return Ok(DataSource::Synthetic(SyntheticOptions {
                n_points,
                seed,
                ..Default::default()
            }));
        }
        let root = PathBuf::from(spec);
        if !root.is_dir() {
            return Err(Error::Invalid(format!("`{spec}` is neither `synthetic` nor a directory")));
        }
        Ok(DataSource::Off { root, n_points, seed })
    }

    pub fn load(&self) -> Result<Splits<f32>> {
        match self {
            DataSource::Synthetic(opts) => {
                let (train, test) = synth_dataset(opts)?;
                Ok(Splits {
                    train,
                    test,
                    classes: super::synthetic::ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
                })
            }
            DataSource::Off { root, n_points, seed } => {
                let d = load_off_dir::<f32>(root, *n_points, *seed)?;
                let pick = |split: &str| -> Vec<PointCloud<f32>> {
                    d.clouds
                        .iter()
                        .zip(&d.files)
                        .filter(|(_, f)| in_split(f.strip_prefix(root).unwrap_or(f), split))
                        .map(|(c, _)| c.clone())
                        .collect()
                };
                let (train, test) = (pick("train"), pick("test"));
                let (train, test) = if train.is_empty() && test.is_empty() {
                    (d.clouds.clone(), d.clouds.clone())
                } else {
                    (train, test)
                };
                Ok(Splits {
                    train,
                    test,
                    classes: d.classes,
                })
            }
        }
    }
}
