//! Density sweeps, SDW export and ablation comparisons.

use std::io::Write;

use serde::Serialize;

use super::train::{eval_seed, Model, TrainOptions, Trainer};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::{Flags, Metrics, NetworkConfig};
use crate::nn::{Ctx, SdwHooks};

pub const DENSITY_POINTS: [usize; 5] = [1024, 512, 256, 128, 64];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub points: usize,
    pub metrics: Metrics,
}

/// Accuracy of one model at several input densities, in request order. Each
/// row uses the same seed as a plain evaluation at that density.
pub fn density_sweep(model: &Model, run_seed: u64, test: &[PointCloud<f32>], counts: &[usize]) -> Result<Vec<DensityRow>> {
    counts
        .iter()
        .map(|&points| {
            if points == 0 {
                return Err(Error::Invalid("point count must be positive".into()));
            }
            let metrics = model.network.evaluate(&model.params, test, points, eval_seed(run_seed))?;
            Ok(DensityRow { points, metrics })
        })
        .collect()
}

pub fn write_density_csv<W: Write>(rows: &[DensityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["points", "overall_accuracy", "mean_class_accuracy", "count"])?;
    for r in rows {
        w.write_record([
            r.points.to_string(),
            r.metrics.overall_accuracy.to_string(),
            r.metrics.mean_class_accuracy.to_string(),
            r.metrics.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdwRow {
    pub region: usize,
    pub slot: usize,
    pub relative: [f64; 3],
    /// First-level weights, one per channel.
    pub weights: Vec<f64>,
}

/// First-level SDWs of one layer for a single cloud, `M·K` rows in region
/// then slot order.
pub fn export_sdw(model: &Model, cloud: &PointCloud<f32>, layer: usize) -> Result<Vec<SdwRow>> {
    let net = &model.network;
    if layer >= net.num_layers() {
        return Err(Error::Invalid(format!(
            "layer {layer} out of range, the network has {}",
            net.num_layers()
        )));
    }
    let mut ctx = Ctx::infer(&model.params);
    ctx.hooks = SdwHooks {
        freeze: None,
        record: true,
    };
    let out = net.forward(&mut ctx, std::slice::from_ref(cloud))?;
    let record = out.records[layer].as_ref().expect("recording was requested");
    let e = record
        .sdw
        .first()
        .ok_or_else(|| Error::Invalid(format!("layer {layer} has no spatial distribution weights")))?;
    let grouping = &out.groupings[layer][0];
    let (m, k, c) = (grouping.regions(), grouping.k, e.shape()[2]);
    let mut rows = Vec::with_capacity(m * k);
    for region in 0..m {
        for slot in 0..k {
            let i = region * k + slot;
            let rel = grouping.relative_coords[i];
            rows.push(SdwRow {
                region,
                slot,
                relative: rel.map(|x| x as f64),
                weights: e.data()[i * c..(i + 1) * c].iter().map(|&x| x as f64).collect(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sdw_csv<W: Write>(rows: &[SdwRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let channels = rows.first().map_or(0, |r| r.weights.len());
    let mut header: Vec<String> = ["region", "slot", "x", "y", "z"].map(String::from).to_vec();
    header.extend((0..channels).map(|c| format!("e{c}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.region.to_string(), r.slot.to_string()];
        rec.extend(r.relative.iter().map(|x| x.to_string()));
        rec.extend(r.weights.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Flags,
    pub seeds: Vec<u64>,
    /// Final test accuracy per seed.
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

/// Trains every flag configuration of `base` for each seed. Data order,
/// augmentation and dropout depend only on the seed, so all configurations
/// see the same batches.
pub fn run_ablation(
    base: &NetworkConfig,
    configs: &[(&str, Flags)],
    seeds: &[u64],
    options: &TrainOptions,
    train: &[PointCloud<f32>],
    test: &[PointCloud<f32>],
) -> Result<Vec<AblationRow>> {
    configs
        .iter()
        .map(|(name, flags)| {
            let accuracies = seeds
                .iter()
                .map(|&seed| {
                    let mut t = Trainer::new(base.clone().with_flags(*flags), seed, options.clone(), None)?;
                    t.run(train, test)?;
                    let last = t.history.last().and_then(|r| r.test.as_ref());
                    match last {
                        Some(m) => Ok(m.overall_accuracy),
                        None => Ok(t.evaluate(test, options.eval_points)?.overall_accuracy),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            log::info!("ablation {name}: {accuracies:?}");
            Ok(AblationRow {
                name: name.to_string(),
                flags: *flags,
                seeds: seeds.to_vec(),
                accuracies,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config",
        "use_sfe",
        "use_lsa",
        "use_region_encoder",
        "use_modulated_pool",
        "mean_accuracy",
        "accuracies",
    ])?;
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        w.write_record([
            r.name.clone(),
            r.flags.use_sfe.to_string(),
            r.flags.use_lsa.to_string(),
            r.flags.use_region_encoder.to_string(),
            r.flags.use_modulated_pool.to_string(),
            format!("{:.4}", r.mean()),
            accs.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clouds(n: usize, points: usize, seed: u64) -> Vec<PointCloud<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let coords = (0..points)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                PointCloud::new(coords).unwrap().with_label(i % 3)
            })
            .collect()
    }

    #[test]
    fn density_rows_echo_request_order() {
        let model = Model::build(NetworkConfig::toy(), 1).unwrap();
        let test = clouds(6, 20, 2);
        let rows = density_sweep(&model, 3, &test, &[12, 20, 8]).unwrap();
        assert_eq!(rows.iter().map(|r| r.points).collect::<Vec<_>>(), vec![12, 20, 8]);
        let plain = model.network.evaluate(&model.params, &test, 20, eval_seed(3)).unwrap();
        assert_eq!(rows[1].metrics, plain);
        let mut buf = Vec::new();
        write_density_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("points,overall_accuracy"));
    }

    #[test]
    fn sdw_export_shape_and_range() {
        let model = Model::build(NetworkConfig::toy(), 4).unwrap();
        let cloud = clouds(1, 16, 5).remove(0);
        let rows = export_sdw(&model, &cloud, 0).unwrap();
        assert_eq!(rows.len(), 8 * 4);
        assert!(rows.iter().all(|r| r.weights.len() == 4));
        assert!(rows.iter().flat_map(|r| &r.weights).all(|&e| e > 0.0 && e < 1.0));
        let mut buf = Vec::new();
        write_sdw_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "region,slot,x,y,z,e0,e1,e2,e3");
        assert_eq!(text.lines().count(), 33);
        assert!(export_sdw(&model, &cloud, 2).is_err());
    }

    #[test]
    fn sdw_export_without_lsa_is_rejected() {
        let flags = Flags {
            use_lsa: false,
            ..Flags::default()
        };
        let model = Model::build(NetworkConfig::toy().with_flags(flags), 4).unwrap();
        let cloud = clouds(1, 16, 5).remove(0);
        assert!(matches!(export_sdw(&model, &cloud, 0), Err(Error::Invalid(_))));
    }
}
