//! Sampling and grouping of point sets: farthest point sampling, ball query,
//! group-all, normalization and augmentation.
//!
//! Distances are compared squared throughout.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type Point<T> = [T; 3];

/// N x 3 coordinates with optional per-point features and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    pub coords: Vec<Point<T>>,
    /// `[N, F]` features aligned with `coords`.
    pub features: Option<Tensor<T>>,
    pub label: Option<usize>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(coords: Vec<Point<T>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Invalid("point cloud needs at least one point".into()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud {
            coords,
            features: None,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_features(mut self, features: Tensor<T>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != self.coords.len() {
            return Err(Error::InvalidShape {
                shape: features.shape().to_vec(),
                reason: format!("features must be [{}, F]", self.coords.len()),
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = self.features.as_ref().map(|f| {
            let width = f.shape()[1];
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                data.extend_from_slice(&f.data()[i * width..(i + 1) * width]);
            }
            Tensor::new(vec![indices.len(), width], data).expect("consistent extents")
        });
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            features,
            label: self.label,
        }
    }

    pub fn centroid(&self) -> Point<T> {
        centroid(&self.coords)
    }
}

pub fn squared_distance<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn centroid<T: Scalar>(coords: &[Point<T>]) -> Point<T> {
    let mut sum = [T::zero(); 3];
    for p in coords {
        for d in 0..3 {
            sum[d] = sum[d] + p[d];
        }
    }
    let n = T::lit(coords.len().max(1) as f64);
    [sum[0] / n, sum[1] / n, sum[2] / n]
}

/// Greedy max-min sampling of `m` indices.
///
/// The first pick is index 0. Each later pick is the not-yet-selected point
/// farthest from the selected set, ties going to the lowest index. Runs in
/// O(N·M) with an incrementally maintained nearest-selected distance.
pub fn farthest_point_sample<T: Scalar>(coords: &[Point<T>], m: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m > n {
        return Err(Error::TooManySamples {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Err(Error::Invalid("farthest point sampling needs m >= 1".into()));
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut nearest = vec![T::infinity(); n];
    let mut current = 0;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = coords[current];
        let mut best: Option<(usize, T)> = None;
        for i in 0..n {
            let d = squared_distance(&coords[i], &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && best.is_none_or(|(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("unselected point remains").0;
    }
    Ok(selected)
}

/// Neighborhoods of M centroids, K slots each.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrouping<T> {
    /// Indices of the centroids in the parent cloud, when they come from it.
    pub centroid_indices: Option<Vec<usize>>,
    pub centroids: Vec<Point<T>>,
    pub k: usize,
    /// `[M * K]` indices into the parent cloud, region-major.
    pub neighbor_indices: Vec<usize>,
    /// `[M * K]` neighbor minus centroid.
    pub relative_coords: Vec<Point<T>>,
    /// Real (unpadded) neighbors per region, in `1..=K`.
    pub valid_counts: Vec<usize>,
    /// `None` for group-all.
    pub radius: Option<T>,
}

impl<T: Scalar> RegionGrouping<T> {
    pub fn regions(&self) -> usize {
        self.centroids.len()
    }

    pub fn neighbors(&self, region: usize) -> &[usize] {
        &self.neighbor_indices[region * self.k..(region + 1) * self.k]
    }

    pub fn relative(&self, region: usize) -> &[Point<T>] {
        &self.relative_coords[region * self.k..(region + 1) * self.k]
    }

    /// Relative coordinates as a `[M, K, 3]` tensor.
    pub fn relative_tensor(&self) -> Tensor<T> {
        let data = self.relative_coords.iter().flatten().copied().collect();
        Tensor::new(vec![self.regions(), self.k, 3], data).expect("consistent extents")
    }
}

/// For each centroid, the first `k` points in ascending index order whose
/// squared distance is at most `radius²`. Regions with fewer hits are padded
/// with their first hit.
pub fn ball_query<T: Scalar>(
    coords: &[Point<T>],
    centroids: &[Point<T>],
    radius: T,
    k: usize,
) -> Result<RegionGrouping<T>> {
    if !(radius > T::zero()) {
        return Err(Error::Invalid(format!("ball query radius must be positive, got {radius}")));
    }
    if k == 0 {
        return Err(Error::Invalid("ball query needs k >= 1".into()));
    }
    let r2 = radius * radius;
    let m = centroids.len();
    let mut neighbor_indices = Vec::with_capacity(m * k);
    let mut relative_coords = Vec::with_capacity(m * k);
    let mut valid_counts = Vec::with_capacity(m);
    for (region, c) in centroids.iter().enumerate() {
        let start = neighbor_indices.len();
        for (i, p) in coords.iter().enumerate() {
            if squared_distance(p, c) <= r2 {
                neighbor_indices.push(i);
                if neighbor_indices.len() - start == k {
                    break;
                }
            }
        }
        let found = neighbor_indices.len() - start;
        if found == 0 {
            return Err(Error::DegenerateRegion {
                region,
                radius: radius.f64(),
                centroid: [c[0].f64(), c[1].f64(), c[2].f64()],
            });
        }
        let first = neighbor_indices[start];
        neighbor_indices.resize(start + k, first);
        valid_counts.push(found);
        relative_coords.extend(neighbor_indices[start..].iter().map(|&i| {
            let p = coords[i];
            [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
        }));
    }
    Ok(RegionGrouping {
        centroid_indices: None,
        centroids: centroids.to_vec(),
        k,
        neighbor_indices,
        relative_coords,
        valid_counts,
        radius: Some(radius),
    })
}

/// [`ball_query`] around points of the cloud itself.
pub fn ball_query_indices<T: Scalar>(
    coords: &[Point<T>],
    centroid_indices: &[usize],
    radius: T,
    k: usize,
) -> Result<RegionGrouping<T>> {
    if let Some(&bad) = centroid_indices.iter().find(|&&i| i >= coords.len()) {
        return Err(Error::Invalid(format!("centroid index {bad} out of range")));
    }
    let centroids: Vec<_> = centroid_indices.iter().map(|&i| coords[i]).collect();
    let mut g = ball_query(coords, &centroids, radius, k)?;
    g.centroid_indices = Some(centroid_indices.to_vec());
    Ok(g)
}

/// One region holding every point, centred on the coordinate mean.
pub fn group_all<T: Scalar>(coords: &[Point<T>]) -> Result<RegionGrouping<T>> {
    if coords.is_empty() {
        return Err(Error::Invalid("group_all on an empty cloud".into()));
    }
    let c = centroid(coords);
    Ok(RegionGrouping {
        centroid_indices: None,
        centroids: vec![c],
        k: coords.len(),
        neighbor_indices: (0..coords.len()).collect(),
        relative_coords: coords
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect(),
        valid_counts: vec![coords.len()],
        radius: None,
    })
}

/// Centres the cloud on the origin and scales its farthest point to unit norm.
/// Coincident clouds are only centred.
pub fn normalize_unit_sphere<T: Scalar>(cloud: &PointCloud<T>) -> PointCloud<T> {
    let c = cloud.centroid();
    let mut coords: Vec<Point<T>> = cloud
        .coords
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_sq = coords
        .iter()
        .map(|p| squared_distance(p, &[T::zero(); 3]))
        .fold(T::zero(), T::max);
    if max_sq > T::zero() {
        let inv = T::one() / max_sq.sqrt();
        for p in &mut coords {
            for v in p.iter_mut() {
                *v = *v * inv;
            }
        }
    }
    PointCloud {
        coords,
        features: cloud.features.clone(),
        label: cloud.label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct AugmentOptions {
    /// Uniform random rotation about the z axis.
    pub rotate_z: bool,
    /// Standard deviation of per-coordinate Gaussian jitter; 0 disables.
    pub jitter_sigma: f64,
    /// Jitter is clipped to `±jitter_clip`.
    pub jitter_clip: f64,
    /// Upper bound of the random dropout ratio; 0 disables.
    pub dropout_max_ratio: f64,
}

/// What [`augment`] did, for inspection in tests and logs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentRecord {
    pub angle: Option<f64>,
    pub dropped: usize,
}

/// Rotation, clipped jitter, then random input dropout. Dropped points are
/// overwritten by the first surviving point so N stays fixed. Deterministic
/// given `seed`.
pub fn augment<T: Scalar>(
    cloud: &PointCloud<T>,
    seed: u64,
    opts: &AugmentOptions,
) -> Result<(PointCloud<T>, AugmentRecord)> {
    if opts.jitter_sigma < 0.0 || opts.jitter_clip < 0.0 || !(0.0..1.0).contains(&opts.dropout_max_ratio) {
        return Err(Error::Invalid(format!("invalid augmentation options {opts:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    let mut record = AugmentRecord::default();

    if opts.rotate_z {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::lit(s), T::lit(c));
        for p in &mut out.coords {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
        record.angle = Some(angle);
    }

    if opts.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, opts.jitter_sigma).expect("sigma validated");
        for p in &mut out.coords {
            for v in p.iter_mut() {
                let j: f64 = normal.sample(&mut rng);
                *v = *v + T::lit(j.clamp(-opts.jitter_clip, opts.jitter_clip));
            }
        }
    }

    if opts.dropout_max_ratio > 0.0 {
        let n = out.len();
        let ratio = rng.random_range(0.0..opts.dropout_max_ratio);
        let n_drop = ((ratio * n as f64).floor() as usize).min(n - 1);
        if n_drop > 0 {
            let mut dropped = vec![false; n];
            for i in sample(&mut rng, n, n_drop) {
                dropped[i] = true;
            }
            let keep = dropped.iter().position(|d| !d).expect("at least one survivor");
            let keep_point = out.coords[keep];
            let keep_features = out
                .features
                .as_ref()
                .map(|f| f.data()[keep * f.shape()[1]..(keep + 1) * f.shape()[1]].to_vec());
            for i in (0..n).filter(|&i| dropped[i]) {
                out.coords[i] = keep_point;
                if let (Some(f), Some(kf)) = (out.features.as_mut(), keep_features.as_ref()) {
                    let w = kf.len();
                    f.data_mut()[i * w..(i + 1) * w].copy_from_slice(kf);
                }
            }
        }
        record.dropped = n_drop;
    }
    Ok((out, record))
}

/// Uniform random subset of `n` points without replacement, original order kept.
/// Returns the cloud unchanged when `n >= N`.
pub fn subsample<T: Scalar>(cloud: &PointCloud<T>, n: usize, seed: u64) -> PointCloud<T> {
    if n >= cloud.len() {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Repeats the first point until the cloud holds `n` points.
pub fn pad_with_first<T: Scalar>(cloud: &PointCloud<T>, n: usize) -> PointCloud<T> {
    if cloud.len() >= n {
        return cloud.clone();
    }
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    idx.resize(n, 0);
    cloud.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(xs: &[f64]) -> Vec<Point<f64>> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_collinear() {
        let pts = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&pts, 3).unwrap(), vec![0, 3, 1]);
        assert!(matches!(
            farthest_point_sample(&pts, 5),
            Err(Error::TooManySamples { .. })
        ));
    }

    #[test]
    fn fps_full_is_permutation_even_with_duplicates() {
        let pts = line(&[0.0, 0.0, 2.0, 2.0, 1.0]);
        let mut s = farthest_point_sample(&pts, 5).unwrap();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ball_query_pads_with_first_hit() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let g = ball_query_indices(&pts, &[0], 0.5, 4).unwrap();
        assert_eq!(g.neighbor_indices, vec![0, 1, 0, 0]);
        assert_eq!(g.valid_counts, vec![2]);
        assert_eq!(g.relative_coords[0], [0.0, 0.0, 0.0]);
        assert_eq!(g.relative_coords[1], [0.1, 0.0, 0.0]);
    }

    #[test]
    fn ball_query_covering_radius_is_ascending() {
        let pts = line(&[0.3, -0.2, 0.9, 0.1]);
        let g = ball_query_indices(&pts, &[2], 10.0, 4).unwrap();
        assert_eq!(g.neighbor_indices, vec![0, 1, 2, 3]);
        assert_eq!(g.valid_counts, vec![4]);
    }

    #[test]
    fn ball_query_external_centroid_without_hits_is_degenerate() {
        let pts = line(&[0.0, 1.0]);
        let err = ball_query(&pts, &[[10.0, 0.0, 0.0]], 0.5, 2).unwrap_err();
        assert!(matches!(err, Error::DegenerateRegion { region: 0, .. }));
        assert!(ball_query(&pts, &[[0.0; 3]], 0.0, 2).is_err());
        assert!(ball_query(&pts, &[[0.0; 3]], 1.0, 0).is_err());
    }

    #[test]
    fn group_all_symmetric_pair() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let g = group_all(&pts).unwrap();
        assert_eq!(g.centroids, vec![[0.0, 0.0, 0.0]]);
        assert_eq!(g.relative_coords, pts);
        assert_eq!(g.valid_counts, vec![2]);

        let single = group_all(&[[3.0, 4.0, 5.0]]).unwrap();
        assert_eq!(single.relative_coords, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_cases() {
        let single = PointCloud::new(vec![[2.0, -1.0, 7.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&single).coords, vec![[0.0; 3]]);

        let mut corners = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    corners.push([x, y, z]);
                }
            }
        }
        let cube: PointCloud<f64> = normalize_unit_sphere(&PointCloud::new(corners).unwrap());
        let s = 1.0 / 3f64.sqrt();
        for p in &cube.coords {
            let norm: f64 = squared_distance(p, &[0.0; 3]).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!((p[0].abs() - s).abs() < 1e-12);
        }
        let again = normalize_unit_sphere(&cube);
        for (a, b) in again.coords.iter().zip(&cube.coords) {
            assert!(squared_distance::<f64>(a, b).sqrt() < 1e-7);
        }
    }

    fn sample_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn augment_off_is_identity() {
        let c = sample_cloud(50, 1);
        let (out, rec) = augment(&c, 9, &AugmentOptions::default()).unwrap();
        assert_eq!(out, c);
        assert_eq!(rec, AugmentRecord::default());
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let c = sample_cloud(40, 2);
        let opts = AugmentOptions {
            rotate_z: true,
            ..Default::default()
        };
        let (out, rec) = augment(&c, 5, &opts).unwrap();
        assert!(rec.angle.is_some());
        for i in 0..c.len() {
            for j in 0..c.len() {
                let a = squared_distance(&c.coords[i], &c.coords[j]).sqrt();
                let b = squared_distance(&out.coords[i], &out.coords[j]).sqrt();
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_half_keeps_half_distinct() {
        let c = sample_cloud(256, 3);
        let opts = AugmentOptions {
            dropout_max_ratio: 0.5,
            ..Default::default()
        };
        for seed in 0..20 {
            let (out, rec) = augment(&c, seed, &opts).unwrap();
            assert_eq!(out.len(), 256);
            let mut distinct: Vec<[u64; 3]> = out
                .coords
                .iter()
                .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
                .collect();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() >= 128, "seed {seed}: {}", distinct.len());
            assert_eq!(distinct.len(), 256 - rec.dropped);
        }
    }

    #[test]
    fn jitter_is_clipped_and_seeded() {
        let c = sample_cloud(64, 4);
        let opts = AugmentOptions {
            jitter_sigma: 0.5,
            jitter_clip: 0.05,
            ..Default::default()
        };
        let (a, _) = augment(&c, 11, &opts).unwrap();
        let (b, _) = augment(&c, 11, &opts).unwrap();
        assert_eq!(a, b);
        for (p, q) in a.coords.iter().zip(&c.coords) {
            for d in 0..3 {
                assert!((p[d] - q[d]).abs() <= 0.05 + 1e-12);
            }
        }
    }

    #[test]
    fn subsample_and_pad() {
        let c = sample_cloud(100, 5);
        let s = subsample(&c, 30, 1);
        assert_eq!(s.len(), 30);
        assert_eq!(subsample(&c, 100, 1), c);
        let p = pad_with_first(&s, 64);
        assert_eq!(p.len(), 64);
        assert_eq!(p.coords[63], s.coords[0]);
    }

    fn fps_oracle(pts: &[Point<f64>], m: usize) -> Vec<usize> {
        let mut sel = vec![0];
        while sel.len() < m {
            let mut best = None;
            for i in 0..pts.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&j| squared_distance(&pts[i], &pts[j]))
                    .fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            sel.push(best.unwrap().0);
        }
        sel
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<Point<f64>>> {
        proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..40)
    }

    proptest! {
        #[test]
        fn fps_matches_oracle(pts in cloud_strategy(), frac in 0.0f64..1.0) {
            let m = 1 + ((pts.len() - 1) as f64 * frac) as usize;
            let got = farthest_point_sample(&pts, m).unwrap();
            prop_assert_eq!(&got, &fps_oracle(&pts, m));
            let mut uniq = got.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), m);
        }

        #[test]
        fn ball_query_matches_oracle(pts in cloud_strategy(), r in 0.05f64..2.0, k in 1usize..12) {
            let m = pts.len().min(5);
            let centres = farthest_point_sample(&pts, m).unwrap();
            let g = ball_query_indices(&pts, &centres, r, k).unwrap();
            for (region, &c) in centres.iter().enumerate() {
                let hits: Vec<usize> = (0..pts.len())
                    .filter(|&i| squared_distance(&pts[i], &pts[c]) <= r * r)
                    .take(k)
                    .collect();
                prop_assert_eq!(g.valid_counts[region], hits.len());
                let slots = g.neighbors(region);
                prop_assert_eq!(&slots[..hits.len()], &hits[..]);
                prop_assert!(slots[hits.len()..].iter().all(|&i| i == hits[0]));
                for (slot, &i) in slots.iter().enumerate() {
                    let rel = g.relative(region)[slot];
                    prop_assert!(squared_distance(&rel, &[0.0; 3]) <= r * r + 1e-12);
                    for d in 0..3 {
                        prop_assert_eq!(rel[d], pts[i][d] - pts[c][d]);
                    }
                }
            }
        }

        #[test]
        fn grouping_is_translation_invariant(
            pts in cloud_strategy(),
            shift in proptest::array::uniform3(-3.0f64..3.0),
        ) {
            let moved: Vec<Point<f64>> =
                pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect();
            let m = pts.len().min(4);
            let a = ball_query_indices(&pts, &farthest_point_sample(&pts, m).unwrap(), 0.8, 6).unwrap();
            let b = ball_query_indices(&moved, &farthest_point_sample(&moved, m).unwrap(), 0.8, 6).unwrap();
            prop_assert_eq!(&a.centroid_indices, &b.centroid_indices);
            prop_assert_eq!(&a.neighbor_indices, &b.neighbor_indices);
            for (p, q) in a.relative_coords.iter().zip(&b.relative_coords) {
                prop_assert!(squared_distance(p, q).sqrt() < 1e-6);
            }
        }
    }
}
