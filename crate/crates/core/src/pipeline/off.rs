//! ASCII OFF meshes and area-weighted surface sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, PointCloud};
use crate::seeds;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split('#').next().unwrap_or("").split_whitespace()
}

fn parse_usize(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::Off(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::Off(format!("bad {what}")))
}

/// Parses an ASCII OFF file. Polygons are fan-triangulated.
pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = text.lines().filter(|l| tokens(l).next().is_some());
    let header = lines.next().ok_or_else(|| Error::Off("empty OFF file".into()))?;
    let mut head = tokens(header);
    if head.next() != Some("OFF") {
        return Err(Error::Off("missing OFF header".into()));
    }
    // Some exporters put the counts on the header line.
    let rest: Vec<&str> = head.collect();
    let counts: Vec<&str> = if rest.is_empty() {
        tokens(lines.next().ok_or_else(|| Error::Off("missing counts line".into()))?).collect()
    } else {
        rest
    };
    let mut c = counts.into_iter();
    let nv = parse_usize(c.next(), "vertex count")?;
    let nf = parse_usize(c.next(), "face count")?;

    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let line = lines
            .next()
            .ok_or_else(|| Error::Off(format!("expected {nv} vertices, found {i}")))?;
        let v: Vec<f64> = tokens(line)
            .take(3)
            .map(|t| t.parse().map_err(|_| Error::Off(format!("bad vertex {i}"))))
            .collect::<Result<_>>()?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Off(format!("bad vertex {i}")));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for i in 0..nf {
        let line = lines
            .next()
            .ok_or_else(|| Error::Off(format!("expected {nf} faces, found {i}")))?;
        let mut t = tokens(line);
        let n = parse_usize(t.next(), "face size")?;
        let idx: Vec<usize> = t
            .take(n)
            .map(|s| s.parse().map_err(|_| Error::Off(format!("bad face {i}"))))
            .collect::<Result<_>>()?;
        if n < 3 || idx.len() != n || idx.iter().any(|&v| v >= nv) {
            return Err(Error::Off(format!("bad face {i}")));
        }
        for j in 1..n - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    if lines.next().is_some() {
        return Err(Error::Off("trailing data after the declared faces".into()));
    }
    Ok(Mesh { vertices, triangles })
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let (u, v) = (sub(b, a), sub(c, a));
    let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt()
}

impl Mesh {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_off(&fs::read_to_string(path)?)
    }

    fn corners(&self, t: &[usize; 3]) -> [[f64; 3]; 3] {
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn triangle_areas(&self) -> Vec<f64> {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                triangle_area(a, b, c)
            })
            .collect()
    }

    pub fn area(&self) -> f64 {
        self.triangle_areas().iter().sum()
    }

    /// `n` points uniform over the surface: triangles chosen by area, then a
    /// uniform point inside the triangle.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
        let areas = self.triangle_areas();
        let total: f64 = areas.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Invalid("mesh has zero surface area".into()));
        }
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let target = rng.random::<f64>() * total;
                let ti = cumulative.partition_point(|&c| c <= target).min(areas.len() - 1);
                let [a, b, c] = self.corners(&self.triangles[ti]);
                let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                std::array::from_fn(|d| a[d] + r1 * (b[d] - a[d]) + r2 * (c[d] - a[d]))
            })
            .collect())
    }
}

/// Meshes sampled into labelled clouds, with class names in label order.
#[derive(Debug, Clone)]
pub struct OffDataset<T> {
    pub classes: Vec<String>,
    pub clouds: Vec<PointCloud<T>>,
    /// Source file of each cloud.
    pub files: Vec<PathBuf>,
    /// Files skipped as malformed or degenerate, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads `root/<class>/**.off` (a `train` or `test` level in between is
/// fine when `root` already points at it). Classes are the sorted
/// subdirectory names; each mesh yields `n_points` points seeded by its
/// path relative to `root`, then normalized to the unit sphere.
pub fn load_off_dir<T: Scalar>(root: impl AsRef<Path>, n_points: usize, seed: u64) -> Result<OffDataset<T>> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Invalid(format!("{} has no class subdirectories", root.display())));
    }
    let mut out = OffDataset {
        classes: Vec::new(),
        clouds: Vec::new(),
        files: Vec::new(),
        skipped: Vec::new(),
    };
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut files = Vec::new();
        let mut stack = vec![dir.clone()];
        while let Some(d) = stack.pop() {
            for p in sorted_entries(&d)? {
                if p.is_dir() {
                    stack.push(p);
                } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
                    files.push(p);
                }
            }
        }
        files.sort();
        let before = out.clouds.len();
        for file in files {
            let rel = file.strip_prefix(root).unwrap_or(&file).to_string_lossy().into_owned();
            let sampled = Mesh::load(&file).and_then(|m| m.sample_surface(n_points, seeds::derive(seed, &rel, 0, 0)));
            match sampled {
                Ok(points) => {
                    let coords = points.iter().map(|p| p.map(T::lit)).collect();
                    let cloud = PointCloud::new(coords)?.with_label(label);
                    out.clouds.push(normalize_unit_sphere(&cloud));
                    out.files.push(file);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    out.skipped.push((file, e.to_string()));
                }
            }
        }
        if out.clouds.len() == before {
            return Err(Error::Invalid(format!("class `{name}` has no usable meshes")));
        }
        out.classes.push(name);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE: &str = "OFF\n8 6 0\n\
        0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
        4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 4 7 3\n";

    #[test]
    fn cube_parses_and_fans() {
        let m = parse_off(CUBE).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.triangles.len(), 12);
        assert!((m.area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn cube_samples_lie_on_surface() {
        let m = parse_off(CUBE).unwrap();
        for p in m.sample_surface(2000, 3).unwrap() {
            assert!(p.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
            let on_face = p.iter().any(|&x| x.abs() < 1e-12 || (x - 1.0).abs() < 1e-12);
            assert!(on_face, "{p:?}");
        }
    }

    #[test]
    fn sampling_is_area_weighted() {
        // two triangles, areas 1 and 3
        let text = "OFF\n6 2 0\n0 0 0\n2 0 0\n0 1 0\n0 0 5\n6 0 5\n0 1 5\n3 0 1 2\n3 3 4 5\n";
        let m = parse_off(text).unwrap();
        let pts = m.sample_surface(20000, 1).unwrap();
        let upper = pts.iter().filter(|p| p[2] > 2.5).count() as f64 / pts.len() as f64;
        assert!((upper - 0.75).abs() < 0.02, "{upper}");
    }

    #[test]
    fn header_counts_inline_and_comments() {
        let text = "OFF 3 1 0\n# a comment\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert_eq!(parse_off(text).unwrap().triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(parse_off("").is_err());
        assert!(parse_off("PLY\n3 1 0\n").is_err());
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n3 0 1 2\n").is_err());
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n").is_err());
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n3 0 1 2\n").is_err());
    }

    #[test]
    fn zero_area_mesh_rejected() {
        let m = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n").unwrap();
        assert!(m.sample_surface(10, 0).is_err());
    }

    #[test]
    fn directory_loading_skips_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["box", "flat"] {
            fs::create_dir(dir.path().join(class)).unwrap();
        }
        fs::write(dir.path().join("box/a.off"), CUBE).unwrap();
        fs::write(dir.path().join("box/broken.off"), "OFF\n8 6\n").unwrap();
        fs::write(dir.path().join("flat/b.off"), "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        let d: OffDataset<f32> = load_off_dir(dir.path(), 128, 5).unwrap();
        assert_eq!(d.classes, vec!["box", "flat"]);
        assert_eq!(d.clouds.len(), 2);
        assert_eq!(d.skipped.len(), 1);
        assert_eq!(d.clouds[1].label, Some(1));
        assert!(d.clouds.iter().all(|c| c.len() == 128));
        let again: OffDataset<f32> = load_off_dir(dir.path(), 128, 5).unwrap();
        assert_eq!(again.clouds[0].coords, d.clouds[0].coords);

        fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(load_off_dir::<f32>(dir.path(), 128, 5).is_err());
    }
}
