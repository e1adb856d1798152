//! Parses OFF meshes, samples their surfaces by area and loads a class
//! directory as a dataset.

use std::fs;

use lsanet::pipeline::off::{load_off_dir, parse_off};

const CUBE: &str = "OFF\n8 6 0\n\
0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 4 7 3\n";

const PYRAMID: &str = "OFF\n5 5 0\n\
0 0 0\n1 0 0\n1 1 0\n0 1 0\n0.5 0.5 1\n\
4 0 3 2 1\n3 0 1 4\n3 1 2 4\n3 2 3 4\n3 3 0 4\n";

fn main() -> lsanet::Result<()> {
    let cube = parse_off(CUBE)?;
    println!("cube: {} triangles, area {}", cube.triangles.len(), cube.area());
    let pts = cube.sample_surface(5, 1)?;
    println!("surface samples {pts:?}");

    let root = std::env::temp_dir().join("lsanet-off-demo");
    let _ = fs::remove_dir_all(&root);
    for (class, text) in [("cube", CUBE), ("pyramid", PYRAMID)] {
        let dir = root.join(class);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("a.off"), text)?;
    }
    fs::write(root.join("cube/broken.off"), "OFF\n8 6 0\n0 0 0\n")?;
    let data = load_off_dir::<f32>(&root, 1024, 0)?;
    println!(
        "loaded {} clouds of classes {:?}; skipped {:?}",
        data.clouds.len(),
        data.classes,
        data.skipped.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect::<Vec<_>>()
    );
    Ok(())
}
