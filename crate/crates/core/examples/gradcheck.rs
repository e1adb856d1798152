//! Runs the finite-difference suites and prints the worst error per target.
//!
//! `cargo run --release --example gradcheck -- [op|layer|network|all] [seeds]`

use std::time::Instant;

use lsanet::pipeline::gradsuite::{run_suite, Scope};
use lsanet::tensor::gradcheck::GradcheckOptions;

fn main() -> lsanet::Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "all".into());
    let n_seeds: u64 = args.next().map_or(20, |a| a.parse().expect("seed count"));
    let scopes = match which.as_str() {
        "all" => vec![Scope::Op, Scope::Layer, Scope::Network],
        s => vec![s.parse()?],
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let mut ok = true;
    for scope in scopes {
        let start = Instant::now();
        let report = run_suite(scope, &seeds, GradcheckOptions::default());
        println!("[{scope}] {:.1}s\n{report}\n", start.elapsed().as_secs_f64());
        ok &= report.passed();
    }
    if !ok {
        std::process::exit(1);
    }
    Ok(())
}
