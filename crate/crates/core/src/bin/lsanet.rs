use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lsanet::network::{Network, NetworkConfig};
use lsanet::pipeline::analysis::{write_density_csv, write_sdw_csv};
use lsanet::pipeline::gradsuite::{run_suite, Scope};
use lsanet::pipeline::{
    density_sweep, eval_seed, export_sdw, DataSource, Model, RunRecord, TrainOptions, Trainer, CHECKPOINT_FILE,
};
use lsanet::tensor::gradcheck::GradcheckOptions;
use lsanet::{Error, Result};

#[derive(Parser)]
#[command(name = "lsanet", version, about = "Train and inspect LSA point-cloud classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and metrics.jsonl to --out.
    Train {
        /// JSON config file, or one of `desk`, `modelnet40`, `toy`.
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 250)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        /// `synthetic` or a directory of OFF meshes in class subdirectories.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        no_sfe: bool,
        #[arg(long)]
        no_lsa: bool,
        #[arg(long)]
        no_region_encoder: bool,
        #[arg(long)]
        no_pool_modulation: bool,
        /// Random rotation about the up axis.
        #[arg(long)]
        rotate: bool,
        /// Maximum random input dropout ratio (0.875 is customary).
        #[arg(long, value_name = "R")]
        dropout_aug: Option<f64>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Stop once test accuracy reaches this value.
        #[arg(long)]
        target: Option<f64>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint at one input density.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synthetic`, a mesh directory, or omitted for the run's own data.
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value_t = 1024)]
        points: usize,
    },
    /// Accuracy at several input densities, as CSV.
    Density {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1024,512,256,128,64")]
        points: Vec<usize>,
        #[arg(long)]
        data: Option<String>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First-level spatial distribution weights of one layer, as CSV.
    ExportSdw {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<String>,
        /// Test cloud to export.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference gradient suites; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, value_parser = ["op", "layer", "network"])]
        scope: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Parameter count of a config, total and per module.
    Params {
        #[arg(long)]
        config: String,
    },
}

fn load_config(spec: &str) -> Result<NetworkConfig> {
    match spec {
        "desk" => Ok(NetworkConfig::desk()),
        "modelnet40" => Ok(NetworkConfig::modelnet40()),
        "toy" => Ok(NetworkConfig::toy()),
        path => NetworkConfig::load(path),
    }
}

fn test_split(record: &RunRecord, data: Option<&str>) -> Result<Vec<lsanet::geometry::PointCloud<f32>>> {
    let points = record.config.input_points().max(1024);
    let source = match (data, &record.options.data) {
        (Some(spec), _) => DataSource::parse(spec, points, record.seed)?,
        (None, Some(source)) => source.clone(),
        (None, None) => DataSource::parse("synthetic", points, record.seed)?,
    };
    let test = source.load()?.test;
    if test.is_empty() {
        return Err(Error::Invalid("the data source has no test clouds".into()));
    }
    Ok(test)
}

fn train(cmd: Command) -> Result<()> {
    let Command::Train {
        config,
        seed,
        epochs,
        out,
        data,
        no_sfe,
        no_lsa,
        no_region_encoder,
        no_pool_modulation,
        rotate,
        dropout_aug,
        batch_size,
        target,
        resume,
    } = cmd
    else {
        unreachable!()
    };
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = Trainer::resume(&ckpt, Some(out.clone()))?;
            t.options.epochs = epochs;
            t
        }
        None => {
            let mut config = load_config(&config)?;
            config.flags.use_sfe &= !no_sfe;
            config.flags.use_lsa &= !no_lsa;
            config.flags.use_region_encoder &= !no_region_encoder;
            config.flags.use_modulated_pool &= !no_pool_modulation;
            let mut options = TrainOptions {
                epochs,
                batch_size,
                target_accuracy: target,
                ..TrainOptions::default()
            };
            options.augment.rotate_z = rotate;
            if let Some(r) = dropout_aug {
                if !(0.0..1.0).contains(&r) {
                    return Err(Error::Invalid(format!("--dropout-aug must lie in [0, 1), got {r}")));
                }
                options.augment.dropout_max_ratio = r;
            }
            options.data = Some(DataSource::parse(&data, config.input_points().max(1024), seed)?);
            Trainer::new(config, seed, options, Some(out.clone()))?
        }
    };
    let splits = trainer
        .options
        .data
        .clone()
        .unwrap_or(DataSource::parse("synthetic", 1024, trainer.seed)?)
        .load()?;
    let history = trainer.run(&splits.train, &splits.test)?;
    if let Some(last) = history.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        cmd @ Command::Train { .. } => train(cmd)?,
        Command::Eval { ckpt, data, points } => {
            let (model, record) = Model::load(&ckpt)?;
            let test = test_split(&record, data.as_deref())?;
            let m = model.network.evaluate(&model.params, &test, points, eval_seed(record.seed))?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Density {
            ckpt,
            points,
            data,
            out,
        } => {
            let (model, record) = Model::load(&ckpt)?;
            let test = test_split(&record, data.as_deref())?;
            let rows = density_sweep(&model, record.seed, &test, &points)?;
            match out {
                Some(path) => write_density_csv(&rows, BufWriter::new(File::create(path)?))?,
                None => write_density_csv(&rows, io::stdout().lock())?,
            }
        }
        Command::ExportSdw {
            ckpt,
            layer,
            out,
            data,
            index,
        } => {
            let (model, record) = Model::load(&ckpt)?;
            let test = test_split(&record, data.as_deref())?;
            let cloud = test
                .get(index)
                .ok_or_else(|| Error::Invalid(format!("test split has {} clouds", test.len())))?;
            let rows = export_sdw(&model, cloud, layer)?;
            write_sdw_csv(&rows, BufWriter::new(File::create(&out)?))?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::Gradcheck { scope, seeds } => {
            let scope: Scope = scope.parse()?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = run_suite(scope, &seeds, GradcheckOptions::default());
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Params { config } => {
            let config = load_config(&config)?;
            let net = Network::new(config)?;
            let params = net.init_params::<f32>(0)?;
            let count = Network::count_parameters(&params);
            println!("total {}", count.total);
            for (module, n) in &count.modules {
                println!("{module:<16} {n}");
            }
        }
    }
    Ok(true)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LSANET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Invalid(format!("LSANET_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    lsanet::pipeline::tune_allocator();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
