//! `tadnet` command-line entry points.
//!
//! Exit codes: 0 success, 1 other failure, 2 parse/config/format error,
//! 3 training divergence, 4 checkpoint version mismatch, 5 gradient check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tadnet::ablation::run_ablation;
use tadnet::eval::evaluate;
use tadnet::gradcheck::{gradcheck, GradcheckOptions};
use tadnet::infer::detect;
use tadnet::io::{
    self, atomic_write, encode_detections, encode_metrics, load_annotations, load_dataset, load_features,
    parse_classes, parse_detections, read_text, ArtifactHeader, CLASSES_FILE,
};
use tadnet::network::Network;
use tadnet::parallel::{configure_threads_from_env, Exec};
use tadnet::params::ParamStore;
use tadnet::synth::{class_names, generate_splits};
use tadnet::train::train;
use tadnet::{Error, Mode, RunConfig};

const OUT_DIR_ENV: &str = "TADNET_OUT_DIR";
const CHECKPOINT_FILE: &str = "checkpoint.dssd";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "tadnet", version, about = "Single-shot temporal action detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Thumos,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Print a fully resolved configuration.
    Config {
        #[arg(long, conflicts_with = "config")]
        preset: Option<Preset>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic train/ and eval/ datasets.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (falls back to $TADNET_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset directory; writes a checkpoint each epoch and a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with features.tadf, annotations.jsonl and classes.txt.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Detect actions in a feature file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Defaults to the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Class list; defaults to classes.txt beside the feature file.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Detection dump path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detection dump against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Class list; defaults to classes.txt beside the annotation file.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.4, 0.5, 0.6, 0.7])]
        thresholds: Vec<f64>,
        /// Also write the result as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a probe window.
    Gradcheck {
        /// Defaults to the tiny preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
    },
    /// Train and evaluate all five modes on `<data>/train` and `<data>/eval`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Lib(Error),
    Gradcheck(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Gradcheck(worst)) => {
            eprintln!("gradient check failed; worst parameter: {worst}");
            ExitCode::from(5)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Config(_) | Error::Format(_) | Error::InvalidArgument(_) => 2,
        Error::Divergence(_) => 3,
        Error::VersionMismatch { .. } => 4,
        Error::State(_) | Error::Io { .. } => 1,
    }
}

fn run(command: Command) -> CliResult {
    let exec = Exec::default();
    match command {
        Command::Config { preset, config } => {
            let cfg = match (preset, config) {
                (_, Some(path)) => RunConfig::load(&path)?,
                (Some(Preset::Thumos), None) => RunConfig::thumos_scale(),
                (Some(Preset::Tiny), None) => RunConfig::tiny(),
                (Some(Preset::Desk) | None, None) => RunConfig::desk(),
            };
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Synth { config, out } => {
            let cfg = load_or(config.as_deref(), RunConfig::desk)?;
            let out = out_dir(out)?;
            let header = ArtifactHeader {
                seed: cfg.synth.seed,
                config: cfg.to_toml(),
            };
            let (train_set, eval_set) = generate_splits(&cfg, exec)?;
            for (name, ds) in [("train", &train_set), ("eval", &eval_set)] {
                let n = &cfg.network;
                io::save_dataset(&out.join(name), ds, n.input_dim, n.window_length, Some(&header))?;
                println!(
                    "{name}: {} windows, {} actions -> {}",
                    ds.windows.len(),
                    ds.annotations.len(),
                    out.join(name).display()
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            mode,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.train.mode = m.parse()?;
            }
            let out = out_dir(out)?;
            let ds = load_dataset(&data)?;
            let text = cfg.to_toml();
            let header = header_for(&cfg);
            let ckpt = out.join(CHECKPOINT_FILE);
            let metrics = out.join(METRICS_FILE);
            let (_, records) = train(&cfg, &ds, exec, |epoch, params, records| {
                atomic_write(&ckpt, &params.to_checkpoint(&text))?;
                atomic_write(&metrics, encode_metrics(records, Some(&header)).as_bytes())?;
                let last = records.last().map_or(f64::NAN, |r| r.total);
                eprintln!("epoch {epoch}: {} steps, loss {last:.6}", records.len());
                Ok(())
            })?;
            println!("trained {} steps -> {}", records.len(), ckpt.display());
            Ok(())
        }
        Command::Infer {
            checkpoint,
            features,
            config,
            classes,
            out,
        } => {
            let (params, stored) = ParamStore::from_checkpoint(&io::read_bytes(&checkpoint)?)?;
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::from_toml(&stored)?,
            };
            let net = Network::new(&cfg, cfg.train.mode)?;
            let (windows, d, t) = load_features(&features)?;
            if !windows.is_empty() && (d, t) != (cfg.network.input_dim, cfg.network.window_length) {
                return Err(Error::Format(format!(
                    "feature file has D={d}, T={t}; config expects D={}, T={}",
                    cfg.network.input_dim, cfg.network.window_length
                ))
                .into());
            }
            let names = class_list(classes.as_deref(), &features, cfg.network.num_classes)?;
            let dets = detect(&net, &params, &windows, &cfg.infer, exec)?;
            atomic_write(&out, encode_detections(&dets, &names, Some(&header_for(&cfg))).as_bytes())?;
            println!("{} detections -> {}", dets.len(), out.display());
            Ok(())
        }
        Command::Eval {
            detections,
            annotations,
            classes,
            thresholds,
            json,
        } => {
            let class_path = classes.unwrap_or_else(|| sibling(&annotations, CLASSES_FILE));
            let names = parse_classes(&read_text(&class_path)?, &class_path)?;
            let gts = load_annotations(&annotations, &names)?;
            let dets = parse_detections(&read_text(&detections)?, &names, &detections)?;
            if thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0 && *t <= 1.0)) {
                return Err(Failure::Usage("thresholds must lie in (0, 1]".into()));
            }
            let result = evaluate(&dets, &gts, &thresholds, exec);
            print!("{}", result.to_table(&names));
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&result.to_json(&names)).expect("json value");
                atomic_write(&path, format!("{text}\n").as_bytes())?;
            }
            Ok(())
        }
        Command::Gradcheck {
            config,
            seed,
            mode,
            corrupt_block,
        } => {
            let cfg = load_or(config.as_deref(), RunConfig::tiny)?;
            let opts = GradcheckOptions {
                mode: mode.parse::<Mode>()?,
                corrupt: corrupt_block.map(|name| (name, 1.01)),
                ..GradcheckOptions::default()
            };
            let report = gradcheck(&cfg, seed, &opts, exec)?;
            print!("{}", report.to_text());
            if report.passed() {
                Ok(())
            } else {
                let worst = report.worst().map_or_else(|| "?".to_string(), |b| b.name.clone());
                Err(Failure::Gradcheck(worst))
            }
        }
        Command::Ablate { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(out)?;
            let train_set = load_dataset(&data.join("train"))?;
            let eval_set = load_dataset(&data.join("eval"))?;
            let table = run_ablation(&cfg, &train_set, &eval_set, exec, |row| {
                eprintln!("{}: mAP {:?}", row.mode.name(), row.map);
            })?;
            let text = table.to_text();
            print!("{text}");
            let header = header_for(&cfg);
            atomic_write(&out.join("ablation.txt"), format!("# {}\n{text}", header.line()).as_bytes())?;
            let json = serde_json::json!({ "header": header, "ablation": table });
            atomic_write(&out.join("ablation.json"), format!("{json}\n").as_bytes())?;
            Ok(())
        }
    }
}

fn header_for(cfg: &RunConfig) -> ArtifactHeader {
    ArtifactHeader {
        seed: cfg.train.seed,
        config: cfg.to_toml(),
    }
}

fn load_or(path: Option<&Path>, preset: fn() -> RunConfig) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(preset()), RunConfig::load)
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| Failure::Usage(format!("no output directory: pass --out or set {OUT_DIR_ENV}")))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn class_list(explicit: Option<&Path>, features: &Path, num_classes: usize) -> Result<Vec<String>, Error> {
    let path = explicit.map_or_else(|| sibling(features, CLASSES_FILE), Path::to_path_buf);
    let names = if explicit.is_some() || path.exists() {
        parse_classes(&read_text(&path)?, &path)?
    } else {
        class_names(num_classes)
    };
    if names.len() != num_classes {
        return Err(Error::Config(format!(
            "class list {} has {} classes; network.num_classes = {num_classes}",
            path.display(),
            names.len()
        )));
    }
    Ok(names)
}
