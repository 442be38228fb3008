//! `sharecmp`: train, evaluate and inspect ShareCMP models.
//!
//! Exit codes: 0 success, 1 training failure, 2 configuration or usage
//! error, 3 dataset or I/O error, 4 checkpoint error.

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use sharecmp::config::{keys_help, RunConfig};
use sharecmp::data::{generate_synthetic_dataset, DatasetIndex, SyntheticSceneSpec};
use sharecmp::harness::count_params;
use sharecmp::polarization::RepresentationKind;
use sharecmp::run::{eval_run, predict_run, stokes_export, train_run, EVAL_FILE};
use sharecmp::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const OUTPUT_ROOT_ENV: &str = "SHARECMP_OUTPUT_ROOT";

fn after_help() -> String {
    format!(
        "Configuration keys (set in the --config JSON file, or override with --<key>=<value>;\n\
         values are JSON, a comma-separated list, or a bare string):\n{}\n\
         Relative output directories are resolved under ${OUTPUT_ROOT_ENV} when it is set.\n\
         Exit codes: 0 ok, 1 training failure, 2 configuration, 3 data or I/O, 4 checkpoint.",
        keys_help()
    )
}

#[derive(Parser)]
#[command(name = "sharecmp", version, about = "Shared-encoder RGB-polarization semantic segmentation", after_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, metrics log and evaluation.
    #[command(after_help = after_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    #[command(after_help = after_help())]
    Eval(EvalArgs),
    /// Export AoLP/DoLP/SAoLP/CAoLP images (and the PGA output) of a split.
    #[command(after_help = after_help())]
    StokesExport(StokesArgs),
    /// Count parameters of the shared model and its dual-branch baseline.
    #[command(after_help = after_help())]
    Params(ParamsArgs),
    /// Generate a synthetic RGB-polarization dataset.
    #[command(after_help = after_help())]
    GenSynth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Directory for the JSON report.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Also write predicted class-id PNGs to this directory.
    #[arg(long)]
    save_predictions: Option<PathBuf>,
    /// With --save-predictions, also write palette-coloured PNGs under color/.
    #[arg(long, requires = "save_predictions")]
    color: bool,
}

#[derive(Args)]
struct StokesArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value = "stokes")]
    out: PathBuf,
    /// Representations to write.
    #[arg(long, value_delimiter = ',', default_value = "aolp,dolp,saolp,caolp")]
    kinds: Vec<RepresentationKind>,
    /// Also write the PGA output of this model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Run configuration (JSON); the MiT-B2 defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene specification (JSON); three classes at 64x64 when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of samples.
    #[arg(short, long, default_value_t = 8)]
    n: usize,
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
}

type Overrides = Vec<(String, String)>;

/// Splits `--section.key=value` / `--section.key value` overrides from the
/// arguments clap should see. Any long flag containing a dot is an override.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn output_dir(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::mit_b2(),
    };
    for (k, v) in overrides {
        cfg.apply_override(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(dir: &Path, value: &impl serde::Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(EVAL_FILE);
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    if !overrides.is_empty() && !matches!(command, Command::Train(_) | Command::Params(_)) {
        return Err(Error::Config(format!("--{} only applies to train and params", overrides[0].0)));
    }
    match command {
        Command::Train(a) => {
            let cfg = load_config(Some(&a.config), overrides)?;
            let out = output_dir(&a.out);
            let summary = train_run(&cfg, &out)?;
            println!("{}", summary.eval.table());
            println!("trained {} steps; checkpoint {}", summary.steps, summary.checkpoint.display());
        }
        Command::Eval(a) => {
            let report = eval_run(&a.checkpoint, &a.data, &a.split)?;
            println!("{}", report.table());
            let path = write_report(&output_dir(&a.out), &report)?;
            println!("report {}", path.display());
            if let Some(dir) = &a.save_predictions {
                let dir = output_dir(dir);
                let n = predict_run(&a.checkpoint, &a.data, &a.split, &dir, a.color)?;
                println!("wrote {n} predictions to {}", dir.display());
            }
        }
        Command::StokesExport(a) => {
            let out = output_dir(&a.out);
            let n = stokes_export(&a.data, &a.split, &out, &a.kinds, a.checkpoint.as_deref())?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Params(a) => {
            let cfg = load_config(a.config.as_deref(), overrides)?;
            let report = count_params(&cfg.model_config());
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                println!("{report}");
            }
        }
        Command::GenSynth(a) => {
            let spec = match &a.spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", p.display())))?;
                    serde_json::from_str::<SyntheticSceneSpec>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSceneSpec::three_class(64, 64, 0),
            };
            let out = output_dir(&a.out);
            let index = generate_synthetic_dataset(&spec, a.n, &out)?;
            let manifest = DatasetIndex::manifest_path(&index.root, &index.split);
            let bytes = std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
            println!(
                "wrote {} samples of {} classes ({}) to {}\nmanifest {} sha256 {}",
                index.ids.len(),
                index.num_classes,
                index.class_names.join(", "),
                index.split_dir().display(),
                manifest.display(),
                hex::encode(Sha256::digest(&bytes))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are successes; usage errors are configuration errors.
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
