//! Command-line pipeline: data generation, training, loss-scale audit,
//! evaluation, ablation sweeps, and error-map rendering.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid config, 4 runtime failure.
//! Failures print one machine-parsable line: `error: <category>: <detail>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use voxray::metrics::error_map;
use voxray::perceptual::PerceptualBackbone;
use voxray::phantom::{build_dataset, PhantomSpec, Split};
use voxray::render::save_error_map_pngs;
use voxray::trainer::{
    audit_from_config, default_ablation_grid, evaluate, load_generator, run_ablation, train,
    EvalModel, TrainConfig,
};
use voxray::vio;

#[derive(Parser)]
#[command(
    name = "voxray",
    about = "Biplanar X-ray to CT reconstruction workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with paired X-ray projections.
    GenData(GenDataArgs),
    /// Train from a TOML run config.
    Train(TrainArgs),
    /// Epoch-0 loss-scale audit of a run config.
    Audit(AuditArgs),
    /// Evaluate a checkpoint (or the identity hook) on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate the component ablation grid.
    Ablate(TrainArgs),
    /// Render error-map slices between two volumes.
    ErrorMap(ErrorMapArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Cubic volume extent (e.g. 32).
    #[arg(long)]
    shape: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for volumes and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Ellipsoids per phantom.
    #[arg(long, default_value_t = 8)]
    ellipsoids: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML mirroring the training configuration).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    config: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path, or `identity-hook` to score ground truth against
    /// itself.
    #[arg(long)]
    ckpt: String,
    /// Dataset manifest; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output directory for the JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ErrorMapArgs {
    /// Ground-truth volume (.vol with .json sidecar), normalized scale.
    #[arg(long)]
    truth: PathBuf,
    /// Reconstruction volume.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

struct CliError {
    code: u8,
    category: &'static str,
    detail: String,
}

impl CliError {
    fn config(detail: String) -> Self {
        CliError {
            code: 3,
            category: "config",
            detail,
        }
    }
    fn runtime(detail: String) -> Self {
        CliError {
            code: 4,
            category: "runtime",
            detail,
        }
    }
    fn from_config_error(e: voxray::Error) -> Self {
        CliError {
            code: 3,
            category: e.category(),
            detail: e.to_string(),
        }
    }
    fn from_runtime_error(e: voxray::Error) -> Self {
        let code = match &e {
            voxray::Error::Config(_) | voxray::Error::DegenerateRange(_) => 3,
            _ => 4,
        };
        CliError {
            code,
            category: e.category(),
            detail: e.to_string(),
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let cfg: TrainConfig =
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(CliError::from_config_error)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => {
            if a.shape < 16 || !a.shape.is_power_of_two() {
                return Err(CliError::config(format!(
                    "shape must be a power of two >= 16, got {}",
                    a.shape
                )));
            }
            let template = PhantomSpec {
                n_ellipsoids: a.ellipsoids,
                seed: a.seed,
                shape: [a.shape, a.shape, a.shape],
                ..Default::default()
            };
            let entries =
                build_dataset(a.n, &template, &a.out).map_err(CliError::from_runtime_error)?;
            let n_train = entries.iter().filter(|e| e.split == Split::Train).count();
            println!(
                "wrote {} samples ({} train / {} test)",
                entries.len(),
                n_train,
                entries.len() - n_train
            );
            println!("manifest: {}", a.out.join("manifest.json").display());
            Ok(())
        }
        Command::Train(a) => {
            let cfg = read_config(&a.config)?;
            let result = train(cfg, &a.out).map_err(CliError::from_runtime_error)?;
            println!("steps: {}", result.steps);
            println!("loss log: {}", result.loss_log_path.display());
            println!("checkpoint: {}", result.final_checkpoint.display());
            Ok(())
        }
        Command::Audit(a) => {
            let cfg = read_config(&a.config)?;
            let report = audit_from_config(&cfg).map_err(CliError::from_runtime_error)?;
            print!("{}", report.summary());
            if let Some(out) = a.out {
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                std::fs::write(&out, json)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
                println!("report: {}", out.display());
            }
            Ok(())
        }
        Command::Eval(a) => {
            std::fs::create_dir_all(&a.out)
                .map_err(|e| CliError::runtime(format!("{}: {e}", a.out.display())))?;
            let report = if a.ckpt == "identity-hook" {
                let manifest = a.manifest.ok_or_else(|| {
                    CliError::config("identity-hook evaluation needs --manifest".into())
                })?;
                let backbone = PerceptualBackbone::seeded(Default::default())
                    .map_err(CliError::from_runtime_error)?;
                evaluate(
                    &EvalModel::IdentityHook,
                    &manifest,
                    a.split.into(),
                    &backbone,
                )
                .map_err(CliError::from_runtime_error)?
            } else {
                let (generator, cfg) =
                    load_generator(Path::new(&a.ckpt)).map_err(CliError::from_runtime_error)?;
                let manifest = a.manifest.unwrap_or_else(|| cfg.manifest.clone());
                let backbone = PerceptualBackbone::seeded(cfg.backbone.clone())
                    .map_err(CliError::from_runtime_error)?;
                evaluate(
                    &EvalModel::Generator(&generator),
                    &manifest,
                    a.split.into(),
                    &backbone,
                )
                .map_err(CliError::from_runtime_error)?
            };
            print!("{}", report.table());
            let json_path = a.out.join("metrics.json");
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            std::fs::write(&json_path, json)
                .map_err(|e| CliError::runtime(format!("{}: {e}", json_path.display())))?;
            println!("report: {}", json_path.display());
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = read_config(&a.config)?;
            let table = run_ablation(&cfg, &default_ablation_grid(), &a.out)
                .map_err(CliError::from_runtime_error)?;
            print!("{}", table.text());
            println!("table: {}", a.out.join("ablation.json").display());
            Ok(())
        }
        Command::ErrorMap(a) => {
            let truth = vio::load_volume(&a.truth).map_err(CliError::from_runtime_error)?;
            let pred = vio::load_volume(&a.pred).map_err(CliError::from_runtime_error)?;
            let yd = voxray::metrics::to_display(truth.data());
            let pd = voxray::metrics::to_display(pred.data());
            let em = error_map(&yd, &pd).map_err(CliError::from_runtime_error)?;
            let stem = a
                .pred
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "error".into());
            let paths =
                save_error_map_pngs(&em, &a.out, &stem).map_err(CliError::from_runtime_error)?;
            for p in paths {
                println!("wrote: {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category, e.detail);
            ExitCode::from(e.code)
        }
    }
}
