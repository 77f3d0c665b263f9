//! Command-line surface for the breast-density classification pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mammodens::config::RunConfig;
use mammodens::dataset::Split;
use mammodens::ensemble::EnsembleSpec;
use mammodens::pipeline::{
    cmd_ensemble, cmd_evaluate, cmd_gradcheck, cmd_preprocess, cmd_roc, cmd_synth, cmd_train,
};

/// Gradient self-check threshold for the `gradcheck` command.
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "mammodens",
    about = "Breast-density classification pipeline: synthetic data, CLAHE \
             preprocessing, attention mini-CNNs, combined focal label-smoothing \
             loss, weighted soft-voting ensemble",
    after_help = "Any flag of the form --SECTION.KEY VALUE (e.g. --loss.gamma 2.5, \
                  --train.batch_size 16) overrides the matching configuration field."
)]
struct Cli {
    /// JSON run configuration (otherwise the built-in profile applies)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for the built-in profile, or a config-seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Use the full 512x1024 profile instead of the desk-scale default
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArg {
    /// Manifest CSV produced by `synth` or `preprocess`
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset with stratified split assignments
    Synth,
    /// Normalize, CLAHE and resize every image in a manifest
    Preprocess(ManifestArg),
    /// Train the configured models on the train/val splits
    Train {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Train only the named model
        #[arg(long)]
        model: Option<String>,
        /// Cap the number of epochs (overrides the configuration)
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Metrics for one checkpoint on a manifest split
    Evaluate {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Weighted soft voting over member checkpoints
    Ensemble {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Member checkpoints (alternative to --members)
        #[arg(long, num_args = 1.., conflicts_with = "members")]
        checkpoints: Vec<PathBuf>,
        /// Ensemble definition JSON listing the member checkpoints
        #[arg(long)]
        members: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// ROC curves (CSV + SVG) for checkpoints and their ensemble
    Roc {
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output basename; writes <basename>.svg and per-model CSVs
        #[arg(long)]
        basename: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck,
    /// Print the effective run configuration (profile + overrides) as JSON
    Config,
}

/// Pull `--a.b value` and `--a.b=value` tokens out of the raw arguments;
/// clap handles the rest.
fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(key) = arg.strip_prefix("--") {
            if key.contains('.') {
                if let Some((k, v)) = key.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                    i += 1;
                    continue;
                }
                if i + 1 < args.len() {
                    overrides.push((key.to_string(), args[i + 1].clone()));
                    i += 2;
                    continue;
                }
            }
        }
        rest.push(arg.clone());
        i += 1;
    }
    (rest, overrides)
}

fn build_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, String> {
    let seed = cli.seed.unwrap_or(42);
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path).map_err(|e| e.to_string())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg
        }
        None if cli.paper_scale => RunConfig::paper_scale(seed),
        None => RunConfig::desk_scale(seed),
    };
    if !overrides.is_empty() {
        cfg = cfg.apply_overrides(overrides).map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), String> {
    let err = |e: mammodens::pipeline::PipelineError| e.to_string();
    match &cli.command {
        Command::Synth => {
            let cfg = build_config(&cli, &overrides)?;
            let manifest = cmd_synth(&cfg, &cli.out).map_err(err)?;
            println!(
                "wrote {} records to {}",
                cfg.dataset.synth.n_total,
                manifest.display()
            );
        }
        Command::Preprocess(m) => {
            let cfg = build_config(&cli, &overrides)?;
            let manifest = cmd_preprocess(&cfg, &m.manifest, &cli.out).map_err(err)?;
            println!("wrote conditioned manifest {}", manifest.display());
        }
        Command::Train {
            manifest,
            model,
            max_epochs,
        } => {
            let mut overrides = overrides;
            if let Some(n) = max_epochs {
                overrides.push(("train.max_epochs".into(), n.to_string()));
            }
            let cfg = build_config(&cli, &overrides)?;
            let outcomes =
                cmd_train(&cfg, &manifest.manifest, &cli.out, model.as_deref()).map_err(err)?;
            for o in outcomes {
                match o.log.best_epoch() {
                    Some(best) => {
                        let e = &o.log.entries[best];
                        println!(
                            "{}: best epoch {} val_loss {:.6} ({}) -> {}",
                            o.name,
                            e.epoch,
                            e.val_loss,
                            e.val.human_readable(),
                            o.checkpoint.display()
                        );
                    }
                    None => println!(
                        "{}: wrote initial checkpoint {}",
                        o.name,
                        o.checkpoint.display()
                    ),
                }
            }
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            split,
        } => {
            let csv = cli.out.join("metrics.csv");
            std::fs::create_dir_all(&cli.out).map_err(|e| e.to_string())?;
            let report =
                cmd_evaluate(checkpoint, &manifest.manifest, *split, Some(&csv)).map_err(err)?;
            println!("{}", report.human_readable());
            println!("wrote {}", csv.display());
        }
        Command::Ensemble {
            manifest,
            checkpoints,
            members,
            split,
        } => {
            let cfg = build_config(&cli, &overrides)?;
            let (paths, metric) = match members {
                Some(file) => {
                    let text = std::fs::read_to_string(file).map_err(|e| e.to_string())?;
                    let spec: EnsembleSpec =
                        serde_json::from_str(&text).map_err(|e| e.to_string())?;
                    let base = file.parent().map(PathBuf::from).unwrap_or_default();
                    let paths = spec
                        .members
                        .iter()
                        .map(|p| {
                            if p.is_absolute() {
                                p.clone()
                            } else {
                                base.join(p)
                            }
                        })
                        .collect();
                    (paths, spec.metric)
                }
                None if checkpoints.is_empty() => {
                    return Err("pass --checkpoints or --members".into())
                }
                None => (checkpoints.clone(), cfg.ensemble.metric),
            };
            let outcome =
                cmd_ensemble(&paths, metric, &manifest.manifest, *split, &cli.out).map_err(err)?;
            for (name, w) in &outcome.weights {
                println!("weight {name}: {w:.4}");
            }
            println!("{}", outcome.report.human_readable());
            println!("wrote {}", outcome.metrics_path.display());
            println!("wrote {}", outcome.predictions_path.display());
        }
        Command::Roc {
            manifest,
            checkpoints,
            split,
            basename,
        } => {
            if checkpoints.is_empty() {
                return Err("pass at least one --checkpoints entry".into());
            }
            let cfg = build_config(&cli, &overrides)?;
            let base = basename.clone().unwrap_or_else(|| cli.out.join("roc"));
            let aucs = cmd_roc(
                checkpoints,
                cfg.ensemble.metric,
                &manifest.manifest,
                *split,
                &base,
            )
            .map_err(err)?;
            for (name, auc) in aucs {
                println!("{name}: AUC {auc:.4}");
            }
            println!("wrote {}.svg", base.display());
        }
        Command::Config => {
            let cfg = build_config(&cli, &overrides)?;
            cfg.validate().map_err(|e| e.to_string())?;
            println!("{}", cfg.to_json());
        }
        Command::Gradcheck => {
            let cfg = build_config(&cli, &overrides)?;
            let rows = cmd_gradcheck(&cfg, cli.seed.unwrap_or(42)).map_err(err)?;
            let mut worst = 0.0f64;
            for row in &rows {
                println!(
                    "{:<28} max relative error {:.3e} over {} checks",
                    row.target, row.max_rel_err, row.checks
                );
                worst = worst.max(row.max_rel_err);
            }
            if worst >= GRADCHECK_TOLERANCE {
                return Err(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
                ));
            }
            println!("max relative error {worst:.3e} < {GRADCHECK_TOLERANCE:.0e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
