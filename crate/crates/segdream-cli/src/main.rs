//! Command-line entry point: training, evaluation, ablation sweeps, offline
//! mask generation, and report emission.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use clap::{Parser, Subcommand};
use segdream::config::{RunConfig, Variant};
use segdream::containers::{read_episodes, write_masks, MaskHeader};
use segdream::error::SdError;
use segdream::evalkit::report::emit_report;
use segdream::maskprov::MaskProvider;
use segdream::trainer::{evaluate_checkpoint, run, run_is_complete, RunOptions};
use std::path::PathBuf;

/// Environment variable selecting the global output root; all run and
/// report directories are resolved against it unless given as absolute.
const OUT_ROOT_VAR: &str = "SEGDREAM_OUT";

#[derive(Parser)]
#[command(
    name = "segdream",
    about = "World-model RL with masked reconstruction targets and a selective L2 loss",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration to completion.
    Train {
        /// TOML configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path overrides, e.g. --set model.variant=sd_naive
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (under the output root unless absolute).
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Record training episodes to an episode container.
        #[arg(long)]
        record: bool,
        /// Two-thread actor/learner mode (not deterministic).
        #[arg(long)]
        parallel: bool,
        /// Print evaluation progress.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on held-out distractor seeds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation episodes.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Evaluation seed (selects a held-out distractor stream).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a variants x seeds sweep and emit a comparison report.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation")]
        out_dir: PathBuf,
        #[arg(long)]
        verbose: bool,
    },
    /// Generate a mask container for a recorded episode container.
    GenMasks {
        /// Source episode container (.sdep).
        #[arg(long)]
        episodes: PathBuf,
        /// Output mask container (.sdmk).
        #[arg(long)]
        out: PathBuf,
        /// Provider overrides, e.g. --set masks.p_fn_pixel=0.2
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Emit plots and a summary table from completed run directories.
    Report {
        /// Run directories (each holding config.toml and metrics.jsonl).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_out(dir: &PathBuf) -> PathBuf {
    if dir.is_absolute() {
        dir.clone()
    } else {
        out_root().join(dir)
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig, SdError> {
    let base = match path {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    base.apply_overrides(overrides)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap help/version output is success; everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), SdError> {
    match cli.command {
        Command::Train {
            config,
            set,
            out_dir,
            record,
            parallel,
            verbose,
        } => {
            let cfg = load_config(&config, &set)?;
            let mut opts = RunOptions::new(resolve_out(&out_dir));
            opts.record_episodes = record;
            opts.parallel = parallel;
            opts.quiet = !verbose;
            let report = run(&cfg, &opts)?;
            println!(
                "run complete: {} env steps, {} updates, {} episodes, final eval return {:.3}",
                report.env_steps, report.updates, report.episodes, report.final_eval_return
            );
            println!("artifacts in {}", report.out_dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let (returns, iou) = evaluate_checkpoint(&checkpoint, episodes, seed)?;
            let (mean, sem) = segdream::evalkit::mean_sem(&returns);
            println!("episodes: {}", returns.len());
            println!("mean return: {mean:.3} +- {sem:.3} (SEM over episodes)");
            match iou {
                Some(v) => println!("episodic IoU (mask head vs ground truth): {v:.4}"),
                None => println!("mask head: none (variant without mask decoder)"),
            }
            Ok(())
        }
        Command::Ablate {
            config,
            set,
            variants,
            seeds,
            out_dir,
            verbose,
        } => {
            let base = load_config(&config, &set)?;
            let parsed: Vec<Variant> = variants
                .iter()
                .map(|v| Variant::parse(v))
                .collect::<Result<_, _>>()?;
            let root = resolve_out(&out_dir);
            std::fs::create_dir_all(&root)?;
            let mut run_dirs = Vec::new();
            for variant in &parsed {
                for &seed in &seeds {
                    let cell_dir = root.join(format!("{}_s{}", variant.name(), seed));
                    run_dirs.push(cell_dir.clone());
                    if run_is_complete(&cell_dir) {
                        println!("skip {} (already complete)", cell_dir.display());
                        continue;
                    }
                    let cfg = base.apply_overrides(&[
                        format!("model.variant={}", variant.name()),
                        format!("seed={seed}"),
                    ])?;
                    let mut opts = RunOptions::new(cell_dir.clone());
                    opts.quiet = !verbose;
                    println!("running {} ...", cell_dir.display());
                    let report = run(&cfg, &opts)?;
                    println!(
                        "  final eval return {:.3} ({} updates)",
                        report.final_eval_return, report.updates
                    );
                }
            }
            let report_dir = root.join("report");
            let summary = emit_report(&run_dirs, &report_dir)?;
            println!("report in {}", report_dir.display());
            for g in &summary.groups {
                println!(
                    "  {}: final return {:.3} +- {:.3} over seeds {:?}",
                    g.label, g.final_return_mean, g.final_return_sem, g.seeds
                );
            }
            Ok(())
        }
        Command::GenMasks { episodes, out, set } => {
            let (header, eps) = read_episodes(&episodes)?;
            // provider settings come from the container header plus overrides
            let masks = segdream::config::apply_mask_overrides(&header.masks, &set)?;
            let mut provider = MaskProvider::new(masks.clone())?;
            let mut all = Vec::with_capacity(eps.len());
            for ep in &eps {
                let mut frames = Vec::with_capacity(ep.len());
                for f in &ep.frames {
                    let obs = segdream::replay::dequantize_obs(&f.obs);
                    let frame = provider.provide(&obs, &f.mask_gt)?;
                    frames.push(frame.mask);
                }
                all.push(frames);
            }
            write_masks(
                &out,
                &MaskHeader {
                    image_size: header.image_size,
                    provider: masks.clone(),
                    source: episodes.display().to_string(),
                },
                &all,
            )?;
            println!(
                "wrote {} episodes of masks to {}",
                all.len(),
                out.display()
            );
            Ok(())
        }
        Command::Report { runs, out_dir } => {
            let dir = resolve_out(&out_dir);
            let summary = emit_report(&runs, &dir)?;
            println!("report written to {}", dir.display());
            for f in &summary.files {
                println!("  {}", f.display());
            }
            Ok(())
        }
    }
}
