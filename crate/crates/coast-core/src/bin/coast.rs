//! Command-line driver: data generation, the two training stages, the
//! ablation grid, evaluation, and the gradient-check battery.

use clap::{Parser, Subcommand};
use coast_core::config::CoastConfig;
use coast_core::data::{export_benchmark, import_benchmark, make_benchmark};
use coast_core::metrics::{evaluate_all, export_uncertainty_map};
use coast_core::model::{Head, ModelBundle};
use coast_core::trainer::{run_ablation_suite, selftrain_run};
use coast_core::warmup::warmup_run;
use coast_core::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "coast", about = "Multi-target adaptive segmentation on procedural scenes")]
struct Cli {
    /// JSON config file; omitted sections use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark datasets and write them to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: adversarial warm-up from random initialization.
    Warmup {
        /// Benchmark directory from `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: cooperative self-training from a warm-up checkpoint.
    Selftrain {
        #[arg(long)]
        data: PathBuf,
        /// Warm-up checkpoint to start from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for checkpoints and the metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also export the final pseudo-label bank here.
        #[arg(long)]
        export_bank: Option<PathBuf>,
    },
    /// Run all ablation variants from one shared warm-up checkpoint.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output CSV (variant,seed,avg_miou).
        #[arg(long)]
        out: PathBuf,
        /// Stage-2 seeds, one run per seed per variant.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Evaluate a checkpoint; defaults to the agnostic head over all
    /// target eval sets plus the unseen domain.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate one domain-specific head (index) instead of the
        /// agnostic head.
        #[arg(long)]
        head: Option<usize>,
        /// Only evaluate the unseen domain.
        #[arg(long, default_value_t = false)]
        unseen_only: bool,
        /// Export a per-image uncertainty map for this target-eval sample.
        #[arg(long)]
        uncertainty_sample: Option<usize>,
        /// Where to write the uncertainty PGM.
        #[arg(long)]
        uncertainty_out: Option<PathBuf>,
    },
    /// Finite-difference verification of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<CoastConfig> {
    match path {
        Some(p) => CoastConfig::load(p),
        None => Ok(CoastConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenData { out } => {
            let bench = make_benchmark(&cfg.data)?;
            export_benchmark(&bench, &out)?;
            println!(
                "wrote {} source, {}x{} target, {} unseen samples to {}",
                bench.source.samples.len(),
                bench.targets.len(),
                bench.targets[0].samples.len(),
                bench.unseen_eval.samples.len(),
                out.display()
            );
        }
        Command::Warmup { data, out, log } => {
            let bench = import_benchmark(&data)?;
            let mut bundle = ModelBundle::new(
                cfg.model.clone(),
                bench.source.num_classes,
                bench.targets.len(),
                cfg.warmup.seed,
            )?;
            let csv = warmup_run(&mut bundle, &bench.source, &bench.targets, &cfg.warmup)?;
            bundle.save_checkpoint(&out)?;
            if let Some(log) = log {
                std::fs::write(&log, csv)?;
            }
            println!("warm-up finished; checkpoint at {}", out.display());
        }
        Command::Selftrain { data, ckpt, out, export_bank } => {
            let bench = import_benchmark(&data)?;
            let mut bundle = ModelBundle::load_checkpoint(&ckpt, cfg.model.clone())?;
            std::fs::create_dir_all(&out)?;
            let result = selftrain_run(&mut bundle, &bench, &cfg.train, Some(&out))?;
            std::fs::write(out.join("metrics.csv"), &result.metrics_csv)?;
            if let Some(dir) = export_bank {
                result.bank.export(&dir)?;
            }
            let eval_refs: Vec<_> = bench.target_eval.iter().collect();
            let report = evaluate_all(&bundle, &eval_refs, Head::Agnostic)?;
            println!("self-training finished; avg target mIoU {:.4}", report.avg_miou);
            println!("artifacts in {}", out.display());
        }
        Command::Ablate { data, ckpt, out, seeds } => {
            let bench = import_benchmark(&data)?;
            let warm = ModelBundle::load_checkpoint(&ckpt, cfg.model.clone())?;
            let warmups: Vec<(u64, ModelBundle)> =
                seeds.iter().map(|&s| (s, warm.clone())).collect();
            let result = run_ablation_suite(&warmups, &bench, &cfg.train)?;
            std::fs::write(&out, &result.csv)?;
            for row in &result.rows {
                println!("variant {:>3} seed {:>3} avg mIoU {:.4}", row.variant, row.seed, row.avg_miou);
            }
        }
        Command::Eval {
            data,
            ckpt,
            out,
            head,
            unseen_only,
            uncertainty_sample,
            uncertainty_out,
        } => {
            let bench = import_benchmark(&data)?;
            let bundle = ModelBundle::load_checkpoint(&ckpt, cfg.model.clone())?;
            let selector = match head {
                Some(i) => Head::Domain(i),
                None => Head::Agnostic,
            };
            let datasets: Vec<&coast_core::data::DomainDataset> = if unseen_only {
                vec![&bench.unseen_eval]
            } else {
                let mut v: Vec<_> = bench.target_eval.iter().collect();
                v.push(&bench.unseen_eval);
                v
            };
            let report = evaluate_all(&bundle, &datasets, selector)?;
            print!("{}", report.to_csv());
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv())?;
            }
            if let (Some(sample), Some(upath)) = (uncertainty_sample, uncertainty_out) {
                let img = &bench.target_eval[0].samples[sample].image;
                let sources: Vec<(usize, &coast_core::Tensor)> = bench
                    .target_eval
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(j, ds)| (j, &ds.samples[sample % ds.samples.len()].image))
                    .collect();
                export_uncertainty_map(&bundle, img, 0, &sources, cfg.train.gamma, &upath)?;
                println!("uncertainty map written to {}", upath.display());
            }
        }
        Command::GradCheck { seed } => {
            grad_check_battery(seed)?;
        }
    }
    Ok(())
}

/// The same randomized battery the acceptance suite runs, printed per op.
fn grad_check_battery(seed: u64) -> Result<()> {
    let results = coast_core::checks::grad_check_battery(seed)?;
    let mut worst: f64 = 0.0;
    for (name, err) in &results {
        println!("{name:<28} max rel error {err:.3e}");
        worst = worst.max(*err);
    }
    println!("worst case {worst:.3e} (tolerance 1e-4)");
    if worst > 1e-4 {
        return Err(coast_core::CoastError::NonFinite(format!(
            "gradient check failed: {worst:.3e} > 1e-4"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
