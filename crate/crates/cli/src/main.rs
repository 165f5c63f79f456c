use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use poseadapt::config::RunConfig;
use poseadapt::pipeline::{self, Artifacts};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "poseadapt",
    about = "Unsupervised source→target adaptation for 2D keypoint estimation on synthetic stick-figure domains"
)]
struct Cli {
    /// key=value config file; missing keys fall back to defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// override the run seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// experiment output directory
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four dataset splits (source train/test, target train/test)
    GenerateData,
    /// Supervised heatmap pre-training on the labeled source split
    Pretrain,
    /// Train the manifold pose prior (regimen from the config)
    TrainPrior,
    /// Train the keypoint→silhouette decoder on (pose, mask) pairs
    TrainKp2seg,
    /// Mean-teacher adaptation with the configured loss weights
    Adapt,
    /// Evaluate a checkpoint on a stored split
    Evaluate {
        /// checkpoint file (pretrain or adaptation kind)
        #[arg(long)]
        checkpoint: PathBuf,
        /// split name, e.g. target_test or source_test
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// Run the four-arm loss-term ablation
    Ablate,
    /// One adaptation run per pseudo-label threshold
    SweepThreshold {
        /// comma-separated τ_c values
        #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9")]
        taus: String,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = Artifacts::new(&cli.out);
    let started = Instant::now();

    match cli.command {
        Command::GenerateData => {
            let manifests = pipeline::generate(&cfg, &out)?;
            for m in manifests {
                println!("{}: {} samples (spec {})", m.split, m.count, m.spec_hash);
            }
        }
        Command::Pretrain => {
            let outcome = pipeline::pretrain(&cfg, &out)?;
            println!("{}", outcome.source_test.table_header());
            println!("{}", outcome.source_test.table_row("source_test"));
        }
        Command::TrainPrior => {
            let outcome = pipeline::train_prior_stage(&cfg, &out)?;
            for (pool, score) in &outcome.mean_scores {
                println!("mean predicted distance [{pool}]: {score:.4}");
            }
            println!("holdout AUC (manifold vs highest-noise pool): {:.4}", outcome.auc_k4);
        }
        Command::TrainKp2seg => {
            let outcome = pipeline::train_kp2seg_stage(&cfg, &out)?;
            println!("holdout IoU: {:.4}", outcome.holdout_iou);
        }
        Command::Adapt => {
            let outcome = pipeline::adapt_stage(&cfg, &out, "adapt")?;
            println!("{}", outcome.target_test.table_header());
            println!("{}", outcome.target_test.table_row("target_test"));
            println!("mean accepted pseudo-label fraction: {:.4}", outcome.mean_accepted_fraction);
        }
        Command::Evaluate { checkpoint, split } => {
            let report = pipeline::evaluate_checkpoint(&cfg, &out, &checkpoint, &split)?;
            println!("{}", report.table_header());
            println!("{}", report.table_row(&split));
        }
        Command::Ablate => {
            let rows = pipeline::ablate(&cfg, &out)?;
            println!("{}", rows[0].report.table_header());
            for r in &rows {
                println!("{}", r.report.table_row(&r.label));
            }
        }
        Command::SweepThreshold { taus } => {
            let taus: Vec<f64> = taus
                .split(',')
                .map(|t| t.trim().parse::<f64>().context("bad tau value"))
                .collect::<Result<_>>()?;
            let rows = pipeline::sweep_threshold(&cfg, &out, &taus)?;
            println!("{:<8}{:>10}  avg PCK", "tau_c", "accepted");
            for r in &rows {
                println!("{:<8}{:>10.4}  {:.2}", r.tau_c, r.mean_accepted_fraction, r.report.average);
            }
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
