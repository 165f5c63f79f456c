//! End-to-end stage drivers shared by the CLI and the acceptance suite:
//! data generation, the three offline trainings, adaptation, evaluation,
//! the loss-term ablation and the pseudo-label threshold sweep.

use crate::config::RunConfig;
use crate::context::{build_aux_set, eval_kp2seg, train_kp2seg, AuxSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate_net, PckReport};
use crate::geometry::orientation_vectors;
use crate::nets::{load_checkpoint, save_checkpoint, Checkpoint, HeatmapNet, MaskDecoder};
use crate::prior::{build_prior_dataset, perturb_pose, roc_auc, train_prior, PosePrior};
use crate::seeds;
use crate::synth::{self, generate_dataset, read_split, DatasetManifest, SplitFile};
use crate::teacher::{logs_to_csv, AdaptTrainer, PretrainTrainer};
use std::path::{Path, PathBuf};

/// Output directory layout for one experiment.
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Artifacts {
        Artifacts { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.data_dir().join(format!("{name}.bin"))
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn metrics_path(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }

    pub fn report_path(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.{ext}"))
    }

    fn write(&self, path: &Path, contents: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

// ── data generation ─────────────────────────────────────────────────────────

/// Generate the four splits: labeled source train/test, unlabeled target
/// train, labeled target test. Mask noise (when configured) applies to the
/// target-train pseudo masks only.
pub fn generate(cfg: &RunConfig, out: &Artifacts) -> Result<Vec<DatasetManifest>> {
    let skel = cfg.skeleton()?;
    let adult = synth::adult_spec();
    let infant = synth::infant_spec();
    let dir = out.data_dir();
    let seed = cfg.seed;
    Ok(vec![
        generate_dataset(&adult, &skel, cfg.source_train, seeds::stream_key(seed, "data/source_train", 0), &dir, "source_train", true, 0.0)?,
        generate_dataset(&adult, &skel, cfg.source_test, seeds::stream_key(seed, "data/source_test", 0), &dir, "source_test", true, 0.0)?,
        generate_dataset(&infant, &skel, cfg.target_train, seeds::stream_key(seed, "data/target_train", 0), &dir, "target_train", false, cfg.mask_noise)?,
        generate_dataset(&infant, &skel, cfg.target_test, seeds::stream_key(seed, "data/target_test", 0), &dir, "target_test", true, 0.0)?,
    ])
}

pub fn load_split(out: &Artifacts, name: &str) -> Result<SplitFile> {
    read_split(&out.split_path(name))
}

// ── source pre-training ─────────────────────────────────────────────────────

pub struct PretrainOutcome {
    pub source_test: PckReport,
    pub epoch_losses: Vec<f64>,
}

pub fn pretrain(cfg: &RunConfig, out: &Artifacts) -> Result<PretrainOutcome> {
    let source = load_split(out, "source_train")?;
    let mut trainer = PretrainTrainer::new(cfg, &source, cfg.seed)?;
    trainer.run(trainer.total_steps())?;
    save_checkpoint(&out.checkpoint_path("pretrain"), &trainer.checkpoint(&cfg.hash()))?;

    let mut csv = String::from("step,l_sup\n");
    for (i, l) in trainer.losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, l));
    }
    out.write(&out.metrics_path("pretrain"), &csv)?;

    let test = load_split(out, "source_test")?;
    let report = evaluate_net(&trainer.net, &test, cfg.pck_alpha, &cfg.group_indices()?)?;
    Ok(PretrainOutcome { source_test: report, epoch_losses: trainer.epoch_means() })
}

pub fn load_pretrained(cfg: &RunConfig, out: &Artifacts) -> Result<HeatmapNet> {
    let ck = load_checkpoint(&out.checkpoint_path("pretrain"), "heatmap")?;
    Ok(HeatmapNet { params: ck.extract_store("", true)?, k: cfg.keypoint_names.len() })
}

// ── pose prior ──────────────────────────────────────────────────────────────

pub struct PriorOutcome {
    pub auc_k4: f64,
    /// mean predicted distance for held-out manifold poses then each κ pool
    pub mean_scores: Vec<(String, f64)>,
    pub final_loss: f64,
}

fn pose_pool_orientations(
    pool: &[Vec<[f64; 2]>],
    skel: &crate::geometry::Skeleton,
) -> Vec<Vec<[f64; 2]>> {
    pool.iter().map(|c| orientation_vectors(c, skel).0).collect()
}

/// Train the prior under the configured regimen and score its separation on
/// held-out pools.
pub fn train_prior_stage(cfg: &RunConfig, out: &Artifacts) -> Result<PriorOutcome> {
    let skel = cfg.skeleton()?;
    let adult = synth::adult_spec();
    let held_out = synth::infant_prior_spec();
    let m = cfg.prior_manifold_count;
    let mut prior = PosePrior::init(&skel, cfg.prior_latent, cfg.prior_head_hidden, cfg.seed);

    let agnostic_pool = pose_pool_orientations(
        &synth::prior_pose_pool(&adult, &held_out, &skel, m, seeds::stream_key(cfg.seed, "prior/pool", 0)),
        &skel,
    );
    let mut final_loss = f64::NAN;
    match cfg.prior_regimen.as_str() {
        "direct" => {
            let ds = build_prior_dataset(&agnostic_pool, &cfg.prior_kappas, &cfg.prior_stage_mult, cfg.seed)?;
            let logs = train_prior(&mut prior, &ds, &cfg.prior_stage_epochs, cfg.prior_batch, cfg.prior_lr, cfg.seed)?;
            if let Some(last) = logs.last() {
                final_loss = last.loss;
            }
            let dsp = out.data_dir().join("prior_dataset.bin");
            std::fs::create_dir_all(out.data_dir()).map_err(|e| Error::io(out.data_dir().display().to_string(), e))?;
            ds.save(&dsp)?;
        }
        "source-finetune" => {
            let source_pool = pose_pool_orientations(
                &synth::source_pose_pool(&adult, &skel, m, seeds::stream_key(cfg.seed, "prior/source-pool", 0)),
                &skel,
            );
            let ds0 = build_prior_dataset(&source_pool, &cfg.prior_kappas, &cfg.prior_stage_mult, cfg.seed ^ 1)?;
            train_prior(&mut prior, &ds0, &cfg.prior_stage_epochs, cfg.prior_batch, cfg.prior_lr, cfg.seed ^ 1)?;
            let ds = build_prior_dataset(&agnostic_pool, &cfg.prior_kappas, &cfg.prior_stage_mult, cfg.seed)?;
            let logs = train_prior(&mut prior, &ds, &cfg.prior_stage_epochs, cfg.prior_batch, cfg.prior_lr, cfg.seed)?;
            if let Some(last) = logs.last() {
                final_loss = last.loss;
            }
        }
        other => return Err(Error::Config(format!("unknown prior regimen '{other}'"))),
    }

    let mut ck = Checkpoint::new("prior", &cfg.hash(), 0, cfg.seed);
    ck.add_store("", &prior.params, false);
    save_checkpoint(&out.checkpoint_path("prior"), &ck)?;

    let outcome = score_prior_separation(cfg, &prior)?;
    let mut csv = String::from("pool,mean_score\n");
    for (name, v) in &outcome.mean_scores {
        csv.push_str(&format!("{name},{v}\n"));
    }
    csv.push_str(&format!("auc_k4,{}\n", outcome.auc_k4));
    out.write(&out.metrics_path("prior"), &csv)?;
    Ok(PriorOutcome { final_loss, ..outcome })
}

/// Held-out separation: fresh manifold poses vs their κ-perturbed variants.
pub fn score_prior_separation(cfg: &RunConfig, prior: &PosePrior) -> Result<PriorOutcome> {
    let skel = cfg.skeleton()?;
    let adult = synth::adult_spec();
    let held_out = synth::infant_prior_spec();
    let n = 300;
    let manifold = pose_pool_orientations(
        &synth::prior_pose_pool(&adult, &held_out, &skel, n, seeds::stream_key(cfg.seed, "prior/holdout", 1)),
        &skel,
    );
    let manifold_scores = prior.score(&manifold)?;
    let mut mean_scores = vec![(
        "manifold".to_string(),
        manifold_scores.iter().sum::<f64>() / n as f64,
    )];
    let mut auc_k4 = 0.5;
    for (i, &kappa) in cfg.prior_kappas.iter().enumerate() {
        let noisy: Vec<Vec<[f64; 2]>> = manifold
            .iter()
            .enumerate()
            .map(|(j, pose)| {
                let mut rng = seeds::stream(cfg.seed, &format!("prior/holdout-noise/{i}"), j as u64);
                perturb_pose(pose, kappa, &mut rng)
            })
            .collect::<Result<_>>()?;
        let scores = prior.score(&noisy)?;
        mean_scores.push((format!("k{kappa}"), scores.iter().sum::<f64>() / n as f64));
        if i == cfg.prior_kappas.len() - 1 {
            auc_k4 = roc_auc(&scores, &manifold_scores);
        }
    }
    Ok(PriorOutcome { auc_k4, mean_scores, final_loss: f64::NAN })
}

pub fn load_prior(cfg: &RunConfig, out: &Artifacts) -> Result<PosePrior> {
    let ck = load_checkpoint(&out.checkpoint_path("prior"), "prior")?;
    Ok(PosePrior {
        params: ck.extract_store("", false)?,
        skeleton: cfg.skeleton()?,
        latent: cfg.prior_latent,
        head_hidden: cfg.prior_head_hidden,
    })
}

// ── keypoint→silhouette decoder ─────────────────────────────────────────────

pub struct Kp2SegOutcome {
    pub holdout_iou: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn train_kp2seg_stage(cfg: &RunConfig, out: &Artifacts) -> Result<Kp2SegOutcome> {
    let skel = cfg.skeleton()?;
    let adult = synth::adult_spec();
    let aux = build_aux_set(&adult, &skel, cfg.kp2seg_aux_count, seeds::stream_key(cfg.seed, "aux/train", 0));
    let mut decoder = MaskDecoder::init(skel.k(), cfg.seed);
    let logs = train_kp2seg(&mut decoder, &aux, cfg, cfg.seed)?;

    let mut ck = Checkpoint::new("kp2seg", &cfg.hash(), 0, cfg.seed);
    ck.add_store("", &decoder.params, false);
    save_checkpoint(&out.checkpoint_path("kp2seg"), &ck)?;

    let holdout: AuxSet = build_aux_set(&adult, &skel, 200, seeds::stream_key(cfg.seed, "aux/holdout", 0));
    let holdout_iou = eval_kp2seg(&decoder, &holdout, cfg.sigma, cfg.kp2seg_threshold)?;

    let mut csv = String::from("epoch,loss\n");
    for l in &logs {
        csv.push_str(&format!("{},{}\n", l.epoch, l.loss));
    }
    csv.push_str(&format!("holdout_iou,{holdout_iou}\n"));
    out.write(&out.metrics_path("kp2seg"), &csv)?;
    Ok(Kp2SegOutcome { holdout_iou, epoch_losses: logs.iter().map(|l| l.loss).collect() })
}

pub fn load_kp2seg(cfg: &RunConfig, out: &Artifacts) -> Result<MaskDecoder> {
    let ck = load_checkpoint(&out.checkpoint_path("kp2seg"), "kp2seg")?;
    Ok(MaskDecoder { params: ck.extract_store("", false)?, k: cfg.keypoint_names.len() })
}

// ── adaptation ──────────────────────────────────────────────────────────────

pub struct AdaptOutcome {
    pub target_test: PckReport,
    pub mean_accepted_fraction: f64,
}

/// Run the full adaptation phase from the pretrain checkpoint; `metrics_name`
/// selects the CSV file and checkpoint name so ablation arms can coexist.
pub fn adapt_stage(cfg: &RunConfig, out: &Artifacts, metrics_name: &str) -> Result<AdaptOutcome> {
    let student = load_pretrained(cfg, out)?;
    let prior = if cfg.lambda_p != 0.0 { Some(load_prior(cfg, out)?.frozen_copy()) } else { None };
    let decoder = if cfg.lambda_ctx != 0.0 { Some(load_kp2seg(cfg, out)?.frozen_copy()) } else { None };
    let source = load_split(out, "source_train")?;
    let target = load_split(out, "target_train")?;
    let test = load_split(out, "target_test")?;
    let mut trainer =
        AdaptTrainer::new(cfg, student, prior, decoder, &source, &target, Some(&test), cfg.seed)?;
    trainer.run(trainer.total_steps())?;

    out.write(&out.metrics_path(metrics_name), &logs_to_csv(&trainer.logs))?;
    save_checkpoint(&out.checkpoint_path(metrics_name), &trainer.checkpoint(&cfg.hash()))?;

    let report = evaluate_net(&trainer.student, &test, cfg.pck_alpha, &cfg.group_indices()?)?;
    let mean_accepted_fraction = if trainer.logs.is_empty() {
        0.0
    } else {
        trainer.logs.iter().map(|l| l.accepted_fraction).sum::<f64>() / trainer.logs.len() as f64
    };
    Ok(AdaptOutcome { target_test: report, mean_accepted_fraction })
}

/// Evaluate any heatmap-model checkpoint ("heatmap" or "adapt" kind) on a
/// stored split.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    out: &Artifacts,
    ckpt: &Path,
    split_name: &str,
) -> Result<PckReport> {
    let k = cfg.keypoint_names.len();
    let net = match load_checkpoint(ckpt, "heatmap") {
        Ok(ck) => HeatmapNet { params: ck.extract_store("", true)?, k },
        Err(Error::CheckpointKind { .. }) => {
            let ck = load_checkpoint(ckpt, "adapt")?;
            HeatmapNet { params: ck.extract_store("student", true)?, k }
        }
        Err(e) => return Err(e),
    };
    let split = load_split(out, split_name)?;
    evaluate_net(&net, &split, cfg.pck_alpha, &cfg.group_indices()?)
}

// ── ablation and threshold sweep ────────────────────────────────────────────

pub struct AblationRow {
    pub label: String,
    /// (sup, cons, prior, ctx) loss-term flags
    pub flags: [bool; 4],
    pub report: PckReport,
}

/// The four-arm loss ablation. Every arm shares the run seed and the same
/// pretrain checkpoint; the first arm evaluates that checkpoint directly.
pub fn ablate(cfg: &RunConfig, out: &Artifacts) -> Result<Vec<AblationRow>> {
    let arms: [(&str, [bool; 4]); 4] = [
        ("Pre-Training", [true, false, false, false]),
        ("UDA", [true, true, false, false]),
        ("UDA + Prior", [true, true, true, false]),
        ("Full", [true, true, true, true]),
    ];
    let mut rows = Vec::with_capacity(4);
    for (label, flags) in arms {
        let report = if !flags[1] {
            evaluate_checkpoint(cfg, out, &out.checkpoint_path("pretrain"), "target_test")?
        } else {
            let mut arm_cfg = cfg.clone();
            arm_cfg.lambda_cons = if flags[1] { cfg.lambda_cons } else { 0.0 };
            arm_cfg.lambda_p = if flags[2] { cfg.lambda_p } else { 0.0 };
            arm_cfg.lambda_ctx = if flags[3] { cfg.lambda_ctx } else { 0.0 };
            adapt_stage(&arm_cfg, out, &format!("ablate_{}", label.replace([' ', '+'], "").to_lowercase()))?
                .target_test
        };
        rows.push(AblationRow { label: label.to_string(), flags, report });
    }
    write_ablation_reports(out, &rows)?;
    Ok(rows)
}

fn write_ablation_reports(out: &Artifacts, rows: &[AblationRow]) -> Result<()> {
    let mut csv = String::from("arm,l_sup,l_cons,l_p,l_ctx,");
    csv.push_str(&rows[0].report.csv_header());
    csv.push('\n');
    let mut table = String::new();
    table.push_str(&rows[0].report.table_header());
    table.push('\n');
    for r in rows {
        let mark = |b: bool| if b { "yes" } else { "no" };
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            mark(r.flags[0]),
            mark(r.flags[1]),
            mark(r.flags[2]),
            mark(r.flags[3]),
            r.report.csv_row()
        ));
        table.push_str(&r.report.table_row(&r.label));
        table.push('\n');
    }
    out.write(&out.report_path("ablation", "csv"), &csv)?;
    out.write(&out.report_path("ablation", "txt"), &table)
}

pub struct SweepRow {
    pub tau_c: f64,
    pub report: PckReport,
    pub mean_accepted_fraction: f64,
}

/// One adaptation run per τ_c under a shared seed.
pub fn sweep_threshold(cfg: &RunConfig, out: &Artifacts, taus: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let mut arm_cfg = cfg.clone();
        arm_cfg.tau_c = tau;
        let outcome = adapt_stage(&arm_cfg, out, &format!("sweep_tau{i}"))?;
        rows.push(SweepRow {
            tau_c: tau,
            report: outcome.target_test,
            mean_accepted_fraction: outcome.mean_accepted_fraction,
        });
    }
    let mut csv = String::from("tau_c,accepted_fraction,");
    csv.push_str(&rows[0].report.csv_header());
    csv.push('\n');
    let mut table = String::new();
    table.push_str(&format!("{:<16}{}\n", "tau_c", rows[0].report.table_header()));
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.tau_c, r.mean_accepted_fraction, r.report.csv_row()));
        table.push_str(&format!("{:<16}{}\n", r.tau_c, r.report.table_row("")));
    }
    out.write(&out.report_path("threshold_sweep", "csv"), &csv)?;
    out.write(&out.report_path("threshold_sweep", "txt"), &table)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            source_train: 12,
            source_test: 8,
            target_train: 12,
            target_test: 8,
            pretrain_epochs: 1,
            pretrain_batch: 4,
            adapt_epochs: 1,
            adapt_batch: 4,
            prior_manifold_count: 20,
            prior_stage_epochs: vec![1, 1, 1],
            kp2seg_aux_count: 8,
            kp2seg_epochs: 1,
            kp2seg_batch: 4,
            eval_every_epochs: 0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn generate_writes_four_splits() {
        let dir = tempfile::tempdir().unwrap();
        let out = Artifacts::new(dir.path());
        let cfg = tiny_cfg();
        let manifests = generate(&cfg, &out).unwrap();
        assert_eq!(manifests.len(), 4);
        let src = load_split(&out, "source_train").unwrap();
        assert!(src.labeled());
        let tgt = load_split(&out, "target_train").unwrap();
        assert!(!tgt.labeled());
        let tt = load_split(&out, "target_test").unwrap();
        assert!(tt.labeled());
    }

    #[test]
    fn pipeline_stages_chain_end_to_end_tiny() {
        let dir = tempfile::tempdir().unwrap();
        let out = Artifacts::new(dir.path());
        let cfg = tiny_cfg();
        generate(&cfg, &out).unwrap();
        pretrain(&cfg, &out).unwrap();
        train_prior_stage(&cfg, &out).unwrap();
        train_kp2seg_stage(&cfg, &out).unwrap();
        let outcome = adapt_stage(&cfg, &out, "adapt").unwrap();
        assert!(outcome.target_test.average >= 0.0);
        // evaluate both checkpoint kinds
        evaluate_checkpoint(&cfg, &out, &out.checkpoint_path("pretrain"), "target_test").unwrap();
        evaluate_checkpoint(&cfg, &out, &out.checkpoint_path("adapt"), "target_test").unwrap();
    }

    #[test]
    fn adapt_requires_frozen_modules_unless_lambda_zero() {
        let dir = tempfile::tempdir().unwrap();
        let out = Artifacts::new(dir.path());
        let cfg = tiny_cfg();
        generate(&cfg, &out).unwrap();
        pretrain(&cfg, &out).unwrap();
        // prior/kp2seg checkpoints absent → error because λ_p, λ_ctx ≠ 0
        assert!(adapt_stage(&cfg, &out, "adapt").is_err());
        let mut ablation_cfg = cfg.clone();
        ablation_cfg.lambda_p = 0.0;
        ablation_cfg.lambda_ctx = 0.0;
        adapt_stage(&ablation_cfg, &out, "adapt_uda").unwrap();
    }
}
