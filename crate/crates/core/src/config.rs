//! Run configuration: a plain-text key=value file covering every tunable
//! constant, plus the skeleton definition and evaluation keypoint groups so
//! those stay data rather than code.

use crate::error::{Error, Result};
use crate::geometry::Skeleton;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // datasets
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub mask_noise: f64,

    // heatmap codec
    pub sigma: f64,
    pub beta: f64,

    // source pre-training
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,

    // mean-teacher adaptation
    pub adapt_epochs: usize,
    pub adapt_batch: usize,
    pub adapt_lr: f64,
    pub ema_alpha: f64,
    pub tau_c: f64,
    pub lambda_cons: f64,
    pub lambda_p: f64,
    pub lambda_ctx: f64,
    pub eval_every_epochs: usize,

    // view augmentations
    pub weak_rotation: f64,
    pub weak_scale: (f64, f64),
    pub strong_rotation: f64,
    pub strong_scale: (f64, f64),
    pub strong_translation: f64,
    pub patch_count: usize,
    pub patch_side: usize,

    // pose prior
    pub prior_manifold_count: usize,
    pub prior_kappas: Vec<f64>,
    pub prior_stage_mult: Vec<usize>,
    pub prior_stage_epochs: Vec<usize>,
    pub prior_batch: usize,
    pub prior_lr: f64,
    pub prior_latent: usize,
    pub prior_head_hidden: usize,
    pub prior_regimen: String,

    // keypoint→silhouette decoder
    pub kp2seg_aux_count: usize,
    pub kp2seg_epochs: usize,
    pub kp2seg_batch: usize,
    pub kp2seg_lr: f64,
    pub kp2seg_threshold: f64,

    // evaluation
    pub pck_alpha: f64,
    /// group name → keypoint names, in report column order
    pub eval_groups: Vec<(String, Vec<String>)>,

    // skeleton
    pub keypoint_names: Vec<String>,
    /// bone list as (parent name, child name)
    pub bone_names: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let skel = Skeleton::default16();
        let bone_names = skel
            .bones
            .iter()
            .map(|&(p, c)| (skel.names[p].clone(), skel.names[c].clone()))
            .collect();
        RunConfig {
            seed: 42,
            source_train: 2000,
            source_test: 500,
            target_train: 1000,
            target_test: 500,
            mask_noise: 0.0,
            sigma: 2.0,
            beta: 10.0,
            pretrain_epochs: 40,
            pretrain_lr: 1e-4,
            pretrain_batch: 32,
            lr_decay_epochs: vec![5, 20],
            lr_decay_factor: 0.1,
            adapt_epochs: 30,
            adapt_batch: 32,
            adapt_lr: 1e-4,
            ema_alpha: 0.999,
            tau_c: 0.5,
            lambda_cons: 1.0,
            lambda_p: 1e-6,
            lambda_ctx: 1e-5,
            eval_every_epochs: 1,
            weak_rotation: 10.0,
            weak_scale: (0.95, 1.05),
            strong_rotation: 30.0,
            strong_scale: (0.8, 1.25),
            strong_translation: 0.1,
            patch_count: 2,
            patch_side: 8,
            prior_manifold_count: 1500,
            prior_kappas: vec![64.0, 16.0, 4.0],
            prior_stage_mult: vec![1, 2, 4],
            prior_stage_epochs: vec![75, 100, 150],
            prior_batch: 32,
            prior_lr: 1e-4,
            prior_latent: 6,
            prior_head_hidden: 64,
            prior_regimen: "direct".into(),
            kp2seg_aux_count: 768,
            kp2seg_epochs: 200,
            kp2seg_batch: 64,
            kp2seg_lr: 3e-4,
            kp2seg_threshold: 0.5,
            pck_alpha: 0.05,
            eval_groups: vec![
                ("Head".into(), vec!["head".into(), "neck".into()]),
                ("Sld.".into(), vec!["thorax".into(), "l_shoulder".into(), "r_shoulder".into()]),
                ("Elb.".into(), vec!["l_elbow".into(), "r_elbow".into()]),
                ("Wrist".into(), vec!["l_wrist".into(), "r_wrist".into()]),
                ("Hip".into(), vec!["pelvis".into(), "l_hip".into(), "r_hip".into()]),
                ("Knee".into(), vec!["l_knee".into(), "r_knee".into()]),
                ("Ankle".into(), vec!["l_ankle".into(), "r_ankle".into()]),
            ],
            keypoint_names: skel.names,
            bone_names,
        }
    }
}

fn fmt_f(v: f64) -> String {
    // shortest round-trip form keeps config text canonical
    format!("{v}")
}

fn fmt_pair(p: (f64, f64)) -> String {
    format!("{},{}", fmt_f(p.0), fmt_f(p.1))
}

impl RunConfig {
    pub fn skeleton(&self) -> Result<Skeleton> {
        let idx = |n: &str| {
            self.keypoint_names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::Config(format!("unknown keypoint '{n}' in bone list")))
        };
        let mut bones = Vec::with_capacity(self.bone_names.len());
        for (p, c) in &self.bone_names {
            bones.push((idx(p)?, idx(c)?));
        }
        Skeleton::new(self.keypoint_names.clone(), bones)
    }

    /// Keypoint-index groups for PCK reporting, in column order.
    pub fn group_indices(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        for (gname, members) in &self.eval_groups {
            let mut idxs = Vec::new();
            for m in members {
                let i = self
                    .keypoint_names
                    .iter()
                    .position(|x| x == m)
                    .ok_or_else(|| Error::Config(format!("unknown keypoint '{m}' in group {gname}")))?;
                idxs.push(i);
            }
            out.push((gname.clone(), idxs));
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("data.source_train", self.source_train.to_string());
        kv("data.source_test", self.source_test.to_string());
        kv("data.target_train", self.target_train.to_string());
        kv("data.target_test", self.target_test.to_string());
        kv("data.mask_noise", fmt_f(self.mask_noise));
        kv("codec.sigma", fmt_f(self.sigma));
        kv("codec.beta", fmt_f(self.beta));
        kv("pretrain.epochs", self.pretrain_epochs.to_string());
        kv("pretrain.lr", fmt_f(self.pretrain_lr));
        kv("pretrain.batch", self.pretrain_batch.to_string());
        kv(
            "pretrain.lr_decay_epochs",
            self.lr_decay_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("pretrain.lr_decay_factor", fmt_f(self.lr_decay_factor));
        kv("adapt.epochs", self.adapt_epochs.to_string());
        kv("adapt.batch", self.adapt_batch.to_string());
        kv("adapt.lr", fmt_f(self.adapt_lr));
        kv("adapt.ema_alpha", fmt_f(self.ema_alpha));
        kv("adapt.tau_c", fmt_f(self.tau_c));
        kv("adapt.lambda_cons", fmt_f(self.lambda_cons));
        kv("adapt.lambda_p", fmt_f(self.lambda_p));
        kv("adapt.lambda_ctx", fmt_f(self.lambda_ctx));
        kv("adapt.eval_every_epochs", self.eval_every_epochs.to_string());
        kv("aug.weak_rotation", fmt_f(self.weak_rotation));
        kv("aug.weak_scale", fmt_pair(self.weak_scale));
        kv("aug.strong_rotation", fmt_f(self.strong_rotation));
        kv("aug.strong_scale", fmt_pair(self.strong_scale));
        kv("aug.strong_translation", fmt_f(self.strong_translation));
        kv("aug.patch_count", self.patch_count.to_string());
        kv("aug.patch_side", self.patch_side.to_string());
        kv("prior.manifold_count", self.prior_manifold_count.to_string());
        kv(
            "prior.kappas",
            self.prior_kappas.iter().map(|k| fmt_f(*k)).collect::<Vec<_>>().join(","),
        );
        kv(
            "prior.stage_mult",
            self.prior_stage_mult.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        kv(
            "prior.stage_epochs",
            self.prior_stage_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("prior.batch", self.prior_batch.to_string());
        kv("prior.lr", fmt_f(self.prior_lr));
        kv("prior.latent", self.prior_latent.to_string());
        kv("prior.head_hidden", self.prior_head_hidden.to_string());
        kv("prior.regimen", self.prior_regimen.clone());
        kv("kp2seg.aux_count", self.kp2seg_aux_count.to_string());
        kv("kp2seg.epochs", self.kp2seg_epochs.to_string());
        kv("kp2seg.batch", self.kp2seg_batch.to_string());
        kv("kp2seg.lr", fmt_f(self.kp2seg_lr));
        kv("kp2seg.threshold", fmt_f(self.kp2seg_threshold));
        kv("eval.pck_alpha", fmt_f(self.pck_alpha));
        for (g, members) in &self.eval_groups {
            kv(&format!("eval.group.{g}"), members.join(","));
        }
        kv("skeleton.keypoints", self.keypoint_names.join(","));
        kv(
            "skeleton.bones",
            self.bone_names
                .iter()
                .map(|(p, c)| format!("{p}-{c}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }

    /// Parse a key=value config. Unknown keys are errors; missing keys keep
    /// their defaults. `eval.group.*` entries replace the default groups
    /// wholesale the first time one appears.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut groups_reset = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, val) = (key.trim(), val.trim());
            let bad = |what: &str| Error::Config(format!("line {}: bad {what}: {val}", lineno + 1));
            let f = || val.parse::<f64>().map_err(|_| bad("float"));
            let u = || val.parse::<usize>().map_err(|_| bad("integer"));
            let pair = || -> Result<(f64, f64)> {
                let (a, b) = val.split_once(',').ok_or_else(|| bad("pair"))?;
                Ok((
                    a.trim().parse().map_err(|_| bad("pair"))?,
                    b.trim().parse().map_err(|_| bad("pair"))?,
                ))
            };
            let f_list = || -> Result<Vec<f64>> {
                val.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad("float list"))).collect()
            };
            let u_list = || -> Result<Vec<usize>> {
                val.split(',').map(|p| p.trim().parse::<usize>().map_err(|_| bad("integer list"))).collect()
            };
            match key {
                "seed" => cfg.seed = val.parse().map_err(|_| bad("seed"))?,
                "data.source_train" => cfg.source_train = u()?,
                "data.source_test" => cfg.source_test = u()?,
                "data.target_train" => cfg.target_train = u()?,
                "data.target_test" => cfg.target_test = u()?,
                "data.mask_noise" => cfg.mask_noise = f()?,
                "codec.sigma" => cfg.sigma = f()?,
                "codec.beta" => cfg.beta = f()?,
                "pretrain.epochs" => cfg.pretrain_epochs = u()?,
                "pretrain.lr" => cfg.pretrain_lr = f()?,
                "pretrain.batch" => cfg.pretrain_batch = u()?,
                "pretrain.lr_decay_epochs" => cfg.lr_decay_epochs = u_list()?,
                "pretrain.lr_decay_factor" => cfg.lr_decay_factor = f()?,
                "adapt.epochs" => cfg.adapt_epochs = u()?,
                "adapt.batch" => cfg.adapt_batch = u()?,
                "adapt.lr" => cfg.adapt_lr = f()?,
                "adapt.ema_alpha" => cfg.ema_alpha = f()?,
                "adapt.tau_c" => cfg.tau_c = f()?,
                "adapt.lambda_cons" => cfg.lambda_cons = f()?,
                "adapt.lambda_p" => cfg.lambda_p = f()?,
                "adapt.lambda_ctx" => cfg.lambda_ctx = f()?,
                "adapt.eval_every_epochs" => cfg.eval_every_epochs = u()?,
                "aug.weak_rotation" => cfg.weak_rotation = f()?,
                "aug.weak_scale" => cfg.weak_scale = pair()?,
                "aug.strong_rotation" => cfg.strong_rotation = f()?,
                "aug.strong_scale" => cfg.strong_scale = pair()?,
                "aug.strong_translation" => cfg.strong_translation = f()?,
                "aug.patch_count" => cfg.patch_count = u()?,
                "aug.patch_side" => cfg.patch_side = u()?,
                "prior.manifold_count" => cfg.prior_manifold_count = u()?,
                "prior.kappas" => cfg.prior_kappas = f_list()?,
                "prior.stage_mult" => cfg.prior_stage_mult = u_list()?,
                "prior.stage_epochs" => cfg.prior_stage_epochs = u_list()?,
                "prior.batch" => cfg.prior_batch = u()?,
                "prior.lr" => cfg.prior_lr = f()?,
                "prior.latent" => cfg.prior_latent = u()?,
                "prior.head_hidden" => cfg.prior_head_hidden = u()?,
                "prior.regimen" => cfg.prior_regimen = val.to_string(),
                "kp2seg.aux_count" => cfg.kp2seg_aux_count = u()?,
                "kp2seg.epochs" => cfg.kp2seg_epochs = u()?,
                "kp2seg.batch" => cfg.kp2seg_batch = u()?,
                "kp2seg.lr" => cfg.kp2seg_lr = f()?,
                "kp2seg.threshold" => cfg.kp2seg_threshold = f()?,
                "eval.pck_alpha" => cfg.pck_alpha = f()?,
                "skeleton.keypoints" => {
                    cfg.keypoint_names = val.split(',').map(|s| s.trim().to_string()).collect()
                }
                "skeleton.bones" => {
                    let mut bones = Vec::new();
                    for b in val.split(',') {
                        let (p, c) = b
                            .trim()
                            .split_once('-')
                            .ok_or_else(|| bad("bone (want parent-child)"))?;
                        bones.push((p.to_string(), c.to_string()));
                    }
                    cfg.bone_names = bones;
                }
                _ if key.starts_with("eval.group.") => {
                    if !groups_reset {
                        cfg.eval_groups.clear();
                        groups_reset = true;
                    }
                    let gname = key.trim_start_matches("eval.group.").to_string();
                    let members = val.split(',').map(|s| s.trim().to_string()).collect();
                    cfg.eval_groups.push((gname, members));
                }
                other => return Err(Error::Config(format!("line {}: unknown key '{other}'", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::Config("codec.sigma must be > 0".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config("codec.beta must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config("adapt.ema_alpha must be in [0, 1)".into()));
        }
        if self.prior_kappas.len() != self.prior_stage_mult.len()
            || self.prior_kappas.len() != self.prior_stage_epochs.len()
        {
            return Err(Error::Config(
                "prior.kappas, prior.stage_mult and prior.stage_epochs must have equal length".into(),
            ));
        }
        if self.prior_regimen != "direct" && self.prior_regimen != "source-finetune" {
            return Err(Error::Config(format!(
                "prior.regimen must be 'direct' or 'source-finetune', got '{}'",
                self.prior_regimen
            )));
        }
        self.skeleton()?;
        self.group_indices()?;
        Ok(())
    }

    /// Stable hash of the canonical config text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn defaults_pin_reference_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.ema_alpha, 0.999);
        assert_eq!(cfg.lambda_cons, 1.0);
        assert_eq!(cfg.lambda_p, 1e-6);
        assert_eq!(cfg.lambda_ctx, 1e-5);
        assert_eq!(cfg.pretrain_epochs, 40);
        assert_eq!(cfg.adapt_epochs, 30);
        assert_eq!(cfg.kp2seg_epochs, 200);
        assert_eq!(cfg.kp2seg_lr, 3e-4);
        assert_eq!(cfg.kp2seg_batch, 64);
        assert_eq!(cfg.prior_stage_epochs, vec![75, 100, 150]);
        assert_eq!(cfg.tau_c, 0.5);
        assert_eq!(cfg.pretrain_batch, 32);
        assert_eq!(cfg.lr_decay_epochs, vec![5, 20]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::parse("bogus.key=3\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("adapt.tau_c=0.7\nseed=9\n").unwrap();
        assert_eq!(cfg.tau_c, 0.7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.sigma, 2.0);
    }

    #[test]
    fn groups_cover_every_keypoint_exactly_once() {
        let cfg = RunConfig::default();
        let groups = cfg.group_indices().unwrap();
        let mut seen = vec![false; cfg.keypoint_names.len()];
        for (_, idxs) in &groups {
            for &i in idxs {
                assert!(!seen[i], "keypoint {i} in two groups");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "default groups must cover all keypoints");
    }

    #[test]
    fn bad_regimen_rejected() {
        assert!(RunConfig::parse("prior.regimen=magic\n").is_err());
    }
}
