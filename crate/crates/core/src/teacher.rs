//! Source pre-training, EMA teacher maintenance, dual-view pseudo-label
//! consistency, and the combined adaptation objective.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_net, PckReport};
use crate::geometry::{
    apply_aug_image, decode_argmax, encode_heatmaps, invert_aug_heatmaps, invert_matrix,
    transform_point, AffineAug, AugRanges, HeatmapStack,
};
use crate::nets::{image_batch, Checkpoint, HeatmapNet, MaskDecoder};
use crate::prior::{prior_loss, PosePrior};
use crate::seeds;
use crate::synth::{SplitFile, IMAGE_SIZE};
use crate::tensor::{AdamParams, ParameterStore, Tensor, TensorError};

const HM: usize = IMAGE_SIZE / crate::geometry::HEATMAP_STRIDE;

/// Multi-step decay: base lr scaled by `factor` once per passed boundary.
pub fn lr_at_epoch(base: f64, decay_epochs: &[usize], factor: f64, epoch: usize) -> f64 {
    let passed = decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base * factor.powi(passed as i32)
}

/// θ_teacher ← α·θ_teacher + (1−α)·θ_student, elementwise over both stores.
pub fn ema_update(teacher: &ParameterStore, student: &ParameterStore, alpha: f64) -> Result<()> {
    for (name, t) in teacher.iter() {
        let s = student.try_get(name).ok_or_else(|| {
            Error::Tensor(TensorError::MissingParam { name: name.clone(), side: "student" })
        })?;
        if s.shape() != t.shape() {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "ema_update",
                detail: format!("{name}: {:?} vs {:?}", t.shape(), s.shape()),
            }));
        }
        let mut tv = t.data();
        s.with_data(|sv| {
            for (a, &b) in tv.iter_mut().zip(sv) {
                *a = alpha * *a + (1.0 - alpha) * b;
            }
        });
        t.set_data(&tv);
    }
    Ok(())
}

// ── source pre-training ─────────────────────────────────────────────────────

fn source_batch(
    data: &SplitFile,
    sigma: f64,
    indices: &[usize],
) -> Result<(Tensor, Tensor)> {
    let images: Vec<&[f64]> = indices.iter().map(|&i| data.images[i].as_slice()).collect();
    let x = image_batch(&images, data.h, data.w);
    let mut target = Vec::with_capacity(indices.len() * data.k * HM * HM);
    for &i in indices {
        let hm = encode_heatmaps(&data.keypoints[i], sigma, HM, HM)?;
        target.extend_from_slice(&hm.data);
    }
    Ok((x, Tensor::new(&[indices.len(), data.k, HM, HM], target)))
}

/// Supervised heatmap regression on the labeled source split.
pub struct PretrainTrainer<'a> {
    pub net: HeatmapNet,
    pub step: u64,
    pub losses: Vec<f64>,
    cfg: &'a RunConfig,
    data: &'a SplitFile,
    seed: u64,
}

impl<'a> PretrainTrainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a SplitFile, seed: u64) -> Result<Self> {
        if !data.labeled() {
            return Err(Error::invalid("pretrain requires a labeled source split"));
        }
        Ok(PretrainTrainer {
            net: HeatmapNet::init(data.k, seed),
            step: 0,
            losses: Vec::new(),
            cfg,
            data,
            seed,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len() / self.cfg.pretrain_batch).max(1) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.pretrain_epochs as u64
    }

    pub fn step_once(&mut self) -> Result<f64> {
        let spe = self.steps_per_epoch();
        let epoch = (self.step / spe) as usize;
        let pos = (self.step % spe) as usize;
        let batch = self.cfg.pretrain_batch;
        let perm = seeds::permutation(self.seed, "pretrain-order", epoch as u64, self.data.len());
        let ids = &perm[pos * batch..(pos * batch + batch).min(perm.len())];
        let (x, target) = source_batch(self.data, self.cfg.sigma, ids)?;
        self.net.params.zero_grads();
        let pred = self.net.forward(&x)?;
        let loss = pred.mse_loss(&target)?;
        let value = loss.item();
        loss.backward()?;
        let lr = lr_at_epoch(
            self.cfg.pretrain_lr,
            &self.cfg.lr_decay_epochs,
            self.cfg.lr_decay_factor,
            epoch,
        );
        self.net.params.adam_step(AdamParams::with_lr(lr))?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("heatmap", config_hash, self.step, self.seed);
        ck.add_store("", &self.net.params, true);
        ck
    }

    pub fn resume(cfg: &'a RunConfig, data: &'a SplitFile, ck: &Checkpoint) -> Result<Self> {
        let params = ck.extract_store("", true)?;
        Ok(PretrainTrainer {
            net: HeatmapNet { params, k: data.k },
            step: ck.step,
            losses: Vec::new(),
            cfg,
            data,
            seed: ck.seed,
        })
    }

    /// Mean loss per completed epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let spe = self.steps_per_epoch() as usize;
        self.losses.chunks(spe).filter(|c| c.len() == spe).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

// ── dual views ──────────────────────────────────────────────────────────────

/// Weak/strong view pair of a target batch plus everything the consistency
/// loss needs: the teacher's raw heatmaps, per-keypoint confidences, and both
/// augmentation sets.
pub struct Views {
    pub teacher_views: Vec<Vec<f64>>,
    pub student_views: Vec<Vec<f64>>,
    pub aug1: Vec<AffineAug>,
    pub aug2: Vec<AffineAug>,
    /// teacher forward on the weak views, value-only
    pub teacher_heatmaps: Tensor,
    /// max activation per (image, keypoint), before any inverse warp
    pub teacher_conf: Vec<Vec<f64>>,
    /// patch centers per image in student-view pixels (diagnostic)
    pub patch_centers: Vec<Vec<[f64; 2]>>,
}

/// Augmentation and patching policy for [`make_views`].
#[derive(Debug, Clone)]
pub struct ViewConfig {
    pub weak: AugRanges,
    pub strong: AugRanges,
    pub patch_count: usize,
    pub patch_side: usize,
}

impl ViewConfig {
    pub fn from_run(cfg: &RunConfig) -> ViewConfig {
        ViewConfig {
            weak: AugRanges {
                max_rotation_deg: cfg.weak_rotation,
                scale: cfg.weak_scale,
                max_translation_frac: 0.0,
            },
            strong: AugRanges {
                max_rotation_deg: cfg.strong_rotation,
                scale: cfg.strong_scale,
                max_translation_frac: cfg.strong_translation,
            },
            patch_count: cfg.patch_count,
            patch_side: cfg.patch_side,
        }
    }

    /// Identity views, no patching: both views equal the input.
    pub fn disabled() -> ViewConfig {
        ViewConfig {
            weak: AugRanges::identity(),
            strong: AugRanges::identity(),
            patch_count: 0,
            patch_side: 0,
        }
    }
}

/// Build the teacher view Ã₁(x) and the patched student view P(Ã₂(x)).
/// Patches zero `patch_side`² squares at the teacher's top-`patch_count`
/// confidence keypoints, mapped from the weak view into the student view.
pub fn make_views(
    images: &[&[f64]],
    teacher: &HeatmapNet,
    vc: &ViewConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Views> {
    let n = images.len();
    let size = IMAGE_SIZE;
    let mut aug1 = Vec::with_capacity(n);
    let mut aug2 = Vec::with_capacity(n);
    for _ in 0..n {
        aug1.push(AffineAug::sample(&vc.weak, size, rng));
        aug2.push(AffineAug::sample(&vc.strong, size, rng));
    }
    let teacher_views: Vec<Vec<f64>> = images
        .iter()
        .zip(&aug1)
        .map(|(img, a)| apply_aug_image(img, size, size, a, None))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = teacher_views.iter().map(|v| v.as_slice()).collect();
    let teacher_heatmaps = teacher.forward(&image_batch(&refs, size, size))?;
    debug_assert!(!teacher_heatmaps.requires_grad());

    let k = teacher.k;
    let mut teacher_conf = Vec::with_capacity(n);
    let mut patch_centers = Vec::with_capacity(n);
    let mut student_views = Vec::with_capacity(n);
    let hm_data = teacher_heatmaps.data();
    for i in 0..n {
        let stack = HeatmapStack::from_tensor_slice(k, HM, HM, &hm_data[i * k * HM * HM..(i + 1) * k * HM * HM]);
        let (decoded, conf) = decode_argmax(&stack);
        // anchors: teacher keypoints mapped weak-view → original → student view
        let m1_inv = invert_matrix(&aug1[i].image_matrix(size, size))?;
        let m2 = aug2[i].image_matrix(size, size);
        let anchors: Vec<[f64; 2]> = decoded
            .coords
            .iter()
            .map(|&p| transform_point(&m2, transform_point(&m1_inv, p)))
            .collect();
        let mut top: Vec<usize> = (0..k).collect();
        top.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap_or(std::cmp::Ordering::Equal));
        top.truncate(vc.patch_count);
        let mut aug = aug2[i].clone();
        aug.patch = top.iter().map(|&kp| (kp, vc.patch_side)).collect();
        patch_centers.push(top.iter().map(|&kp| anchors[kp]).collect());
        student_views.push(apply_aug_image(images[i], size, size, &aug, Some(&anchors))?);
        aug2[i] = aug;
        teacher_conf.push(conf);
    }
    Ok(Views {
        teacher_views,
        student_views,
        aug1,
        aug2,
        teacher_heatmaps,
        teacher_conf,
        patch_centers,
    })
}

// ── consistency loss ────────────────────────────────────────────────────────

/// Pseudo-label gate: raw teacher maxima clamped to [0, 1] (heatmap range)
/// compared against τ_c, so a sentinel τ_c > 1 always filters everything.
pub fn accepted_mask(teacher_conf: &[Vec<f64>], tau_c: f64) -> (Vec<f64>, usize) {
    let k = teacher_conf.first().map(|c| c.len()).unwrap_or(0);
    let mut mask = vec![0.0; teacher_conf.len() * k];
    let mut accepted = 0;
    for (i, confs) in teacher_conf.iter().enumerate() {
        for (kp, &c) in confs.iter().enumerate() {
            if c.clamp(0.0, 1.0) >= tau_c {
                mask[i * k + kp] = 1.0;
                accepted += 1;
            }
        }
    }
    (mask, accepted)
}

/// Per accepted (image, keypoint) pair: mean squared difference between the
/// inverse-warped teacher and student maps, averaged over accepted pairs.
/// Returns the scalar loss and the accepted fraction. A batch with nothing
/// accepted yields a constant zero.
pub fn consistency_loss(
    views: &Views,
    student_heatmaps: &Tensor,
    tau_c: f64,
) -> Result<(Tensor, f64)> {
    let shape = student_heatmaps.shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    let (mask, accepted) = accepted_mask(&views.teacher_conf, tau_c);
    let fraction = accepted as f64 / (b * k) as f64;
    if accepted == 0 {
        return Ok((Tensor::scalar(0.0), 0.0));
    }

    // teacher side: value-only inverse warp back to the original frame
    let hm_data = views.teacher_heatmaps.data();
    let mut teacher_back = Vec::with_capacity(hm_data.len());
    for i in 0..b {
        let stack =
            HeatmapStack::from_tensor_slice(k, HM, HM, &hm_data[i * k * HM * HM..(i + 1) * k * HM * HM]);
        let undone = invert_aug_heatmaps(&stack, &views.aug1[i], IMAGE_SIZE, IMAGE_SIZE)?;
        teacher_back.extend_from_slice(&undone.data);
    }
    let teacher_back = Tensor::new(&shape, teacher_back);

    // student side: differentiable inverse warp through Ã₂
    let mats: Vec<_> = views
        .aug2
        .iter()
        .map(|a| a.heatmap_matrix(IMAGE_SIZE, IMAGE_SIZE))
        .collect();
    let student_back = student_heatmaps.affine_warp(&mats)?;

    let diff = student_back.sub(&teacher_back)?;
    let per_pair = diff.mul(&diff)?.sum_spatial()?.scale(1.0 / (HM * HM) as f64)?;
    let masked = per_pair.mul(&Tensor::new(&[b, k], mask))?;
    let loss = masked.sum()?.scale(1.0 / accepted as f64)?;
    Ok((loss, fraction))
}

// ── adaptation ──────────────────────────────────────────────────────────────

/// One metrics row per adaptation step.
#[derive(Debug, Clone)]
pub struct AdaptLog {
    pub step: u64,
    pub l_sup: f64,
    pub l_cons: f64,
    pub l_p: f64,
    pub l_ctx: f64,
    pub accepted_fraction: f64,
    pub target_pck: Option<f64>,
}

pub fn logs_to_csv(logs: &[AdaptLog]) -> String {
    let mut s = String::from("step,l_sup,l_cons,l_p,l_ctx,accepted_pseudo_fraction,target_pck\n");
    for r in logs {
        let pck = r.target_pck.map(|v| format!("{v}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.l_sup, r.l_cons, r.l_p, r.l_ctx, r.accepted_fraction, pck
        ));
    }
    s
}

/// Mean-teacher adaptation state: student, its EMA teacher, and the frozen
/// offline modules. Teacher parameters only ever receive EMA assignments.
pub struct AdaptTrainer<'a> {
    pub student: HeatmapNet,
    pub teacher: HeatmapNet,
    pub prior: Option<PosePrior>,
    pub decoder: Option<MaskDecoder>,
    pub step: u64,
    pub logs: Vec<AdaptLog>,
    cfg: &'a RunConfig,
    views_cfg: ViewConfig,
    source: &'a SplitFile,
    target: &'a SplitFile,
    target_test: Option<&'a SplitFile>,
    seed: u64,
}

impl<'a> AdaptTrainer<'a> {
    /// Teacher starts as a frozen copy of the pretrained student.
    pub fn new(
        cfg: &'a RunConfig,
        student: HeatmapNet,
        prior: Option<PosePrior>,
        decoder: Option<MaskDecoder>,
        source: &'a SplitFile,
        target: &'a SplitFile,
        target_test: Option<&'a SplitFile>,
        seed: u64,
    ) -> Result<Self> {
        if !source.labeled() {
            return Err(Error::invalid("adaptation requires a labeled source split"));
        }
        if cfg.lambda_p != 0.0 && prior.is_none() {
            return Err(Error::invalid("lambda_p != 0 requires a trained pose prior"));
        }
        if cfg.lambda_ctx != 0.0 && decoder.is_none() {
            return Err(Error::invalid("lambda_ctx != 0 requires a trained keypoint-to-mask decoder"));
        }
        let teacher = student.frozen_copy();
        Ok(AdaptTrainer {
            student,
            teacher,
            prior,
            decoder,
            step: 0,
            logs: Vec::new(),
            cfg,
            views_cfg: ViewConfig::from_run(cfg),
            source,
            target,
            target_test,
            seed,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.target.len() / self.cfg.adapt_batch).max(1) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.adapt_epochs as u64
    }

    fn target_batch_ids(&self, epoch: u64, pos: usize) -> Vec<usize> {
        let batch = self.cfg.adapt_batch;
        let perm = seeds::permutation(self.seed, "adapt-target-order", epoch, self.target.len());
        perm[pos * batch..(pos * batch + batch).min(perm.len())].to_vec()
    }

    pub fn step_once(&mut self) -> Result<AdaptLog> {
        let cfg = self.cfg;
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let pos = (self.step % spe) as usize;

        // labeled source batch, consumed at its own epoch cadence
        let src_spe = (self.source.len() / cfg.adapt_batch).max(1) as u64;
        let src_perm =
            seeds::permutation(self.seed, "adapt-source-order", self.step / src_spe, self.source.len());
        let src_pos = (self.step % src_spe) as usize;
        let src_ids = &src_perm
            [src_pos * cfg.adapt_batch..(src_pos * cfg.adapt_batch + cfg.adapt_batch).min(src_perm.len())];
        let (sx, starget) = source_batch(self.source, cfg.sigma, src_ids)?;

        // unlabeled target batch and its two views
        let tgt_ids = self.target_batch_ids(epoch, pos);
        let timgs: Vec<&[f64]> = tgt_ids.iter().map(|&i| self.target.images[i].as_slice()).collect();
        let mut view_rng = seeds::stream(self.seed, "views", self.step);
        let views = make_views(&timgs, &self.teacher, &self.views_cfg, &mut view_rng)?;

        self.student.params.zero_grads();

        let l_sup = self.student.forward(&sx)?.mse_loss(&starget)?;
        let mut total = l_sup.clone();

        let (l_cons_val, fraction);
        if cfg.lambda_cons != 0.0 {
            let svrefs: Vec<&[f64]> = views.student_views.iter().map(|v| v.as_slice()).collect();
            let s_hm = self.student.forward(&image_batch(&svrefs, IMAGE_SIZE, IMAGE_SIZE))?;
            let (l_cons, frac) = consistency_loss(&views, &s_hm, cfg.tau_c)?;
            l_cons_val = l_cons.item();
            fraction = frac;
            total = total.add(&l_cons.scale(cfg.lambda_cons)?)?;
        } else {
            l_cons_val = 0.0;
            let (_, accepted) = accepted_mask(&views.teacher_conf, cfg.tau_c);
            fraction = accepted as f64 / (views.teacher_conf.len() * self.student.k) as f64;
        }

        let mut l_p_val = 0.0;
        if cfg.lambda_p != 0.0 {
            let prior = self.prior.as_ref().expect("checked in new()");
            let raw_hm = self.student.forward(&image_batch(&timgs, IMAGE_SIZE, IMAGE_SIZE))?;
            let l_p = prior_loss(prior, &raw_hm, cfg.beta)?;
            l_p_val = l_p.item();
            total = total.add(&l_p.scale(cfg.lambda_p)?)?;
        }

        let mut l_ctx_val = 0.0;
        if cfg.lambda_ctx != 0.0 {
            let decoder = self.decoder.as_ref().expect("checked in new()");
            // strong views without the patch operator
            let strong: Vec<Vec<f64>> = timgs
                .iter()
                .zip(&views.aug2)
                .map(|(img, a)| apply_aug_image(img, IMAGE_SIZE, IMAGE_SIZE, a, None))
                .collect::<Result<_>>()?;
            let srefs: Vec<&[f64]> = strong.iter().map(|v| v.as_slice()).collect();
            let hm = self.student.forward(&image_batch(&srefs, IMAGE_SIZE, IMAGE_SIZE))?;
            let l_ctx = crate::context::context_loss(
                decoder,
                &hm,
                &tgt_ids.iter().map(|&i| self.target.masks[i].as_slice()).collect::<Vec<_>>(),
                &views.aug2,
                cfg.kp2seg_threshold,
            )?;
            l_ctx_val = l_ctx.item();
            total = total.add(&l_ctx.scale(cfg.lambda_ctx)?)?;
        }

        let l_sup_val = l_sup.item();
        total.backward()?;
        let lr = lr_at_epoch(cfg.adapt_lr, &cfg.lr_decay_epochs, cfg.lr_decay_factor, epoch as usize);
        self.student.params.adam_step(AdamParams::with_lr(lr))?;
        ema_update(&self.teacher.params, &self.student.params, cfg.ema_alpha)?;

        self.step += 1;
        let target_pck = match self.target_test {
            Some(test)
                if cfg.eval_every_epochs > 0
                    && self.step % (spe * cfg.eval_every_epochs as u64) == 0 =>
            {
                Some(self.eval_target(test)?)
            }
            _ => None,
        };
        let row = AdaptLog {
            step: self.step,
            l_sup: l_sup_val,
            l_cons: l_cons_val,
            l_p: l_p_val,
            l_ctx: l_ctx_val,
            accepted_fraction: fraction,
            target_pck,
        };
        self.logs.push(row.clone());
        Ok(row)
    }

    fn eval_target(&self, test: &SplitFile) -> Result<f64> {
        let groups = self.cfg.group_indices()?;
        let report: PckReport = evaluate_net(&self.student, test, self.cfg.pck_alpha, &groups)?;
        Ok(report.average)
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new("adapt", config_hash, self.step, self.seed);
        ck.add_store("student", &self.student.params, true);
        ck.add_store("teacher", &self.teacher.params, false);
        ck
    }

    pub fn resume(
        cfg: &'a RunConfig,
        ck: &Checkpoint,
        prior: Option<PosePrior>,
        decoder: Option<MaskDecoder>,
        source: &'a SplitFile,
        target: &'a SplitFile,
        target_test: Option<&'a SplitFile>,
    ) -> Result<Self> {
        let student = HeatmapNet { params: ck.extract_store("student", true)?, k: source.k };
        let teacher = HeatmapNet { params: ck.extract_store("teacher", false)?, k: source.k };
        if cfg.lambda_p != 0.0 && prior.is_none() {
            return Err(Error::invalid("lambda_p != 0 requires a trained pose prior"));
        }
        if cfg.lambda_ctx != 0.0 && decoder.is_none() {
            return Err(Error::invalid("lambda_ctx != 0 requires a trained keypoint-to-mask decoder"));
        }
        Ok(AdaptTrainer {
            student,
            teacher,
            prior,
            decoder,
            step: ck.step,
            logs: Vec::new(),
            cfg,
            views_cfg: ViewConfig::from_run(cfg),
            source,
            target,
            target_test,
            seed: ck.seed,
        })
    }
}
