//! Offline supervised training of the keypoint→silhouette decoder on
//! (pose, mask) pairs, and the adaptation-time context-consistency loss.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{encode_heatmaps, warp_maps, AffineAug, KeypointSet};
use crate::nets::MaskDecoder;
use crate::seeds;
use crate::synth::{render::render, sample_pose, DomainSpec, IMAGE_SIZE};
use crate::tensor::{AdamParams, Tensor};

const HM: usize = IMAGE_SIZE / crate::geometry::HEATMAP_STRIDE;

/// Auxiliary supervision: ground-truth poses paired with binary silhouettes.
/// Deliberately stores no images, so the decoder never sees appearance.
#[derive(Debug, Clone)]
pub struct AuxSet {
    pub poses: Vec<KeypointSet>,
    pub masks: Vec<Vec<u8>>,
}

impl AuxSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Draw (pose, silhouette) pairs from the source generator.
pub fn build_aux_set(spec: &DomainSpec, skel: &crate::geometry::Skeleton, n: usize, seed: u64) -> AuxSet {
    let mut poses = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeds::stream(seed, "aux", i as u64);
        let kps = sample_pose(spec, skel, &mut rng);
        let s = render(&kps, spec, skel, &mut rng, 0.0);
        poses.push(s.kps);
        masks.push(s.mask);
    }
    AuxSet { poses, masks }
}

fn heatmap_batch(poses: &[&KeypointSet], sigma: f64, k: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(poses.len() * k * HM * HM);
    for p in poses {
        let hm = encode_heatmaps(p, sigma, HM, HM)?;
        data.extend_from_slice(&hm.data);
    }
    Ok(Tensor::new(&[poses.len(), k, HM, HM], data))
}

#[derive(Debug, Clone)]
pub struct Kp2SegLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Supervised BCE between decoded silhouettes and true masks over encoded
/// ground-truth pose heatmaps.
pub fn train_kp2seg(
    decoder: &mut MaskDecoder,
    aux: &AuxSet,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<Kp2SegLog>> {
    for m in &aux.masks {
        if m.iter().any(|&v| v > 1) {
            return Err(Error::invalid("aux masks must be binary"));
        }
    }
    let k = decoder.k;
    let mut logs = Vec::with_capacity(cfg.kp2seg_epochs);
    for epoch in 0..cfg.kp2seg_epochs {
        let perm = seeds::permutation(seed, "kp2seg-order", epoch as u64, aux.len());
        let mut acc = 0.0;
        let mut batches = 0;
        for chunk in perm.chunks(cfg.kp2seg_batch) {
            let poses: Vec<&KeypointSet> = chunk.iter().map(|&i| &aux.poses[i]).collect();
            let hm = heatmap_batch(&poses, cfg.sigma, k)?;
            let mut target = Vec::with_capacity(chunk.len() * IMAGE_SIZE * IMAGE_SIZE);
            for &i in chunk {
                target.extend(aux.masks[i].iter().map(|&v| v as f64));
            }
            let target = Tensor::new(&[chunk.len(), 1, IMAGE_SIZE, IMAGE_SIZE], target);
            decoder.params.zero_grads();
            let pred = decoder.forward(&hm)?;
            let loss = pred.bce_loss(&target)?;
            acc += loss.item();
            batches += 1;
            loss.backward()?;
            decoder.params.adam_step(AdamParams::with_lr(cfg.kp2seg_lr))?;
        }
        logs.push(Kp2SegLog { epoch, loss: acc / batches as f64 });
    }
    Ok(logs)
}

/// Context-consistency loss: BCE between the decoder's silhouette for the
/// student's heatmaps (strong view, no patching) and the pseudo mask warped
/// into the same view and re-binarized at `threshold`. Gradients flow through
/// the frozen decoder into the student only.
pub fn context_loss(
    decoder: &MaskDecoder,
    student_heatmaps: &Tensor,
    masks: &[&[u8]],
    augs: &[AffineAug],
    threshold: f64,
) -> Result<Tensor> {
    let b = student_heatmaps.shape()[0];
    if masks.len() != b || augs.len() != b {
        return Err(Error::invalid(format!(
            "context_loss: {b} heatmaps vs {} masks / {} augs",
            masks.len(),
            augs.len()
        )));
    }
    let pred = decoder.forward(student_heatmaps)?;
    if pred.shape() != [b, 1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::invalid(format!(
            "context_loss: decoder produced {:?}, masks are {}x{}",
            pred.shape(),
            IMAGE_SIZE,
            IMAGE_SIZE
        )));
    }
    let mut target = Vec::with_capacity(b * IMAGE_SIZE * IMAGE_SIZE);
    for (mask, aug) in masks.iter().zip(augs) {
        let as_f: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
        let warped = if aug.is_identity() {
            as_f
        } else {
            warp_maps(&as_f, 1, IMAGE_SIZE, IMAGE_SIZE, &aug.image_matrix(IMAGE_SIZE, IMAGE_SIZE))?
        };
        target.extend(warped.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }));
    }
    let target = Tensor::new(&[b, 1, IMAGE_SIZE, IMAGE_SIZE], target);
    Ok(pred.bce_loss(&target)?)
}

/// Intersection-over-union of a thresholded probability map and a mask.
pub fn iou(pred_probs: &[f64], mask: &[u8], threshold: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &m) in pred_probs.iter().zip(mask) {
        let p = p >= threshold;
        let m = m != 0;
        if p && m {
            inter += 1;
        }
        if p || m {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU of the decoder against true silhouettes on held-out poses.
pub fn eval_kp2seg(decoder: &MaskDecoder, aux: &AuxSet, sigma: f64, threshold: f64) -> Result<f64> {
    let mut acc = 0.0;
    for chunk_start in (0..aux.len()).step_by(64) {
        let end = (chunk_start + 64).min(aux.len());
        let poses: Vec<&KeypointSet> = (chunk_start..end).map(|i| &aux.poses[i]).collect();
        let hm = heatmap_batch(&poses, sigma, decoder.k)?;
        let pred = decoder.forward(&hm)?;
        let data = pred.data();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for (j, i) in (chunk_start..end).enumerate() {
            acc += iou(&data[j * plane..(j + 1) * plane], &aux.masks[i], threshold);
        }
    }
    Ok(acc / aux.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Skeleton;
    use crate::synth::adult_spec;

    #[test]
    fn bce_closed_forms() {
        let p = Tensor::new(&[4], vec![0.5; 4]);
        let t = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]);
        let l = p.bce_loss(&t).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // a perfect (clipped) probability map scores ≈ 0
        let perfect = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]);
        let l = perfect.bce_loss(&t).unwrap().item();
        assert!(l < 1e-5, "perfect-map loss {l}");
    }

    #[test]
    fn context_loss_frozen_decoder_grads() {
        let skel = Skeleton::default16();
        let aux = build_aux_set(&adult_spec(), &skel, 2, 3);
        let decoder = MaskDecoder::init(16, 5).frozen_copy();
        // student heatmaps as a leaf so gradients are observable
        let hm = Tensor::param(&[2, 16, HM, HM], vec![0.05; 2 * 16 * HM * HM]);
        let masks: Vec<&[u8]> = aux.masks.iter().map(|m| m.as_slice()).collect();
        let augs = vec![AffineAug::identity(), AffineAug::identity()];
        let loss = context_loss(&decoder, &hm, &masks, &augs, 0.5).unwrap();
        loss.backward().unwrap();
        let g = hm.grad().expect("student side must receive gradient");
        assert!(g.iter().any(|&v| v != 0.0));
        for (_, t) in decoder.params.iter() {
            assert!(t.grad().is_none(), "frozen decoder received gradients");
        }
    }

    #[test]
    fn context_loss_rejects_size_mismatch() {
        let decoder = MaskDecoder::init(16, 5);
        let hm = Tensor::new(&[2, 16, HM, HM], vec![0.0; 2 * 16 * HM * HM]);
        let mask = vec![0u8; IMAGE_SIZE * IMAGE_SIZE];
        let masks: Vec<&[u8]> = vec![&mask];
        let augs = vec![AffineAug::identity()];
        assert!(context_loss(&decoder, &hm, &masks, &augs, 0.5).is_err());
    }

    #[test]
    fn non_binary_masks_rejected() {
        let skel = Skeleton::default16();
        let mut aux = build_aux_set(&adult_spec(), &skel, 2, 3);
        aux.masks[0][10] = 7;
        let mut decoder = MaskDecoder::init(16, 5);
        let cfg = RunConfig { kp2seg_epochs: 1, ..RunConfig::default() };
        assert!(train_kp2seg(&mut decoder, &aux, &cfg, 1).is_err());
    }

    #[test]
    fn iou_extremes() {
        let probs = vec![0.9, 0.9, 0.1, 0.1];
        let mask = vec![1u8, 1, 0, 0];
        assert_eq!(iou(&probs, &mask, 0.5), 1.0);
        let inv = vec![0u8, 0, 1, 1];
        assert_eq!(iou(&probs, &inv, 0.5), 0.0);
    }
}
