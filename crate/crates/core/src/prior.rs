//! Manifold pose prior: von Mises perturbations, a brute-force distance
//! labeler, a hierarchical per-bone encoder with a distance head, staged
//! training on plausible/noisy pose pairs, and the adaptation-time
//! plausibility loss.

use crate::error::{Error, Result};
use crate::geometry::{decode_softargmax, orientation_tensors, Skeleton};
use crate::seeds;
use crate::tensor::{AdamParams, ParameterStore, Tensor, TensorResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

// ── von Mises sampling ──────────────────────────────────────────────────────

/// Draw from VM(μ, κ) by Best–Fisher rejection sampling; output in (−π, π].
pub fn von_mises_sample(mu: f64, kappa: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if kappa <= 0.0 {
        return Err(Error::invalid(format!("von Mises kappa must be > 0, got {kappa}")));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    let f = loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            break f;
        }
    };
    let sign = if rng.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
    Ok(wrap_angle(mu + sign * f.clamp(-1.0, 1.0).acos()))
}

/// Wrap to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Rotate each unit bone direction by an independent VM(0, κ) angle.
pub fn perturb_pose(thetas: &[[f64; 2]], kappa: f64, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    thetas
        .iter()
        .map(|t| {
            let a = von_mises_sample(0.0, kappa, rng)?;
            let (sin, cos) = a.sin_cos();
            Ok([t[0] * cos - t[1] * sin, t[0] * sin + t[1] * cos])
        })
        .collect()
}

// ── distance labeler ────────────────────────────────────────────────────────

/// Mean per-bone geodesic angle between two orientation sets.
pub fn pose_angle_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dot = (x[0] * y[0] + x[1] * y[1]).clamp(-1.0, 1.0);
        acc += dot.acos();
    }
    acc / a.len() as f64
}

/// Exact brute-force nearest-neighbor distance to the plausible set.
pub fn distance_to_manifold(theta: &[[f64; 2]], plausible: &[Vec<[f64; 2]>]) -> Result<f64> {
    if plausible.is_empty() {
        return Err(Error::invalid("distance_to_manifold: empty plausible set"));
    }
    Ok(plausible
        .iter()
        .map(|p| pose_angle_distance(theta, p))
        .fold(f64::INFINITY, f64::min))
}

// ── prior dataset ───────────────────────────────────────────────────────────

/// Pose-orientation / distance-label pairs; stage 0 entries are manifold
/// poses (label 0), stage s ≥ 1 entries were perturbed with the stage's κ.
#[derive(Debug, Clone)]
pub struct PriorDataset {
    pub n_bones: usize,
    pub thetas: Vec<Vec<[f64; 2]>>,
    pub labels: Vec<f64>,
    pub stage: Vec<u8>,
}

impl PriorDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Entries visible to training at `stage` (manifold + noisy stages ≤ it).
    pub fn indices_up_to_stage(&self, stage: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.stage[i] <= stage).collect()
    }

    /// Binary layout: L u32, count u32, then per pose 2L f64 orientation
    /// components, then count f64 labels (little-endian).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.len() * (self.n_bones * 16 + 8));
        buf.extend_from_slice(&(self.n_bones as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for pose in &self.thetas {
            for t in pose {
                buf.extend_from_slice(&t[0].to_le_bytes());
                buf.extend_from_slice(&t[1].to_le_bytes());
            }
        }
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PriorDataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 8 {
            return Err(Error::invalid("prior dataset: truncated header"));
        }
        let l = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let want = 8 + count * (l * 16 + 8);
        if bytes.len() != want {
            return Err(Error::invalid(format!(
                "prior dataset: expected {want} bytes, found {}",
                bytes.len()
            )));
        }
        let mut off = 8;
        let f64_at = |o: &mut usize| {
            let v = f64::from_le_bytes(bytes[*o..*o + 8].try_into().unwrap());
            *o += 8;
            v
        };
        let mut thetas = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pose = Vec::with_capacity(l);
            for _ in 0..l {
                let x = f64_at(&mut off);
                let y = f64_at(&mut off);
                pose.push([x, y]);
            }
            thetas.push(pose);
        }
        let labels: Vec<f64> = (0..count).map(|_| f64_at(&mut off)).collect();
        Ok(PriorDataset { n_bones: l, thetas, labels, stage: vec![0; count] })
    }
}

/// Build the staged dataset: every manifold pose labeled 0, then per stage s
/// `mult[s] × manifold_count` noisy poses at κ_s, each labeled by the exact
/// distance labeler. Labeling parallelizes over queries.
pub fn build_prior_dataset(
    manifold: &[Vec<[f64; 2]>],
    kappas: &[f64],
    stage_mult: &[usize],
    seed: u64,
) -> Result<PriorDataset> {
    if manifold.is_empty() {
        return Err(Error::invalid("build_prior_dataset: empty manifold pool"));
    }
    let n_bones = manifold[0].len();
    let mut thetas: Vec<Vec<[f64; 2]>> = manifold.to_vec();
    let mut labels = vec![0.0; manifold.len()];
    let mut stage = vec![0u8; manifold.len()];
    for (s, (&kappa, &mult)) in kappas.iter().zip(stage_mult).enumerate() {
        let count = manifold.len() * mult;
        let noisy: Vec<Vec<[f64; 2]>> = (0..count)
            .map(|i| {
                let mut rng = seeds::stream(seed, &format!("prior-noise/{s}"), i as u64);
                let base = &manifold[rng.gen_range(0..manifold.len())];
                perturb_pose(base, kappa, &mut rng)
            })
            .collect::<Result<_>>()?;
        let dists: Vec<f64> = noisy
            .par_iter()
            .map(|q| distance_to_manifold(q, manifold).expect("manifold non-empty"))
            .collect();
        thetas.extend(noisy);
        labels.extend(dists);
        stage.extend(std::iter::repeat((s + 1) as u8).take(count));
    }
    Ok(PriorDataset { n_bones, thetas, labels, stage })
}

// ── prior network ───────────────────────────────────────────────────────────

/// Distance field over pose orientations. Each bone has a 2-layer MLP that
/// encodes (θ_l ⧺ parent latent) into a latent; latents concatenate in bone
/// order and a 2-layer head with a softplus output predicts the non-negative
/// manifold distance. Bones out of the skeleton root take a zero parent
/// latent.
pub struct PosePrior {
    pub params: ParameterStore,
    pub skeleton: Skeleton,
    pub latent: usize,
    pub head_hidden: usize,
}

impl PosePrior {
    pub fn init(skeleton: &Skeleton, latent: usize, head_hidden: usize, seed: u64) -> PosePrior {
        let mut rng = seeds::stream(seed, "init/prior", 0);
        let mut p = ParameterStore::new();
        let he = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::param(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let in_dim = 2 + latent;
        for l in 0..skeleton.n_bones() {
            p.insert(&format!("enc{l}.w1"), he(&[in_dim, latent], in_dim, &mut rng)).unwrap();
            p.insert(&format!("enc{l}.b1"), Tensor::param(&[latent], vec![0.0; latent])).unwrap();
            p.insert(&format!("enc{l}.w2"), he(&[latent, latent], latent, &mut rng)).unwrap();
            p.insert(&format!("enc{l}.b2"), Tensor::param(&[latent], vec![0.0; latent])).unwrap();
        }
        let pdim = skeleton.n_bones() * latent;
        p.insert("head.w1", he(&[pdim, head_hidden], pdim, &mut rng)).unwrap();
        p.insert("head.b1", Tensor::param(&[head_hidden], vec![0.0; head_hidden])).unwrap();
        p.insert("head.w2", he(&[head_hidden, 1], head_hidden, &mut rng)).unwrap();
        p.insert("head.b2", Tensor::param(&[1], vec![0.0])).unwrap();
        PosePrior { params: p, skeleton: skeleton.clone(), latent, head_hidden }
    }

    pub fn frozen_copy(&self) -> PosePrior {
        PosePrior {
            params: self.params.clone_values(false),
            skeleton: self.skeleton.clone(),
            latent: self.latent,
            head_hidden: self.head_hidden,
        }
    }

    /// Per-bone orientation tensors ([b,2] each, bone order) → [b,1] scores.
    pub fn forward(&self, thetas: &[Tensor]) -> TensorResult<Tensor> {
        assert_eq!(thetas.len(), self.skeleton.n_bones());
        let b = thetas[0].shape()[0];
        let p = &self.params;
        let zero_parent = Tensor::new(&[b, self.latent], vec![0.0; b * self.latent]);
        let mut latents: Vec<Tensor> = Vec::with_capacity(thetas.len());
        for (l, theta) in thetas.iter().enumerate() {
            let parent = match self.skeleton.parent_bone[l] {
                Some(pb) => latents[pb].clone(),
                None => zero_parent.clone(),
            };
            let x = Tensor::concat(&[theta.clone(), parent], 1)?;
            let h = x
                .matmul(p.get(&format!("enc{l}.w1")))?
                .bias_add(p.get(&format!("enc{l}.b1")), 1)?
                .relu()?;
            let v = h
                .matmul(p.get(&format!("enc{l}.w2")))?
                .bias_add(p.get(&format!("enc{l}.b2")), 1)?;
            latents.push(v);
        }
        let pose_code = Tensor::concat(&latents, 1)?;
        let h = pose_code.matmul(p.get("head.w1"))?.bias_add(p.get("head.b1"), 1)?.relu()?;
        h.matmul(p.get("head.w2"))?.bias_add(p.get("head.b2"), 1)?.softplus()
    }

    /// Score a batch of raw orientation sets (no gradients).
    pub fn score(&self, poses: &[Vec<[f64; 2]>]) -> Result<Vec<f64>> {
        if poses.is_empty() {
            return Ok(Vec::new());
        }
        let b = poses.len();
        let l = self.skeleton.n_bones();
        let mut per_bone: Vec<Tensor> = Vec::with_capacity(l);
        for bone in 0..l {
            let mut data = Vec::with_capacity(b * 2);
            for pose in poses {
                data.push(pose[bone][0]);
                data.push(pose[bone][1]);
            }
            per_bone.push(Tensor::new(&[b, 2], data));
        }
        Ok(self.forward(&per_bone)?.data())
    }
}

// ── training ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PriorTrainLog {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Staged MSE regression of predicted against labeled distances. Stage s
/// trains for `stage_epochs[s]` epochs on every entry whose stage tag ≤ s+1.
pub fn train_prior(
    prior: &mut PosePrior,
    dataset: &PriorDataset,
    stage_epochs: &[usize],
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<PriorTrainLog>> {
    let mut logs = Vec::new();
    let l = prior.skeleton.n_bones();
    for (s, &epochs) in stage_epochs.iter().enumerate() {
        let idx = dataset.indices_up_to_stage((s + 1) as u8);
        if idx.is_empty() {
            continue;
        }
        for epoch in 0..epochs {
            let perm = seeds::permutation(seed, &format!("prior-order/{s}"), epoch as u64, idx.len());
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in perm.chunks(batch) {
                let ids: Vec<usize> = chunk.iter().map(|&i| idx[i]).collect();
                let b = ids.len();
                let mut per_bone: Vec<Tensor> = Vec::with_capacity(l);
                for bone in 0..l {
                    let mut data = Vec::with_capacity(b * 2);
                    for &i in &ids {
                        data.push(dataset.thetas[i][bone][0]);
                        data.push(dataset.thetas[i][bone][1]);
                    }
                    per_bone.push(Tensor::new(&[b, 2], data));
                }
                let target =
                    Tensor::new(&[b, 1], ids.iter().map(|&i| dataset.labels[i]).collect());
                prior.params.zero_grads();
                let pred = prior.forward(&per_bone)?;
                let loss = pred.mse_loss(&target)?;
                epoch_loss += loss.item();
                batches += 1;
                loss.backward()?;
                prior.params.adam_step(AdamParams::with_lr(lr))?;
            }
            logs.push(PriorTrainLog { stage: s + 1, epoch, loss: epoch_loss / batches as f64 });
        }
    }
    Ok(logs)
}

/// Plausibility loss: mean predicted manifold distance of the student's
/// decoded poses. Differentiable through soft-argmax and the orientation
/// map; the prior itself stays frozen.
pub fn prior_loss(prior: &PosePrior, student_heatmaps: &Tensor, beta: f64) -> TensorResult<Tensor> {
    let coords = decode_softargmax(student_heatmaps, beta)?;
    let thetas = orientation_tensors(&coords, &prior.skeleton)?;
    prior.forward(&thetas)?.mean()
}

/// Area under the ROC curve for manifold (negative) vs perturbed (positive)
/// scores, by rank sum; ties count half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positive.len() as f64 * negative.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Skeleton;

    /// Scaled Bessel ratio I₁(κ)/I₀(κ) by Simpson quadrature of
    /// Iν(κ)e^{-κ} = (1/π)∫₀^π e^{κ(cos t − 1)} cos(νt) dt.
    fn bessel_ratio(kappa: f64) -> f64 {
        let n = 4000;
        let h = PI / n as f64;
        let f = |nu: f64, t: f64| (kappa * ((t).cos() - 1.0)).exp() * (nu * t).cos();
        let simpson = |nu: f64| {
            let mut acc = f(nu, 0.0) + f(nu, PI);
            for i in 1..n {
                let t = i as f64 * h;
                acc += f(nu, t) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0 / PI
        };
        simpson(1.0) / simpson(0.0)
    }

    #[test]
    fn von_mises_rejects_bad_kappa() {
        let mut rng = seeds::stream(0, "vm", 0);
        assert!(von_mises_sample(0.0, 0.0, &mut rng).is_err());
        assert!(von_mises_sample(0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn von_mises_range_contract() {
        let mut rng = seeds::stream(1, "vm-range", 0);
        for kappa in [0.5, 4.0, 64.0] {
            for _ in 0..2000 {
                let a = von_mises_sample(1.0, kappa, &mut rng).unwrap();
                assert!(a > -PI && a <= PI, "sample {a} out of range");
            }
        }
    }

    #[test]
    fn von_mises_moments_match_bessel_oracle() {
        // mean resultant length R = I₁(κ)/I₀(κ); circular variance = 1 − R
        let mut rng = seeds::stream(2, "vm-moments", 0);
        let n = 10_000;
        for kappa in [4.0, 100.0, 500.0] {
            let mut sum = 0.0;
            let (mut c, mut s) = (0.0, 0.0);
            for _ in 0..n {
                let a = von_mises_sample(0.0, kappa, &mut rng).unwrap();
                sum += a;
                c += a.cos();
                s += a.sin();
            }
            let mean = sum / n as f64;
            let r = (c * c + s * s).sqrt() / n as f64;
            let expect_r = bessel_ratio(kappa);
            assert!((r - expect_r).abs() < 0.01, "κ={kappa}: R {r} vs {expect_r}");
            if kappa == 500.0 {
                assert!(mean.abs() < 0.01, "κ=500 sample mean {mean}");
                assert!(1.0 - r < 0.01, "κ=500 circular variance {}", 1.0 - r);
            }
        }
    }

    #[test]
    fn von_mises_large_kappa_behaves_gaussian() {
        let mut rng = seeds::stream(3, "vm-gauss", 0);
        let n = 10_000;
        let mut var = 0.0;
        for _ in 0..n {
            let a = von_mises_sample(0.0, 100.0, &mut rng).unwrap();
            var += a * a;
        }
        var /= n as f64;
        assert!((var - 0.01).abs() < 0.002, "variance {var} vs 1/κ = 0.01");
    }

    #[test]
    fn perturb_extreme_kappa_barely_moves() {
        let mut rng = seeds::stream(4, "vm-tight", 0);
        let thetas = vec![[1.0, 0.0], [0.0, 1.0], [-0.6, 0.8]];
        let out = perturb_pose(&thetas, 1e6, &mut rng).unwrap();
        for (a, b) in thetas.iter().zip(&out) {
            let dot = (a[0] * b[0] + a[1] * b[1]).clamp(-1.0, 1.0);
            assert!(dot.acos() < 0.01, "angle moved {}", dot.acos());
        }
    }

    #[test]
    fn perturb_outputs_stay_unit() {
        let mut rng = seeds::stream(5, "vm-unit", 0);
        let thetas = vec![[0.6, 0.8]; 10];
        for kappa in [4.0, 16.0, 64.0] {
            let out = perturb_pose(&thetas, kappa, &mut rng).unwrap();
            for v in out {
                assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturb_deviation_decreases_with_kappa() {
        let mut rng = seeds::stream(6, "vm-order", 0);
        let theta = vec![[1.0, 0.0]];
        let mut means = Vec::new();
        for kappa in [4.0, 16.0, 64.0] {
            let mut acc = 0.0;
            for _ in 0..3000 {
                let out = perturb_pose(&theta, kappa, &mut rng).unwrap();
                acc += (out[0][0].clamp(-1.0, 1.0)).acos();
            }
            means.push(acc / 3000.0);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    #[test]
    fn labeler_trivial_cases() {
        let a = vec![[1.0, 0.0]];
        let b = vec![[0.0, 1.0]];
        let set = vec![a.clone()];
        assert_eq!(distance_to_manifold(&a, &set).unwrap(), 0.0);
        let d = distance_to_manifold(&b, &set).unwrap();
        assert!((d - PI / 2.0).abs() < 1e-12);
        // symmetry
        let d2 = distance_to_manifold(&a, &[b.clone()]).unwrap();
        assert!((d - d2).abs() < 1e-12);
        assert!(distance_to_manifold(&a, &[]).is_err());
    }

    #[test]
    fn dataset_counts_and_labels() {
        let skel = Skeleton::default16();
        let pool = crate::synth::prior_pose_pool(
            &crate::synth::adult_spec(),
            &crate::synth::infant_prior_spec(),
            &skel,
            40,
            9,
        );
        let manifold: Vec<Vec<[f64; 2]>> = pool
            .iter()
            .map(|c| crate::geometry::orientation_vectors(c, &skel).0)
            .collect();
        let ds = build_prior_dataset(&manifold, &[64.0, 16.0, 4.0], &[1, 2, 4], 3).unwrap();
        assert_eq!(ds.len(), 40 * (1 + 1 + 2 + 4));
        // manifold entries all labeled 0
        for i in 0..40 {
            assert_eq!(ds.labels[i], 0.0);
            assert_eq!(ds.stage[i], 0);
        }
        // stage means increase with noise (κ 64 → 4)
        let mean_of = |s: u8| {
            let (mut acc, mut n) = (0.0, 0);
            for i in 0..ds.len() {
                if ds.stage[i] == s {
                    acc += ds.labels[i];
                    n += 1;
                }
            }
            acc / n as f64
        };
        let (m1, m3) = (mean_of(1), mean_of(3));
        assert!(m1 < m3, "stage1 {m1} should label below stage3 {m3}");
        // staged visibility
        assert_eq!(ds.indices_up_to_stage(1).len(), 80);
        assert_eq!(ds.indices_up_to_stage(3).len(), ds.len());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = PriorDataset {
            n_bones: 2,
            thetas: vec![vec![[1.0, 0.0], [0.0, 1.0]], vec![[0.6, 0.8], [-1.0, 0.0]]],
            labels: vec![0.0, 0.37],
            stage: vec![0, 1],
        };
        let p = dir.path().join("pd.bin");
        ds.save(&p).unwrap();
        let back = PriorDataset::load(&p).unwrap();
        assert_eq!(back.n_bones, 2);
        assert_eq!(back.thetas, ds.thetas);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn prior_output_nonnegative_everywhere() {
        let skel = Skeleton::default16();
        let prior = PosePrior::init(&skel, 6, 64, 11);
        let mut rng = seeds::stream(12, "nonneg", 0);
        let poses: Vec<Vec<[f64; 2]>> = (0..32)
            .map(|_| {
                (0..skel.n_bones())
                    .map(|_| {
                        let a: f64 = rng.gen_range(-PI..PI);
                        [a.cos(), a.sin()]
                    })
                    .collect()
            })
            .collect();
        for s in prior.score(&poses).unwrap() {
            assert!(s >= 0.0);
        }
    }

    #[test]
    fn hierarchy_scopes_latent_flow() {
        // changing a leaf bone's θ must not affect other bones' latents;
        // verified indirectly: change the left forearm (leaf bone 5) on a
        // prior whose head reads only non-descendant latents → score is
        // bit-identical; change an upstream bone (torso 0) → score moves.
        let skel = Skeleton::default16();
        let mut prior = PosePrior::init(&skel, 6, 64, 13);
        // zero the head weights of the forearm's latent block so its own
        // contribution is masked; every other block keeps its weights
        let w1 = prior.params.get("head.w1");
        let mut data = w1.data();
        let latent = prior.latent;
        for row in 5 * latent..6 * latent {
            for col in 0..prior.head_hidden {
                data[row * prior.head_hidden + col] = 0.0;
            }
        }
        w1.set_data(&data);
        let base: Vec<[f64; 2]> = (0..skel.n_bones())
            .map(|i| {
                let a = i as f64 * 0.4 - 1.0;
                [a.cos(), a.sin()]
            })
            .collect();
        let mut leaf_changed = base.clone();
        leaf_changed[5] = [0.0, 1.0];
        let mut torso_changed = base.clone();
        torso_changed[0] = [0.0, 1.0];
        let scores = prior.score(&vec![base, leaf_changed, torso_changed]).unwrap();
        assert_eq!(scores[0], scores[1], "leaf bone leaked into non-descendant latents");
        assert_ne!(scores[0], scores[2], "upstream bone change must propagate");
    }

    #[test]
    fn auc_of_separable_scores_is_one() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
    }
}
