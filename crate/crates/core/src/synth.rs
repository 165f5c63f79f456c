//! Procedural two-domain stick-figure generator.
//!
//! A labeled "adult" source domain and an unlabeled "infant" target domain
//! with a controlled anatomical / pose / appearance shift. Figures are
//! rendered as anti-aliased capsules per bone plus a head disk; the exact
//! silhouette doubles as the pseudo segmentation mask. Per-sample seeds are
//! derived as hash(dataset seed, index), so generation is order-independent.

mod data;
pub mod render;
mod templates;

pub use data::{
    generate_dataset, load_manifest, read_split, write_split, DatasetManifest, SplitFile,
};
pub use render::Sample;
pub use templates::{adult_spec, infant_prior_spec, infant_spec};


use crate::geometry::{KeypointSet, Skeleton};
use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const IMAGE_SIZE: usize = 64;
/// Sampled keypoints are clamped to this inner margin (px).
pub const POSE_MARGIN: f64 = 8.0;

/// One pose family: per-bone relative joint angles (radians, relative to the
/// parent bone direction; root bones relative to the body orientation), the
/// per-joint jitter std-dev, and hard joint limits.
#[derive(Debug, Clone)]
pub struct PoseTemplate {
    pub name: String,
    pub rel_angle: Vec<f64>,
    pub angle_std: Vec<f64>,
    pub limits: Vec<(f64, f64)>,
    /// body orientation range (radians; direction of the pelvis→thorax axis)
    pub orientation: (f64, f64),
    /// template deliberately crosses limbs over the torso
    pub crossing: bool,
    pub weight: f64,
}

/// Background appearance: base intensity range, additive gaussian noise, and
/// soft "blanket" rectangles for the infant domain.
#[derive(Debug, Clone)]
pub struct BackgroundSpec {
    pub intensity: (f64, f64),
    pub noise_std: f64,
    pub blanket_patches: usize,
}

/// Everything that defines one domain's anatomy, pose distribution and look.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub name: String,
    /// per-bone length as a fraction of body height, in skeleton bone order
    pub limb_length_ratios: Vec<f64>,
    /// head disk radius as a fraction of the torso (pelvis→thorax) length
    pub head_radius_ratio: f64,
    pub limb_thickness: f64,
    pub body_height: f64,
    pub pose_templates: Vec<PoseTemplate>,
    pub limb_intensity: (f64, f64),
    pub background: BackgroundSpec,
    /// probability that a sampled pose uses a limb-crossing template
    pub occlusion_rate: f64,
}

impl DomainSpec {
    /// Stable content hash over every numeric field, for manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        let mut push = |v: f64| h.update(v.to_le_bytes());
        for &r in &self.limb_length_ratios {
            push(r);
        }
        push(self.head_radius_ratio);
        push(self.limb_thickness);
        push(self.body_height);
        push(self.limb_intensity.0);
        push(self.limb_intensity.1);
        push(self.background.intensity.0);
        push(self.background.intensity.1);
        push(self.background.noise_std);
        push(self.background.blanket_patches as f64);
        push(self.occlusion_rate);
        for t in &self.pose_templates {
            h.update(t.name.as_bytes());
            let mut push = |v: f64| h.update(v.to_le_bytes());
            for &a in &t.rel_angle {
                push(a);
            }
            for &a in &t.angle_std {
                push(a);
            }
            for &(lo, hi) in &t.limits {
                push(lo);
                push(hi);
            }
            push(t.orientation.0);
            push(t.orientation.1);
            push(if t.crossing { 1.0 } else { 0.0 });
            push(t.weight);
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn bone_length(&self, bone: usize) -> f64 {
        self.limb_length_ratios[bone] * self.body_height
    }

    pub fn head_radius(&self) -> f64 {
        self.head_radius_ratio * self.bone_length(0)
    }
}

fn pick_template<'a>(spec: &'a DomainSpec, rng: &mut ChaCha8Rng) -> &'a PoseTemplate {
    let crossing: Vec<&PoseTemplate> = spec.pose_templates.iter().filter(|t| t.crossing).collect();
    let plain: Vec<&PoseTemplate> = spec.pose_templates.iter().filter(|t| !t.crossing).collect();
    let pool = if !crossing.is_empty() && rng.gen_bool(spec.occlusion_rate.clamp(0.0, 1.0)) {
        crossing
    } else if !plain.is_empty() {
        plain
    } else {
        spec.pose_templates.iter().collect()
    };
    let total: f64 = pool.iter().map(|t| t.weight).sum();
    let mut pick = rng.gen_range(0.0..total);
    for t in &pool {
        pick -= t.weight;
        if pick <= 0.0 {
            return t;
        }
    }
    pool[pool.len() - 1]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Forward kinematics from the pelvis through the bone tree: absolute bone
/// angle = parent's absolute angle + clamped relative angle. Keypoints are
/// clamped to the 8 px inner margin; if clamping stretches or shrinks any
/// bone by more than 20% the pose is resampled.
pub fn sample_pose(spec: &DomainSpec, skel: &Skeleton, rng: &mut ChaCha8Rng) -> KeypointSet {
    let size = IMAGE_SIZE as f64;
    for _attempt in 0..64 {
        let template = pick_template(spec, rng);
        let orient = if template.orientation.0 < template.orientation.1 {
            rng.gen_range(template.orientation.0..template.orientation.1)
        } else {
            template.orientation.0
        };

        let mut abs_angle = vec![0.0f64; skel.n_bones()];
        for l in 0..skel.n_bones() {
            let (lo, hi) = template.limits[l];
            let rel = (template.rel_angle[l] + template.angle_std[l] * gaussian(rng)).clamp(lo, hi);
            abs_angle[l] = match skel.parent_bone[l] {
                Some(p) => abs_angle[p] + rel,
                None => orient + rel,
            };
        }

        let mut coords = vec![[0.0f64; 2]; skel.k()];
        coords[skel.root] = [0.0, 0.0];
        for (l, &(parent, child)) in skel.bones.iter().enumerate() {
            let len = spec.bone_length(l);
            coords[child] = [
                coords[parent][0] + len * abs_angle[l].cos(),
                coords[parent][1] + len * abs_angle[l].sin(),
            ];
        }

        // center the figure with a small jitter
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in &coords {
            min_x = min_x.min(c[0]);
            max_x = max_x.max(c[0]);
            min_y = min_y.min(c[1]);
            max_y = max_y.max(c[1]);
        }
        let jx = rng.gen_range(-4.0..4.0);
        let jy = rng.gen_range(-4.0..4.0);
        let dx = size / 2.0 - (min_x + max_x) / 2.0 + jx;
        let dy = size / 2.0 - (min_y + max_y) / 2.0 + jy;
        let unclamped: Vec<[f64; 2]> = coords.iter().map(|c| [c[0] + dx, c[1] + dy]).collect();
        let clamped: Vec<[f64; 2]> = unclamped
            .iter()
            .map(|c| {
                [
                    c[0].clamp(POSE_MARGIN, size - 1.0 - POSE_MARGIN),
                    c[1].clamp(POSE_MARGIN, size - 1.0 - POSE_MARGIN),
                ]
            })
            .collect();

        let mut ok = true;
        for (l, &(p, c)) in skel.bones.iter().enumerate() {
            let len = spec.bone_length(l);
            let d = ((clamped[p][0] - clamped[c][0]).powi(2) + (clamped[p][1] - clamped[c][1]).powi(2)).sqrt();
            if (d - len).abs() > 0.2 * len {
                ok = false;
                break;
            }
        }
        if ok {
            return KeypointSet::all_visible(clamped);
        }
    }
    // fall through: accept the template mean pose, clamped
    let mut rng2 = seeds::stream(rng.gen(), "pose-fallback", 0);
    let mut quiet = spec.clone();
    for t in quiet.pose_templates.iter_mut() {
        t.angle_std.iter_mut().for_each(|s| *s = 0.0);
    }
    sample_pose(&quiet, skel, &mut rng2)
}

/// Plausible-pose pool for prior training: poses from the source sampler
/// mixed with a held-out infant template family that the evaluation target
/// never uses.
pub fn prior_pose_pool(
    source: &DomainSpec,
    held_out_infant: &DomainSpec,
    skel: &Skeleton,
    n: usize,
    seed: u64,
) -> Vec<Vec<[f64; 2]>> {
    (0..n)
        .map(|i| {
            let spec = if i % 2 == 0 { source } else { held_out_infant };
            let mut rng = seeds::stream(seed, "prior-pool", i as u64);
            sample_pose(spec, skel, &mut rng).coords
        })
        .collect()
}

/// Source-only pose pool (for the source-then-finetune prior regimen).
pub fn source_pose_pool(source: &DomainSpec, skel: &Skeleton, n: usize, seed: u64) -> Vec<Vec<[f64; 2]>> {
    (0..n)
        .map(|i| {
            let mut rng = seeds::stream(seed, "prior-pool-source", i as u64);
            sample_pose(source, skel, &mut rng).coords
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::orientation_vectors;

    #[test]
    fn zero_jitter_standing_is_deterministic() {
        let skel = Skeleton::default16();
        let mut spec = adult_spec();
        spec.pose_templates.truncate(1); // "standing"
        for t in spec.pose_templates.iter_mut() {
            t.angle_std.iter_mut().for_each(|s| *s = 0.0);
            t.orientation = (t.orientation.0, t.orientation.0);
        }
        let mut r1 = seeds::stream(1, "t", 0);
        let mut r2 = seeds::stream(1, "t", 0);
        let a = sample_pose(&spec, &skel, &mut r1);
        let b = sample_pose(&spec, &skel, &mut r2);
        assert_eq!(a.coords, b.coords);
        // head above pelvis for a standing figure (y grows downward)
        let head = skel.index_of("head").unwrap();
        let pelvis = skel.index_of("pelvis").unwrap();
        assert!(a.coords[head][1] < a.coords[pelvis][1]);
    }

    #[test]
    fn head_to_torso_ratio_separates_domains() {
        let adult = adult_spec();
        let infant = infant_spec();
        let ar = adult.head_radius() / adult.bone_length(0);
        let ir = infant.head_radius() / infant.bone_length(0);
        assert!((ar - 0.25).abs() < 0.05, "adult ratio {ar}");
        assert!((ir - 0.5).abs() < 0.1, "infant ratio {ir}");
        assert!(ir > 1.8 * ar);
    }

    #[test]
    fn sampled_poses_stay_in_margin() {
        let skel = Skeleton::default16();
        for (spec, tag) in [(adult_spec(), "a"), (infant_spec(), "i")] {
            for i in 0..200u64 {
                let mut rng = seeds::stream(17, tag, i);
                let kps = sample_pose(&spec, &skel, &mut rng);
                for c in &kps.coords {
                    assert!(c[0] >= POSE_MARGIN && c[0] <= 63.0 - POSE_MARGIN);
                    assert!(c[1] >= POSE_MARGIN && c[1] <= 63.0 - POSE_MARGIN);
                }
            }
        }
    }

    #[test]
    fn sampled_poses_have_no_degenerate_bones() {
        let skel = Skeleton::default16();
        let spec = infant_spec();
        for i in 0..200u64 {
            let mut rng = seeds::stream(19, "deg", i);
            let kps = sample_pose(&spec, &skel, &mut rng);
            let (_, deg) = orientation_vectors(&kps.coords, &skel);
            assert!(deg.iter().all(|&d| !d), "degenerate bone in sample {i}");
        }
    }
}
