//! Anti-aliased capsule renderer with draw-order occlusion.
//!
//! Bones render as capsules and the head as a disk, torso first, then legs,
//! then arms, so crossing limbs occlude what they pass over. A z-buffer of
//! shape ownership decides per-keypoint visibility, and the union of shapes
//! is the exact silhouette mask.

use super::{DomainSpec, IMAGE_SIZE};
use crate::geometry::{KeypointSet, Skeleton};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One rendered training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
    pub kps: KeypointSet,
}

enum Shape {
    Capsule { a: [f64; 2], b: [f64; 2], r: f64, bone: usize },
    Disk { c: [f64; 2], r: f64 },
}

impl Shape {
    fn bbox(&self, size: usize) -> (usize, usize, usize, usize) {
        let (min_x, max_x, min_y, max_y) = match self {
            Shape::Capsule { a, b, r, .. } => (
                a[0].min(b[0]) - r - 1.0,
                a[0].max(b[0]) + r + 1.0,
                a[1].min(b[1]) - r - 1.0,
                a[1].max(b[1]) + r + 1.0,
            ),
            Shape::Disk { c, r } => (c[0] - r - 1.0, c[0] + r + 1.0, c[1] - r - 1.0, c[1] + r + 1.0),
        };
        (
            (min_x.floor().max(0.0)) as usize,
            (max_x.ceil().min((size - 1) as f64)) as usize,
            (min_y.floor().max(0.0)) as usize,
            (max_y.ceil().min((size - 1) as f64)) as usize,
        )
    }

    fn distance(&self, p: [f64; 2]) -> f64 {
        match self {
            Shape::Disk { c, r } => {
                (((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()) - r
            }
            Shape::Capsule { a, b, r, .. } => {
                let ab = [b[0] - a[0], b[1] - a[1]];
                let ap = [p[0] - a[0], p[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                let t = if len2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() - r
            }
        }
    }
}

/// Bones draw torso-first, then the head disk, then legs, then arms, so a
/// crossing arm occludes leg and torso keypoints beneath it.
fn draw_order(skel: &Skeleton) -> Vec<usize> {
    let mut order = Vec::with_capacity(skel.n_bones());
    order.extend([0, 1, 2]); // torso chain
    order.extend([9, 10, 11, 12, 13, 14]); // legs
    order.extend([3, 4, 5, 6, 7, 8]); // arms
    debug_assert_eq!(order.len(), skel.n_bones());
    order
}

pub fn render(
    kps: &KeypointSet,
    spec: &DomainSpec,
    skel: &Skeleton,
    rng: &mut ChaCha8Rng,
    mask_noise: f64,
) -> Sample {
    let size = IMAGE_SIZE;
    let n = size * size;
    let mut image = vec![0.0f64; n];
    let mut coverage = vec![0.0f64; n];
    let mut zbuf: Vec<Option<usize>> = vec![None; n];

    // background
    let base = rng.gen_range(spec.background.intensity.0..=spec.background.intensity.1);
    image.fill(base);
    for _ in 0..spec.background.blanket_patches {
        let cx = rng.gen_range(8.0..(size as f64 - 8.0));
        let cy = rng.gen_range(8.0..(size as f64 - 8.0));
        let hw = rng.gen_range(6.0..20.0);
        let hh = rng.gen_range(6.0..20.0);
        let val = rng.gen_range(0.15..0.45);
        for y in 0..size {
            for x in 0..size {
                // soft-edged rectangle, 2 px falloff
                let dx = ((x as f64 - cx).abs() - hw).max(0.0);
                let dy = ((y as f64 - cy).abs() - hh).max(0.0);
                let d = (dx * dx + dy * dy).sqrt();
                let cov = (1.0 - d / 2.0).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let px = &mut image[y * size + x];
                    *px = *px * (1.0 - cov) + val * cov;
                }
            }
        }
    }

    // figure shapes in draw order
    let order = draw_order(skel);
    let r = spec.limb_thickness / 2.0;
    let head_idx = skel.index_of("head").unwrap_or(0);
    let mut shapes: Vec<Shape> = Vec::with_capacity(order.len() + 1);
    for &bone in &order {
        let (p, c) = skel.bones[bone];
        shapes.push(Shape::Capsule { a: kps.coords[p], b: kps.coords[c], r, bone });
        if skel.bones[bone].1 == head_idx {
            shapes.push(Shape::Disk { c: kps.coords[head_idx], r: spec.head_radius() });
        }
    }

    for (s_idx, shape) in shapes.iter().enumerate() {
        let intensity = rng.gen_range(spec.limb_intensity.0..=spec.limb_intensity.1);
        let (x0, x1, y0, y1) = shape.bbox(size);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = shape.distance([x as f64, y as f64]);
                let cov = (0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let i = y * size + x;
                    image[i] = image[i] * (1.0 - cov) + intensity * cov;
                    coverage[i] = coverage[i].max(cov);
                    if cov >= 0.5 {
                        zbuf[i] = Some(s_idx);
                    }
                }
            }
        }
    }

    // pixel noise
    if spec.background.noise_std > 0.0 {
        for px in image.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *px += spec.background.noise_std * g;
        }
    }
    for px in image.iter_mut() {
        *px = px.clamp(0.0, 1.0);
    }

    // visibility: a keypoint is occluded when the shape owning its pixel is
    // not one of its own bones (or the head disk for the head keypoint)
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); skel.k()];
    for (s_idx, shape) in shapes.iter().enumerate() {
        match shape {
            Shape::Capsule { bone, .. } => {
                let (p, c) = skel.bones[*bone];
                owners[p].push(s_idx);
                owners[c].push(s_idx);
            }
            Shape::Disk { .. } => owners[head_idx].push(s_idx),
        }
    }
    let visible: Vec<bool> = kps
        .coords
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let x = c[0].round().clamp(0.0, (size - 1) as f64) as usize;
            let y = c[1].round().clamp(0.0, (size - 1) as f64) as usize;
            match zbuf[y * size + x] {
                Some(s) => owners[k].contains(&s),
                None => true,
            }
        })
        .collect();

    let mut mask: Vec<u8> = coverage.iter().map(|&c| u8::from(c >= 0.5)).collect();
    if mask_noise > 0.0 {
        for m in mask.iter_mut() {
            if rng.gen_bool(mask_noise) {
                *m = 1 - *m;
            }
        }
    }

    Sample {
        image,
        mask,
        kps: KeypointSet { coords: kps.coords.clone(), visible },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::synth::{adult_spec, infant_spec, sample_pose};

    #[test]
    fn mask_pixel_count_in_sane_bounds() {
        let skel = Skeleton::default16();
        for (spec, tag) in [(adult_spec(), "a"), (infant_spec(), "i")] {
            for i in 0..50u64 {
                let mut rng = seeds::stream(3, tag, i);
                let kps = sample_pose(&spec, &skel, &mut rng);
                let s = render(&kps, &spec, &skel, &mut rng, 0.0);
                let count: usize = s.mask.iter().map(|&m| m as usize).sum();
                assert!(count > 0, "{tag} sample {i}: empty mask");
                assert!(
                    (count as f64) < 0.6 * (IMAGE_SIZE * IMAGE_SIZE) as f64,
                    "{tag} sample {i}: mask covers {count} px"
                );
            }
        }
    }

    #[test]
    fn same_seed_renders_identical_bytes() {
        let skel = Skeleton::default16();
        let spec = infant_spec();
        let run = || {
            let mut rng = seeds::stream(8, "det", 5);
            let kps = sample_pose(&spec, &skel, &mut rng);
            render(&kps, &spec, &skel, &mut rng, 0.02)
        };
        let a = run();
        let b = run();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.kps, b.kps);
    }

    #[test]
    fn occluded_keypoints_are_covered_by_another_shape() {
        let skel = Skeleton::default16();
        let spec = infant_spec();
        let mut occluded_seen = 0;
        for i in 0..300u64 {
            let mut rng = seeds::stream(12, "occ", i);
            let kps = sample_pose(&spec, &skel, &mut rng);
            let s = render(&kps, &spec, &skel, &mut rng, 0.0);
            for (k, &vis) in s.kps.visible.iter().enumerate() {
                if !vis {
                    occluded_seen += 1;
                    let x = s.kps.coords[k][0].round() as usize;
                    let y = s.kps.coords[k][1].round() as usize;
                    assert_eq!(s.mask[y * IMAGE_SIZE + x], 1, "occluded kp {k} not under the mask");
                }
            }
        }
        assert!(occluded_seen > 30, "only {occluded_seen} occlusions in 300 infant samples");
    }

    #[test]
    fn crossing_forearm_hides_wrist() {
        // hand-built pose: right forearm drawn last passes over the left wrist
        let skel = Skeleton::default16();
        let spec = adult_spec();
        let mut coords = vec![[32.0, 32.0]; 16];
        coords[skel.index_of("pelvis").unwrap()] = [32.0, 44.0];
        coords[skel.index_of("thorax").unwrap()] = [32.0, 30.0];
        coords[skel.index_of("neck").unwrap()] = [32.0, 27.0];
        coords[skel.index_of("head").unwrap()] = [32.0, 23.0];
        coords[skel.index_of("l_shoulder").unwrap()] = [27.0, 30.0];
        coords[skel.index_of("l_elbow").unwrap()] = [24.0, 37.0];
        coords[skel.index_of("l_wrist").unwrap()] = [24.0, 44.0];
        coords[skel.index_of("r_shoulder").unwrap()] = [37.0, 30.0];
        coords[skel.index_of("r_elbow").unwrap()] = [38.0, 38.0];
        // right forearm sweeps across the body over the left wrist
        coords[skel.index_of("r_wrist").unwrap()] = [18.0, 46.0];
        coords[skel.index_of("l_hip").unwrap()] = [29.0, 46.0];
        coords[skel.index_of("l_knee").unwrap()] = [29.0, 53.0];
        coords[skel.index_of("l_ankle").unwrap()] = [29.0, 60.0] ;
        coords[skel.index_of("r_hip").unwrap()] = [35.0, 46.0];
        coords[skel.index_of("r_knee").unwrap()] = [35.0, 53.0];
        coords[skel.index_of("r_ankle").unwrap()] = [35.0, 60.0];
        let mut rng = seeds::stream(1, "cross", 0);
        let s = render(&KeypointSet::all_visible(coords), &spec, &skel, &mut rng, 0.0);
        assert!(!s.kps.visible[skel.index_of("l_wrist").unwrap()], "wrist should be occluded");
        assert!(s.kps.visible[skel.index_of("head").unwrap()]);
    }
}
