//! Skeleton definition, keypoint↔heatmap conversion, differentiable decoding,
//! bone orientation vectors, and invertible affine augmentations.

use crate::error::{Error, Result};
use crate::tensor::kernels::WarpMatrix;
use crate::tensor::{Tensor, TensorResult};
use rand::Rng;

/// Heatmaps are image_size / HEATMAP_STRIDE on a side.
pub const HEATMAP_STRIDE: usize = 4;

// ── skeleton ────────────────────────────────────────────────────────────────

/// Keypoint names and the bone tree connecting them. Bones are ordered
/// (parent keypoint, child keypoint) pairs; a bone's parent bone is the bone
/// ending at its parent keypoint (bones out of the root keypoint have none).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub bones: Vec<(usize, usize)>,
    pub parent_bone: Vec<Option<usize>>,
    pub root: usize,
}

impl Skeleton {
    pub fn new(names: Vec<String>, bones: Vec<(usize, usize)>) -> Result<Skeleton> {
        let k = names.len();
        if bones.len() + 1 != k {
            return Err(Error::invalid(format!(
                "skeleton needs {} bones for {} keypoints, got {}",
                k - 1,
                k,
                bones.len()
            )));
        }
        // find the root: the unique keypoint that is never a child
        let mut is_child = vec![false; k];
        for &(p, c) in &bones {
            if p >= k || c >= k {
                return Err(Error::invalid("bone references unknown keypoint"));
            }
            if is_child[c] {
                return Err(Error::invalid(format!("keypoint {c} has two parents")));
            }
            is_child[c] = true;
        }
        let roots: Vec<usize> = (0..k).filter(|&i| !is_child[i]).collect();
        if roots.len() != 1 {
            return Err(Error::invalid(format!("skeleton has {} roots, need 1", roots.len())));
        }
        let root = roots[0];
        // parent bone of bone l = the bone whose child is l's parent keypoint
        let mut bone_ending_at = vec![None; k];
        for (l, &(_, c)) in bones.iter().enumerate() {
            bone_ending_at[c] = Some(l);
        }
        let mut parent_bone = Vec::with_capacity(bones.len());
        for &(p, _) in &bones {
            parent_bone.push(bone_ending_at[p]);
            // connectivity: every non-root parent must itself be a child somewhere
            if p != root && bone_ending_at[p].is_none() {
                return Err(Error::invalid(format!("bone parent {p} is disconnected")));
            }
        }
        // parents must be defined before children in bone order
        for (l, pb) in parent_bone.iter().enumerate() {
            if let Some(pb) = pb {
                if *pb >= l {
                    return Err(Error::invalid(format!(
                        "bone {l} appears before its parent bone {pb}"
                    )));
                }
            }
        }
        Ok(Skeleton { names, bones, parent_bone, root })
    }

    /// The 16-keypoint body layout used throughout: head, neck, thorax,
    /// pelvis, and left/right shoulder, elbow, wrist, hip, knee, ankle.
    pub fn default16() -> Skeleton {
        let names: Vec<String> = [
            "head", "neck", "thorax", "pelvis", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
            "r_elbow", "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let idx = |n: &str| names.iter().position(|x| x == n).unwrap();
        let bone = |a: &str, b: &str| (idx(a), idx(b));
        let bones = vec![
            bone("pelvis", "thorax"),
            bone("thorax", "neck"),
            bone("neck", "head"),
            bone("thorax", "l_shoulder"),
            bone("l_shoulder", "l_elbow"),
            bone("l_elbow", "l_wrist"),
            bone("thorax", "r_shoulder"),
            bone("r_shoulder", "r_elbow"),
            bone("r_elbow", "r_wrist"),
            bone("pelvis", "l_hip"),
            bone("l_hip", "l_knee"),
            bone("l_knee", "l_ankle"),
            bone("pelvis", "r_hip"),
            bone("r_hip", "r_knee"),
            bone("r_knee", "r_ankle"),
        ];
        Skeleton::new(names, bones).expect("default skeleton is valid")
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn n_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

// ── keypoints and heatmaps ──────────────────────────────────────────────────

/// K pixel-space 2D coordinates with per-keypoint visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>, visible: Vec<bool>) -> KeypointSet {
        assert_eq!(coords.len(), visible.len());
        KeypointSet { coords, visible }
    }

    pub fn all_visible(coords: Vec<[f64; 2]>) -> KeypointSet {
        let n = coords.len();
        KeypointSet { coords, visible: vec![true; n] }
    }

    pub fn k(&self) -> usize {
        self.coords.len()
    }
}

/// K confidence maps of size h×w (image size / 4).
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl HeatmapStack {
    pub fn zeros(k: usize, h: usize, w: usize) -> HeatmapStack {
        HeatmapStack { k, h, w, data: vec![0.0; k * h * w] }
    }

    pub fn map(&self, i: usize) -> &[f64] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    pub fn map_mut(&mut self, i: usize) -> &mut [f64] {
        let plane = self.h * self.w;
        &mut self.data[i * plane..(i + 1) * plane]
    }

    /// As a constant [k, h, w] tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.k, self.h, self.w], self.data.clone())
    }

    pub fn from_tensor_slice(k: usize, h: usize, w: usize, data: &[f64]) -> HeatmapStack {
        assert_eq!(data.len(), k * h * w);
        HeatmapStack { k, h, w, data: data.to_vec() }
    }
}

// ── keypoint → heatmap encoding (φ) ─────────────────────────────────────────

/// Gaussian target maps. The center is the keypoint's nearest heatmap cell
/// (coords / 4 rounded), so the peak value is exactly 1 there; invisible
/// keypoints produce all-zero maps.
pub fn encode_heatmaps(kps: &KeypointSet, sigma: f64, h: usize, w: usize) -> Result<HeatmapStack> {
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let mut out = HeatmapStack::zeros(kps.k(), h, w);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, (&[x, y], &vis)) in kps.coords.iter().zip(&kps.visible).enumerate() {
        if !vis {
            continue;
        }
        let cx = (x / HEATMAP_STRIDE as f64).round().clamp(0.0, (w - 1) as f64);
        let cy = (y / HEATMAP_STRIDE as f64).round().clamp(0.0, (h - 1) as f64);
        let map = out.map_mut(i);
        for v in 0..h {
            for u in 0..w {
                let du = u as f64 - cx;
                let dv = v as f64 - cy;
                map[v * w + u] = (-(du * du + dv * dv) * inv).exp();
            }
        }
    }
    Ok(out)
}

/// Hard argmax decode: per map, the coordinate of the maximum cell scaled
/// back to image space, with the maximum value as confidence. Ties break to
/// the lowest row-major index; an all-zero map decodes to (0,0) with
/// confidence 0 and visible = false.
pub fn decode_argmax(h: &HeatmapStack) -> (KeypointSet, Vec<f64>) {
    let mut coords = Vec::with_capacity(h.k);
    let mut visible = Vec::with_capacity(h.k);
    let mut confidence = Vec::with_capacity(h.k);
    for i in 0..h.k {
        let map = h.map(i);
        let mut best = 0usize;
        let mut best_v = map[0];
        for (j, &v) in map.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        let (cy, cx) = (best / h.w, best % h.w);
        coords.push([cx as f64 * HEATMAP_STRIDE as f64, cy as f64 * HEATMAP_STRIDE as f64]);
        confidence.push(best_v);
        visible.push(best_v > 0.0);
    }
    (KeypointSet { coords, visible }, confidence)
}

/// Differentiable decode: expectation of grid coordinates under
/// spatial_softmax(β · map). Input [b,k,h,w] (or [k,h,w]), output [b,k,2]
/// (or [k,2]) in heatmap-grid units.
pub fn decode_softargmax(maps: &Tensor, beta: f64) -> TensorResult<Tensor> {
    let nd = maps.shape().len();
    assert!(nd == 3 || nd == 4, "decode_softargmax wants [k,h,w] or [b,k,h,w]");
    let (h, w) = (maps.shape()[nd - 2], maps.shape()[nd - 1]);
    let soft = maps.spatial_softmax(beta)?;
    let mut grid_x = vec![0.0; h * w];
    let mut grid_y = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            grid_x[y * w + x] = x as f64;
            grid_y[y * w + x] = y as f64;
        }
    }
    let ex = soft.mul_map(&grid_x)?.sum_spatial()?;
    let ey = soft.mul_map(&grid_y)?.sum_spatial()?;
    let mut col = ex.shape().to_vec();
    col.push(1);
    let ex = ex.reshape(&col)?;
    let ey = ey.reshape(&col)?;
    Tensor::concat(&[ex, ey], col.len() - 1)
}

// ── bone orientation vectors ────────────────────────────────────────────────

/// Unit direction (parent − child)/‖·‖ per bone, in bone order. A bone whose
/// endpoints are within 1e-6 is degenerate: it takes its parent bone's
/// resolved direction (or (0,−1) at the root) and its flag is set.
pub fn orientation_vectors(coords: &[[f64; 2]], skel: &Skeleton) -> (Vec<[f64; 2]>, Vec<bool>) {
    const EPS_LEN: f64 = 1e-6;
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(skel.n_bones());
    let mut degenerate = Vec::with_capacity(skel.n_bones());
    for (l, &(m, n)) in skel.bones.iter().enumerate() {
        let dx = coords[m][0] - coords[n][0];
        let dy = coords[m][1] - coords[n][1];
        let len = (dx * dx + dy * dy).sqrt();
        if len > EPS_LEN {
            out.push([dx / len, dy / len]);
            degenerate.push(false);
        } else {
            let fallback = match skel.parent_bone[l] {
                Some(pb) => out[pb],
                None => [0.0, -1.0],
            };
            out.push(fallback);
            degenerate.push(true);
        }
    }
    (out, degenerate)
}

/// Differentiable orientation vectors from a [b,k,2] coordinate tensor:
/// one [b,2] unit vector per bone, normalized with a 1e-12 floor.
pub fn orientation_tensors(coords: &Tensor, skel: &Skeleton) -> TensorResult<Vec<Tensor>> {
    let mut out = Vec::with_capacity(skel.n_bones());
    for &(m, n) in &skel.bones {
        let pm = coords.select(1, m)?;
        let pn = coords.select(1, n)?;
        out.push(pm.sub(&pn)?.l2_normalize(1)?);
    }
    Ok(out)
}

// ── affine augmentations ────────────────────────────────────────────────────

/// Rotation/scale about the image center plus translation, with optional
/// patch-out squares anchored at keypoints (applied to images only).
#[derive(Debug, Clone)]
pub struct AffineAug {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation: (f64, f64),
    /// (anchor keypoint index, square side in px)
    pub patch: Vec<(usize, usize)>,
}

/// Sampling ranges for [`AffineAug::sample`].
#[derive(Debug, Clone, Copy)]
pub struct AugRanges {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    /// max |dx|, |dy| as a fraction of image width
    pub max_translation_frac: f64,
}

impl AugRanges {
    pub const fn identity() -> AugRanges {
        AugRanges { max_rotation_deg: 0.0, scale: (1.0, 1.0), max_translation_frac: 0.0 }
    }
}

impl AffineAug {
    pub fn identity() -> AffineAug {
        AffineAug { rotation_deg: 0.0, scale: 1.0, translation: (0.0, 0.0), patch: Vec::new() }
    }

    pub fn new(rotation_deg: f64, scale: f64, translation: (f64, f64), w: usize) -> Result<AffineAug> {
        if !(-30.0..=30.0).contains(&rotation_deg) {
            return Err(Error::invalid(format!("rotation {rotation_deg} outside [-30, 30]")));
        }
        if !(0.8..=1.25).contains(&scale) {
            return Err(Error::invalid(format!("scale {scale} outside [0.8, 1.25]")));
        }
        let lim = 0.1 * w as f64;
        if translation.0.abs() > lim || translation.1.abs() > lim {
            return Err(Error::invalid(format!("translation {translation:?} beyond ±{lim}")));
        }
        Ok(AffineAug { rotation_deg, scale, translation, patch: Vec::new() })
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.translation == (0.0, 0.0)
    }

    pub fn sample(ranges: &AugRanges, w: usize, rng: &mut impl Rng) -> AffineAug {
        let r = ranges.max_rotation_deg;
        let rotation_deg = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let scale = if ranges.scale.0 < ranges.scale.1 {
            rng.gen_range(ranges.scale.0..=ranges.scale.1)
        } else {
            ranges.scale.0
        };
        let t = ranges.max_translation_frac * w as f64;
        let translation = if t > 0.0 {
            (rng.gen_range(-t..=t), rng.gen_range(-t..=t))
        } else {
            (0.0, 0.0)
        };
        AffineAug { rotation_deg, scale, translation, patch: Vec::new() }
    }

    /// Forward point map p' = s·R·(p − c) + c + t in a space scaled by
    /// 1/`unit` relative to image pixels (unit 1 = image, 4 = heatmap).
    fn forward_matrix_scaled(&self, w: usize, h: usize, unit: f64) -> WarpMatrix {
        let th = self.rotation_deg.to_radians();
        let (sin, cos) = th.sin_cos();
        let (a, b) = (self.scale * cos, -self.scale * sin);
        let (c, d) = (self.scale * sin, self.scale * cos);
        // center of the image expressed in this space
        let cx = (w as f64 - 1.0) / 2.0 / unit;
        let cy = (h as f64 - 1.0) / 2.0 / unit;
        let tx = self.translation.0 / unit + cx - (a * cx + b * cy);
        let ty = self.translation.1 / unit + cy - (c * cx + d * cy);
        [a, b, tx, c, d, ty]
    }

    /// Forward map in image pixel coordinates (w, h = image size).
    pub fn image_matrix(&self, w: usize, h: usize) -> WarpMatrix {
        self.forward_matrix_scaled(w, h, 1.0)
    }

    /// Forward map in heatmap cell coordinates (w, h = image size).
    pub fn heatmap_matrix(&self, w: usize, h: usize) -> WarpMatrix {
        self.forward_matrix_scaled(w, h, HEATMAP_STRIDE as f64)
    }
}

/// Invert an affine [a,b,tx,c,d,ty]; errors when not invertible.
pub fn invert_matrix(m: &WarpMatrix) -> Result<WarpMatrix> {
    let det = m[0] * m[4] - m[1] * m[3];
    if det.abs() < 1e-12 {
        return Err(Error::invalid("affine transform is not invertible"));
    }
    let (ia, ib) = (m[4] / det, -m[1] / det);
    let (ic, id) = (-m[3] / det, m[0] / det);
    Ok([ia, ib, -(ia * m[2] + ib * m[5]), ic, id, -(ic * m[2] + id * m[5])])
}

pub fn transform_point(m: &WarpMatrix, p: [f64; 2]) -> [f64; 2] {
    [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
}

/// Bilinear-resample `n_maps` stacked [h,w] maps so that output(q) =
/// input(M⁻¹·q) — i.e. apply the forward transform M to the content.
/// Out-of-frame regions fill with 0.
pub fn warp_maps(data: &[f64], n_maps: usize, h: usize, w: usize, forward: &WarpMatrix) -> Result<Vec<f64>> {
    let sampling = invert_matrix(forward)?;
    let mut out = vec![0.0; data.len()];
    crate::tensor::kernels::warp_forward(data, &mut out, &sampling, n_maps, h, w);
    Ok(out)
}

/// Apply an augmentation to a single-channel image, then zero out its patch
/// squares. Patch anchors give the pixel position of each anchored keypoint
/// in the *output* (augmented) frame.
pub fn apply_aug_image(
    img: &[f64],
    h: usize,
    w: usize,
    aug: &AffineAug,
    patch_anchors: Option<&[[f64; 2]]>,
) -> Result<Vec<f64>> {
    let mut out = if aug.is_identity() {
        img.to_vec()
    } else {
        warp_maps(img, 1, h, w, &aug.image_matrix(w, h))?
    };
    if let Some(anchors) = patch_anchors {
        for &(anchor, side) in &aug.patch {
            if anchor < anchors.len() {
                zero_patch(&mut out, h, w, anchors[anchor], side);
            }
        }
    }
    Ok(out)
}

/// Invert an augmentation on a single-channel image (patches are not undone).
pub fn invert_aug_image(img: &[f64], h: usize, w: usize, aug: &AffineAug) -> Result<Vec<f64>> {
    if aug.is_identity() {
        return Ok(img.to_vec());
    }
    let m = aug.image_matrix(w, h);
    let inv = invert_matrix(&m)?;
    warp_maps(img, 1, h, w, &inv)
}

/// Apply / invert an augmentation on a heatmap stack. Patches never apply to
/// heatmaps.
pub fn apply_aug_heatmaps(hm: &HeatmapStack, aug: &AffineAug, img_w: usize, img_h: usize) -> Result<HeatmapStack> {
    if aug.is_identity() {
        return Ok(hm.clone());
    }
    let m = aug.heatmap_matrix(img_w, img_h);
    let data = warp_maps(&hm.data, hm.k, hm.h, hm.w, &m)?;
    Ok(HeatmapStack { k: hm.k, h: hm.h, w: hm.w, data })
}

pub fn invert_aug_heatmaps(hm: &HeatmapStack, aug: &AffineAug, img_w: usize, img_h: usize) -> Result<HeatmapStack> {
    if aug.is_identity() {
        return Ok(hm.clone());
    }
    let m = invert_matrix(&aug.heatmap_matrix(img_w, img_h))?;
    let data = warp_maps(&hm.data, hm.k, hm.h, hm.w, &m)?;
    Ok(HeatmapStack { k: hm.k, h: hm.h, w: hm.w, data })
}

/// Zero a side×side block centered at `center` (rounded to the pixel grid).
pub fn zero_patch(img: &mut [f64], h: usize, w: usize, center: [f64; 2], side: usize) {
    let cx = center[0].round() as isize;
    let cy = center[1].round() as isize;
    let half = side as isize / 2;
    for y in (cy - half)..(cy - half + side as isize) {
        if y < 0 || y >= h as isize {
            continue;
        }
        for x in (cx - half)..(cx - half + side as isize) {
            if x < 0 || x >= w as isize {
                continue;
            }
            img[y as usize * w + x as usize] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn default_skeleton_is_a_tree() {
        let s = Skeleton::default16();
        assert_eq!(s.k(), 16);
        assert_eq!(s.n_bones(), 15);
        assert_eq!(s.names[s.root], "pelvis");
        // thorax→l_shoulder's parent is pelvis→thorax
        assert_eq!(s.parent_bone[3], Some(0));
        // pelvis→l_hip has no parent bone
        assert_eq!(s.parent_bone[9], None);
    }

    #[test]
    fn encode_peak_is_one_at_center() {
        let mut coords = vec![[0.0, 0.0]; 16];
        coords[2] = [32.0, 32.0]; // heatmap cell (8, 8)
        let mut vis = vec![false; 16];
        vis[2] = true;
        let kps = KeypointSet::new(coords, vis);
        let hm = encode_heatmaps(&kps, 2.0, 16, 16).unwrap();
        assert_eq!(hm.map(2)[8 * 16 + 8], 1.0);
        // invisible keypoint → all-zero map
        assert!(hm.map(0).iter().all(|&v| v == 0.0));
        let (dec, conf) = decode_argmax(&hm);
        assert_eq!(dec.coords[2], [32.0, 32.0]);
        assert_eq!(conf[2], 1.0);
        assert!(dec.visible[2]);
        assert!(!dec.visible[0]);
        assert_eq!(dec.coords[0], [0.0, 0.0]);
        assert_eq!(conf[0], 0.0);
    }

    #[test]
    fn encode_rejects_bad_sigma() {
        let kps = KeypointSet::all_visible(vec![[8.0, 8.0]]);
        assert!(encode_heatmaps(&kps, 0.0, 16, 16).is_err());
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        let mut hm = HeatmapStack::zeros(1, 4, 4);
        hm.map_mut(0)[5] = 0.7;
        hm.map_mut(0)[10] = 0.7;
        let (dec, conf) = decode_argmax(&hm);
        assert_eq!(conf[0], 0.7);
        assert_eq!(dec.coords[0], [4.0, 4.0]); // cell (1,1) = index 5
    }

    #[test]
    fn round_trip_exact_for_cell_aligned_coords() {
        use rand::Rng;
        let skel = Skeleton::default16();
        for trial in 0..1000u64 {
            let mut rng = seeds::stream(5, "roundtrip", trial);
            let coords: Vec<[f64; 2]> = (0..skel.k())
                .map(|_| {
                    [
                        rng.gen_range(0..16) as f64 * 4.0,
                        rng.gen_range(0..16) as f64 * 4.0,
                    ]
                })
                .collect();
            let kps = KeypointSet::all_visible(coords.clone());
            let hm = encode_heatmaps(&kps, 2.0, 16, 16).unwrap();
            let (dec, _) = decode_argmax(&hm);
            assert_eq!(dec.coords, coords, "trial {trial}");
        }
    }

    #[test]
    fn softargmax_matches_argmax_on_gaussians() {
        use rand::Rng;
        let mut rng = seeds::stream(9, "softargmax", 0);
        for _ in 0..50 {
            let cx = rng.gen_range(3..13);
            let cy = rng.gen_range(3..13);
            let kps = KeypointSet::all_visible(vec![[cx as f64 * 4.0, cy as f64 * 4.0]]);
            let hm = encode_heatmaps(&kps, 2.0, 16, 16).unwrap();
            let t = hm.to_tensor();
            let soft = decode_softargmax(&t, 10.0).unwrap();
            let d = soft.data();
            assert!((d[0] - cx as f64).abs() < 0.1, "x {} vs {}", d[0], cx);
            assert!((d[1] - cy as f64).abs() < 0.1, "y {} vs {}", d[1], cy);
        }
    }

    #[test]
    fn softargmax_uniform_map_gives_centroid() {
        let t = Tensor::new(&[1, 4, 4], vec![0.25; 16]);
        let soft = decode_softargmax(&t, 10.0).unwrap();
        assert_eq!(soft.data(), vec![1.5, 1.5]);
    }

    #[test]
    fn softargmax_error_decreases_with_beta() {
        let kps = KeypointSet::all_visible(vec![[5.0 * 4.0, 9.0 * 4.0]]);
        let hm = encode_heatmaps(&kps, 2.0, 16, 16).unwrap();
        let t = hm.to_tensor();
        let mut errs = Vec::new();
        for beta in [1.0, 10.0, 100.0] {
            let d = decode_softargmax(&t, beta).unwrap().data();
            errs.push(((d[0] - 5.0).powi(2) + (d[1] - 9.0).powi(2)).sqrt());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "errors {errs:?}");
    }

    #[test]
    fn orientation_examples() {
        // single bone: (2,0)-(0,0) → (1,0); (1,1)-(0,0) → (0.7071, 0.7071)
        let skel = Skeleton::new(vec!["a".into(), "b".into()], vec![(0, 1)]).unwrap();
        let (v, d) = orientation_vectors(&[[2.0, 0.0], [0.0, 0.0]], &skel);
        assert_eq!(v[0], [1.0, 0.0]);
        assert!(!d[0]);
        let (v, _) = orientation_vectors(&[[1.0, 1.0], [0.0, 0.0]], &skel);
        assert!((v[0][0] - 0.70710678).abs() < 1e-8);
        assert!((v[0][1] - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn degenerate_bone_takes_parent_direction() {
        let skel = Skeleton::default16();
        let mut coords = vec![[32.0, 32.0]; 16];
        // give the torso chain real extent
        coords[3] = [32.0, 40.0]; // pelvis
        coords[2] = [32.0, 28.0]; // thorax
        coords[1] = [32.0, 24.0]; // neck
        coords[0] = [32.0, 20.0]; // head
        coords[4] = [26.0, 28.0]; // l_shoulder
        // l_elbow == l_shoulder → bone 4 degenerate, takes bone 3's direction
        coords[5] = coords[4];
        let (v, d) = orientation_vectors(&coords, &skel);
        assert!(d[4]);
        assert_eq!(v[4], v[3]);
        // pelvis→l_hip degenerate at the root → (0,-1)
        coords[10] = coords[3];
        let (v, d) = orientation_vectors(&coords, &skel);
        assert!(d[9]);
        assert_eq!(v[9], [0.0, -1.0]);
        // unit norms on non-degenerate bones
        for (i, vec) in v.iter().enumerate() {
            if !d[i] {
                let n = (vec[0] * vec[0] + vec[1] * vec[1]).sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_aug_is_bitexact() {
        let img: Vec<f64> = (0..64 * 64).map(|i| (i % 97) as f64 / 97.0).collect();
        let out = apply_aug_image(&img, 64, 64, &AffineAug::identity(), None).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn rotation_round_trip_recovers_interior() {
        use rand::Rng;
        // smooth random image: sum of a few gaussian bumps
        let mut rng = seeds::stream(21, "smooth", 0);
        let mut img = vec![0.0; 64 * 64];
        for _ in 0..6 {
            let cx = rng.gen_range(10.0..54.0);
            let cy = rng.gen_range(10.0..54.0);
            let amp = rng.gen_range(0.2..0.9);
            for y in 0..64 {
                for x in 0..64 {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    img[y * 64 + x] += amp * (-d2 / 50.0).exp();
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.min(1.0);
        }
        let aug = AffineAug::new(20.0, 1.0, (0.0, 0.0), 64).unwrap();
        let fwd = apply_aug_image(&img, 64, 64, &aug, None).unwrap();
        let back = invert_aug_image(&fwd, 64, 64, &aug).unwrap();
        let mut worst = 0.0f64;
        for y in 16..48 {
            for x in 16..48 {
                worst = worst.max((back[y * 64 + x] - img[y * 64 + x]).abs());
            }
        }
        assert!(worst < 0.05, "interior round-trip error {worst}");
    }

    #[test]
    fn patch_zeroes_centered_block() {
        let mut img = vec![1.0; 64 * 64];
        zero_patch(&mut img, 64, 64, [20.0, 30.0], 8);
        let mut zeros = 0;
        for y in 0..64 {
            for x in 0..64 {
                if img[y * 64 + x] == 0.0 {
                    zeros += 1;
                    assert!((16..24).contains(&x) && (26..34).contains(&y), "stray zero at {x},{y}");
                }
            }
        }
        assert_eq!(zeros, 64);
    }

    #[test]
    fn aug_constructor_validates_ranges() {
        assert!(AffineAug::new(31.0, 1.0, (0.0, 0.0), 64).is_err());
        assert!(AffineAug::new(0.0, 0.5, (0.0, 0.0), 64).is_err());
        assert!(AffineAug::new(0.0, 1.0, (10.0, 0.0), 64).is_err());
        assert!(AffineAug::new(-20.0, 1.1, (5.0, -5.0), 64).is_ok());
    }

    #[test]
    fn heatmap_warp_tracks_keypoint_transform() {
        use rand::Rng;
        // encoding a transformed keypoint ≈ warping the encoded heatmap
        let mut rng = seeds::stream(33, "warp-consistency", 0);
        let mut hits = 0;
        let mut tried = 0;
        for _ in 0..200 {
            let x = rng.gen_range(16.0..48.0);
            let y = rng.gen_range(16.0..48.0);
            let aug = AffineAug::sample(
                &AugRanges { max_rotation_deg: 25.0, scale: (0.85, 1.2), max_translation_frac: 0.05 },
                64,
                &mut rng,
            );
            let kps = KeypointSet::all_visible(vec![[x, y]]);
            let hm = encode_heatmaps(&kps, 2.0, 16, 16).unwrap();
            let warped = apply_aug_heatmaps(&hm, &aug, 64, 64).unwrap();
            let (dec, conf) = decode_argmax(&warped);
            let expect = transform_point(&aug.image_matrix(64, 64), [x, y]);
            if conf[0] < 0.2 {
                continue; // peak pushed off-frame
            }
            tried += 1;
            let d = ((dec.coords[0][0] - expect[0]).powi(2) + (dec.coords[0][1] - expect[1]).powi(2)).sqrt();
            if d <= 6.0 {
                hits += 1; // within ~1.5 heatmap cells
            }
        }
        assert!(tried > 150, "too many peaks lost: {tried}");
        assert!(hits as f64 >= 0.9 * tried as f64, "only {hits}/{tried} matched");
    }

    #[test]
    fn invert_after_apply_preserves_argmax() {
        use rand::Rng;
        let mut rng = seeds::stream(34, "invert-apply", 0);
        let mut ok = 0;
        let total = 300;
        for _ in 0..total {
            // keypoints at least 8 px from borders
            let x = rng.gen_range(2..14) as f64 * 4.0;
            let y = rng.gen_range(2..14) as f64 * 4.0;
            let aug = AffineAug::sample(
                &AugRanges { max_rotation_deg: 30.0, scale: (0.8, 1.25), max_translation_frac: 0.1 },
                64,
                &mut rng,
            );
            let kps = KeypointSet::all_visible(vec![[x, y]]);
            let hm = encode_heatmaps(&kps, 2.0, 16, 16).unwrap();
            let fwd = apply_aug_heatmaps(&hm, &aug, 64, 64).unwrap();
            let back = invert_aug_heatmaps(&fwd, &aug, 64, 64).unwrap();
            let (dec, _) = decode_argmax(&back);
            let dx = (dec.coords[0][0] - x).abs() / 4.0;
            let dy = (dec.coords[0][1] - y).abs() / 4.0;
            if dx <= 1.0 && dy <= 1.0 {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.95 * total as f64,
            "argmax preserved for {ok}/{total} aug/pose pairs"
        );
    }
}
