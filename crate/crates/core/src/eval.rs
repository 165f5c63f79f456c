//! PCK evaluation with per-group reporting.

use crate::error::{Error, Result};
use crate::geometry::{decode_argmax, HeatmapStack, KeypointSet};
use crate::nets::{image_batch, HeatmapNet};
use crate::synth::SplitFile;

/// Per-group accuracies (percent) in report column order, plus the average
/// over individual evaluated keypoints.
#[derive(Debug, Clone)]
pub struct PckReport {
    pub groups: Vec<(String, f64)>,
    pub average: f64,
    pub n_instances: usize,
    pub n_evaluated: usize,
}

impl PckReport {
    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.groups.iter().map(|(g, _)| g.clone()).collect();
        cols.push("Avg.".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.groups.iter().map(|(_, v)| format!("{v:.2}")).collect();
        cols.push(format!("{:.2}", self.average));
        cols.join(",")
    }

    pub fn table_row(&self, label: &str) -> String {
        let mut s = format!("{label:<16}");
        for (_, v) in &self.groups {
            s.push_str(&format!("{v:>8.2}"));
        }
        s.push_str(&format!("{:>8.2}", self.average));
        s
    }

    pub fn table_header(&self) -> String {
        let mut s = format!("{:<16}", "");
        for (g, _) in &self.groups {
            s.push_str(&format!("{g:>8}"));
        }
        s.push_str(&format!("{:>8}", "Avg."));
        s
    }
}

/// PCK@α: a keypoint is correct when its prediction lies within
/// α · max(bbox width, bbox height) of the ground truth, where the bbox spans
/// that instance's ground-truth keypoints. Keypoints invisible in the ground
/// truth are excluded from both numerator and denominator.
pub fn pck(
    pred: &[KeypointSet],
    gt: &[KeypointSet],
    gt_labeled: &[bool],
    alpha: f64,
    groups: &[(String, Vec<usize>)],
) -> Result<PckReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "pck: {} predictions vs {} ground-truth instances",
            pred.len(),
            gt.len()
        )));
    }
    if gt_labeled.iter().any(|&l| !l) {
        return Err(Error::invalid("pck: ground truth labels missing"));
    }
    let k = gt.first().map(|g| g.k()).unwrap_or(0);
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (p, g) in pred.iter().zip(gt) {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in &g.coords {
            min_x = min_x.min(c[0]);
            max_x = max_x.max(c[0]);
            min_y = min_y.min(c[1]);
            max_y = max_y.max(c[1]);
        }
        let norm = (max_x - min_x).max(max_y - min_y);
        let thresh = alpha * norm;
        for i in 0..k {
            if !g.visible[i] {
                continue;
            }
            total[i] += 1;
            let d = ((p.coords[i][0] - g.coords[i][0]).powi(2)
                + (p.coords[i][1] - g.coords[i][1]).powi(2))
            .sqrt();
            if d <= thresh {
                correct[i] += 1;
            }
        }
    }
    let mut out_groups = Vec::with_capacity(groups.len());
    for (name, members) in groups {
        let c: usize = members.iter().map(|&i| correct[i]).sum();
        let t: usize = members.iter().map(|&i| total[i]).sum();
        let acc = if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 };
        out_groups.push((name.clone(), acc));
    }
    let c: usize = correct.iter().sum();
    let t: usize = total.iter().sum();
    Ok(PckReport {
        groups: out_groups,
        average: if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 },
        n_instances: gt.len(),
        n_evaluated: t,
    })
}

/// Forward a labeled split through the network in chunks, decode with hard
/// argmax, and score PCK.
pub fn evaluate_net(
    net: &HeatmapNet,
    split: &SplitFile,
    alpha: f64,
    groups: &[(String, Vec<usize>)],
) -> Result<PckReport> {
    if !split.labeled() {
        return Err(Error::invalid("evaluate: split has no labels"));
    }
    let hm = crate::synth::IMAGE_SIZE / crate::geometry::HEATMAP_STRIDE;
    let mut preds = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(64) {
        let end = (start + 64).min(split.len());
        let imgs: Vec<&[f64]> = (start..end).map(|i| split.images[i].as_slice()).collect();
        let out = net.forward(&image_batch(&imgs, split.h, split.w))?;
        let data = out.data();
        let plane = split.k * hm * hm;
        for j in 0..(end - start) {
            let stack = HeatmapStack::from_tensor_slice(split.k, hm, hm, &data[j * plane..(j + 1) * plane]);
            let (kps, _) = decode_argmax(&stack);
            preds.push(kps);
        }
    }
    pck(&preds, &split.keypoints, &split.has_labels, alpha, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::seeds;
    use rand::Rng;

    fn default_groups() -> Vec<(String, Vec<usize>)> {
        RunConfig::default().group_indices().unwrap()
    }

    fn random_pose(seed: u64) -> KeypointSet {
        let mut rng = seeds::stream(seed, "pck-pose", 0);
        KeypointSet::all_visible(
            (0..16)
                .map(|_| [rng.gen_range(8.0..56.0), rng.gen_range(8.0..56.0)])
                .collect(),
        )
    }

    #[test]
    fn perfect_predictions_score_100() {
        let gt: Vec<KeypointSet> = (0..5).map(random_pose).collect();
        let r = pck(&gt.clone(), &gt, &[true; 5], 0.05, &default_groups()).unwrap();
        assert_eq!(r.average, 100.0);
        for (_, v) in &r.groups {
            assert_eq!(*v, 100.0);
        }
    }

    #[test]
    fn half_correct_counts_50() {
        // 4 keypoints, 2 within threshold → 50%
        let gt = vec![KeypointSet::all_visible(vec![
            [10.0, 10.0],
            [50.0, 10.0],
            [10.0, 50.0],
            [50.0, 50.0],
        ])];
        // bbox side 40 → threshold 2 at α = 0.05
        let pred = vec![KeypointSet::all_visible(vec![
            [10.5, 10.0],
            [50.0, 10.5],
            [20.0, 50.0],
            [40.0, 50.0],
        ])];
        let groups = vec![("All".to_string(), vec![0, 1, 2, 3])];
        let r = pck(&pred, &gt, &[true], 0.05, &groups).unwrap();
        assert_eq!(r.average, 50.0);
    }

    #[test]
    fn shrinking_alpha_never_raises_accuracy() {
        let mut rng = seeds::stream(3, "pck-mono", 0);
        let gt: Vec<KeypointSet> = (0..20).map(|i| random_pose(i as u64)).collect();
        let pred: Vec<KeypointSet> = gt
            .iter()
            .map(|g| {
                KeypointSet::all_visible(
                    g.coords
                        .iter()
                        .map(|c| {
                            [c[0] + rng.gen_range(-3.0..3.0), c[1] + rng.gen_range(-3.0..3.0)]
                        })
                        .collect(),
                )
            })
            .collect();
        let groups = default_groups();
        let wide = pck(&pred, &gt, &[true; 20], 0.05, &groups).unwrap();
        let narrow = pck(&pred, &gt, &[true; 20], 0.025, &groups).unwrap();
        assert!(narrow.average <= wide.average);
        for ((_, w), (_, n)) in wide.groups.iter().zip(&narrow.groups) {
            assert!(n <= w);
        }
    }

    #[test]
    fn invisible_keypoints_excluded() {
        let mut gt_pose = random_pose(9);
        gt_pose.visible[0] = false;
        let mut pred = gt_pose.clone();
        pred.coords[0] = [0.0, 0.0]; // wildly wrong but invisible in GT
        let r = pck(&[pred], &[gt_pose], &[true], 0.05, &default_groups()).unwrap();
        assert_eq!(r.average, 100.0);
        assert_eq!(r.n_evaluated, 15);
    }

    #[test]
    fn missing_labels_error() {
        let gt = vec![random_pose(1)];
        assert!(pck(&gt.clone(), &gt, &[false], 0.05, &default_groups()).is_err());
    }

    #[test]
    fn joint_translation_and_scaling_invariance() {
        let mut rng = seeds::stream(4, "pck-inv", 0);
        let gt: Vec<KeypointSet> = (0..10).map(|i| random_pose(100 + i as u64)).collect();
        let pred: Vec<KeypointSet> = gt
            .iter()
            .map(|g| {
                KeypointSet::all_visible(
                    g.coords
                        .iter()
                        .map(|c| [c[0] + rng.gen_range(-2.0..2.0), c[1] + rng.gen_range(-2.0..2.0)])
                        .collect(),
                )
            })
            .collect();
        let groups = default_groups();
        let base = pck(&pred, &gt, &[true; 10], 0.05, &groups).unwrap();
        let shift = |kps: &KeypointSet, dx: f64, s: f64| {
            KeypointSet::all_visible(kps.coords.iter().map(|c| [s * (c[0] + dx), s * c[1]]).collect())
        };
        let gt2: Vec<KeypointSet> = gt.iter().map(|g| shift(g, 17.0, 3.0)).collect();
        let pred2: Vec<KeypointSet> = pred.iter().map(|p| shift(p, 17.0, 3.0)).collect();
        let moved = pck(&pred2, &gt2, &[true; 10], 0.05, &groups).unwrap();
        assert_eq!(base.average, moved.average);
    }

    #[test]
    fn group_accounting_reproduces_average() {
        let mut rng = seeds::stream(5, "pck-groups", 0);
        let gt: Vec<KeypointSet> = (0..30).map(|i| random_pose(200 + i as u64)).collect();
        let pred: Vec<KeypointSet> = gt
            .iter()
            .map(|g| {
                KeypointSet::all_visible(
                    g.coords
                        .iter()
                        .map(|c| [c[0] + rng.gen_range(-4.0..4.0), c[1] + rng.gen_range(-4.0..4.0)])
                        .collect(),
                )
            })
            .collect();
        let groups = default_groups();
        let r = pck(&pred, &gt, &[true; 30], 0.05, &groups).unwrap();
        // weight group accuracies by member count → overall average
        let cfg = RunConfig::default();
        let gidx = cfg.group_indices().unwrap();
        let mut weighted = 0.0;
        let mut weight = 0.0;
        for ((_, acc), (_, members)) in r.groups.iter().zip(&gidx) {
            weighted += acc * members.len() as f64;
            weight += members.len() as f64;
        }
        assert!((weighted / weight - r.average).abs() < 1e-9);
    }
}
