//! Built-in domain specs: adult source, infant target, and a held-out infant
//! template family used only for prior training.
//!
//! Angles are radians in image coordinates (x right, y down, 0 = +x). A
//! template stores per-bone angles *relative to the parent bone* (root bones
//! relative to the body orientation) in skeleton bone order:
//!   0 torso  1 neck  2 head
//!   3 l-shoulder 4 l-upper-arm 5 l-forearm
//!   6 r-shoulder 7 r-upper-arm 8 r-forearm
//!   9 l-hip 10 l-thigh 11 l-shin
//!  12 r-hip 13 r-thigh 14 r-shin

use super::{BackgroundSpec, DomainSpec, PoseTemplate};
use std::f64::consts::PI;

const UP: f64 = -PI / 2.0;

/// Anatomical joint limits shared by every template: elbows and knees bend
/// one way only (mirrored left/right), shoulder and hip offsets are nearly
/// rigid, the spine flexes mildly.
fn joint_limits() -> Vec<(f64, f64)> {
    vec![
        (-0.35, 0.35), // torso vs body orientation
        (-0.40, 0.40), // neck
        (-0.50, 0.50), // head
        (0.70, 1.40),  // l shoulder offset
        (-1.20, 3.60), // l shoulder joint
        (0.00, 2.50),  // l elbow: one way
        (-1.40, -0.70),
        (-3.60, 1.20),
        (-2.50, 0.00), // r elbow: one way
        (2.10, 2.80),  // l hip offset
        (-0.90, 2.30), // l hip joint
        (-0.05, 2.30), // l knee: one way
        (-2.80, -2.10),
        (-2.30, 0.90),
        (-2.30, 0.05), // r knee: one way
    ]
}

fn template(
    name: &str,
    rel_angle: [f64; 15],
    std: f64,
    orientation: (f64, f64),
    crossing: bool,
    weight: f64,
) -> PoseTemplate {
    PoseTemplate {
        name: name.to_string(),
        rel_angle: rel_angle.to_vec(),
        angle_std: vec![std; 15],
        limits: joint_limits(),
        orientation,
        crossing,
        weight,
    }
}

/// Upright source domain: long limbs, small head, bright limbs on a dark
/// clean background, low pose variance.
pub fn adult_spec() -> DomainSpec {
    let standing = [
        0.0, 0.0, 0.0, //
        1.02, 1.97, 0.10, //
        -1.02, -1.97, -0.10, //
        2.47, 0.65, 0.02, //
        -2.47, -0.65, -0.02,
    ];
    let walk = [
        0.0, 0.0, 0.0, //
        1.02, 1.50, 0.35, //
        -1.02, -2.40, -0.30, //
        2.47, 0.30, 0.25, //
        -2.47, -1.00, -0.60,
    ];
    let wave = [
        0.0, 0.0, 0.0, //
        1.02, -0.45, 0.80, //
        -1.02, -1.97, -0.10, //
        2.47, 0.65, 0.02, //
        -2.47, -0.65, -0.02,
    ];
    let tpose = [
        0.0, 0.0, 0.0, //
        1.02, 0.45, 0.10, //
        -1.02, -0.45, -0.10, //
        2.47, 0.65, 0.02, //
        -2.47, -0.65, -0.02,
    ];
    DomainSpec {
        name: "adult".into(),
        limb_length_ratios: vec![
            0.30, 0.07, 0.09, // torso, neck, head
            0.10, 0.16, 0.14, // left arm
            0.10, 0.16, 0.14, // right arm
            0.06, 0.23, 0.21, // left leg
            0.06, 0.23, 0.21, // right leg
        ],
        head_radius_ratio: 0.25,
        limb_thickness: 3.0,
        body_height: 46.0,
        pose_templates: vec![
            template("standing", standing, 0.08, (UP - 0.12, UP + 0.12), false, 0.35),
            template("walk", walk, 0.12, (UP - 0.12, UP + 0.12), false, 0.30),
            template("wave", wave, 0.15, (UP - 0.12, UP + 0.12), false, 0.20),
            template("tpose", tpose, 0.12, (UP - 0.12, UP + 0.12), false, 0.15),
        ],
        limb_intensity: (0.80, 1.00),
        background: BackgroundSpec { intensity: (0.02, 0.15), noise_std: 0.02, blanket_patches: 0 },
        occlusion_rate: 0.0,
    }
}

/// Supine / prone / crawling target domain: short limbs, double-size head,
/// dimmer limbs over blanket-like background patches, high pose variance,
/// and 30% limb-crossing templates.
pub fn infant_spec() -> DomainSpec {
    let supine_sprawl = [
        0.0, 0.0, 0.0, //
        1.02, 2.60, 0.80, //
        -1.02, -2.60, -0.80, //
        2.47, 1.20, 1.00, //
        -2.47, -1.20, -1.00,
    ];
    let curl = [
        0.25, 0.40, 0.40, //
        1.02, 2.80, 1.80, //
        -1.02, -2.80, -1.80, //
        2.47, 1.80, 1.90, //
        -2.47, -1.80, -1.90,
    ];
    let crawl = [
        0.0, 0.0, 0.0, //
        1.02, 0.60, 0.10, //
        -1.02, -0.60, -0.10, //
        2.47, 0.90, 2.00, //
        -2.47, -0.90, -2.00,
    ];
    let prone_arm_cross = [
        0.0, 0.0, 0.0, //
        1.02, 2.86, 0.50, //
        -1.02, -2.86, -0.50, //
        2.47, 0.90, 0.40, //
        -2.47, -0.90, -0.40,
    ];
    let side_leg_cross = [
        0.0, 0.0, 0.0, //
        1.02, 0.40, 0.40, //
        -1.02, -0.40, -0.40, //
        2.47, -0.85, 1.40, //
        -2.47, 0.85, -1.40,
    ];
    DomainSpec {
        name: "infant".into(),
        limb_length_ratios: vec![
            0.26, 0.07, 0.11, //
            0.10, 0.14, 0.12, //
            0.10, 0.14, 0.12, //
            0.07, 0.17, 0.15, //
            0.07, 0.17, 0.15,
        ],
        head_radius_ratio: 0.50,
        limb_thickness: 3.5,
        body_height: 42.0,
        pose_templates: vec![
            template("supine_sprawl", supine_sprawl, 0.38, (-0.4, 0.4), false, 0.45),
            template("curl", curl, 0.30, (-3.1, 3.1), false, 0.35),
            template("crawl", crawl, 0.25, (-0.25, 0.25), false, 0.20),
            template("prone_arm_cross", prone_arm_cross, 0.30, (-0.3, 0.3), true, 0.5),
            template("side_leg_cross", side_leg_cross, 0.35, (PI - 0.3, PI + 0.3), true, 0.5),
        ],
        limb_intensity: (0.40, 0.70),
        background: BackgroundSpec { intensity: (0.05, 0.20), noise_std: 0.03, blanket_patches: 3 },
        occlusion_rate: 0.30,
    }
}

/// Held-out infant template family for cross-dataset prior training: same
/// anatomy and appearance as [`infant_spec`], disjoint pose templates.
pub fn infant_prior_spec() -> DomainSpec {
    let sit_prop = [
        0.0, 0.1, 0.1, //
        1.02, 1.30, 0.30, //
        -1.02, -1.30, -0.30, //
        2.47, 0.40, 0.50, //
        -2.47, -0.40, -0.50,
    ];
    let reach = [
        0.0, 0.0, 0.0, //
        1.02, -0.80, 0.40, //
        -1.02, -1.50, -0.40, //
        2.47, 0.80, 0.60, //
        -2.47, -0.80, -0.60,
    ];
    let roll = [
        0.20, 0.20, 0.20, //
        1.02, 1.90, 2.20, //
        -1.02, -1.90, -2.20, //
        2.47, 1.30, 1.60, //
        -2.47, -1.30, -1.60,
    ];
    let kick = [
        0.0, 0.0, 0.0, //
        1.02, 1.60, 0.50, //
        -1.02, -1.60, -0.50, //
        2.47, 1.90, 0.30, //
        -2.47, -0.50, -1.60,
    ];
    let mut spec = infant_spec();
    spec.name = "infant_prior".into();
    spec.pose_templates = vec![
        template("sit_prop", sit_prop, 0.30, (-2.0, -1.2), false, 0.3),
        template("reach", reach, 0.30, (-0.6, 0.6), false, 0.25),
        template("roll", roll, 0.35, (-3.1, 3.1), false, 0.25),
        template("kick", kick, 0.30, (-0.4, 0.4), false, 0.2),
    ];
    spec.occlusion_rate = 0.0;
    spec
}
