//! Network definitions: the heatmap estimator (student/teacher) and the
//! keypoint→silhouette decoder, plus checkpoint persistence.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainerState};

use crate::seeds;
use crate::tensor::{ParameterStore, Tensor, TensorResult};
use rand::Rng;

/// He-uniform init: U(−√(6/fan_in), √(6/fan_in)), zero biases.
fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, data)
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()])
}

// ── heatmap estimator ───────────────────────────────────────────────────────

/// Small convolutional heatmap network: 4 encoder blocks
/// (3×3 conv → leaky_relu(0.2) → 2× average-pool downsample) at widths
/// 16/32/64/64, a 2-block nearest-upsample decoder, and a 1×1 head to K maps
/// with no output activation. 64×64×1 in, K×16×16 out.
pub struct HeatmapNet {
    pub params: ParameterStore,
    pub k: usize,
}

const DEC1_W: usize = 64;
const DEC2_W: usize = 32;

impl HeatmapNet {
    pub fn init(k: usize, seed: u64) -> HeatmapNet {
        let mut rng = seeds::stream(seed, "init/heatmap", 0);
        let mut p = ParameterStore::new();
        let widths = [16usize, 32, 64, 64];
        let mut cin = 1;
        for (i, &cout) in widths.iter().enumerate() {
            p.insert(&format!("enc{i}.w"), he_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng)).unwrap();
            p.insert(&format!("enc{i}.b"), zeros_param(&[cout])).unwrap();
            cin = cout;
        }
        p.insert("dec0.w", he_uniform(&[DEC1_W, 64, 3, 3], 64 * 9, &mut rng)).unwrap();
        p.insert("dec0.b", zeros_param(&[DEC1_W])).unwrap();
        p.insert("dec1.w", he_uniform(&[DEC2_W, DEC1_W, 3, 3], DEC1_W * 9, &mut rng)).unwrap();
        p.insert("dec1.b", zeros_param(&[DEC2_W])).unwrap();
        p.insert("head.w", he_uniform(&[k, DEC2_W, 1, 1], DEC2_W, &mut rng)).unwrap();
        p.insert("head.b", zeros_param(&[k])).unwrap();
        HeatmapNet { params: p, k }
    }

    /// Read-only copy (teacher); parameters receive no gradients.
    pub fn frozen_copy(&self) -> HeatmapNet {
        HeatmapNet { params: self.params.clone_values(false), k: self.k }
    }

    /// Trainable copy with fresh tensors.
    pub fn trainable_copy(&self) -> HeatmapNet {
        HeatmapNet { params: self.params.clone_values(true), k: self.k }
    }

    /// [b,1,64,64] → [b,k,16,16].
    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        let p = &self.params;
        let mut h = x.clone();
        for i in 0..4 {
            h = h
                .conv2d(p.get(&format!("enc{i}.w")), Some(p.get(&format!("enc{i}.b"))), 1)?
                .leaky_relu(0.2)?
                .avg_pool2()?;
        }
        let h = h
            .nearest_upsample2()?
            .conv2d(p.get("dec0.w"), Some(p.get("dec0.b")), 1)?
            .relu()?;
        let h = h
            .nearest_upsample2()?
            .conv2d(p.get("dec1.w"), Some(p.get("dec1.b")), 1)?
            .relu()?;
        h.conv2d(p.get("head.w"), Some(p.get("head.b")), 0)
    }
}

// ── keypoint → silhouette decoder ───────────────────────────────────────────

/// Maps K heatmaps to a body silhouette: the flattened K×16×16 input goes
/// through a linear layer to 4×4×64, then five 3×3 conv blocks (nearest
/// upsample ×2 before the first four) down to 1×64×64 logits and a sigmoid.
pub struct MaskDecoder {
    pub params: ParameterStore,
    pub k: usize,
}

const G_WIDTHS: [usize; 5] = [32, 16, 8, 8, 1];

impl MaskDecoder {
    pub fn init(k: usize, seed: u64) -> MaskDecoder {
        let mut rng = seeds::stream(seed, "init/kp2seg", 0);
        let mut p = ParameterStore::new();
        let in_dim = k * 16 * 16;
        p.insert("proj.w", he_uniform(&[in_dim, 4 * 4 * 64], in_dim, &mut rng)).unwrap();
        p.insert("proj.b", zeros_param(&[4 * 4 * 64])).unwrap();
        let mut cin = 64;
        for (i, &cout) in G_WIDTHS.iter().enumerate() {
            p.insert(&format!("up{i}.w"), he_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng)).unwrap();
            p.insert(&format!("up{i}.b"), zeros_param(&[cout])).unwrap();
            cin = cout;
        }
        MaskDecoder { params: p, k }
    }

    pub fn frozen_copy(&self) -> MaskDecoder {
        MaskDecoder { params: self.params.clone_values(false), k: self.k }
    }

    /// [b,k,16,16] → [b,1,64,64] probabilities in (0,1).
    pub fn forward(&self, heatmaps: &Tensor) -> TensorResult<Tensor> {
        let p = &self.params;
        let b = heatmaps.shape()[0];
        let mut h = heatmaps
            .reshape(&[b, self.k * 16 * 16])?
            .matmul(p.get("proj.w"))?
            .bias_add(p.get("proj.b"), 1)?
            .reshape(&[b, 64, 4, 4])?;
        for i in 0..4 {
            h = h
                .nearest_upsample2()?
                .conv2d(p.get(&format!("up{i}.w")), Some(p.get(&format!("up{i}.b"))), 1)?
                .leaky_relu(0.2)?;
        }
        h.conv2d(p.get("up4.w"), Some(p.get("up4.b")), 1)?.sigmoid()
    }
}

/// Stack images (row-major [h*w] slices) into a [b,1,h,w] input tensor.
pub fn image_batch(images: &[&[f64]], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.len(), h * w);
        data.extend_from_slice(img);
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Stack binary masks into a [b,1,h,w] target tensor.
pub fn mask_batch(masks: &[&[u8]], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        assert_eq!(m.len(), h * w);
        data.extend(m.iter().map(|&v| v as f64));
    }
    Tensor::new(&[masks.len(), 1, h, w], data)
}
