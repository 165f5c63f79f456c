//! Finite-difference gradient checks for every tensor primitive:
//! 100 randomized trials per op at relative tolerance 1e-4 (ε = 1e-5).

use poseadapt::tensor::gradcheck::{check_grad, uniform, uniform_away_from_zero};
use poseadapt::tensor::{Tensor, TensorResult};

const TRIALS: usize = 100;
const PROBES: usize = 6;
const TOL: f64 = 1e-4;

fn run(
    name: &str,
    shapes: &[&[usize]],
    sample: &mut dyn FnMut(usize, usize, &mut rand_chacha::ChaCha8Rng) -> f64,
    apply: &dyn Fn(&[Tensor]) -> TensorResult<Tensor>,
) {
    let res = check_grad(name, shapes, sample, apply, TRIALS, PROBES, TOL, 0xC0FFEE);
    if let Err(msg) = res {
        panic!("{msg}");
    }
}

#[test]
fn grad_add() {
    run("add", &[&[3, 4], &[3, 4]], &mut uniform(-2.0, 2.0), &|t| t[0].add(&t[1]));
}

#[test]
fn grad_add_scalar_broadcast() {
    run("add_scalar", &[&[3, 4], &[1]], &mut uniform(-2.0, 2.0), &|t| t[0].add(&t[1]));
}

#[test]
fn grad_sub() {
    run("sub", &[&[5], &[5]], &mut uniform(-2.0, 2.0), &|t| t[0].sub(&t[1]));
}

#[test]
fn grad_mul() {
    run("mul", &[&[2, 6], &[2, 6]], &mut uniform(-2.0, 2.0), &|t| t[0].mul(&t[1]));
}

#[test]
fn grad_scale() {
    run("scale", &[&[7]], &mut uniform(-2.0, 2.0), &|t| t[0].scale(-1.7));
}

#[test]
fn grad_bias_add() {
    run("bias_add", &[&[2, 3, 4], &[3]], &mut uniform(-2.0, 2.0), &|t| {
        t[0].bias_add(&t[1], 1)
    });
}

#[test]
fn grad_matmul() {
    run("matmul", &[&[4, 5], &[5, 3]], &mut uniform(-1.0, 1.0), &|t| t[0].matmul(&t[1]));
}

#[test]
fn grad_conv2d() {
    run(
        "conv2d",
        &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        &mut uniform(-1.0, 1.0),
        &|t| t[0].conv2d(&t[1], Some(&t[2]), 1),
    );
}

#[test]
fn grad_conv2d_1x1_no_pad() {
    run(
        "conv2d_1x1",
        &[&[1, 3, 4, 4], &[2, 3, 1, 1]],
        &mut uniform(-1.0, 1.0),
        &|t| t[0].conv2d(&t[1], None, 0),
    );
}

#[test]
fn grad_nearest_upsample2() {
    run("nearest_upsample2", &[&[2, 3, 3]], &mut uniform(-1.0, 1.0), &|t| {
        t[0].nearest_upsample2()
    });
}

#[test]
fn grad_avg_pool2() {
    run("avg_pool2", &[&[2, 4, 4]], &mut uniform(-1.0, 1.0), &|t| t[0].avg_pool2());
}

#[test]
fn grad_relu() {
    run("relu", &[&[10]], &mut uniform_away_from_zero(-2.0, 2.0, 1e-2), &|t| t[0].relu());
}

#[test]
fn grad_leaky_relu() {
    run("leaky_relu", &[&[10]], &mut uniform_away_from_zero(-2.0, 2.0, 1e-2), &|t| {
        t[0].leaky_relu(0.2)
    });
}

#[test]
fn grad_sigmoid() {
    run("sigmoid", &[&[10]], &mut uniform(-4.0, 4.0), &|t| t[0].sigmoid());
}

#[test]
fn grad_softplus() {
    run("softplus", &[&[10]], &mut uniform(-4.0, 4.0), &|t| t[0].softplus());
}

#[test]
fn grad_spatial_softmax() {
    run("spatial_softmax", &[&[2, 4, 4]], &mut uniform(-1.0, 1.0), &|t| {
        t[0].spatial_softmax(3.0)
    });
}

#[test]
fn grad_l2_normalize() {
    // keep norms well away from the 1e-12 floor
    run("l2_normalize", &[&[4, 2]], &mut uniform_away_from_zero(-2.0, 2.0, 0.05), &|t| {
        t[0].l2_normalize(1)
    });
}

#[test]
fn grad_concat() {
    run("concat", &[&[2, 2], &[2, 3]], &mut uniform(-1.0, 1.0), &|t| {
        Tensor::concat(&[t[0].clone(), t[1].clone()], 1)
    });
}

#[test]
fn grad_reshape() {
    run("reshape", &[&[2, 6]], &mut uniform(-1.0, 1.0), &|t| t[0].reshape(&[3, 4]));
}

#[test]
fn grad_select() {
    run("select", &[&[3, 4, 2]], &mut uniform(-1.0, 1.0), &|t| t[0].select(1, 2));
}

#[test]
fn grad_mul_map() {
    let map: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect();
    run("mul_map", &[&[2, 3, 4]], &mut uniform(-1.0, 1.0), &|t| t[0].mul_map(&map));
}

#[test]
fn grad_sum() {
    run("sum", &[&[9]], &mut uniform(-1.0, 1.0), &|t| t[0].sum());
}

#[test]
fn grad_mean() {
    run("mean", &[&[9]], &mut uniform(-1.0, 1.0), &|t| t[0].mean());
}

#[test]
fn grad_sum_spatial() {
    run("sum_spatial", &[&[3, 2, 4]], &mut uniform(-1.0, 1.0), &|t| t[0].sum_spatial());
}

#[test]
fn grad_mse_loss() {
    run("mse_loss", &[&[8], &[8]], &mut uniform(-1.0, 1.0), &|t| t[0].mse_loss(&t[1]));
}

#[test]
fn grad_bce_loss() {
    // probabilities inside the clip region, binary-ish targets
    let mut sample = |input: usize, _: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        if input == 0 {
            rng.gen_range(0.05..0.95)
        } else if rng.gen_bool(0.5) {
            1.0
        } else {
            0.0
        }
    };
    run("bce_loss", &[&[12], &[12]], &mut sample, &|t| t[0].bce_loss(&t[1]));
}

#[test]
fn grad_affine_warp() {
    // mild rotation+shift; grads flow through the bilinear taps
    let mats = vec![
        [0.98, -0.05, 0.4, 0.05, 0.98, -0.3],
        [1.02, 0.08, -0.5, -0.08, 1.02, 0.7],
    ];
    run("affine_warp", &[&[2, 2, 6, 6]], &mut uniform(-1.0, 1.0), &|t| {
        t[0].affine_warp(&mats)
    });
}

#[test]
fn grad_composite_small_net() {
    // conv → leaky → pool → conv → relu → upsample → mse against a constant:
    // exercises chained backward through every structural op family.
    let target = Tensor::new(&[1, 2, 4, 4], (0..32).map(|i| (i as f64) * 0.03).collect());
    run(
        "composite",
        &[&[1, 1, 4, 4], &[2, 1, 3, 3], &[2], &[2, 2, 3, 3]],
        &mut uniform(-0.8, 0.8),
        &|t| {
            let h = t[0].conv2d(&t[1], Some(&t[2]), 1)?.leaky_relu(0.2)?;
            let p = h.avg_pool2()?;
            let h2 = p.conv2d(&t[3], None, 1)?.softplus()?;
            let u = h2.nearest_upsample2()?;
            u.mse_loss(&target)
        },
    );
}
