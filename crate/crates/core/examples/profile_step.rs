use poseadapt::nets::{image_batch, HeatmapNet};
use poseadapt::tensor::kernels::{self, ConvShape};
use poseadapt::tensor::Tensor;
use std::time::Instant;

fn time_it(name: &str, mut f: impl FnMut()) {
    f();
    let t = Instant::now();
    let n = 20;
    for _ in 0..n {
        f();
    }
    println!("{name}: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}

fn main() {
    // e2 shape: 16->32 @ 32x32 batch 32
    let s = ConvShape { batch: 32, cin: 16, cout: 32, h: 32, w: 32, kh: 3, kw: 3, pad: 1 };
    let inp = vec![0.3; 32 * 16 * 1024];
    let w = vec![0.1; 32 * 16 * 9];
    let mut out = vec![0.0; 32 * 32 * 1024];
    time_it("e2 fwd        ", || kernels::conv2d_forward(&inp, &w, None, &mut out, s));
    let dout = vec![0.5; 32 * 32 * 1024];
    let mut din = vec![0.0; 32 * 16 * 1024];
    time_it("e2 bwd input  ", || kernels::conv2d_backward_input(&dout, &w, &mut din, s));
    let mut dw = vec![0.0; 32 * 16 * 9];
    time_it("e2 bwd weight ", || kernels::conv2d_backward_weight(&inp, &dout, &mut dw, None, s));

    // e3 shape: 32->64 @ 16x16
    let s3 = ConvShape { batch: 32, cin: 32, cout: 64, h: 16, w: 16, kh: 3, kw: 3, pad: 1 };
    let inp3 = vec![0.3; 32 * 32 * 256];
    let w3 = vec![0.1; 64 * 32 * 9];
    let mut out3 = vec![0.0; 32 * 64 * 256];
    time_it("e3 fwd        ", || kernels::conv2d_forward(&inp3, &w3, None, &mut out3, s3));
    let dout3 = vec![0.5; 32 * 64 * 256];
    let mut din3 = vec![0.0; 32 * 32 * 256];
    time_it("e3 bwd input  ", || kernels::conv2d_backward_input(&dout3, &w3, &mut din3, s3));
    let mut dw3 = vec![0.0; 64 * 32 * 9];
    time_it("e3 bwd weight ", || kernels::conv2d_backward_weight(&inp3, &dout3, &mut dw3, None, s3));

    // whole-net fwd and bwd split
    let net = HeatmapNet::init(16, 1);
    let imgs: Vec<Vec<f64>> = (0..32).map(|i| (0..4096).map(|j| ((i * j) % 97) as f64 / 97.0).collect()).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let x = image_batch(&refs, 64, 64);
    let target = Tensor::zeros(&[32, 16, 16, 16]);
    time_it("net fwd       ", || {
        let y = net.forward(&x).unwrap();
        std::hint::black_box(y.with_data(|d| d[0]));
    });
    time_it("net fwd+bwd   ", || {
        net.params.zero_grads();
        let y = net.forward(&x).unwrap();
        y.mse_loss(&target).unwrap().backward().unwrap();
    });
}
