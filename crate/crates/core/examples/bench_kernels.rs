use std::time::Instant;

use sganlab::kernels::{conv2d_fwd, gemm_nn, ConvGeom};
use sganlab::rng::RngStream;
use sganlab::Tensor;

fn main() {
    let mut rng = RngStream::new(1, 1);
    // GEMM: batch fc3 layer, 64x3136 * 3136x256
    let a: Tensor<f32> = rng.normal_tensor(&[64, 3136]);
    let b: Tensor<f32> = rng.normal_tensor(&[3136, 256]);
    let mut c = vec![0.0f32; 64 * 256];
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        gemm_nn(64, 3136, 256, a.data(), b.data(), &mut c);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * 64.0 * 3136.0 * 256.0;
    println!(
        "gemm_nn 64x3136x256: {:.1} ms, {:.2} GFLOP/s",
        dt * 1e3,
        flops / dt / 1e9
    );

    // Conv: encoder conv2 on 28x28 MNIST batch 64: 32->64 ch, k5 p2 on 14x14
    let x: Tensor<f32> = rng.normal_tensor(&[64, 32, 14, 14]);
    let k: Tensor<f32> = rng.normal_tensor(&[64, 32, 5, 5]);
    let bias: Tensor<f32> = rng.normal_tensor(&[64]);
    let g = ConvGeom {
        channels: 32,
        height: 14,
        width: 14,
        kernel: 5,
        stride: 1,
        pad: 2,
    };
    let mut out = vec![0.0f32; 64 * 64 * 14 * 14];
    let t0 = Instant::now();
    for _ in 0..reps {
        conv2d_fwd(64, x.data(), k.data(), Some(bias.data()), 64, &g, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * 64.0 * 64.0 * 196.0 * 800.0;
    println!(
        "conv2 64b 32->64 14x14 k5: {:.1} ms, {:.2} GFLOP/s",
        dt * 1e3,
        flops / dt / 1e9
    );
}
