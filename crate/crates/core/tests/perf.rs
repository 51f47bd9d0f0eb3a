//! Kernel throughput probe, ignored by default.
//! Run with: cargo test -p binlm-core --release --test perf -- --ignored --nocapture

use binlm_core::rng::Rng;
use binlm_core::tensor::kernels;
use std::time::Instant;

#[test]
#[ignore]
fn gemm_throughput() {
    let mut rng = Rng::seed_from_u64(1);
    for &(r, k, n) in &[(256usize, 128usize, 352usize), (256, 352, 128), (256, 128, 259), (2048, 128, 259)] {
        let a = rng.normal_vec(r * k, 1.0);
        let b = rng.normal_vec(k * n, 1.0);
        let mut out = vec![0.0f32; r * n];
        let reps = (2e9 / (2.0 * (r * k * n) as f64)).max(1.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            kernels::add_matmul_nn(&mut out, &a, &b, r, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gf = 2.0 * (r * k * n) as f64 * reps as f64 / dt / 1e9;
        println!("nn  {r}x{k}x{n}: {gf:.2} GF/s");

        let bt: Vec<f32> = {
            let mut t = vec![0.0f32; n * k];
            for i in 0..k {
                for j in 0..n {
                    t[j * k + i] = b[i * n + j];
                }
            }
            t
        };
        let t0 = Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            kernels::add_matmul_nt(&mut out, &a, &bt, r, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gf = 2.0 * (r * k * n) as f64 * reps as f64 / dt / 1e9;
        println!("nt  {r}x{k}x{n}: {gf:.2} GF/s");

        let c = rng.normal_vec(r * n, 1.0);
        let mut w = vec![0.0f32; k * n];
        let t0 = Instant::now();
        for _ in 0..reps {
            kernels::add_matmul_tn(&mut w, &a, &c, r, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gf = 2.0 * (r * k * n) as f64 * reps as f64 / dt / 1e9;
        println!("tn  {r}x{k}x{n}: {gf:.2} GF/s");
    }
}
