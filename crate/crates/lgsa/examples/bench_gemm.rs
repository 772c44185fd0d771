use lgsa::Tensor;
use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(1024usize, 64usize, 1024usize), (256, 288, 1024), (128, 1152, 256)] {
        let a = Tensor::from_vec(&[m, k], (0..m * k).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
        let b = Tensor::from_vec(&[k, n], (0..k * n).map(|i| (i % 5) as f64 * 0.2).collect()).unwrap();
        let t0 = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let c = a.matmul(&b).unwrap();
            std::hint::black_box(c.data()[0]);
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * k * n) as f64 / dt / 1e9;
        println!("{}x{}x{}: {:.3} ms, {:.2} GFLOP/s", m, k, n, dt * 1e3, gflops);
    }
}
