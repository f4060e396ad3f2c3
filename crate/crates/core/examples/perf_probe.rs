// Ad-hoc kernel throughput probe; not part of the deliverable surface.
use kvfuse_core::rng::Rng;
use kvfuse_core::tensor::{Graph, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(1);
    for (m, k, p, reps) in [(240usize, 128usize, 128usize, 400usize), (240, 128, 262, 200), (1, 128, 128, 20000), (64, 128, 128, 1000)] {
        let a = Tensor::randn(vec![m, k], 0.5, &mut rng);
        let b = Tensor::randn(vec![k, p], 0.5, &mut rng);
        let start = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let mut g = Graph::new();
            let an = g.leaf(a.clone());
            let bn = g.leaf(b.clone());
            let c = g.matmul(an, bn).unwrap();
            sink += g.value(c).data()[0];
        }
        let dt = start.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * p * reps) as f64;
        println!("matmul {m}x{k}x{p}: {:.2} GFLOP/s (sink {sink})", flops / dt / 1e9);
    }

    // attention-like: H=4 T=240 S=560 D=32 forward
    let (h, t, d) = (4usize, 240usize, 32usize);
    let q = Tensor::randn(vec![h, t, d], 0.5, &mut rng);
    let kk = Tensor::randn(vec![h, t, d], 0.5, &mut rng);
    let v = Tensor::randn(vec![h, t, d], 0.5, &mut rng);
    let start = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut g = Graph::new();
        let qn = g.leaf(q.clone());
        let kn = g.leaf(kk.clone());
        let vn = g.leaf(v.clone());
        let _ = g.attention(qn, kn, vn, None, None, 0.17).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    println!("attention fwd H{h} T{t} D{d}: {:.1} ms/call", dt / reps as f64 * 1e3);

    // backward probe on a transformer-ish chain
    let x = Tensor::randn(vec![240, 128], 0.5, &mut rng);
    let w = Tensor::randn(vec![128, 128], 0.1, &mut rng).with_grad();
    let start = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.leaf(w.clone());
        let y = g.matmul(xn, wn).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    let flops = 2.0 * 2.0 * (240 * 128 * 128 * reps) as f64;
    println!("matmul fwd+bwd(dW): {:.2} GFLOP/s", flops / dt / 1e9);
}
