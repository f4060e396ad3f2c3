use super::*;
use crate::rng::Rng;

fn leaf_grad(graph: &mut Graph, data: Vec<f32>, shape: Vec<usize>) -> NodeId {
    graph.leaf(Tensor::new(shape, data).unwrap().with_grad())
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_case() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[11.0]);
}

/// Naive triple-loop product in f64, the independent reference.
fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0f64;
            for kk in 0..k {
                s += a[i * k + kk] as f64 * b[kk * p + j] as f64;
            }
            out[i * p + j] = s;
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::new(42);
    let a = Tensor::randn(vec![8, 8], 1.0, &mut rng);
    let b = Tensor::randn(vec![8, 8], 1.0, &mut rng);
    let expect = matmul_oracle(a.data(), b.data(), 8, 8, 8);
    let mut g = Graph::new();
    let an = g.constant(a);
    let bn = g.constant(b);
    let c = g.matmul(an, bn).unwrap();
    for (got, want) in g.value(c).data().iter().zip(&expect) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn matmul_batched_matches_per_slice() {
    let mut rng = Rng::new(43);
    let a = Tensor::randn(vec![3, 4, 5], 1.0, &mut rng);
    let b = Tensor::randn(vec![3, 5, 2], 1.0, &mut rng);
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let c = g.matmul(an, bn).unwrap();
    assert_eq!(g.value(c).shape(), &[3, 4, 2]);
    for bi in 0..3 {
        let expect = matmul_oracle(
            &a.data()[bi * 20..(bi + 1) * 20],
            &b.data()[bi * 10..(bi + 1) * 10],
            4,
            5,
            2,
        );
        for (got, want) in g.value(c).data()[bi * 8..(bi + 1) * 8].iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    match g.matmul(a, b) {
        Err(crate::Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_symmetry_and_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let s = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    // Max subtraction keeps huge inputs finite.
    let x = g.constant(Tensor::new(vec![1, 3], vec![1000.0, 1000.0, 1000.0]).unwrap());
    let s = g.softmax_lastdim(x).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
        assert!(v.is_finite());
    }

    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0f32.ln()]).unwrap());
    let s = g.softmax_lastdim(x).unwrap();
    assert!((g.value(s).data()[0] - 0.25).abs() < 1e-6);
    assert!((g.value(s).data()[1] - 0.75).abs() < 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(3);
    let x = Tensor::randn(vec![7, 33], 3.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let s = g.softmax_lastdim(xn).unwrap();
    for row in g.value(s).data().chunks(33) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn rms_norm_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap());
    let w = g.constant(Tensor::ones(vec![4]));
    let y = g.rms_norm(x, w, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);

    let x = g.constant(Tensor::new(vec![1, 2], vec![2.0, 2.0]).unwrap());
    let w = g.constant(Tensor::ones(vec![2]));
    let y = g.rms_norm(x, w, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0]);
}

#[test]
fn rms_norm_matches_scalar_oracle() {
    let mut rng = Rng::new(5);
    let x = Tensor::randn(vec![3, 9], 1.5, &mut rng);
    let w = Tensor::randn(vec![9], 1.0, &mut rng);
    let eps = 1e-5f64;
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let wn = g.constant(w.clone());
    let y = g.rms_norm(xn, wn, eps).unwrap();
    for r in 0..3 {
        let row = &x.data()[r * 9..(r + 1) * 9];
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / 9.0;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..9 {
            let want = row[j] as f64 * inv * w.data()[j] as f64;
            let got = g.value(y).data()[r * 9 + j] as f64;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![1, 4]));
    let loss = g.cross_entropy(logits, &[2], &[true]).unwrap();
    assert!((g.value(loss).item() as f64 - 4.0f64.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_empty_mask_is_zero() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![3, 5]));
    let loss = g.cross_entropy(logits, &[0, 1, 2], &[false, false, false]).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

#[test]
fn cross_entropy_matches_per_position_oracle() {
    let mut rng = Rng::new(6);
    let logits = Tensor::randn(vec![5, 7], 2.0, &mut rng);
    let targets = [3u32, 0, 6, 2, 5];
    let mask = [true, false, true, true, false];
    let mut g = Graph::new();
    let ln = g.constant(logits.clone());
    let loss = g.cross_entropy(ln, &targets, &mask).unwrap();
    let mut want = 0.0f64;
    let mut count = 0;
    for t in 0..5 {
        if !mask[t] {
            continue;
        }
        let row = &logits.data()[t * 7..(t + 1) * 7];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let z: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
        want += max + z.ln() - row[targets[t] as usize] as f64;
        count += 1;
    }
    want /= count as f64;
    assert!((g.value(loss).item() as f64 - want).abs() < 1e-6);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![1, 4]));
    assert!(matches!(
        g.cross_entropy(logits, &[4], &[true]),
        Err(crate::Error::Vocabulary { .. })
    ));
}

#[test]
fn cross_entropy_ignores_masked_out_targets_bitwise() {
    let mut rng = Rng::new(7);
    let logits = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    let mask = [true, false, true, false];
    let mut g1 = Graph::new();
    let l1 = g1.constant(logits.clone());
    let a = g1.cross_entropy(l1, &[1, 0, 2, 3], &mask).unwrap();
    let mut g2 = Graph::new();
    let l2 = g2.constant(logits);
    let b = g2.cross_entropy(l2, &[1, 5, 2, 0], &mask).unwrap();
    assert_eq!(g1.value(a).item().to_bits(), g2.value(b).item().to_bits());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = leaf_grad(&mut g, vec![0.3, -1.0, 2.5, 7.0, 0.0, -4.0], vec![2, 3]);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = leaf_grad(&mut g, vec![1.0, 2.0], vec![2]);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = leaf_grad(&mut g, vec![1.0, 2.0], vec![2]);
    assert!(matches!(
        g.backward(x),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn backward_accumulates_on_repeat() {
    let mut g = Graph::new();
    let x = leaf_grad(&mut g, vec![1.0, 2.0], vec![2]);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![2.0, 2.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = leaf_grad(&mut g, vec![1.0, 2.0], vec![2]);
    let c = g.constant(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
    let y = g.mul(x, c).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![5.0, 5.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || -> (Vec<u32>, Vec<u32>) {
        let mut rng = Rng::new(1234);
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng).with_grad();
        let w = Tensor::randn(vec![8, 8], 0.5, &mut rng).with_grad();
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let wn = g.leaf(w);
        let y = g.matmul(xn, wn).unwrap();
        let act = g.silu(y).unwrap();
        let s = g.softmax_lastdim(act).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        let data_bits = g.value(s).data().iter().map(|v| v.to_bits()).collect();
        let grad_bits = g
            .grad(wn)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        (data_bits, grad_bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn split_merge_heads_roundtrip() {
    let mut rng = Rng::new(9);
    let x = Tensor::randn(vec![5, 12], 1.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let split = g.split_heads(xn, 3).unwrap();
    assert_eq!(g.value(split).shape(), &[3, 5, 4]);
    let merged = g.merge_heads(split).unwrap();
    assert_eq!(g.value(merged).data(), x.data());
}

#[test]
fn add_requires_equal_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(
        g.add(a, b),
        Err(crate::Error::ShapeMismatch { .. })
    ));
}

#[test]
fn tensor_shape_data_mismatch_is_rejected() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn attention_prefix_append_tracks_layout() {
    let mut p = AttentionPrefix::empty(2, 4);
    let k = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
    let v = Tensor::new(vec![2, 3, 4], (24..48).map(|i| i as f32).collect()).unwrap();
    p.append(&k, &v, &[true, false, true]);
    assert_eq!(p.len, 3);
    assert_eq!(p.k[0], k.data()[0..12]);
    assert_eq!(p.k[1], k.data()[12..24]);
    assert_eq!(p.valid, vec![true, false, true]);
    // Appending extends per head.
    let k2 = Tensor::new(vec![2, 1, 4], (0..8).map(|i| -(i as f32)).collect()).unwrap();
    let v2 = Tensor::new(vec![2, 1, 4], (8..16).map(|i| -(i as f32)).collect()).unwrap();
    p.append(&k2, &v2, &[true]);
    assert_eq!(p.len, 4);
    assert_eq!(&p.k[0][12..16], &k2.data()[0..4]);
    assert_eq!(&p.v[1][12..16], &v2.data()[4..8]);
}
