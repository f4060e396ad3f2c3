//! Finite-difference gradient checks. Every differentiable op is compared
//! against central differences (h = 1e-3) of an independent f64
//! re-implementation of the same math, at >= 20 random coordinates per
//! input, relative error < 1e-3.

use kvfuse_core::rng::Rng;
use kvfuse_core::tensor::{AttentionPrefix, Graph, NodeId, Tensor};
use std::sync::Arc;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const COORDS: usize = 20;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Check d(loss)/d(inputs) from the graph against central differences of the
/// f64 oracle loss.
fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    oracle: impl Fn(&[Vec<f64>]) -> f64,
    seed: u64,
) {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut graph, &ids);
    assert!(graph.value(loss).is_scalar(), "loss must be scalar");
    graph.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    // Sanity: the oracle agrees with the f32 forward at the base point.
    let graph_loss = graph.value(loss).item() as f64;
    let oracle_loss = oracle(&base);
    assert!(
        (graph_loss - oracle_loss).abs() < 1e-4 * oracle_loss.abs().max(1.0),
        "forward mismatch: graph {graph_loss} vs oracle {oracle_loss}"
    );

    let mut rng = Rng::new(seed);
    for (which, t) in inputs.iter().enumerate() {
        let grads = graph
            .grad_f64(ids[which])
            .unwrap_or_else(|| panic!("input {which} received no gradient"));
        let numel = t.numel();
        let n_coords = COORDS.min(numel);
        for _ in 0..n_coords {
            let i = rng.gen_range(numel);
            let mut plus = base.clone();
            plus[which][i] += H;
            let mut minus = base.clone();
            minus[which][i] -= H;
            let fd = (oracle(&plus) - oracle(&minus)) / (2.0 * H);
            let ad = grads[i];
            assert!(
                rel_err(fd, ad) < TOL || (fd.abs() < 1e-7 && ad.abs() < 1e-7),
                "input {which} coord {i}: fd {fd} vs ad {ad} (rel {})",
                rel_err(fd, ad)
            );
        }
    }
}

/// Random projection so the scalar loss is sensitive to every output.
fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

fn project_loss(graph: &mut Graph, out: NodeId, r: &Tensor) -> NodeId {
    let rn = graph.constant(r.clone());
    let weighted = graph.mul(out, rn).unwrap();
    graph.sum(weighted).unwrap()
}

fn project_sum(out: &[f64], r: &Tensor) -> f64 {
    out.iter()
        .zip(r.data())
        .map(|(o, &w)| o * w as f64)
        .sum()
}

#[test]
fn matmul_gradients() {
    let mut rng = Rng::new(1);
    let a = Tensor::randn(vec![4, 6], 0.8, &mut rng);
    let b = Tensor::randn(vec![6, 5], 0.8, &mut rng);
    let r = projection(&[4, 5], 100);
    check_gradients(
        &[a, b],
        |g, ids| {
            let c = g.matmul(ids[0], ids[1]).unwrap();
            project_loss(g, c, &r)
        },
        |inp| {
            let (a, b) = (&inp[0], &inp[1]);
            let mut out = vec![0.0f64; 4 * 5];
            for i in 0..4 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for k in 0..6 {
                        s += a[i * 6 + k] * b[k * 5 + j];
                    }
                    out[i * 5 + j] = s;
                }
            }
            project_sum(&out, &r)
        },
        11,
    );
}

#[test]
fn add_mul_silu_gradients() {
    let mut rng = Rng::new(2);
    let x = Tensor::randn(vec![5, 5], 1.0, &mut rng);
    let y = Tensor::randn(vec![5, 5], 1.0, &mut rng);
    let r = projection(&[5, 5], 101);
    check_gradients(
        &[x, y],
        |g, ids| {
            let s = g.add(ids[0], ids[1]).unwrap();
            let m = g.mul(s, ids[0]).unwrap();
            let a = g.silu(m).unwrap();
            project_loss(g, a, &r)
        },
        |inp| {
            let out: Vec<f64> = inp[0]
                .iter()
                .zip(&inp[1])
                .map(|(&x, &y)| {
                    let v = (x + y) * x;
                    v / (1.0 + (-v).exp())
                })
                .collect();
            project_sum(&out, &r)
        },
        12,
    );
}

#[test]
fn rms_norm_gradients() {
    let mut rng = Rng::new(3);
    let x = Tensor::randn(vec![4, 8], 1.2, &mut rng);
    let w = Tensor::randn(vec![8], 1.0, &mut rng);
    let r = projection(&[4, 8], 102);
    let eps = 1e-5f64;
    check_gradients(
        &[x, w],
        |g, ids| {
            let y = g.rms_norm(ids[0], ids[1], eps).unwrap();
            project_loss(g, y, &r)
        },
        |inp| {
            let (x, w) = (&inp[0], &inp[1]);
            let mut out = vec![0.0f64; 32];
            for row in 0..4 {
                let xs = &x[row * 8..(row + 1) * 8];
                let ms = xs.iter().map(|v| v * v).sum::<f64>() / 8.0;
                let inv = 1.0 / (ms + eps).sqrt();
                for j in 0..8 {
                    out[row * 8 + j] = xs[j] * inv * w[j];
                }
            }
            project_sum(&out, &r)
        },
        13,
    );
}

#[test]
fn softmax_gradients() {
    let mut rng = Rng::new(4);
    let x = Tensor::randn(vec![3, 7], 1.5, &mut rng);
    let r = projection(&[3, 7], 103);
    check_gradients(
        &[x],
        |g, ids| {
            let s = g.softmax_lastdim(ids[0]).unwrap();
            project_loss(g, s, &r)
        },
        |inp| {
            let x = &inp[0];
            let mut out = vec![0.0f64; 21];
            for row in 0..3 {
                let xs = &x[row * 7..(row + 1) * 7];
                let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..7 {
                    out[row * 7 + j] = exps[j] / z;
                }
            }
            project_sum(&out, &r)
        },
        14,
    );
}

#[test]
fn embedding_gradients() {
    let mut rng = Rng::new(5);
    let table = Tensor::randn(vec![9, 6], 1.0, &mut rng);
    let tokens = [3u32, 7, 3, 0];
    let r = projection(&[4, 6], 104);
    check_gradients(
        &[table],
        |g, ids| {
            let e = g.embed(ids[0], &tokens).unwrap();
            project_loss(g, e, &r)
        },
        |inp| {
            let table = &inp[0];
            let mut out = vec![0.0f64; 24];
            for (t, &tok) in tokens.iter().enumerate() {
                for j in 0..6 {
                    out[t * 6 + j] = table[tok as usize * 6 + j];
                }
            }
            project_sum(&out, &r)
        },
        15,
    );
}

fn rope_oracle(x: &[f64], h: usize, t: usize, d: usize, positions: &[usize], base: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for head in 0..h {
        for tt in 0..t {
            for i in 0..d / 2 {
                let freq = base.powf(-2.0 * i as f64 / d as f64);
                let angle = positions[tt] as f64 * freq;
                let (c, s) = (angle.cos(), angle.sin());
                let off = (head * t + tt) * d + 2 * i;
                out[off] = x[off] * c - x[off + 1] * s;
                out[off + 1] = x[off] * s + x[off + 1] * c;
            }
        }
    }
    out
}

#[test]
fn rope_gradients() {
    let mut rng = Rng::new(6);
    let x = Tensor::randn(vec![2, 5, 6], 1.0, &mut rng);
    let positions = [0usize, 2, 3, 10, 40];
    let r = projection(&[2, 5, 6], 105);
    check_gradients(
        &[x],
        |g, ids| {
            let y = g.rope(ids[0], &positions, 100.0).unwrap();
            project_loss(g, y, &r)
        },
        |inp| project_sum(&rope_oracle(&inp[0], 2, 5, 6, &positions, 100.0), &r),
        16,
    );
}

#[allow(clippy::too_many_arguments)]
fn attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    h: usize,
    t: usize,
    d: usize,
    prefix_k: &[f64],
    prefix_v: &[f64],
    prefix_valid: &[bool],
    self_valid: &[bool],
    scale: f64,
) -> Vec<f64> {
    let p = prefix_valid.len();
    let s_total = p + t;
    let mut out = vec![0.0f64; h * t * d];
    for head in 0..h {
        for tt in 0..t {
            let q_row = &q[(head * t + tt) * d..(head * t + tt + 1) * d];
            let key = |s: usize| -> &[f64] {
                if s < p {
                    &prefix_k[(head * p + s) * d..(head * p + s + 1) * d]
                } else {
                    &k[(head * t + (s - p)) * d..(head * t + (s - p) + 1) * d]
                }
            };
            let val = |s: usize| -> &[f64] {
                if s < p {
                    &prefix_v[(head * p + s) * d..(head * p + s + 1) * d]
                } else {
                    &v[(head * t + (s - p)) * d..(head * t + (s - p) + 1) * d]
                }
            };
            let allowed = |s: usize| -> bool {
                if s < p {
                    prefix_valid[s]
                } else {
                    s - p <= tt && self_valid[s - p]
                }
            };
            let scores: Vec<f64> = (0..s_total)
                .map(|s| {
                    q_row
                        .iter()
                        .zip(key(s))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = (0..s_total)
                .filter(|&s| allowed(s))
                .map(|s| scores[s])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0f64;
            let mut weights = vec![0.0f64; s_total];
            for s in 0..s_total {
                if allowed(s) {
                    weights[s] = (scores[s] - max).exp();
                    z += weights[s];
                }
            }
            for s in 0..s_total {
                let w = weights[s] / z;
                for (o, x) in out[(head * t + tt) * d..(head * t + tt + 1) * d]
                    .iter_mut()
                    .zip(val(s))
                {
                    *o += w * x;
                }
            }
        }
    }
    out
}

#[test]
fn attention_gradients_with_prefix_and_masks() {
    let (h, t, d, p) = (2usize, 4usize, 6usize, 3usize);
    let mut rng = Rng::new(7);
    let q = Tensor::randn(vec![h, t, d], 0.9, &mut rng);
    let k = Tensor::randn(vec![h, t, d], 0.9, &mut rng);
    let v = Tensor::randn(vec![h, t, d], 0.9, &mut rng);
    let pk = Tensor::randn(vec![h, p, d], 0.9, &mut rng);
    let pv = Tensor::randn(vec![h, p, d], 0.9, &mut rng);
    let prefix_valid = vec![true, false, true];
    let self_valid = vec![true, true, false, true];
    let scale = 1.0 / (d as f64).sqrt();
    let r = projection(&[h, t, d], 106);

    let mut prefix = AttentionPrefix::empty(h, d);
    prefix.append(&pk, &pv, &prefix_valid);
    let prefix = Arc::new(prefix);

    let pk64: Vec<f64> = pk.data().iter().map(|&x| x as f64).collect();
    let pv64: Vec<f64> = pv.data().iter().map(|&x| x as f64).collect();

    check_gradients(
        &[q, k, v],
        |g, ids| {
            let out = g
                .attention(
                    ids[0],
                    ids[1],
                    ids[2],
                    Some(prefix.clone()),
                    Some(self_valid.clone()),
                    scale,
                )
                .unwrap();
            project_loss(g, out, &r)
        },
        |inp| {
            let out = attention_oracle(
                &inp[0],
                &inp[1],
                &inp[2],
                h,
                t,
                d,
                &pk64,
                &pv64,
                &prefix_valid,
                &self_valid,
                scale,
            );
            project_sum(&out, &r)
        },
        17,
    );
}

#[test]
fn attention_gradients_causal_self_only() {
    let (h, t, d) = (2usize, 5usize, 4usize);
    let mut rng = Rng::new(8);
    let q = Tensor::randn(vec![h, t, d], 1.0, &mut rng);
    let k = Tensor::randn(vec![h, t, d], 1.0, &mut rng);
    let v = Tensor::randn(vec![h, t, d], 1.0, &mut rng);
    let scale = 1.0 / (d as f64).sqrt();
    let r = projection(&[h, t, d], 107);
    let self_valid = vec![true; t];
    check_gradients(
        &[q, k, v],
        |g, ids| {
            let out = g
                .attention(ids[0], ids[1], ids[2], None, None, scale)
                .unwrap();
            project_loss(g, out, &r)
        },
        |inp| {
            let out = attention_oracle(
                &inp[0], &inp[1], &inp[2], h, t, d, &[], &[], &[], &self_valid, scale,
            );
            project_sum(&out, &r)
        },
        18,
    );
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = Rng::new(9);
    let logits = Tensor::randn(vec![5, 8], 1.5, &mut rng);
    let targets = [2u32, 7, 0, 4, 1];
    let mask = [true, false, true, true, false];
    check_gradients(
        &[logits],
        |g, ids| g.cross_entropy(ids[0], &targets, &mask).unwrap(),
        |inp| {
            let x = &inp[0];
            let mut total = 0.0f64;
            let mut count = 0usize;
            for tt in 0..5 {
                if !mask[tt] {
                    continue;
                }
                let row = &x[tt * 8..(tt + 1) * 8];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                total += max + z.ln() - row[targets[tt] as usize];
                count += 1;
            }
            total / count as f64
        },
        19,
    );
}

#[test]
fn transpose_gradients() {
    let mut rng = Rng::new(10);
    let x = Tensor::randn(vec![4, 7], 1.0, &mut rng);
    let r = projection(&[7, 4], 108);
    check_gradients(
        &[x],
        |g, ids| {
            let y = g.transpose_2d(ids[0]).unwrap();
            project_loss(g, y, &r)
        },
        |inp| {
            let x = &inp[0];
            let mut out = vec![0.0f64; 28];
            for i in 0..4 {
                for j in 0..7 {
                    out[j * 4 + i] = x[i * 7 + j];
                }
            }
            project_sum(&out, &r)
        },
        20,
    );
}

/// A small composite chain: embed -> rms_norm -> matmul -> attention-free
/// stack exercised end to end against one fused oracle.
#[test]
fn composite_chain_gradients() {
    let mut rng = Rng::new(11);
    let table = Tensor::randn(vec![6, 4], 0.8, &mut rng);
    let w = Tensor::randn(vec![4, 6], 0.8, &mut rng);
    let norm_w = Tensor::randn(vec![4], 1.0, &mut rng);
    let tokens = [1u32, 5, 2];
    let targets = [4u32, 0, 3];
    let mask = [true, true, false];
    let eps = 1e-5f64;
    check_gradients(
        &[table, w, norm_w],
        |g, ids| {
            let e = g.embed(ids[0], &tokens).unwrap();
            let n = g.rms_norm(e, ids[2], eps).unwrap();
            let logits = g.matmul(n, ids[1]).unwrap();
            g.cross_entropy(logits, &targets, &mask).unwrap()
        },
        |inp| {
            let (table, w, norm_w) = (&inp[0], &inp[1], &inp[2]);
            let mut total = 0.0f64;
            let mut count = 0;
            for (t, &tok) in tokens.iter().enumerate() {
                let row = &table[tok as usize * 4..(tok as usize + 1) * 4];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
                let inv = 1.0 / (ms + eps).sqrt();
                let normed: Vec<f64> =
                    row.iter().zip(norm_w).map(|(x, g)| x * inv * g).collect();
                let logits: Vec<f64> = (0..6)
                    .map(|j| (0..4).map(|i| normed[i] * w[i * 6 + j]).sum())
                    .collect();
                if !mask[t] {
                    continue;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                total += max + z.ln() - logits[targets[t] as usize];
                count += 1;
            }
            total / count as f64
        },
        21,
    );
}
