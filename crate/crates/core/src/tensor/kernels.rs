//! Numeric kernels shared by the graph ops and their backward passes.
//!
//! Every kernel that reduces over an index does so with f64 accumulators in
//! ascending index order, one accumulator per output element. Loops are
//! arranged so the reduced index is the outer loop and an accumulator array
//! covers the innermost (contiguous) axis; this keeps the per-element
//! accumulation order fixed while letting independent accumulators pipeline.

/// C\[m,p\] = A\[m,k\] @ B\[k,p\]. Per output element the sum over `k` runs in
/// ascending order in f64, then rounds once to f32.
pub(crate) fn matmul_2d(a: &[f32], b: &[f32], m: usize, k: usize, p: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b[kk * p..(kk + 1) * p];
            for (ac, &bv) in acc.iter_mut().zip(b_row) {
                *ac += av * bv as f64;
            }
        }
        for (o, &ac) in out[i * p..(i + 1) * p].iter_mut().zip(acc.iter()) {
            *o = ac as f32;
        }
    }
}

/// dA += dC @ B^T for C = A @ B. dC is an f64 gradient, dA an f64 buffer.
pub(crate) fn matmul_grad_a(
    dc: &[f64],
    b: &[f32],
    m: usize,
    k: usize,
    p: usize,
    da: &mut [f64],
) {
    debug_assert_eq!(dc.len(), m * p);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(da.len(), m * k);
    // dA[i][kk] = sum_j dC[i][j] * B[kk][j]; iterate j ascending with an
    // accumulator array over kk, reading B through its transpose.
    let mut bt = vec![0.0f32; p * k];
    transpose_2d(b, k, p, &mut bt);
    let mut acc = vec![0.0f64; k];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let dc_row = &dc[i * p..(i + 1) * p];
        for (j, &gv) in dc_row.iter().enumerate() {
            let bt_row = &bt[j * k..(j + 1) * k];
            for (ac, &bv) in acc.iter_mut().zip(bt_row) {
                *ac += gv * bv as f64;
            }
        }
        for (o, &ac) in da[i * k..(i + 1) * k].iter_mut().zip(acc.iter()) {
            *o += ac;
        }
    }
}

/// dB += A^T @ dC for C = A @ B. Sum over rows `i` runs ascending.
pub(crate) fn matmul_grad_b(
    dc: &[f64],
    a: &[f32],
    m: usize,
    k: usize,
    p: usize,
    db: &mut [f64],
) {
    debug_assert_eq!(dc.len(), m * p);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(db.len(), k * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dc_row = &dc[i * p..(i + 1) * p];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let db_row = &mut db[kk * p..(kk + 1) * p];
            for (o, &gv) in db_row.iter_mut().zip(dc_row) {
                *o += av * gv;
            }
        }
    }
}

/// dst\[c\]\[r\] = src\[r\]\[c\]; pure data movement.
pub(crate) fn transpose_2d(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Max-subtracted softmax over one row of f64 scores. `allowed[s] == false`
/// slots get probability exactly 0.0. The exp-sum accumulates ascending in
/// f64; probabilities round to f32. A row with no allowed slot (a fully
/// masked padding row) comes out all-zero.
pub(crate) fn masked_softmax_row(scores: &[f64], allowed: &[bool], out: &mut [f32]) {
    debug_assert_eq!(scores.len(), allowed.len());
    debug_assert_eq!(scores.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for (s, &ok) in scores.iter().zip(allowed) {
        if ok && *s > max {
            max = *s;
        }
    }
    if !max.is_finite() {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0f64;
    let mut exps = vec![0.0f64; scores.len()];
    for ((e, s), &ok) in exps.iter_mut().zip(scores).zip(allowed) {
        if ok {
            *e = (s - max).exp();
            total += *e;
        }
    }
    for (o, &e) in out.iter_mut().zip(exps.iter()) {
        *o = (e / total) as f32;
    }
}

/// Rotation table for rotary embeddings: cos/sin of
/// `position * base^(-2i/d)` for every (t, pair i), computed in f64.
pub(crate) fn rope_tables(
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> (Vec<f64>, Vec<f64>) {
    let pairs = head_dim / 2;
    let mut cos = vec![0.0f64; positions.len() * pairs];
    let mut sin = vec![0.0f64; positions.len() * pairs];
    for (t, &pos) in positions.iter().enumerate() {
        for i in 0..pairs {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos[t * pairs + i] = angle.cos();
            sin[t * pairs + i] = angle.sin();
        }
    }
    (cos, sin)
}

/// Rotate adjacent coordinate pairs (x\[2i\], x\[2i+1\]) of a \[H, T, D\]
/// tensor by the tabulated angles; `invert` applies the inverse rotation
/// (used by the backward pass).
pub(crate) fn rope_apply(
    x: &[f32],
    n_heads: usize,
    seq: usize,
    head_dim: usize,
    cos: &[f64],
    sin: &[f64],
    invert: bool,
    out: &mut [f32],
) {
    debug_assert_eq!(x.len(), n_heads * seq * head_dim);
    debug_assert_eq!(out.len(), x.len());
    let pairs = head_dim / 2;
    for h in 0..n_heads {
        for t in 0..seq {
            let off = (h * seq + t) * head_dim;
            for i in 0..pairs {
                let c = cos[t * pairs + i];
                let s = if invert { -sin[t * pairs + i] } else { sin[t * pairs + i] };
                let x0 = x[off + 2 * i] as f64;
                let x1 = x[off + 2 * i + 1] as f64;
                out[off + 2 * i] = (x0 * c - x1 * s) as f32;
                out[off + 2 * i + 1] = (x0 * s + x1 * c) as f32;
            }
        }
    }
}

/// Same rotation on an f64 gradient buffer.
pub(crate) fn rope_apply_f64(
    x: &[f64],
    n_heads: usize,
    seq: usize,
    head_dim: usize,
    cos: &[f64],
    sin: &[f64],
    invert: bool,
    out: &mut [f64],
) {
    let pairs = head_dim / 2;
    for h in 0..n_heads {
        for t in 0..seq {
            let off = (h * seq + t) * head_dim;
            for i in 0..pairs {
                let c = cos[t * pairs + i];
                let s = if invert { -sin[t * pairs + i] } else { sin[t * pairs + i] };
                let x0 = x[off + 2 * i];
                let x1 = x[off + 2 * i + 1];
                out[off + 2 * i] = x0 * c - x1 * s;
                out[off + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
