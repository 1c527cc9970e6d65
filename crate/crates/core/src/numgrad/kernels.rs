//! Dense matrix products. Row-parallel under [`Exec::Parallel`]; each output
//! element is accumulated in the same order on either path.

use crate::par::{for_each_row_mut, Exec};

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row_mut(&mut out, n, exec, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`, i.e. all pairwise row inner products.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row_mut(&mut out, n, exec, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[m×k]ᵀ · b[m×n]`, a `k×n` result.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for_each_row_mut(&mut out, n, exec, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let bi = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bi) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Four-lane dot product; fixed association order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
