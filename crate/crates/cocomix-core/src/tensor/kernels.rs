//! Forward and backward rules for every kernel. Backward rules are
//! stateless: anything they need beyond the upstream gradient is recomputed
//! from parent values, so nodes never cache intermediates.

use super::{accumulate_grad, node_ref, rows_cols, topk_indices, Attrs, KernelKind, Tensor};
use crate::error::{Error, Result};

fn shape_err(kernel: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { kernel, detail }
}

// ---------------------------------------------------------------------------
// dense matmul core

/// out += A·B with A m×k, B k×n, all row-major. The j-loop carries
/// independent accumulators, which keeps the inner loop vectorizable.
fn mm_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = x[i * c + j];
        }
    }
    t
}

/// op(A)·op(B) where op is optional transposition; returns (m, n, values).
fn mm(
    a: &[f64],
    (ra, ca): (usize, usize),
    ta: bool,
    b: &[f64],
    (rb, cb): (usize, usize),
    tb: bool,
) -> (usize, usize, Vec<f64>) {
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    debug_assert_eq!(k, k2);
    let at;
    let aview: &[f64] = if ta {
        at = transpose(a, ra, ca);
        &at
    } else {
        a
    };
    let bt;
    let bview: &[f64] = if tb {
        bt = transpose(b, rb, cb);
        &bt
    } else {
        b
    };
    let mut out = vec![0.0; m * n];
    mm_accum(aview, bview, m, k, n, &mut out);
    (m, n, out)
}

// ---------------------------------------------------------------------------
// elementwise helpers

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

/// Broadcast pattern of `b` against `a` for add/mul.
enum Broadcast {
    Same,
    Row,    // b is [c], tiled across rows of a
    Scalar, // b is a single value
}

fn broadcast_kind(kernel: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (ar, ac) = rows_cols(&a.0.borrow().shape);
    let (br, bc) = rows_cols(&b.0.borrow().shape);
    if (ar, ac) == (br, bc) {
        Ok(Broadcast::Same)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else if br == 1 && bc == 1 {
        Ok(Broadcast::Scalar)
    } else {
        Err(shape_err(
            kernel,
            format!("cannot broadcast {br}x{bc} onto {ar}x{ac}"),
        ))
    }
}

// ---------------------------------------------------------------------------
// forward

pub(super) fn compute(
    kind: KernelKind,
    inputs: &[&Tensor],
    attrs: &Attrs,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(shape_err(
                kind.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    };

    match kind {
        KernelKind::Leaf => Err(Error::Other("leaf nodes are not computed".into())),

        KernelKind::Matmul => {
            arity(2)?;
            let (transpose_a, transpose_b) = match attrs {
                Attrs::Matmul { transpose_a, transpose_b } => (*transpose_a, *transpose_b),
                _ => (false, false),
            };
            let an = node_ref(inputs[0]);
            let bn = node_ref(inputs[1]);
            if an.shape().len() != 2 || bn.shape().len() != 2 {
                return Err(shape_err(
                    "matmul",
                    format!(
                        "requires rank-2 inputs, got {:?} and {:?}",
                        an.shape(),
                        bn.shape()
                    ),
                ));
            }
            let (ra, ca) = (an.shape()[0], an.shape()[1]);
            let (rb, cb) = (bn.shape()[0], bn.shape()[1]);
            let k_a = if transpose_a { ra } else { ca };
            let k_b = if transpose_b { cb } else { rb };
            if k_a != k_b {
                return Err(shape_err(
                    "matmul",
                    format!(
                        "inner dims differ: {ra}x{ca} (ta={transpose_a}) vs {rb}x{cb} (tb={transpose_b})"
                    ),
                ));
            }
            let (m, n, out) = mm(an.values(), (ra, ca), transpose_a, bn.values(), (rb, cb), transpose_b);
            Ok((vec![m, n], out))
        }

        KernelKind::Add | KernelKind::Mul => {
            arity(2)?;
            let bk = broadcast_kind(kind.name(), inputs[0], inputs[1])?;
            let an = node_ref(inputs[0]);
            let bn = node_ref(inputs[1]);
            let (_, c) = rows_cols(an.shape());
            let a = an.values();
            let b = bn.values();
            let mut out = a.to_vec();
            let is_add = kind == KernelKind::Add;
            match bk {
                Broadcast::Same => {
                    for (o, &bv) in out.iter_mut().zip(b) {
                        if is_add {
                            *o += bv;
                        } else {
                            *o *= bv;
                        }
                    }
                }
                Broadcast::Row => {
                    for row in out.chunks_mut(c) {
                        for (o, &bv) in row.iter_mut().zip(b) {
                            if is_add {
                                *o += bv;
                            } else {
                                *o *= bv;
                            }
                        }
                    }
                }
                Broadcast::Scalar => {
                    let bv = b[0];
                    for o in out.iter_mut() {
                        if is_add {
                            *o += bv;
                        } else {
                            *o *= bv;
                        }
                    }
                }
            }
            Ok((an.shape().to_vec(), out))
        }

        KernelKind::Scale => {
            arity(1)?;
            let factor = match attrs {
                Attrs::Scale { factor } => *factor,
                _ => return Err(Error::Other("scale needs a factor attribute".into())),
            };
            if !factor.is_finite() {
                return Err(Error::NonFinite { kernel: "scale" });
            }
            let an = node_ref(inputs[0]);
            let out = an.values().iter().map(|v| v * factor).collect();
            Ok((an.shape().to_vec(), out))
        }

        KernelKind::Gelu => {
            arity(1)?;
            let an = node_ref(inputs[0]);
            let out = an.values().iter().map(|&v| gelu_val(v)).collect();
            Ok((an.shape().to_vec(), out))
        }

        KernelKind::LayerNorm => {
            arity(3)?;
            let eps = match attrs {
                Attrs::LayerNorm { eps } => *eps,
                _ => 1e-5,
            };
            let xn = node_ref(inputs[0]);
            let gn = node_ref(inputs[1]);
            let bn = node_ref(inputs[2]);
            let (r, c) = rows_cols(xn.shape());
            if gn.values().len() != c || bn.values().len() != c {
                return Err(shape_err(
                    "layer_norm",
                    format!(
                        "gain/bias lengths {}/{} do not match width {c}",
                        gn.values().len(),
                        bn.values().len()
                    ),
                ));
            }
            let x = xn.values();
            let gamma = gn.values();
            let beta = bn.values();
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
                }
            }
            Ok((xn.shape().to_vec(), out))
        }

        KernelKind::Softmax => {
            arity(1)?;
            let xn = node_ref(inputs[0]);
            let (r, c) = rows_cols(xn.shape());
            let x = xn.values();
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * c..(i + 1) * c];
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
            Ok((xn.shape().to_vec(), out))
        }

        KernelKind::EmbeddingGather => {
            arity(1)?;
            let ids = match attrs {
                Attrs::Gather { ids } => ids,
                _ => return Err(Error::Other("embedding_gather needs ids".into())),
            };
            let tn = node_ref(inputs[0]);
            if tn.shape().len() != 2 {
                return Err(shape_err(
                    "embedding_gather",
                    format!("table must be rank 2, got {:?}", tn.shape()),
                ));
            }
            let (v, d) = (tn.shape()[0], tn.shape()[1]);
            let table = tn.values();
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::IndexOutOfRange {
                        context: "embedding_gather",
                        index: id,
                        bound: v,
                    });
                }
                out.extend_from_slice(&table[id * d..(id + 1) * d]);
            }
            Ok((vec![ids.len(), d], out))
        }

        KernelKind::TopkMask => {
            arity(1)?;
            let k = match attrs {
                Attrs::TopK { k } => *k,
                _ => return Err(Error::Other("topk_mask needs k".into())),
            };
            let xn = node_ref(inputs[0]);
            let (r, c) = rows_cols(xn.shape());
            if k == 0 || k > c {
                return Err(shape_err(
                    "topk_mask",
                    format!("k={k} out of range for row length {c}"),
                ));
            }
            let x = xn.values();
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                for idx in topk_indices(row, k) {
                    out[i * c + idx] = row[idx];
                }
            }
            Ok((xn.shape().to_vec(), out))
        }

        KernelKind::ConcatRows => {
            if inputs.is_empty() {
                return Err(shape_err("concat_rows", "needs at least one input".into()));
            }
            let (_, c0) = rows_cols(&inputs[0].0.borrow().shape);
            let mut total_rows = 0;
            for t in inputs {
                let (r, c) = rows_cols(&t.0.borrow().shape);
                if c != c0 {
                    return Err(shape_err(
                        "concat_rows",
                        format!("column widths differ: {c} vs {c0}"),
                    ));
                }
                total_rows += r;
            }
            let mut out = Vec::with_capacity(total_rows * c0);
            for t in inputs {
                out.extend_from_slice(&t.0.borrow().values);
            }
            Ok((vec![total_rows, c0], out))
        }

        KernelKind::SliceRows => {
            arity(1)?;
            let (start, end) = match attrs {
                Attrs::Slice { start, end } => (*start, *end),
                _ => return Err(Error::Other("slice_rows needs a range".into())),
            };
            let xn = node_ref(inputs[0]);
            let (r, c) = rows_cols(xn.shape());
            if start >= end || end > r {
                return Err(shape_err(
                    "slice_rows",
                    format!("range {start}..{end} invalid for {r} rows"),
                ));
            }
            let out = xn.values()[start * c..end * c].to_vec();
            Ok((vec![end - start, c], out))
        }

        KernelKind::ReduceMean => {
            arity(1)?;
            let xn = node_ref(inputs[0]);
            let n = xn.values().len() as f64;
            let mean = xn.values().iter().sum::<f64>() / n;
            Ok((vec![], vec![mean]))
        }

        KernelKind::Log => {
            arity(1)?;
            let floor = match attrs {
                Attrs::Log { floor } => *floor,
                _ => 0.0,
            };
            let xn = node_ref(inputs[0]);
            let mut out = Vec::with_capacity(xn.values().len());
            for &v in xn.values() {
                if floor > 0.0 {
                    out.push(v.max(floor).ln());
                } else {
                    if v <= 0.0 {
                        return Err(Error::Numeric {
                            kernel: "log",
                            detail: format!("non-positive input {v} with no floor"),
                        });
                    }
                    out.push(v.ln());
                }
            }
            Ok((xn.shape().to_vec(), out))
        }

        KernelKind::Rsqrt => {
            arity(1)?;
            let eps = match attrs {
                Attrs::Rsqrt { eps } => *eps,
                _ => 0.0,
            };
            let xn = node_ref(inputs[0]);
            let mut out = Vec::with_capacity(xn.values().len());
            for &v in xn.values() {
                let z = v + eps;
                if z <= 0.0 {
                    return Err(Error::Numeric {
                        kernel: "rsqrt",
                        detail: format!("non-positive input {v} (eps {eps})"),
                    });
                }
                out.push(1.0 / z.sqrt());
            }
            Ok((xn.shape().to_vec(), out))
        }
    }
}

// ---------------------------------------------------------------------------
// backward

/// Pushes this node's gradient into its parents. Reads are completed before
/// any parent is mutated so aliased parents (x op x) stay sound.
pub(super) fn backprop(t: &Tensor) -> Result<()> {
    let (kind, attrs, parents, g) = {
        let n = node_ref(t);
        if n.kind() == KernelKind::Leaf {
            return Ok(());
        }
        let Some(gs) = n.grad_slice() else {
            return Ok(());
        };
        (n.kind(), n.attrs().clone(), n.parents().to_vec(), gs.to_vec())
    };
    if parents.is_empty() {
        return Ok(());
    }

    match kind {
        KernelKind::Leaf => {}

        KernelKind::Matmul => {
            let (ta, tb) = match attrs {
                Attrs::Matmul { transpose_a, transpose_b } => (transpose_a, transpose_b),
                _ => (false, false),
            };
            let (a_vals, a_dims) = {
                let n = node_ref(&parents[0]);
                (n.values().to_vec(), (n.shape()[0], n.shape()[1]))
            };
            let (b_vals, b_dims) = {
                let n = node_ref(&parents[1]);
                (n.values().to_vec(), (n.shape()[0], n.shape()[1]))
            };
            let (m, _) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
            let n_out = if tb { b_dims.0 } else { b_dims.1 };
            let g_dims = (m, n_out);

            if parents[0].requires_grad() {
                // d/dAop = g·Bopᵀ, transposed back if A was transposed
                let (gr, gc, gaop) = mm(&g, g_dims, false, &b_vals, b_dims, !tb);
                if ta {
                    accumulate_grad(&parents[0], &transpose(&gaop, gr, gc));
                } else {
                    accumulate_grad(&parents[0], &gaop);
                }
            }
            if parents[1].requires_grad() {
                let (gr, gc, gbop) = mm(&a_vals, a_dims, !ta, &g, g_dims, false);
                if tb {
                    accumulate_grad(&parents[1], &transpose(&gbop, gr, gc));
                } else {
                    accumulate_grad(&parents[1], &gbop);
                }
            }
        }

        KernelKind::Add => {
            let bk = broadcast_kind("add", &parents[0], &parents[1])?;
            if parents[0].requires_grad() {
                accumulate_grad(&parents[0], &g);
            }
            if parents[1].requires_grad() {
                let (_, c) = rows_cols(&parents[0].0.borrow().shape);
                let delta = reduce_like(&g, c, &bk);
                accumulate_grad(&parents[1], &delta);
            }
        }

        KernelKind::Mul => {
            let bk = broadcast_kind("mul", &parents[0], &parents[1])?;
            let a_vals = parents[0].values();
            let b_vals = parents[1].values();
            let (_, c) = rows_cols(&parents[0].0.borrow().shape);
            if parents[0].requires_grad() {
                let mut ga = g.clone();
                match bk {
                    Broadcast::Same => {
                        for (o, &bv) in ga.iter_mut().zip(&b_vals) {
                            *o *= bv;
                        }
                    }
                    Broadcast::Row => {
                        for row in ga.chunks_mut(c) {
                            for (o, &bv) in row.iter_mut().zip(&b_vals) {
                                *o *= bv;
                            }
                        }
                    }
                    Broadcast::Scalar => {
                        for o in ga.iter_mut() {
                            *o *= b_vals[0];
                        }
                    }
                }
                accumulate_grad(&parents[0], &ga);
            }
            if parents[1].requires_grad() {
                let prod: Vec<f64> = g.iter().zip(&a_vals).map(|(gv, av)| gv * av).collect();
                let delta = reduce_like(&prod, c, &bk);
                accumulate_grad(&parents[1], &delta);
            }
        }

        KernelKind::Scale => {
            let factor = match attrs {
                Attrs::Scale { factor } => factor,
                _ => 1.0,
            };
            if parents[0].requires_grad() {
                let delta: Vec<f64> = g.iter().map(|v| v * factor).collect();
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::Gelu => {
            if parents[0].requires_grad() {
                let x = parents[0].values();
                let delta: Vec<f64> =
                    g.iter().zip(&x).map(|(gv, &xv)| gv * gelu_deriv(xv)).collect();
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::LayerNorm => {
            let eps = match attrs {
                Attrs::LayerNorm { eps } => eps,
                _ => 1e-5,
            };
            let x = parents[0].values();
            let gamma = parents[1].values();
            let (r, c) = rows_cols(&parents[0].0.borrow().shape);
            let need_x = parents[0].requires_grad();
            let need_gamma = parents[1].requires_grad();
            let need_beta = parents[2].requires_grad();
            let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
            let mut ggamma = if need_gamma { vec![0.0; c] } else { Vec::new() };
            let mut gbeta = if need_beta { vec![0.0; c] } else { Vec::new() };
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv;
                    if need_gamma {
                        ggamma[j] += grow[j] * xhat;
                    }
                    if need_beta {
                        gbeta[j] += grow[j];
                    }
                }
                if need_x {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..c {
                        let gh = grow[j] * gamma[j];
                        let xhat = (row[j] - mean) * inv;
                        mean_gh += gh;
                        mean_ghx += gh * xhat;
                    }
                    mean_gh /= c as f64;
                    mean_ghx /= c as f64;
                    let grow_x = &mut gx[i * c..(i + 1) * c];
                    for j in 0..c {
                        let gh = grow[j] * gamma[j];
                        let xhat = (row[j] - mean) * inv;
                        grow_x[j] = inv * (gh - mean_gh - xhat * mean_ghx);
                    }
                }
            }
            if need_x {
                accumulate_grad(&parents[0], &gx);
            }
            if need_gamma {
                accumulate_grad(&parents[1], &ggamma);
            }
            if need_beta {
                accumulate_grad(&parents[2], &gbeta);
            }
        }

        KernelKind::Softmax => {
            if parents[0].requires_grad() {
                // recompute p, then gx = p ⊙ (g − <g,p>) per row
                let x = parents[0].values();
                let (r, c) = rows_cols(&parents[0].0.borrow().shape);
                let mut delta = vec![0.0; x.len()];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut p = vec![0.0; c];
                    let mut sum = 0.0;
                    for j in 0..c {
                        let e = (row[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                    let inv = 1.0 / sum;
                    let mut dot = 0.0;
                    for j in 0..c {
                        p[j] *= inv;
                        dot += grow[j] * p[j];
                    }
                    let drow = &mut delta[i * c..(i + 1) * c];
                    for j in 0..c {
                        drow[j] = p[j] * (grow[j] - dot);
                    }
                }
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::EmbeddingGather => {
            if parents[0].requires_grad() {
                let ids = match &attrs {
                    Attrs::Gather { ids } => ids.clone(),
                    _ => Vec::new(),
                };
                let (v, d) = {
                    let n = node_ref(&parents[0]);
                    (n.shape()[0], n.shape()[1])
                };
                let mut delta = vec![0.0; v * d];
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &g[pos * d..(pos + 1) * d];
                    let dst = &mut delta[id * d..(id + 1) * d];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += s;
                    }
                }
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::TopkMask => {
            if parents[0].requires_grad() {
                let k = match attrs {
                    Attrs::TopK { k } => k,
                    _ => 0,
                };
                let x = parents[0].values();
                let (r, c) = rows_cols(&parents[0].0.borrow().shape);
                let mut delta = vec![0.0; x.len()];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    for idx in topk_indices(row, k) {
                        delta[i * c + idx] = g[i * c + idx];
                    }
                }
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::ConcatRows => {
            let mut offset = 0;
            for p in &parents {
                let (r, c) = rows_cols(&p.0.borrow().shape);
                let span = r * c;
                if p.requires_grad() {
                    accumulate_grad(p, &g[offset..offset + span]);
                }
                offset += span;
            }
        }

        KernelKind::SliceRows => {
            if parents[0].requires_grad() {
                let (start, _) = match attrs {
                    Attrs::Slice { start, end } => (start, end),
                    _ => (0, 0),
                };
                let (r, c) = rows_cols(&parents[0].0.borrow().shape);
                let mut delta = vec![0.0; r * c];
                delta[start * c..start * c + g.len()].copy_from_slice(&g);
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::ReduceMean => {
            if parents[0].requires_grad() {
                let n = parents[0].len();
                let gv = g[0] / n as f64;
                accumulate_grad(&parents[0], &vec![gv; n]);
            }
        }

        KernelKind::Log => {
            if parents[0].requires_grad() {
                let floor = match attrs {
                    Attrs::Log { floor } => floor,
                    _ => 0.0,
                };
                let x = parents[0].values();
                let delta: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gv, &xv)| if xv > floor { gv / xv } else { 0.0 })
                    .collect();
                accumulate_grad(&parents[0], &delta);
            }
        }

        KernelKind::Rsqrt => {
            if parents[0].requires_grad() {
                let eps = match attrs {
                    Attrs::Rsqrt { eps } => eps,
                    _ => 0.0,
                };
                let x = parents[0].values();
                let delta: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gv, &xv)| {
                        let y = 1.0 / (xv + eps).sqrt();
                        gv * (-0.5) * y * y * y
                    })
                    .collect();
                accumulate_grad(&parents[0], &delta);
            }
        }
    }
    Ok(())
}

/// Collapses a full-size gradient down to the broadcast operand's shape.
fn reduce_like(g: &[f64], c: usize, bk: &Broadcast) -> Vec<f64> {
    match bk {
        Broadcast::Same => g.to_vec(),
        Broadcast::Row => {
            let mut out = vec![0.0; c];
            for row in g.chunks(c) {
                for (o, &gv) in out.iter_mut().zip(row) {
                    *o += gv;
                }
            }
            out
        }
        Broadcast::Scalar => vec![g.iter().sum()],
    }
}
