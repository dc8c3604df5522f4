//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes forward in a fixed iteration order,
//! and (when a tape is active and an input wants gradients) records one
//! backward closure. Backward closures copy what they need out of short-lived
//! borrows before accumulating, so an op may see the same tensor on both
//! sides without aliasing hazards.

use super::{tape_active, tape_record, Tensor, TensorError};

type OpResult = Result<Tensor, TensorError>;

// ---------------------------------------------------------------------------
// matmul kernels: per output element, products are added in ascending-k order
// into an f64 accumulator. The naive and blocked kernels therefore produce
// bit-identical results; the blocked one just walks memory contiguously.
// ---------------------------------------------------------------------------

fn mm_naive_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

fn mm_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (acc, &bv) in row.iter_mut().zip(brow) {
                *acc += aip * bv as f64;
            }
        }
        for (o, &acc) in out[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
            *o = acc as f32;
        }
    }
    out
}

/// a[m,k] @ b[n,k]ᵀ -> [m,n]
fn mm_nt_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += arow[p] as f64 * brow[p] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// a[p,m]ᵀ @ b[p,n] -> [m,n]
fn mm_tn_kernel(a: &[f32], b: &[f32], p: usize, m: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i] as f64;
            let dst = &mut acc[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn matmul_impl(a: &Tensor, b: &Tensor, naive: bool) -> OpResult {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = {
        let ai = a.inner.borrow();
        let bi = b.inner.borrow();
        if naive {
            mm_naive_kernel(&ai.data, &bi.data, m, ka, n)
        } else {
            mm_kernel(&ai.data, &bi.data, m, ka, n)
        }
    };
    let rg = a.requires_grad() || b.requires_grad();
    let out = Tensor::from_op(data, vec![m, n], rg);
    if rg && tape_active() {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let (da, db) = {
                let ai = a2.inner.borrow();
                let bi = b2.inner.borrow();
                let da = a2
                    .requires_grad()
                    .then(|| mm_nt_kernel(&g, &bi.data, m, n, ka));
                let db = b2
                    .requires_grad()
                    .then(|| mm_tn_kernel(&ai.data, &g, m, ka, n));
                (da, db)
            };
            if let Some(da) = da {
                a2.accumulate_grad(&da);
            }
            if let Some(db) = db {
                b2.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

/// a[m,k] @ b[k,n]. Blocked kernel; bit-identical to [`matmul_naive`].
pub fn matmul(a: &Tensor, b: &Tensor) -> OpResult {
    matmul_impl(a, b, false)
}

/// Reference kernel kept for equivalence tests.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> OpResult {
    matmul_impl(a, b, true)
}

/// a[m,k] @ b[n,k]ᵀ -> [m,n]; row-by-row dot products, no transpose copy.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> OpResult {
    let (m, ka) = a.dims2("matmul_nt")?;
    let (n, kb) = b.dims2("matmul_nt")?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = {
        let ai = a.inner.borrow();
        let bi = b.inner.borrow();
        mm_nt_kernel(&ai.data, &bi.data, m, ka, n)
    };
    let rg = a.requires_grad() || b.requires_grad();
    let out = Tensor::from_op(data, vec![m, n], rg);
    if rg && tape_active() {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let (da, db) = {
                let ai = a2.inner.borrow();
                let bi = b2.inner.borrow();
                let da = a2.requires_grad().then(|| mm_kernel(&g, &bi.data, m, n, ka));
                let db = b2
                    .requires_grad()
                    .then(|| mm_tn_kernel(&g, &ai.data, m, n, ka));
                (da, db)
            };
            if let Some(da) = da {
                a2.accumulate_grad(&da);
            }
            if let Some(db) = db {
                b2.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise binary ops with trailing-suffix broadcast
// ---------------------------------------------------------------------------

struct Broadcast {
    out_shape: Vec<usize>,
    /// length of the repeated suffix block (= smaller operand's numel)
    block: usize,
    reps: usize,
    lhs_small: bool,
    rhs_small: bool,
}

fn broadcast_plan(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast, TensorError> {
    let sa = a.shape();
    let sb = b.shape();
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: sa.clone(),
        rhs: sb.clone(),
    };
    if sa == sb {
        let block = sa.iter().product();
        return Ok(Broadcast {
            out_shape: sa,
            block,
            reps: 1,
            lhs_small: false,
            rhs_small: false,
        });
    }
    let suffix_of = |small: &[usize], big: &[usize]| {
        small.len() < big.len() && small == &big[big.len() - small.len()..]
    };
    if suffix_of(&sb, &sa) {
        let block: usize = sb.iter().product();
        let total: usize = sa.iter().product();
        Ok(Broadcast {
            out_shape: sa,
            block,
            reps: total / block,
            lhs_small: false,
            rhs_small: true,
        })
    } else if suffix_of(&sa, &sb) {
        let block: usize = sa.iter().product();
        let total: usize = sb.iter().product();
        Ok(Broadcast {
            out_shape: sb,
            block,
            reps: total / block,
            lhs_small: true,
            rhs_small: false,
        })
    } else {
        Err(mismatch())
    }
}

/// Sum gradient blocks back down to the broadcast (smaller) operand.
fn reduce_to_block(g: &[f32], block: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; block];
    for chunk in g.chunks_exact(block) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: fn(f32, f32) -> f32,
    // gradient factors w.r.t. lhs and rhs given the input values
    dl: fn(f32, f32) -> f32,
    dr: fn(f32, f32) -> f32,
) -> OpResult {
    let plan = broadcast_plan(op, a, b)?;
    let data = {
        let ai = a.inner.borrow();
        let bi = b.inner.borrow();
        let total = plan.block * plan.reps;
        let mut out = Vec::with_capacity(total);
        for i in 0..total {
            let av = if plan.lhs_small {
                ai.data[i % plan.block]
            } else {
                ai.data[i]
            };
            let bv = if plan.rhs_small {
                bi.data[i % plan.block]
            } else {
                bi.data[i]
            };
            out.push(fwd(av, bv));
        }
        out
    };
    let rg = a.requires_grad() || b.requires_grad();
    let out = Tensor::from_op(data, plan.out_shape.clone(), rg);
    if rg && tape_active() {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let total = plan.block * plan.reps;
            let (da, db) = {
                let ai = a2.inner.borrow();
                let bi = b2.inner.borrow();
                let at = |i: usize| {
                    if plan.lhs_small {
                        ai.data[i % plan.block]
                    } else {
                        ai.data[i]
                    }
                };
                let bt = |i: usize| {
                    if plan.rhs_small {
                        bi.data[i % plan.block]
                    } else {
                        bi.data[i]
                    }
                };
                let da = a2.requires_grad().then(|| {
                    let full: Vec<f32> = (0..total).map(|i| g[i] * dl(at(i), bt(i))).collect();
                    if plan.lhs_small {
                        reduce_to_block(&full, plan.block)
                    } else {
                        full
                    }
                });
                let db = b2.requires_grad().then(|| {
                    let full: Vec<f32> = (0..total).map(|i| g[i] * dr(at(i), bt(i))).collect();
                    if plan.rhs_small {
                        reduce_to_block(&full, plan.block)
                    } else {
                        full
                    }
                });
                (da, db)
            };
            if let Some(da) = da {
                a2.accumulate_grad(&da);
            }
            if let Some(db) = db {
                b2.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

/// Elementwise a + b. Shapes must match, or one operand's shape must be a
/// trailing suffix of the other's (it is then repeated across leading dims).
pub fn add(a: &Tensor, b: &Tensor) -> OpResult {
    binary_elementwise("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> OpResult {
    binary_elementwise("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> OpResult {
    binary_elementwise("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

/// `dfactor(x, y)` is dy/dx given input x and output y.
fn unary_elementwise(a: &Tensor, fwd: fn(f32) -> f32, dfactor: fn(f32, f32) -> f32) -> Tensor {
    let (data, shape) = {
        let ai = a.inner.borrow();
        (
            ai.data.iter().map(|&x| fwd(x)).collect::<Vec<f32>>(),
            ai.shape.clone(),
        )
    };
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, shape, rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let contrib = {
                let ai = a2.inner.borrow();
                let oi = o2.inner.borrow();
                ai.data
                    .iter()
                    .zip(oi.data.iter())
                    .zip(g.iter())
                    .map(|((&x, &y), &gv)| gv * dfactor(x, y))
                    .collect::<Vec<f32>>()
            };
            a2.accumulate_grad(&contrib);
        });
    }
    out
}

pub fn relu(a: &Tensor) -> OpResult {
    Ok(unary_elementwise(
        a,
        |x| x.max(0.0),
        |x, _| if x > 0.0 { 1.0 } else { 0.0 },
    ))
}

fn sigmoid_scalar(x: f32) -> f32 {
    // split on sign so the exponential never overflows
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> OpResult {
    Ok(unary_elementwise(a, sigmoid_scalar, |_, y| y * (1.0 - y)))
}

pub fn softplus(a: &Tensor) -> OpResult {
    Ok(unary_elementwise(
        a,
        |x| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        },
        |x, _| sigmoid_scalar(x),
    ))
}

/// Elementwise square root. The derivative at 0 is taken as 0; callers keep
/// inputs strictly positive where the true derivative matters.
pub fn sqrt(a: &Tensor) -> OpResult {
    Ok(unary_elementwise(
        a,
        |x| x.sqrt(),
        |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
    ))
}

/// Clamp into [0, 1]. Gradient passes only strictly inside the interval.
pub fn clamp01(a: &Tensor) -> OpResult {
    Ok(unary_elementwise(
        a,
        |x| x.clamp(0.0, 1.0),
        |x, _| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 },
    ))
}

pub fn scale(a: &Tensor, k: f32) -> OpResult {
    let (data, shape) = {
        let ai = a.inner.borrow();
        (
            ai.data.iter().map(|&x| x * k).collect::<Vec<f32>>(),
            ai.shape.clone(),
        )
    };
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, shape, rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let contrib: Vec<f32> = g.iter().map(|&gv| gv * k).collect();
            a2.accumulate_grad(&contrib);
        });
    }
    Ok(out)
}

/// Multiply row i of a[m,n] by s[i].
pub fn scale_rows(a: &Tensor, s: &Tensor) -> OpResult {
    let (m, n) = a.dims2("scale_rows")?;
    if s.shape() != [m] {
        return Err(TensorError::ShapeMismatch {
            op: "scale_rows",
            lhs: a.shape(),
            rhs: s.shape(),
        });
    }
    let data = {
        let ai = a.inner.borrow();
        let si = s.inner.borrow();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let sv = si.data[i];
            out.extend(ai.data[i * n..(i + 1) * n].iter().map(|&x| x * sv));
        }
        out
    };
    let rg = a.requires_grad() || s.requires_grad();
    let out = Tensor::from_op(data, vec![m, n], rg);
    if rg && tape_active() {
        let (a2, s2, o2) = (a.clone(), s.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let (da, ds) = {
                let ai = a2.inner.borrow();
                let si = s2.inner.borrow();
                let da = a2.requires_grad().then(|| {
                    let mut da = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let sv = si.data[i];
                        da.extend(g[i * n..(i + 1) * n].iter().map(|&gv| gv * sv));
                    }
                    da
                });
                let ds = s2.requires_grad().then(|| {
                    (0..m)
                        .map(|i| {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += g[i * n + j] as f64 * ai.data[i * n + j] as f64;
                            }
                            acc as f32
                        })
                        .collect::<Vec<f32>>()
                });
                (da, ds)
            };
            if let Some(da) = da {
                a2.accumulate_grad(&da);
            }
            if let Some(ds) = ds {
                s2.accumulate_grad(&ds);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn softmax_lane(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (d, &x) in dst.iter_mut().zip(src) {
        let e = (x - max).exp();
        *d = e;
        sum += e as f64;
    }
    for d in dst.iter_mut() {
        *d = (*d as f64 / sum) as f32;
    }
}

fn softmax_lane_backward(y: &[f32], gy: &[f32], gx: &mut [f32]) {
    let mut dot = 0.0f64;
    for (&yv, &gv) in y.iter().zip(gy) {
        dot += yv as f64 * gv as f64;
    }
    for ((g, &yv), &gv) in gx.iter_mut().zip(y).zip(gy) {
        *g = (yv as f64 * (gv as f64 - dot)) as f32;
    }
}

/// Softmax along `axis` of a 1-d or 2-d tensor. Numerically stable via
/// max subtraction; lane sums accumulate in f64.
pub fn softmax(a: &Tensor, axis: usize) -> OpResult {
    let shape = a.shape();
    let (lanes, lane_len, stride) = match (shape.as_slice(), axis) {
        (&[n], 0) => (1, n, 1),
        (&[m, n], 1) => (m, n, 1),
        (&[m, n], 0) => (n, m, n),
        _ => {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape,
            })
        }
    };
    let contiguous = stride == 1;
    let gather = move |data: &[f32], lane: usize, buf: &mut Vec<f32>| {
        buf.clear();
        if contiguous {
            buf.extend_from_slice(&data[lane * lane_len..(lane + 1) * lane_len]);
        } else {
            buf.extend((0..lane_len).map(|i| data[lane + i * stride]));
        }
    };
    let data = {
        let ai = a.inner.borrow();
        let mut out = vec![0.0f32; ai.data.len()];
        let mut src = Vec::with_capacity(lane_len);
        let mut dst = vec![0.0f32; lane_len];
        for lane in 0..lanes {
            gather(&ai.data, lane, &mut src);
            softmax_lane(&src, &mut dst);
            if contiguous {
                out[lane * lane_len..(lane + 1) * lane_len].copy_from_slice(&dst);
            } else {
                for (i, &v) in dst.iter().enumerate() {
                    out[lane + i * stride] = v;
                }
            }
        }
        out
    };
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, shape, rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let contrib = {
                let oi = o2.inner.borrow();
                let mut contrib = vec![0.0f32; g.len()];
                let mut y = Vec::with_capacity(lane_len);
                let mut gy = Vec::with_capacity(lane_len);
                let mut gx = vec![0.0f32; lane_len];
                for lane in 0..lanes {
                    gather(&oi.data, lane, &mut y);
                    gather(&g, lane, &mut gy);
                    softmax_lane_backward(&y, &gy, &mut gx);
                    if contiguous {
                        contrib[lane * lane_len..(lane + 1) * lane_len].copy_from_slice(&gx);
                    } else {
                        for (i, &v) in gx.iter().enumerate() {
                            contrib[lane + i * stride] = v;
                        }
                    }
                }
                contrib
            };
            a2.accumulate_grad(&contrib);
        });
    }
    Ok(out)
}

/// Row-wise softmax of a[m,n] restricted to columns where mask is true.
/// Masked columns get probability 0; a row with no unmasked column comes out
/// as all zeros instead of NaN.
pub fn masked_softmax_rows(a: &Tensor, mask: &[bool]) -> OpResult {
    let (m, n) = a.dims2("masked_softmax_rows")?;
    if mask.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "masked_softmax_rows",
            lhs: a.shape(),
            rhs: vec![mask.len()],
        });
    }
    let live: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
    let data = {
        let ai = a.inner.borrow();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            if live.is_empty() {
                continue;
            }
            let row = &ai.data[i * n..(i + 1) * n];
            let max = live
                .iter()
                .map(|&j| row[j])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &j in &live {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e as f64;
            }
            for &j in &live {
                out[i * n + j] = (out[i * n + j] as f64 / sum) as f32;
            }
        }
        out
    };
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, vec![m, n], rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let contrib = {
                let oi = o2.inner.borrow();
                let mut contrib = vec![0.0f32; m * n];
                for i in 0..m {
                    let y = &oi.data[i * n..(i + 1) * n];
                    let mut dot = 0.0f64;
                    for &j in &live {
                        dot += y[j] as f64 * g[i * n + j] as f64;
                    }
                    for &j in &live {
                        contrib[i * n + j] = (y[j] as f64 * (g[i * n + j] as f64 - dot)) as f32;
                    }
                }
                contrib
            };
            a2.accumulate_grad(&contrib);
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

/// Concatenate along `axis` (1-d: axis 0; 2-d: axis 0 or 1).
pub fn concat(parts: &[Tensor], axis: usize) -> OpResult {
    let first = parts.first().ok_or(TensorError::Unsupported {
        op: "concat",
        msg: "empty input list".to_string(),
    })?;
    let base = first.shape();
    if axis >= base.len() || base.len() > 2 {
        return Err(TensorError::BadAxis {
            op: "concat",
            axis,
            shape: base,
        });
    }
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (&a, &b))| d == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s,
            });
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();

    let rows = |s: &[usize]| if s.len() == 2 { s[0] } else { 1 };
    let data = if base.len() == 1 || axis == 0 {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.inner.borrow().data);
        }
        data
    } else {
        // axis 1: interleave rows
        let m = rows(&base);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for i in 0..m {
            for p in parts {
                let pi = p.inner.borrow();
                let w = pi.shape[1];
                data.extend_from_slice(&pi.data[i * w..(i + 1) * w]);
            }
        }
        data
    };
    let rg = parts.iter().any(Tensor::requires_grad);
    let out = Tensor::from_op(data, out_shape.clone(), rg);
    if rg && tape_active() {
        let parts2: Vec<Tensor> = parts.to_vec();
        let o2 = out.clone();
        let base_len = base.len();
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            if base_len == 1 || axis == 0 {
                let mut offset = 0;
                for p in &parts2 {
                    let len = p.numel();
                    if p.requires_grad() {
                        p.accumulate_grad(&g[offset..offset + len]);
                    }
                    offset += len;
                }
            } else {
                let m = parts2[0].shape()[0];
                let total_w: usize = parts2.iter().map(|p| p.shape()[1]).sum();
                let mut col = 0;
                for p in &parts2 {
                    let w = p.shape()[1];
                    if p.requires_grad() {
                        let mut contrib = Vec::with_capacity(m * w);
                        for i in 0..m {
                            contrib.extend_from_slice(&g[i * total_w + col..i * total_w + col + w]);
                        }
                        p.accumulate_grad(&contrib);
                    }
                    col += w;
                }
            }
        });
    }
    Ok(out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> OpResult {
    let numel: usize = shape.iter().product();
    if numel != a.numel() || shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len: a.numel(),
        });
    }
    let data = a.inner.borrow().data.clone();
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, shape.to_vec(), rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            if let Some(g) = o2.take_grad_for_backprop() {
                a2.accumulate_grad(&g);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

fn reduce_impl(a: &Tensor, mean: bool) -> Tensor {
    let (total, n) = {
        let ai = a.inner.borrow();
        let mut acc = 0.0f64;
        for &x in &ai.data {
            acc += x as f64;
        }
        (acc, ai.data.len())
    };
    let denom = if mean { n as f64 } else { 1.0 };
    let rg = a.requires_grad();
    let out = Tensor::from_op(vec![(total / denom) as f32], vec![1], rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let gv = g[0] / denom as f32;
            a2.accumulate_grad(&vec![gv; n]);
        });
    }
    out
}

/// Sum of all elements as a scalar; f64 accumulation.
pub fn sum(a: &Tensor) -> OpResult {
    Ok(reduce_impl(a, false))
}

pub fn mean(a: &Tensor) -> OpResult {
    Ok(reduce_impl(a, true))
}

// ---------------------------------------------------------------------------
// row gather / normalize
// ---------------------------------------------------------------------------

/// Select rows of a[v,d] by index; backward scatter-adds into the source
/// rows (duplicate ids accumulate).
pub fn gather_rows(a: &Tensor, ids: &[usize]) -> OpResult {
    let (v, d) = a.dims2("gather_rows")?;
    for &id in ids {
        if id >= v {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: id,
                limit: v,
            });
        }
    }
    let data = {
        let ai = a.inner.borrow();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&ai.data[id * d..(id + 1) * d]);
        }
        out
    };
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, vec![ids.len(), d], rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        let ids2 = ids.to_vec();
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let mut contrib = vec![0.0f32; v * d];
            for (r, &id) in ids2.iter().enumerate() {
                for j in 0..d {
                    contrib[id * d + j] += g[r * d + j];
                }
            }
            a2.accumulate_grad(&contrib);
        });
    }
    Ok(out)
}

const L2_EPS: f64 = 1e-12;

/// Scale each row of a[m,n] to unit L2 norm (rows with norm below 1e-12 are
/// left as computed against that floor).
pub fn l2_normalize_rows(a: &Tensor) -> OpResult {
    let (m, n) = a.dims2("l2_normalize_rows")?;
    let (data, norms) = {
        let ai = a.inner.borrow();
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &ai.data[i * n..(i + 1) * n];
            let mut sq = 0.0f64;
            for &x in row {
                sq += x as f64 * x as f64;
            }
            let norm = sq.sqrt().max(L2_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
        (out, norms)
    };
    let rg = a.requires_grad();
    let out = Tensor::from_op(data, vec![m, n], rg);
    if rg && tape_active() {
        let (a2, o2) = (a.clone(), out.clone());
        tape_record(move || {
            let Some(g) = o2.take_grad_for_backprop() else {
                return;
            };
            let contrib = {
                let oi = o2.inner.borrow();
                let mut contrib = vec![0.0f32; m * n];
                for i in 0..m {
                    let y = &oi.data[i * n..(i + 1) * n];
                    let gy = &g[i * n..(i + 1) * n];
                    let mut dot = 0.0f64;
                    for (&yv, &gv) in y.iter().zip(gy) {
                        dot += yv as f64 * gv as f64;
                    }
                    for j in 0..n {
                        contrib[i * n + j] =
                            ((gy[j] as f64 - y[j] as f64 * dot) / norms[i]) as f32;
                    }
                }
                contrib
            };
            a2.accumulate_grad(&contrib);
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::prelude::*;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    /// Random values bounded away from zero so kinked ops (relu, clamp)
    /// stay differentiable at the sampled points.
    fn sample_away_from_kinks(rng: &mut StdRng, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let mag = rng.random_range(0.2f32..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    }

    /// Central-difference gradient check of `build` (a scalar function of the
    /// given parameters).
    fn fd_check(params: &[Tensor], build: &dyn Fn() -> Tensor) {
        let grads: Vec<Vec<f32>> = {
            let tape = Tape::new();
            let loss = build();
            tape.backward(&loss).unwrap();
            params
                .iter()
                .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect()
        };
        for p in params {
            p.zero_grad();
        }
        let h = 1e-3f32;
        for (pi, p) in params.iter().enumerate() {
            let base = p.data();
            for k in 0..base.len() {
                let mut pert = base.clone();
                pert[k] = base[k] + h;
                p.set_data(&pert).unwrap();
                let up = build().value() as f64;
                pert[k] = base[k] - h;
                p.set_data(&pert).unwrap();
                let down = build().value() as f64;
                p.set_data(&base).unwrap();
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads[pi][k] as f64;
                let denom = an.abs().max(fd.abs()).max(0.05);
                assert!(
                    ((an - fd) / denom).abs() < 1e-2,
                    "param {pi} elem {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let w: Vec<f32> = (0..t.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(w, &t.shape()).unwrap();
        sum(&mul(t, &w).unwrap()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::new(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), vec![2, 2]);
        assert_eq!(c.data(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut r = rng(11);
        let a_data: Vec<f32> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let b_data: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = Tensor::new(a_data, &[3, 2]).unwrap();
        let b = Tensor::new(b_data.clone(), &[4, 2]).unwrap();
        let mut bt_data = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..2 {
                bt_data[j * 4 + i] = b_data[i * 2 + j];
            }
        }
        let bt = Tensor::new(bt_data, &[2, 4]).unwrap();
        let via_nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul_naive(&a, &bt).unwrap();
        assert_eq!(via_nt.data(), via_t.data());
    }

    #[test]
    fn matmul_gradients() {
        let mut r = rng(1);
        let a = Tensor::param((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), &[2, 3]).unwrap();
        let b = Tensor::param((0..12).map(|_| r.random_range(-1.0..1.0)).collect(), &[3, 4]).unwrap();
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&[a, b], &move || {
            weighted_sum(&matmul(&a2, &b2).unwrap(), 42)
        });
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut r = rng(2);
        let a = Tensor::param((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), &[2, 3]).unwrap();
        let b = Tensor::param((0..12).map(|_| r.random_range(-1.0..1.0)).collect(), &[4, 3]).unwrap();
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&[a, b], &move || {
            weighted_sum(&matmul_nt(&a2, &b2).unwrap(), 43)
        });
    }

    #[test]
    fn broadcast_add_row_vector() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![10.0, 20.0], &[2]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(c.data(), vec![11.0, 22.0, 13.0, 24.0]);
        // symmetric: small operand on the left
        let d = add(&b, &a).unwrap();
        assert_eq!(d.data(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_requires_trailing_suffix() {
        let a = Tensor::zeros(&[2, 3]);
        let col = Tensor::zeros(&[2]);
        assert!(add(&a, &col).is_err());
        let suffix = Tensor::zeros(&[3]);
        assert!(add(&a, &suffix).is_ok());
    }

    #[test]
    fn broadcast_gradients() {
        let mut r = rng(3);
        let a = Tensor::param((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), &[2, 3]).unwrap();
        let b = Tensor::param((0..3).map(|_| r.random_range(-1.0..1.0)).collect(), &[3]).unwrap();
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&[a.clone(), b.clone()], &move || {
            weighted_sum(&mul(&a2, &b2).unwrap(), 44)
        });
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&[a, b], &move || weighted_sum(&sub(&b2, &a2).unwrap(), 45));
    }

    #[test]
    fn unary_gradients() {
        let mut r = rng(4);
        let x = Tensor::param(sample_away_from_kinks(&mut r, 8), &[2, 4]).unwrap();
        for op in [relu, sigmoid, softplus, clamp01] {
            let x2 = x.clone();
            fd_check(&[x.clone()], &move || weighted_sum(&op(&x2).unwrap(), 46));
        }
        let pos = Tensor::param((0..8).map(|_| r.random_range(0.3f32..2.0)).collect(), &[8]).unwrap();
        let p2 = pos.clone();
        fd_check(&[pos], &move || weighted_sum(&sqrt(&p2).unwrap(), 47));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::new(vec![-1e3, 1e3, 0.0], &[3]).unwrap();
        let y = sigmoid(&x).unwrap().data();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 1.0);
        assert_eq!(y[2], 0.5);
        let sp = softplus(&x).unwrap().data();
        assert!(sp.iter().all(|v| v.is_finite()));
        assert_eq!(sp[1], 1e3);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(5);
        let x = Tensor::new((0..12).map(|_| r.random_range(-5.0..5.0)).collect(), &[3, 4]).unwrap();
        for axis in [0, 1] {
            let y = softmax(&x, axis).unwrap();
            let d = y.data();
            let (lanes, lane_len, stride) = if axis == 1 { (3, 4, 1) } else { (4, 3, 4) };
            for lane in 0..lanes {
                let s: f32 = (0..lane_len)
                    .map(|i| {
                        if stride == 1 {
                            d[lane * lane_len + i]
                        } else {
                            d[lane + i * stride]
                        }
                    })
                    .sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_gradients() {
        let mut r = rng(6);
        let x = Tensor::param((0..12).map(|_| r.random_range(-2.0..2.0)).collect(), &[3, 4]).unwrap();
        for axis in [0, 1] {
            let x2 = x.clone();
            fd_check(&[x.clone()], &move || {
                weighted_sum(&softmax(&x2, axis).unwrap(), 48)
            });
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let y = masked_softmax_rows(&x, &[true, false, true]).unwrap().data();
        assert_eq!(y[1], 0.0);
        assert!((y[0] + y[2] - 1.0).abs() < 1e-6);
        let z = masked_softmax_rows(&x, &[false, false, false]).unwrap();
        assert_eq!(z.data(), vec![0.0; 6]);
    }

    #[test]
    fn masked_softmax_gradients() {
        let mut r = rng(7);
        let x = Tensor::param((0..12).map(|_| r.random_range(-2.0..2.0)).collect(), &[3, 4]).unwrap();
        let mask = [true, false, true, true];
        let x2 = x.clone();
        fd_check(&[x], &move || {
            weighted_sum(&masked_softmax_rows(&x2, &mask).unwrap(), 49)
        });
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0], &[1, 2]).unwrap();
        let c0 = concat(&[a.clone(), b], 0).unwrap();
        assert_eq!(c0.shape(), vec![3, 2]);
        assert_eq!(c0.data(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = Tensor::new(vec![7.0, 8.0], &[2, 1]).unwrap();
        let c1 = concat(&[a, d], 1).unwrap();
        assert_eq!(c1.shape(), vec![2, 3]);
        assert_eq!(c1.data(), vec![1.0, 2.0, 7.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn concat_gradients() {
        let mut r = rng(8);
        let a = Tensor::param((0..4).map(|_| r.random_range(-1.0..1.0)).collect(), &[2, 2]).unwrap();
        let b = Tensor::param((0..2).map(|_| r.random_range(-1.0..1.0)).collect(), &[2, 1]).unwrap();
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&[a.clone(), b.clone()], &move || {
            weighted_sum(&concat(&[a2.clone(), b2.clone()], 1).unwrap(), 50)
        });
        let (a2, b2) = (a.clone(), b.clone());
        fd_check(&[a, b], &move || {
            let br = reshape(&b2, &[1, 2]).unwrap();
            weighted_sum(&concat(&[a2.clone(), br], 0).unwrap(), 51)
        });
    }

    #[test]
    fn gather_rows_forward_and_duplicate_grad() {
        let w = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let tape = Tape::new();
        let g = gather_rows(&w, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = sum(&g).unwrap();
        tape.backward(&loss).unwrap();
        // row 2 picked twice, row 1 never
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(gather_rows(&w, &[3]).is_err());
    }

    #[test]
    fn scale_rows_matches_manual_and_grads() {
        let mut r = rng(9);
        let a = Tensor::param((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), &[3, 2]).unwrap();
        let s = Tensor::param((0..3).map(|_| r.random_range(-1.0..1.0)).collect(), &[3]).unwrap();
        let out = scale_rows(&a, &s).unwrap().data();
        let (ad, sd) = (a.data(), s.data());
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(out[i * 2 + j], ad[i * 2 + j] * sd[i]);
            }
        }
        let (a2, s2) = (a.clone(), s.clone());
        fd_check(&[a, s], &move || {
            weighted_sum(&scale_rows(&a2, &s2).unwrap(), 52)
        });
    }

    #[test]
    fn l2_normalize_rows_unit_norm_and_grads() {
        let mut r = rng(10);
        let a = Tensor::param(
            (0..8).map(|_| r.random_range(0.3f32..1.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
            &[2, 4],
        )
        .unwrap();
        let y = l2_normalize_rows(&a).unwrap().data();
        for i in 0..2 {
            let n: f32 = y[i * 4..(i + 1) * 4].iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let a2 = a.clone();
        fd_check(&[a], &move || {
            weighted_sum(&l2_normalize_rows(&a2).unwrap(), 53)
        });
    }

    #[test]
    fn mean_and_sum_gradients() {
        let mut r = rng(12);
        let a = Tensor::param((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), &[6]).unwrap();
        let a2 = a.clone();
        fd_check(&[a.clone()], &move || mean(&a2).unwrap());
        let a2 = a.clone();
        fd_check(&[a], &move || sum(&a2).unwrap());
    }

    #[test]
    fn scale_and_reshape_gradients() {
        let mut r = rng(13);
        let a = Tensor::param((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), &[2, 3]).unwrap();
        let a2 = a.clone();
        fd_check(&[a.clone()], &move || {
            weighted_sum(&scale(&a2, -2.5).unwrap(), 54)
        });
        let a2 = a.clone();
        fd_check(&[a], &move || {
            weighted_sum(&reshape(&a2, &[3, 2]).unwrap(), 55)
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn blocked_matmul_is_bit_identical_to_naive(
            m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in 0u64..1000
        ) {
            let mut r = rng(seed);
            let a = Tensor::new((0..m * k).map(|_| r.random_range(-1e3f32..1e3)).collect(), &[m, k]).unwrap();
            let b = Tensor::new((0..k * n).map(|_| r.random_range(-1e3f32..1e3)).collect(), &[k, n]).unwrap();
            let fast = matmul(&a, &b).unwrap().data();
            let slow = matmul_naive(&a, &b).unwrap().data();
            for (x, y) in fast.iter().zip(&slow) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        #[test]
        fn ops_stay_finite_on_bounded_inputs(
            m in 1usize..6, n in 1usize..6, seed in 0u64..1000
        ) {
            let mut r = rng(seed);
            let a = Tensor::new((0..m * n).map(|_| r.random_range(-1e3f32..1e3)).collect(), &[m, n]).unwrap();
            let b = Tensor::new((0..m * n).map(|_| r.random_range(-1e3f32..1e3)).collect(), &[m, n]).unwrap();
            let s = Tensor::new((0..m).map(|_| r.random_range(-1e3f32..1e3)).collect(), &[m]).unwrap();
            let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
            let all_finite = |t: &Tensor| t.data().iter().all(|v| v.is_finite());
            for t in [
                matmul_nt(&a, &b).unwrap(),
                add(&a, &b).unwrap(),
                sub(&a, &b).unwrap(),
                mul(&a, &b).unwrap(),
                scale(&a, 3.0).unwrap(),
                scale_rows(&a, &s).unwrap(),
                relu(&a).unwrap(),
                sigmoid(&a).unwrap(),
                softplus(&a).unwrap(),
                clamp01(&a).unwrap(),
                softmax(&a, 1).unwrap(),
                softmax(&a, 0).unwrap(),
                masked_softmax_rows(&a, &mask).unwrap(),
                l2_normalize_rows(&a).unwrap(),
                sum(&a).unwrap(),
                mean(&a).unwrap(),
            ] {
                prop_assert!(all_finite(&t));
            }
            let pos = relu(&a).unwrap();
            prop_assert!(all_finite(&sqrt(&pos).unwrap()));
        }
    }
}
