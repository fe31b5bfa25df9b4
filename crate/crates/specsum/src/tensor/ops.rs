//! Differentiable primitive operations.
//!
//! Every op computes its forward value eagerly and, when the output
//! requires gradients and the tape is recording, registers a backward
//! closure. Closures read the output gradient and accumulate into the
//! input gradients; a tensor used twice receives both contributions.

use rand::Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Matrix product of `a [m×k]` and `b [k×n]`.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: ash,
            rhs: bsh,
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let out_data = mm_nn(&a.data(), &b.data(), m, k, n);
    let out = Tensor::from_vec(&[m, n], out_data)?;
    if a.requires_grad() || b.requires_grad() {
        let out = propagate(out);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            if a2.requires_grad() {
                // dA = dC · B^T
                let da = mm_nt(&go, &b2.data(), m, n, k);
                a2.accumulate_grad(&da);
            }
            if b2.requires_grad() {
                // dB = A^T · dC
                let db = mm_tn(&a2.data(), &go, k, m, n);
                b2.accumulate_grad(&db);
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// 2-D transpose.
pub fn transpose(tape: &Tape, x: &Tensor) -> Tensor {
    let sh = x.shape();
    assert_eq!(sh.len(), 2, "transpose expects a 2-D tensor");
    let (m, n) = (sh[0], sh[1]);
    let xd = x.data();
    let mut out_data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out_data[j * m + i] = xd[i * n + j];
        }
    }
    drop(xd);
    let out = Tensor::from_vec(&[n, m], out_data).expect("transpose shape");
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = go[j * m + i];
                }
            }
            x2.accumulate_grad(&dx);
        });
        return out;
    }
    out
}

/// Element-wise sum of two same-shape tensors.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_same_shape(tape, a, b, "add", |x, y| x + y, 1.0)
}

/// Element-wise difference `a - b`.
pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary_same_shape(tape, a, b, "sub", |x, y| x - y, -1.0)
}

fn binary_same_shape(
    tape: &Tape,
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: fn(f64, f64) -> f64,
    b_grad_sign: f64,
) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash != bsh {
        return Err(Error::Shape {
            op,
            lhs: ash,
            rhs: bsh,
        });
    }
    let out_data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    let out = Tensor::from_vec(&ash, out_data)?;
    if a.requires_grad() || b.requires_grad() {
        let out = propagate(out);
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            if a2.requires_grad() {
                a2.accumulate_grad(&go);
            }
            if b2.requires_grad() {
                let db: Vec<f64> = go.iter().map(|g| g * b_grad_sign).collect();
                b2.accumulate_grad(&db);
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Multiply every element by a constant.
pub fn scale(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    let out_data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    let out = Tensor::from_vec(&x.shape(), out_data).expect("scale preserves shape");
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let dx: Vec<f64> = go.iter().map(|g| g * c).collect();
            x2.accumulate_grad(&dx);
        });
        return out;
    }
    out
}

/// Add a bias row-vector `b [n]` to every row of `x [m×n]`.
pub fn add_bias(tape: &Tape, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xsh, bsh) = (x.shape(), b.shape());
    if xsh.len() != 2 || bsh.len() != 1 || bsh[0] != xsh[1] {
        return Err(Error::Shape {
            op: "add_bias",
            lhs: xsh,
            rhs: bsh,
        });
    }
    let (m, n) = (xsh[0], xsh[1]);
    let bd = b.to_vec();
    let out_data: Vec<f64> = x
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(&bd).map(|(&v, &bv)| v + bv).collect::<Vec<_>>())
        .collect();
    let out = Tensor::from_vec(&xsh, out_data)?;
    if x.requires_grad() || b.requires_grad() {
        let out = propagate(out);
        let (x2, b2, o2) = (x.clone(), b.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            if x2.requires_grad() {
                x2.accumulate_grad(&go);
            }
            if b2.requires_grad() {
                let mut db = vec![0.0; n];
                for row in go.chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                b2.accumulate_grad(&db);
            }
            let _ = m;
        });
        return Ok(out);
    }
    Ok(out)
}

/// Scale each column `j` of `x [m×n]` by gain `g[j]` (layer-norm affine).
pub fn mul_cols(tape: &Tape, x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (xsh, gsh) = (x.shape(), g.shape());
    if xsh.len() != 2 || gsh.len() != 1 || gsh[0] != xsh[1] {
        return Err(Error::Shape {
            op: "mul_cols",
            lhs: xsh,
            rhs: gsh,
        });
    }
    let n = xsh[1];
    let gd = g.to_vec();
    let out_data: Vec<f64> = x
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(&gd).map(|(&v, &gv)| v * gv).collect::<Vec<_>>())
        .collect();
    let out = Tensor::from_vec(&xsh, out_data)?;
    if x.requires_grad() || g.requires_grad() {
        let out = propagate(out);
        let (x2, g2, o2) = (x.clone(), g.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            if x2.requires_grad() {
                let gd = g2.to_vec();
                let dx: Vec<f64> = go
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(&gd).map(|(&gv, &gg)| gv * gg).collect::<Vec<_>>())
                    .collect();
                x2.accumulate_grad(&dx);
            }
            if g2.requires_grad() {
                let xd = x2.to_vec();
                let mut dg = vec![0.0; n];
                for (row_g, row_x) in go.chunks(n).zip(xd.chunks(n)) {
                    for j in 0..n {
                        dg[j] += row_g[j] * row_x[j];
                    }
                }
                g2.accumulate_grad(&dg);
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// GELU activation (tanh approximation), smooth everywhere.
pub fn gelu(tape: &Tape, x: &Tensor) -> Tensor {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let out_data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
        .collect();
    let out = Tensor::from_vec(&x.shape(), out_data).expect("gelu preserves shape");
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let xd = x2.to_vec();
            let dx: Vec<f64> = xd
                .iter()
                .zip(&go)
                .map(|(&v, &g)| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    let du = C * (1.0 + 3.0 * A * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du)
                })
                .collect();
            x2.accumulate_grad(&dx);
        });
        return out;
    }
    out
}

/// Numerically stable softmax along `axis` of a 2-D tensor (rows sum to
/// one for `axis = 1`). Rank-1 tensors use `axis = 0`.
pub fn softmax(tape: &Tape, x: &Tensor, axis: usize) -> Result<Tensor> {
    let sh = x.shape();
    if axis >= sh.len().max(1) {
        return Err(Error::Axis {
            op: "softmax",
            axis,
            shape: sh,
        });
    }
    // Normalize to a row-wise problem: axis 0 on 2-D works on the transpose.
    if sh.len() == 2 && axis == 0 {
        let xt = transpose(tape, x);
        let s = softmax(tape, &xt, 1)?;
        return Ok(transpose(tape, &s));
    }
    let n = *sh.last().unwrap_or(&1);
    let out_data: Vec<f64> = x.data().chunks(n).flat_map(softmax_slice).collect();
    let out = Tensor::from_vec(&sh, out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let yd = o2.to_vec();
            let mut dx = vec![0.0; yd.len()];
            for ((dx_row, y_row), g_row) in
                dx.chunks_mut(n).zip(yd.chunks(n)).zip(go.chunks(n))
            {
                let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                for j in 0..n {
                    dx_row[j] = y_row[j] * (g_row[j] - dot);
                }
            }
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Layer normalization along `axis` (zero mean, unit variance), eps 1e-5.
/// Affine gain/bias are composed separately via [`mul_cols`] / [`add_bias`].
pub fn layer_norm(tape: &Tape, x: &Tensor, axis: usize) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let sh = x.shape();
    if axis >= sh.len().max(1) {
        return Err(Error::Axis {
            op: "layer_norm",
            axis,
            shape: sh,
        });
    }
    if sh.len() == 2 && axis == 0 {
        let xt = transpose(tape, x);
        let nrm = layer_norm(tape, &xt, 1)?;
        return Ok(transpose(tape, &nrm));
    }
    let n = *sh.last().unwrap_or(&1);
    let xd = x.to_vec();
    let mut out_data = vec![0.0; xd.len()];
    let mut inv_stds = Vec::with_capacity(xd.len() / n);
    for (o_row, x_row) in out_data.chunks_mut(n).zip(xd.chunks(n)) {
        let mean = x_row.iter().sum::<f64>() / n as f64;
        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + EPS).sqrt();
        inv_stds.push(inv_std);
        for j in 0..n {
            o_row[j] = (x_row[j] - mean) * inv_std;
        }
    }
    let out = Tensor::from_vec(&sh, out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let yd = o2.to_vec();
            let mut dx = vec![0.0; yd.len()];
            for (r, ((dx_row, y_row), g_row)) in dx
                .chunks_mut(n)
                .zip(yd.chunks(n))
                .zip(go.chunks(n))
                .enumerate()
            {
                let inv_std = inv_stds[r];
                let mean_g = g_row.iter().sum::<f64>() / n as f64;
                let mean_gy: f64 =
                    g_row.iter().zip(y_row).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx_row[j] = inv_std * (g_row[j] - mean_g - y_row[j] * mean_gy);
                }
            }
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Inverted dropout with a mask drawn from `rng`; the mask is constant
/// for the step, so the op stays differentiable. `train = false` is the
/// identity.
pub fn dropout(
    tape: &Tape,
    x: &Tensor,
    rate: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::usage(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let out_data: Vec<f64> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let out = Tensor::from_vec(&x.shape(), out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let dx: Vec<f64> = go.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = widen).
pub fn concat(tape: &Tape, xs: &[Tensor], axis: usize) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::usage("concat of zero tensors"));
    }
    let first = xs[0].shape();
    if first.len() != 2 || axis > 1 {
        return Err(Error::Axis {
            op: "concat",
            axis,
            shape: first,
        });
    }
    let fixed = 1 - axis;
    for x in xs {
        let sh = x.shape();
        if sh.len() != 2 || sh[fixed] != first[fixed] {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: sh,
            });
        }
    }
    let (out, offsets) = if axis == 0 {
        let cols = first[1];
        let rows: usize = xs.iter().map(|x| x.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        let mut offsets = Vec::with_capacity(xs.len());
        let mut at = 0;
        for x in xs {
            offsets.push(at);
            at += x.numel();
            data.extend_from_slice(&x.data());
        }
        (Tensor::from_vec(&[rows, cols], data)?, offsets)
    } else {
        let rows = first[0];
        let cols: usize = xs.iter().map(|x| x.cols()).sum();
        let mut data = vec![0.0; rows * cols];
        let mut offsets = Vec::with_capacity(xs.len());
        let mut col_at = 0;
        for x in xs {
            offsets.push(col_at);
            let w = x.cols();
            let xd = x.data();
            for r in 0..rows {
                data[r * cols + col_at..r * cols + col_at + w]
                    .copy_from_slice(&xd[r * w..(r + 1) * w]);
            }
            col_at += w;
        }
        (Tensor::from_vec(&[rows, cols], data)?, offsets)
    };
    if xs.iter().any(|x| x.requires_grad()) {
        let out = propagate(out);
        let parts: Vec<Tensor> = xs.to_vec();
        let o2 = out.clone();
        let out_cols = out.cols();
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            for (x, &off) in parts.iter().zip(&offsets) {
                if !x.requires_grad() {
                    continue;
                }
                if axis == 0 {
                    x.accumulate_grad(&go[off..off + x.numel()]);
                } else {
                    let (rows, w) = (x.rows(), x.cols());
                    let mut dx = vec![0.0; rows * w];
                    for r in 0..rows {
                        dx[r * w..(r + 1) * w]
                            .copy_from_slice(&go[r * out_cols + off..r * out_cols + off + w]);
                    }
                    x.accumulate_grad(&dx);
                }
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Rows `[start, end)` of a 2-D tensor.
pub fn slice_rows(tape: &Tape, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 2 || start > end || end > sh[0] {
        return Err(Error::usage(format!(
            "slice_rows [{start}, {end}) out of range for shape {sh:?}"
        )));
    }
    let n = sh[1];
    let out_data = x.data()[start * n..end * n].to_vec();
    let out = Tensor::from_vec(&[end - start, n], out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        let total = sh[0];
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let mut dx = vec![0.0; total * n];
            dx[start * n..end * n].copy_from_slice(&go);
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Columns `[start, end)` of a 2-D tensor.
pub fn slice_cols(tape: &Tape, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 2 || start > end || end > sh[1] {
        return Err(Error::usage(format!(
            "slice_cols [{start}, {end}) out of range for shape {sh:?}"
        )));
    }
    let (m, n, w) = (sh[0], sh[1], end - start);
    let xd = x.data();
    let mut out_data = vec![0.0; m * w];
    for r in 0..m {
        out_data[r * w..(r + 1) * w].copy_from_slice(&xd[r * n + start..r * n + end]);
    }
    drop(xd);
    let out = Tensor::from_vec(&[m, w], out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                dx[r * n + start..r * n + end].copy_from_slice(&go[r * w..(r + 1) * w]);
            }
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Mean along `axis` of a 2-D tensor, producing a rank-1 tensor.
pub fn mean_pool(tape: &Tape, x: &Tensor, axis: usize) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 2 || axis > 1 {
        return Err(Error::Axis {
            op: "mean_pool",
            axis,
            shape: sh,
        });
    }
    let (m, n) = (sh[0], sh[1]);
    let xd = x.data();
    let (out_len, count) = if axis == 0 { (n, m) } else { (m, n) };
    let mut out_data = vec![0.0; out_len];
    for r in 0..m {
        for c in 0..n {
            let idx = if axis == 0 { c } else { r };
            out_data[idx] += xd[r * n + c];
        }
    }
    for v in &mut out_data {
        *v /= count as f64;
    }
    drop(xd);
    let out = Tensor::from_vec(&[out_len], out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    let idx = if axis == 0 { c } else { r };
                    dx[r * n + c] = go[idx] / count as f64;
                }
            }
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Mean over the rows of `x [T×d]` selected by a 0/1 `mask` of length T.
pub fn masked_mean_rows(tape: &Tape, x: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 2 || mask.len() != sh[0] {
        return Err(Error::usage(format!(
            "masked_mean_rows: mask length {} does not match {} rows",
            mask.len(),
            sh.first().copied().unwrap_or(0)
        )));
    }
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "masked_mean_rows over an all-masked tensor".into(),
        ));
    }
    let (m, n) = (sh[0], sh[1]);
    let xd = x.data();
    let mut out_data = vec![0.0; n];
    for r in 0..m {
        if mask[r] == 0.0 {
            continue;
        }
        for c in 0..n {
            out_data[c] += mask[r] * xd[r * n + c];
        }
    }
    for v in &mut out_data {
        *v /= total;
    }
    drop(xd);
    let out = Tensor::from_vec(&[n], out_data)?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        let mask = mask.to_vec();
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                if mask[r] == 0.0 {
                    continue;
                }
                for c in 0..n {
                    dx[r * n + c] = mask[r] * go[c] / total;
                }
            }
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// L_p norm over all entries, as a scalar.
pub fn lp_norm(tape: &Tape, x: &Tensor, p: f64) -> Result<Tensor> {
    if p < 1.0 {
        return Err(Error::usage(format!("lp_norm requires p >= 1, got {p}")));
    }
    let value = x
        .data()
        .iter()
        .map(|v| v.abs().powf(p))
        .sum::<f64>()
        .powf(1.0 / p);
    let out = Tensor::scalar(value);
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let g = go[0];
            let xd = x2.to_vec();
            let dx: Vec<f64> = if value <= 1e-300 {
                vec![0.0; xd.len()]
            } else {
                xd.iter()
                    .map(|&v| g * v.signum() * v.abs().powf(p - 1.0) * value.powf(1.0 - p))
                    .collect()
            };
            x2.accumulate_grad(&dx);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Squared Frobenius norm: sum of squared entries, as a scalar.
pub fn frobenius_sq(tape: &Tape, x: &Tensor) -> Tensor {
    let value: f64 = x.data().iter().map(|v| v * v).sum();
    let out = Tensor::scalar(value);
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let g = go[0];
            let dx: Vec<f64> = x2.to_vec().iter().map(|&v| 2.0 * v * g).collect();
            x2.accumulate_grad(&dx);
        });
        return out;
    }
    out
}

/// Sum of all entries, as a scalar.
pub fn sum(tape: &Tape, x: &Tensor) -> Tensor {
    let value: f64 = x.data().iter().sum();
    let out = Tensor::scalar(value);
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let dx = vec![go[0]; x2.numel()];
            x2.accumulate_grad(&dx);
        });
        return out;
    }
    out
}

/// Same data, new shape (element count must match).
pub fn reshape(tape: &Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: x.shape(),
            rhs: shape.to_vec(),
        });
    }
    let out = Tensor::from_vec(shape, x.to_vec())?;
    if x.requires_grad() {
        let out = propagate(out);
        let (x2, o2) = (x.clone(), out.clone());
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            x2.accumulate_grad(&go);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Row lookup: `out[t, :] = table[ids[t], :]`.
pub fn embedding(tape: &Tape, table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let sh = table.shape();
    if sh.len() != 2 {
        return Err(Error::usage("embedding table must be 2-D"));
    }
    let (v, d) = (sh[0], sh[1]);
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
        return Err(Error::usage(format!(
            "embedding id {bad} out of range for table with {v} rows"
        )));
    }
    let td = table.data();
    let mut out_data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out_data.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
    }
    drop(td);
    let out = Tensor::from_vec(&[ids.len(), d], out_data)?;
    if table.requires_grad() {
        let out = propagate(out);
        let (t2, o2) = (table.clone(), out.clone());
        let ids = ids.to_vec();
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let mut dt = vec![0.0; v * d];
            for (t, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                for (s, g) in dst.iter_mut().zip(&go[t * d..(t + 1) * d]) {
                    *s += g;
                }
            }
            t2.accumulate_grad(&dt);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Summed token cross-entropy of `logits [T×V]` against `targets [T]`,
/// skipping positions equal to `pad_id`. Returns the un-normalized sum;
/// callers divide by the non-pad count.
pub fn cross_entropy_sum(
    tape: &Tape,
    logits: &Tensor,
    targets: &[u32],
    pad_id: u32,
) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 || targets.len() != sh[0] {
        return Err(Error::usage(format!(
            "cross_entropy_sum: {} targets for logits shape {:?}",
            targets.len(),
            sh
        )));
    }
    let (t_len, v) = (sh[0], sh[1]);
    if let Some(&bad) = targets.iter().find(|&&y| y != pad_id && y as usize >= v) {
        return Err(Error::usage(format!(
            "cross_entropy_sum: target id {bad} out of range for vocab {v}"
        )));
    }
    let ld = logits.data();
    let mut total = 0.0;
    let mut probs = vec![0.0; t_len * v];
    for t in 0..t_len {
        let row = &ld[t * v..(t + 1) * v];
        let p = softmax_slice(row);
        if targets[t] != pad_id {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[t] as usize];
        }
        probs[t * v..(t + 1) * v].copy_from_slice(&p);
    }
    drop(ld);
    let out = Tensor::scalar(total);
    if logits.requires_grad() {
        let out = propagate(out);
        let (l2, o2) = (logits.clone(), out.clone());
        let targets = targets.to_vec();
        tape.record(&out, move || {
            let Some(go) = o2.grad_clone() else { return };
            let g = go[0];
            let mut dl = vec![0.0; t_len * v];
            for t in 0..t_len {
                if targets[t] == pad_id {
                    continue;
                }
                let p_row = &probs[t * v..(t + 1) * v];
                let d_row = &mut dl[t * v..(t + 1) * v];
                for j in 0..v {
                    d_row[j] = g * p_row[j];
                }
                d_row[targets[t] as usize] -= g;
            }
            l2.accumulate_grad(&dl);
        });
        return Ok(out);
    }
    Ok(out)
}

/// Stable softmax of one slice (no tape participation).
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Stable log-softmax of one slice (no tape participation).
pub fn log_softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn propagate(out: Tensor) -> Tensor {
    out.with_grad()
}

// ── Row-major matmul kernels ─────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] += a_il * b_row[j];
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_row[l] * b_row[l];
            }
            *c_ij = acc;
        }
    }
    c
}

/// C[m×n] = A[k×m]^T · B[k×n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let a_li = a[l * m + i];
            if a_li == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_li * b_row[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let out = matmul(&tape, &i2, &i2).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[1.0, 1.0]);
        let out = matmul(&tape, &a, &b).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = matmul(&tape, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity_on_well_conditioned_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let tape = Tape::inference();
            let a = Tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut rng);
            let c = Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut rng);
            let left = matmul(&tape, &matmul(&tape, &a, &b).unwrap(), &c).unwrap();
            let right = matmul(&tape, &a, &matmul(&tape, &b, &c).unwrap()).unwrap();
            for (l, r) in left.to_vec().iter().zip(right.to_vec()) {
                assert!((l - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frobenius_sq_hand_examples() {
        let tape = Tape::new();
        assert_eq!(frobenius_sq(&tape, &Tensor::zeros(&[3, 3])).item(), 0.0);
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(frobenius_sq(&tape, &a).item(), 30.0);
    }

    #[test]
    fn frobenius_grad_is_twice_input() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0, -2.0, 0.5, 4.0]).with_grad();
        let f = frobenius_sq(&tape, &a);
        tape.backward(&f).unwrap();
        let g = a.grad().unwrap();
        for (gi, ai) in g.iter().zip(a.to_vec()) {
            assert!((gi - 2.0 * ai).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let s = softmax(&tape, &x, 0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[5, 7], -4.0, 4.0, &mut rng);
        let s = softmax(&tape, &x, 1).unwrap();
        for row in s.to_vec().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let tape = Tape::new();
        let x = t2(3, 2, &[0.0, 5.0, 0.0, 5.0, 0.0, 5.0]);
        let s = softmax(&tape, &x, 0).unwrap();
        let sd = s.to_vec();
        for c in 0..2 {
            let col_sum: f64 = (0..3).map(|r| sd[r * 2 + c]).sum();
            assert!((col_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let tape = Tape::new();
        let x = t2(2, 2, &[0.0; 4]);
        assert!(matches!(
            softmax(&tape, &x, 2),
            Err(Error::Axis { op: "softmax", .. })
        ));
    }

    #[test]
    fn lp_norm_of_3_4_is_5() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert!((lp_norm(&tape, &x, 2.0).unwrap().item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = dropout(&tape, &x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_mask_is_seed_deterministic() {
        let once = |seed: u64| {
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::full(&[4, 4], 1.0);
            dropout(&tape, &x, 0.4, true, &mut rng).unwrap().to_vec()
        };
        assert_eq!(once(9), once(9));
        assert_ne!(once(9), once(10));
    }

    #[test]
    fn concat_axis0_then_slice_recovers_parts() {
        let tape = Tape::new();
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = concat(&tape, &[a, b], 0).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        let back = slice_rows(&tape, &c, 1, 3).unwrap();
        assert_eq!(back.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_axis1_widens() {
        let tape = Tape::new();
        let a = t2(2, 1, &[1.0, 2.0]);
        let b = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = concat(&tape, &[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = slice_cols(&tape, &c, 0, 1).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn embedding_looks_up_rows_and_scatters_grads() {
        let tape = Tape::new();
        let table = t2(3, 2, &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).with_grad();
        let out = embedding(&tape, &table, &[2, 0, 2]).unwrap();
        assert_eq!(out.to_vec(), vec![20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = sum(&tape, &out);
        tape.backward(&s).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let tape = Tape::new();
        let v = 13;
        let logits = Tensor::zeros(&[4, v]);
        let loss = cross_entropy_sum(&tape, &logits, &[1, 2, 3, 4], 0).unwrap();
        assert!((loss.item() / 4.0 - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_pad_positions() {
        let tape = Tape::new();
        let logits = Tensor::zeros(&[3, 5]);
        let with_pad = cross_entropy_sum(&tape, &logits, &[1, 0, 2], 0).unwrap();
        let without = cross_entropy_sum(&tape, &logits, &[1, 2], 0);
        // Sum over two non-pad rows only.
        assert!((with_pad.item() - 2.0 * (5.0f64).ln()).abs() < 1e-12);
        assert!(without.is_err()); // 2 targets vs 3 rows
    }

    #[test]
    fn mean_pool_axes() {
        let tape = Tape::new();
        let x = t2(2, 3, &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let rows = mean_pool(&tape, &x, 0).unwrap();
        assert_eq!(rows.to_vec(), vec![3.0, 4.0, 5.0]);
        let cols = mean_pool(&tape, &x, 1).unwrap();
        assert_eq!(cols.to_vec(), vec![2.0, 6.0]);
    }

    #[test]
    fn masked_mean_ignores_masked_rows() {
        let tape = Tape::new();
        let x = t2(3, 2, &[1.0, 2.0, 100.0, 200.0, 3.0, 4.0]);
        let m = masked_mean_rows(&tape, &x, &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.to_vec(), vec![2.0, 3.0]);
        assert!(masked_mean_rows(&tape, &x, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[4, 8], -3.0, 3.0, &mut rng);
        let y = layer_norm(&tape, &x, 1).unwrap();
        for row in y.to_vec().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
