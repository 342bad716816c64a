//! Per-layer forward and backward kernels.
//!
//! All kernels are pure functions over tensors. Backward passes are
//! hand-derived; the finite-difference suite in `verify` checks every one of
//! them against central differences.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch statistics captured by a train-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Materialize the [cols, rows] transpose of a row-major [rows, cols] slab.
fn transposed(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// y = x·Wᵀ + b for a batch: x is [B, in], weight [out, in], bias [out].
///
/// The weight is transposed once so the inner loop is a contiguous
/// multiply-add over outputs, and four batch rows are processed together
/// to reuse each weight row; this is what keeps big-batch rounds cheap on
/// one core.
pub fn fc_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_w, in_w) = (weight.shape()[0], weight.shape()[1]);
    let b = x.shape()[0];
    let xd = x.data();
    let bd = bias.data();
    let wt = transposed(weight.data(), out_w, in_w);
    let mut out = vec![0.0; b * out_w];
    for row in out.chunks_exact_mut(out_w) {
        row.copy_from_slice(bd);
    }
    let mut bi = 0;
    while bi + 4 <= b {
        let x0 = &xd[bi * in_w..(bi + 1) * in_w];
        let x1 = &xd[(bi + 1) * in_w..(bi + 2) * in_w];
        let x2 = &xd[(bi + 2) * in_w..(bi + 3) * in_w];
        let x3 = &xd[(bi + 3) * in_w..(bi + 4) * in_w];
        let rows = &mut out[bi * out_w..(bi + 4) * out_w];
        let (r0, rest) = rows.split_at_mut(out_w);
        let (r1, rest) = rest.split_at_mut(out_w);
        let (r2, r3) = rest.split_at_mut(out_w);
        for p in 0..in_w {
            let wrow = &wt[p * out_w..(p + 1) * out_w];
            let (a0, a1, a2, a3) = (x0[p], x1[p], x2[p], x3[p]);
            for j in 0..out_w {
                r0[j] += a0 * wrow[j];
                r1[j] += a1 * wrow[j];
                r2[j] += a2 * wrow[j];
                r3[j] += a3 * wrow[j];
            }
        }
        bi += 4;
    }
    while bi < b {
        let xrow = &xd[bi * in_w..(bi + 1) * in_w];
        let orow = &mut out[bi * out_w..(bi + 1) * out_w];
        for (p, &a) in xrow.iter().enumerate() {
            let wrow = &wt[p * out_w..(p + 1) * out_w];
            for j in 0..out_w {
                orow[j] += a * wrow[j];
            }
        }
        bi += 1;
    }
    Tensor::new(vec![b, out_w], out)
}

/// Gradients of the fully connected layer. Returns (dweight, dbias, dx).
///
/// Four batch rows are folded into the weight-gradient slab per pass so
/// the slab is streamed a quarter as often; the input gradient shares the
/// same sweep over each weight row.
pub fn fc_backward(x: &Tensor, weight: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (out_w, in_w) = (weight.shape()[0], weight.shape()[1]);
    let b = x.shape()[0];
    let xd = x.data();
    let wd = weight.data();
    let dd = delta.data();
    let mut dw = vec![0.0; out_w * in_w];
    let mut db = vec![0.0; out_w];
    let mut dx = vec![0.0; b * in_w];
    let mut bi = 0;
    while bi + 4 <= b {
        let x0 = &xd[bi * in_w..(bi + 1) * in_w];
        let x1 = &xd[(bi + 1) * in_w..(bi + 2) * in_w];
        let x2 = &xd[(bi + 2) * in_w..(bi + 3) * in_w];
        let x3 = &xd[(bi + 3) * in_w..(bi + 4) * in_w];
        let rows = &mut dx[bi * in_w..(bi + 4) * in_w];
        let (g0, rest) = rows.split_at_mut(in_w);
        let (g1, rest) = rest.split_at_mut(in_w);
        let (g2, g3) = rest.split_at_mut(in_w);
        for o in 0..out_w {
            let d0 = dd[bi * out_w + o];
            let d1 = dd[(bi + 1) * out_w + o];
            let d2 = dd[(bi + 2) * out_w + o];
            let d3 = dd[(bi + 3) * out_w + o];
            db[o] += d0 + d1 + d2 + d3;
            let wrow = &wd[o * in_w..(o + 1) * in_w];
            let dwrow = &mut dw[o * in_w..(o + 1) * in_w];
            for i in 0..in_w {
                dwrow[i] += d0 * x0[i] + d1 * x1[i] + d2 * x2[i] + d3 * x3[i];
                let w = wrow[i];
                g0[i] += d0 * w;
                g1[i] += d1 * w;
                g2[i] += d2 * w;
                g3[i] += d3 * w;
            }
        }
        bi += 4;
    }
    while bi < b {
        let xrow = &xd[bi * in_w..(bi + 1) * in_w];
        let drow = &dd[bi * out_w..(bi + 1) * out_w];
        let dxrow = &mut dx[bi * in_w..(bi + 1) * in_w];
        for (o, &dv) in drow.iter().enumerate() {
            db[o] += dv;
            let wrow = &wd[o * in_w..(o + 1) * in_w];
            let dwrow = &mut dw[o * in_w..(o + 1) * in_w];
            for i in 0..in_w {
                dwrow[i] += dv * xrow[i];
                dxrow[i] += dv * wrow[i];
            }
        }
        bi += 1;
    }
    Ok((
        Tensor::new(vec![out_w, in_w], dw)?,
        Tensor::new(vec![out_w], db)?,
        Tensor::new(vec![b, in_w], dx)?,
    ))
}

/// Valid (no padding) 2-d convolution: x [B,C,H,W], weight [O,C,k,k].
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    let (o_ch, _, k, _) = dims4(weight)?;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0; b * o_ch * oh * ow];
    for bi in 0..b {
        for o in 0..o_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            let xoff = ((bi * c + ci) * h + oy * stride + ky) * w + ox * stride;
                            let woff = ((o * c + ci) * k + ky) * k;
                            for kx in 0..k {
                                acc += xd[xoff + kx] * wd[woff + kx];
                            }
                        }
                    }
                    out[((bi * o_ch + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o_ch, oh, ow], out)
}

/// Gradients of the convolution. Returns (dweight, dbias, dx).
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    delta: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = dims4(x)?;
    let (o_ch, _, k, _) = dims4(weight)?;
    let (_, _, oh, ow) = dims4(delta)?;
    let xd = x.data();
    let wd = weight.data();
    let dd = delta.data();
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; o_ch];
    let mut dx = vec![0.0; x.len()];
    for bi in 0..b {
        for o in 0..o_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dv = dd[((bi * o_ch + o) * oh + oy) * ow + ox];
                    db[o] += dv;
                    for ci in 0..c {
                        for ky in 0..k {
                            let xoff = ((bi * c + ci) * h + oy * stride + ky) * w + ox * stride;
                            let woff = ((o * c + ci) * k + ky) * k;
                            for kx in 0..k {
                                dw[woff + kx] += dv * xd[xoff + kx];
                                dx[xoff + kx] += dv * wd[woff + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![o_ch], db)?,
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Shape(format!("expected rank 4, got {:?}", t.shape()))),
    }
}

/// Element count per feature and stride layout for batch-norm reductions.
///
/// Features sit on axis 1; [B, F] normalizes over the batch, [B, F, H, W]
/// over batch and both spatial axes.
fn bn_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, f] => Ok((b, f, 1)),
        [b, f, h, w] => Ok((b, f, h * w)),
        _ => Err(Error::Shape(format!(
            "batch norm wants rank 2 or 4 input, got {:?}",
            x.shape()
        ))),
    }
}

/// Train-mode batch norm: normalize per feature with biased batch variance,
/// then apply the affine transform. Also returns the batch statistics.
pub fn batchnorm_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, BnStats)> {
    let (b, f, sp) = bn_layout(x)?;
    if b == 0 {
        return Err(Error::Domain("batch norm over an empty batch".into()));
    }
    if gamma.len() != f || beta.len() != f {
        return Err(Error::Shape(format!(
            "batch norm with {f} features, gamma {} beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let n = (b * sp) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for bi in 0..b {
        for fi in 0..f {
            let off = (bi * f + fi) * sp;
            for s in 0..sp {
                mean[fi] += xd[off + s];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for bi in 0..b {
        for fi in 0..f {
            let off = (bi * f + fi) * sp;
            for s in 0..sp {
                let d = xd[off + s] - mean[fi];
                var[fi] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    if let Some(fi) = var.iter().position(|&v| v + epsilon <= 0.0) {
        return Err(Error::Domain(format!(
            "batch norm feature {fi}: variance {} + epsilon {epsilon} not positive",
            var[fi]
        )));
    }
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            let inv = 1.0 / (var[fi] + epsilon).sqrt();
            let off = (bi * f + fi) * sp;
            for s in 0..sp {
                out[off + s] = gd[fi] * (xd[off + s] - mean[fi]) * inv + bd[fi];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, BnStats { mean, var }))
}

/// Eval-mode batch norm using tracked running statistics.
pub fn batchnorm_forward_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let (b, f, sp) = bn_layout(x)?;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let rm = running_mean.data();
    let rv = running_var.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            let inv = 1.0 / (rv[fi] + epsilon).sqrt();
            let off = (bi * f + fi) * sp;
            for s in 0..sp {
                out[off + s] = gd[fi] * (xd[off + s] - rm[fi]) * inv + bd[fi];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Batch-norm backward. Returns (dgamma, dbeta, dx).
///
/// With x̂ the normalized input and N the per-feature element count:
///   dγ = Σ δ·x̂,  dβ = Σ δ,
///   dx = γ/√(v+ε) · (δ − mean(δ) − x̂·mean(δ·x̂)).
/// γ = 0 therefore makes dx exactly zero.
pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    epsilon: f64,
    delta: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, f, sp) = bn_layout(x)?;
    let n = (b * sp) as f64;
    let xd = x.data();
    let dd = delta.data();
    let gd = gamma.data();
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for bi in 0..b {
        for fi in 0..f {
            let inv = 1.0 / (stats.var[fi] + epsilon).sqrt();
            let off = (bi * f + fi) * sp;
            for s in 0..sp {
                let xh = (xd[off + s] - stats.mean[fi]) * inv;
                dgamma[fi] += dd[off + s] * xh;
                dbeta[fi] += dd[off + s];
            }
        }
    }
    let mut dx = vec![0.0; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            let inv = 1.0 / (stats.var[fi] + epsilon).sqrt();
            let off = (bi * f + fi) * sp;
            for s in 0..sp {
                let xh = (xd[off + s] - stats.mean[fi]) * inv;
                dx[off + s] =
                    gd[fi] * inv * (dd[off + s] - dbeta[fi] / n - xh * dgamma[fi] / n);
            }
        }
    }
    Ok((
        Tensor::new(vec![f], dgamma)?,
        Tensor::new(vec![f], dbeta)?,
        Tensor::new(x.shape().to_vec(), dx)?,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(x: &Tensor, delta: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn flatten_forward(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    x.reshape(vec![b, rest])
}
