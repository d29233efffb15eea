//! Neural-network building blocks composed from graph primitives.
//!
//! Convolution and pooling lower to im2col gathers feeding one matmul, so
//! every layer here inherits the exact first- and second-order adjoints of
//! the primitive op set. BatchNorm, softmax cross-entropy and total
//! variation are likewise compositions rather than bespoke adjoints.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

fn dims4(g: &Graph, x: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected (batch, channels, height, width)".into(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Flatten everything after the batch dimension.
pub fn flatten(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.is_empty() {
        return Err(Error::InvalidShape {
            op: "flatten",
            shape: s,
            reason: "needs a batch dimension".into(),
        });
    }
    let rest: usize = s[1..].iter().product();
    g.reshape(x, vec![s[0], rest])
}

/// Fully connected layer: `x (b, in) · wᵀ (in, out) + bias`.
pub fn dense(g: &mut Graph, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, weight, false, true)?;
    let (b, out) = (g.shape(xw)[0], g.shape(xw)[1]);
    let idx: Vec<i64> = (0..b * out).map(|i| (i % out) as i64).collect();
    let bb = g.gather(bias, Arc::new(idx), vec![b, out])?;
    g.add(xw, bb)
}

/// 2-D convolution over `(b, c_in, h, w)` with an `(out, c_in, kh, kw)`
/// kernel, lowered to im2col + matmul.
pub fn conv2d(
    g: &mut Graph,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let (b, ci, h, w) = dims4(g, x, "conv2d")?;
    let ws = g.shape(weight).to_vec();
    if ws.len() != 4 || ws[1] != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: g.shape(x).to_vec(),
            rhs: ws,
        });
    }
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw || stride == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: g.shape(x).to_vec(),
            reason: format!("kernel {}x{} stride {} padding {} does not fit", kh, kw, stride, padding),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    // im2col: rows are kernel positions, columns are output pixels.
    let cols_n = b * oh * ow;
    let mut idx = Vec::with_capacity(ci * kh * kw * cols_n);
    for cc in 0..ci {
        for di in 0..kh {
            for dj in 0..kw {
                for bi in 0..b {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let ii = (oi * stride + di) as i64 - padding as i64;
                            let jj = (oj * stride + dj) as i64 - padding as i64;
                            if ii < 0 || jj < 0 || ii >= h as i64 || jj >= w as i64 {
                                idx.push(-1);
                            } else {
                                idx.push(
                                    (((bi * ci + cc) * h + ii as usize) * w + jj as usize) as i64,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    let cols = g.gather(x, Arc::new(idx), vec![ci * kh * kw, cols_n])?;
    let wmat = g.reshape(weight, vec![co, ci * kh * kw])?;
    let prod = g.matmul(wmat, cols, false, false)?; // (co, b*oh*ow)

    // (co, b*oh*ow) -> (b, co, oh, ow)
    let mut perm = Vec::with_capacity(b * co * oh * ow);
    for bi in 0..b {
        for c in 0..co {
            for p in 0..oh * ow {
                perm.push((c * cols_n + bi * oh * ow + p) as i64);
            }
        }
    }
    let mut out = g.gather(prod, Arc::new(perm), vec![b, co, oh, ow])?;

    if let Some(bias) = bias {
        let bidx: Vec<i64> = (0..b * co * oh * ow)
            .map(|i| ((i / (oh * ow)) % co) as i64)
            .collect();
        let bb = g.gather(bias, Arc::new(bidx), vec![b, co, oh, ow])?;
        out = g.add(out, bb)?;
    }
    Ok(out)
}

/// Non-overlapping average pooling with a `k`×`k` window.
pub fn avgpool2d(g: &mut Graph, x: NodeId, k: usize) -> Result<NodeId> {
    let (b, c, h, w) = dims4(g, x, "avgpool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidShape {
            op: "avgpool2d",
            shape: g.shape(x).to_vec(),
            reason: format!("window {} must divide {}x{}", k, h, w),
        });
    }
    let (oh, ow) = (h / k, w / k);
    let cols_n = b * c * oh * ow;
    let mut idx = Vec::with_capacity(k * k * cols_n);
    for di in 0..k {
        for dj in 0..k {
            for bi in 0..b {
                for cc in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let ii = oi * k + di;
                            let jj = oj * k + dj;
                            idx.push((((bi * c + cc) * h + ii) * w + jj) as i64);
                        }
                    }
                }
            }
        }
    }
    let cols = g.gather(x, Arc::new(idx), vec![k * k, cols_n])?;
    let avg = Tensor::full(&[1, k * k], 1.0 / (k * k) as f64);
    let avg = g.constant(&avg);
    let pooled = g.matmul(avg, cols, false, false)?; // (1, b*c*oh*ow)
    g.reshape(pooled, vec![b, c, oh, ow])
}

/// Which statistics normalize a BatchNorm layer.
pub enum BnStats<'a> {
    /// Normalize by the mini-batch's own per-channel statistics
    /// (training mode; also the attacker's "infer" regime).
    Batch,
    /// Normalize by externally supplied per-channel `(mean, var)`.
    Supplied(&'a Tensor, &'a Tensor),
}

pub struct BnOut {
    pub out: NodeId,
    /// Per-channel batch statistics of the input, shape `(c)`. Present in
    /// `Batch` mode: graph nodes so penalties on them stay differentiable.
    pub batch_mean: Option<NodeId>,
    pub batch_var: Option<NodeId>,
}

/// Training-mode BatchNorm: `(x - mean)/sqrt(var + eps) * gamma + beta`
/// with per-channel statistics over `(batch, height, width)`.
/// `want_input_stats` additionally exposes the input's own batch
/// statistics when normalization uses supplied constants (priors on
/// candidate statistics need them).
pub fn batchnorm_train(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    stats: BnStats<'_>,
    want_input_stats: bool,
) -> Result<BnOut> {
    let (b, c, h, w) = dims4(g, x, "batchnorm")?;
    if g.shape(gamma) != [c] || g.shape(beta) != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: vec![c],
            rhs: g.shape(gamma).to_vec(),
        });
    }
    let m = b * h * w;

    // Group to (c, b*h*w) so channel statistics are single matmuls.
    let mut gidx = Vec::with_capacity(c * m);
    for cc in 0..c {
        for bi in 0..b {
            for p in 0..h * w {
                gidx.push((((bi * c + cc) * h * w) + p) as i64);
            }
        }
    }
    let gidx = Arc::new(gidx);
    let grouped = g.gather(x, gidx.clone(), vec![c, m])?;

    let ones_col = {
        let t = Tensor::ones(&[m, 1]);
        g.constant(&t)
    };
    let ones_row = {
        let t = Tensor::ones(&[1, m]);
        g.constant(&t)
    };

    let (mu_col, var_col, batch_mean, batch_var) = match stats {
        BnStats::Batch => {
            let s = g.matmul(grouped, ones_col, false, false)?;
            let mu = g.scalar_mul(s, 1.0 / m as f64)?; // (c,1)
            let mu_b = g.matmul(mu, ones_row, false, false)?;
            let xc = g.sub(grouped, mu_b)?;
            let sq = g.mul(xc, xc)?;
            let sv = g.matmul(sq, ones_col, false, false)?;
            let var = g.scalar_mul(sv, 1.0 / m as f64)?; // (c,1), biased
            let mean_flat = g.reshape(mu, vec![c])?;
            let var_flat = g.reshape(var, vec![c])?;
            (mu, var, Some(mean_flat), Some(var_flat))
        }
        BnStats::Supplied(mean, var) => {
            if mean.shape() != [c] || var.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: vec![c],
                    rhs: mean.shape().to_vec(),
                });
            }
            let mu = g.constant(&mean.reshaped(vec![c, 1])?);
            let var = g.constant(&var.reshaped(vec![c, 1])?);
            if want_input_stats {
                let s = g.matmul(grouped, ones_col, false, false)?;
                let bmu = g.scalar_mul(s, 1.0 / m as f64)?;
                let bmu_b = g.matmul(bmu, ones_row, false, false)?;
                let xc = g.sub(grouped, bmu_b)?;
                let sq = g.mul(xc, xc)?;
                let sv = g.matmul(sq, ones_col, false, false)?;
                let bvar = g.scalar_mul(sv, 1.0 / m as f64)?;
                let mean_flat = g.reshape(bmu, vec![c])?;
                let var_flat = g.reshape(bvar, vec![c])?;
                (mu, var, Some(mean_flat), Some(var_flat))
            } else {
                (mu, var, None, None)
            }
        }
    };

    let mu_b = g.matmul(mu_col, ones_row, false, false)?;
    let xc = g.sub(grouped, mu_b)?;
    let veps = g.add_scalar(var_col, BN_EPS)?;
    let sd = g.sqrt(veps)?;
    let inv = g.recip(sd)?; // (c,1)
    let inv_b = g.matmul(inv, ones_row, false, false)?;
    let xhat = g.mul(xc, inv_b)?;

    let gcol = g.reshape(gamma, vec![c, 1])?;
    let bcol = g.reshape(beta, vec![c, 1])?;
    let gb = g.matmul(gcol, ones_row, false, false)?;
    let bb = g.matmul(bcol, ones_row, false, false)?;
    let scaled = g.mul(xhat, gb)?;
    let affine = g.add(scaled, bb)?;

    // Ungroup (c, b*h*w) -> (b, c, h, w): inverse of the grouping map.
    let mut back = vec![0i64; c * m];
    for (dst, &src) in gidx.iter().enumerate() {
        back[src as usize] = dst as i64;
    }
    let out = g.gather(affine, Arc::new(back), vec![b, c, h, w])?;

    Ok(BnOut {
        out,
        batch_mean,
        batch_var,
    })
}

/// Row-wise max of a 2-D node's current values, detached as constants.
/// Subtracting a constant shift leaves softmax and log-sum-exp exact while
/// keeping `exp` in range.
fn detached_row_max(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let s = g.shape(z);
    let (b, c) = (s[0], s[1]);
    let vals = g.values(z);
    let mut mx = vec![f64::NEG_INFINITY; b];
    for i in 0..b {
        for j in 0..c {
            mx[i] = mx[i].max(vals[i * c + j]);
        }
    }
    let t = Tensor::new(vec![b, 1], mx)?;
    Ok(g.constant(&t))
}

fn broadcast_cols(g: &mut Graph, col: NodeId, n: usize) -> Result<NodeId> {
    let ones = Tensor::ones(&[1, n]);
    let ones = g.constant(&ones);
    g.matmul(col, ones, false, false)
}

/// Row-wise softmax of a `(b, classes)` node.
pub fn softmax_rows(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: s,
            reason: "expected (batch, classes)".into(),
        });
    }
    let c = s[1];
    let mx = detached_row_max(g, logits)?;
    let mxb = broadcast_cols(g, mx, c)?;
    let shifted = g.sub(logits, mxb)?;
    let e = g.exp(shifted)?;
    let ones_col = {
        let t = Tensor::ones(&[c, 1]);
        g.constant(&t)
    };
    let se = g.matmul(e, ones_col, false, false)?; // (b,1)
    let inv = g.recip(se)?;
    let invb = broadcast_cols(g, inv, c)?;
    g.mul(e, invb)
}

/// Mean softmax cross-entropy over a batch. `targets` is a `(b, classes)`
/// node of (soft or one-hot) label rows; it may itself be differentiable.
pub fn softmax_cross_entropy(g: &mut Graph, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || g.shape(targets) != s {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: s,
            rhs: g.shape(targets).to_vec(),
        });
    }
    let (b, c) = (s[0], s[1]);
    let mx = detached_row_max(g, logits)?;
    let mxb = broadcast_cols(g, mx, c)?;
    let shifted = g.sub(logits, mxb)?;
    let e = g.exp(shifted)?;
    let ones_col = {
        let t = Tensor::ones(&[c, 1]);
        g.constant(&t)
    };
    let se = g.matmul(e, ones_col, false, false)?;
    let lse_shift = g.log(se)?;
    let lse = g.add(lse_shift, mx)?; // (b,1) true log-sum-exp
    let lseb = broadcast_cols(g, lse, c)?;
    let log_probs = g.sub(logits, lseb)?;
    let weighted = g.mul(targets, log_probs)?;
    let total = g.sum(weighted)?;
    g.scalar_mul(total, -1.0 / b as f64)
}

/// Anisotropic total variation of an image batch, averaged over the batch:
/// sum over channels of |x[i,j] - x[i,j+1]| + |x[i,j] - x[i+1,j]|.
pub fn total_variation(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (b, c, h, w) = dims4(g, x, "total_variation")?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            op: "total_variation",
            shape: g.shape(x).to_vec(),
            reason: "needs height and width of at least 2".into(),
        });
    }
    let flat = |bi: usize, cc: usize, i: usize, j: usize| (((bi * c + cc) * h + i) * w + j) as i64;

    let mut left = Vec::with_capacity(b * c * h * (w - 1));
    let mut right = Vec::with_capacity(b * c * h * (w - 1));
    let mut top = Vec::with_capacity(b * c * (h - 1) * w);
    let mut bot = Vec::with_capacity(b * c * (h - 1) * w);
    for bi in 0..b {
        for cc in 0..c {
            for i in 0..h {
                for j in 0..w - 1 {
                    left.push(flat(bi, cc, i, j));
                    right.push(flat(bi, cc, i, j + 1));
                }
            }
            for i in 0..h - 1 {
                for j in 0..w {
                    top.push(flat(bi, cc, i, j));
                    bot.push(flat(bi, cc, i + 1, j));
                }
            }
        }
    }
    let hn = b * c * h * (w - 1);
    let vn = b * c * (h - 1) * w;
    let l = g.gather(x, Arc::new(left), vec![hn])?;
    let r = g.gather(x, Arc::new(right), vec![hn])?;
    let t = g.gather(x, Arc::new(top), vec![vn])?;
    let bo = g.gather(x, Arc::new(bot), vec![vn])?;
    let dh = g.sub(l, r)?;
    let dv = g.sub(t, bo)?;
    let ah = g.abs(dh)?;
    let av = g.abs(dv)?;
    let sh = g.sum(ah)?;
    let sv = g.sum(av)?;
    let s = g.add(sh, sv)?;
    g.scalar_mul(s, 1.0 / b as f64)
}

/// One-hot encode labels into a `(b, classes)` tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                l, classes
            )));
        }
        v[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], v)
}
