//! Executable checks of the gradient structure that makes encoded-input
//! recovery a batched-vector-sum problem.
//!
//! The subject is the scalar-output ReLU chain `f(x) = aᵀ φ(W_L ⋯ φ(W_1 x))`
//! under squared loss — the family for which the layer-wise product
//! formulas are stated. Two facts are machine-checked:
//!
//! 1. every row of `∂L/∂W_1` is a linear combination of the batch inputs
//!    (least-squares residual at numerical-noise level), and
//! 2. the explicit product formula
//!    `Σ_i (f(x_i) − y_i) · D_{i,ℓ} (∏_k W_kᵀ D_{i,k}) a · h_{i,ℓ−1}ᵀ`
//!    reproduces reverse-mode gradients exactly.
//!
//! ReLU's derivative at exactly 0 is taken as 0 on both routes, so the
//! comparison is well-posed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{self, LeastSquares};
use crate::tensor::Tensor;

/// Scalar-output ReLU chain: weights `W_ℓ (m_ℓ × m_{ℓ-1})` and head
/// vector `a (m_L)`.
#[derive(Debug, Clone)]
pub struct ReluChainNet {
    pub dims: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub head: Tensor,
}

/// `dims = [d, m_1, ..., m_L]`; weights drawn uniform in ±1/√fan_in.
pub fn build_chain(dims: &[usize], seed: u64) -> Result<ReluChainNet> {
    if dims.len() < 2 {
        return Err(Error::Config("chain needs at least input and one layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    for l in 1..dims.len() {
        let (rows, cols) = (dims[l], dims[l - 1]);
        let bound = 1.0 / (cols as f64).sqrt();
        let vals: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        weights.push(Tensor::new(vec![rows, cols], vals)?);
    }
    let m_l = *dims.last().unwrap();
    let head: Vec<f64> = (0..m_l)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Ok(ReluChainNet {
        dims: dims.to_vec(),
        weights: weights.to_vec(),
        head: Tensor::new(vec![m_l], head)?,
    })
}

/// Reverse-mode gradients of `½ Σ_i (y_i − f(x_i))²` for every layer.
pub fn chain_loss_grads(net: &ReluChainNet, x: &Tensor, y: &[f64]) -> Result<Vec<Tensor>> {
    let (b, d) = match x.shape() {
        [b, d] => (*b, *d),
        s => {
            return Err(Error::InvalidShape {
                op: "chain_loss_grads",
                shape: s.to_vec(),
                reason: "expected (batch, input_dim)".into(),
            })
        }
    };
    if d != net.dims[0] || y.len() != b {
        return Err(Error::Config("batch does not match network dims".into()));
    }
    let mut g = Graph::new();
    let xn = g.constant(x);
    let wnodes: Vec<_> = net.weights.iter().map(|w| g.leaf(w)).collect();
    let mut h = xn;
    for &w in &wnodes {
        let z = g.matmul(h, w, false, true)?;
        h = g.relu(z)?;
    }
    let a_col = g.constant(&net.head.reshaped(vec![net.head.len(), 1])?);
    let f = g.matmul(h, a_col, false, false)?; // (b, 1)
    let yt = g.constant(&Tensor::new(vec![b, 1], y.to_vec())?);
    let diff = g.sub(f, yt)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    let loss = g.scalar_mul(s, 0.5)?;
    let grads = g.backward(loss, &wnodes, false)?;
    Ok(wnodes
        .iter()
        .map(|w| grads.get(*w).expect("requested").clone())
        .collect())
}

/// The explicit per-sample product formula, computed with plain loops —
/// no computation graph involved.
pub fn explicit_layer_grads(net: &ReluChainNet, x: &Tensor, y: &[f64]) -> Result<Vec<Tensor>> {
    let (b, d) = match x.shape() {
        [b, d] => (*b, *d),
        _ => return Err(Error::Config("expected (batch, input_dim)".into())),
    };
    let depth = net.weights.len();
    let mut grads: Vec<Tensor> = net.weights.iter().map(|w| Tensor::zeros(w.shape())).collect();

    for i in 0..b {
        let xi = &x.values()[i * d..(i + 1) * d];
        // forward, keeping pre-activations for the derivative indicators
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut cur = xi.to_vec();
        for w in &net.weights {
            let rows = w.shape()[0];
            let cols = w.shape()[1];
            let z = linalg::matvec(w.values(), &cur, rows, cols);
            let h: Vec<f64> = z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
            pre.push(z);
            act.push(h.clone());
            cur = h;
        }
        let f: f64 = act[depth - 1]
            .iter()
            .zip(net.head.values())
            .map(|(h, a)| h * a)
            .sum();
        let resid = f - y[i];

        for l in 0..depth {
            // u = D_{i,l} · Π_{k=l+1..L} W_kᵀ D_{i,k} · a
            let mut u: Vec<f64> = net.head.values().to_vec();
            for k in (l + 1..depth).rev() {
                let masked: Vec<f64> = u
                    .iter()
                    .zip(pre[k].iter())
                    .map(|(uv, z)| if *z > 0.0 { *uv } else { 0.0 })
                    .collect();
                let w = &net.weights[k];
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                // W_kᵀ · masked
                let mut next = vec![0.0; cols];
                for r in 0..rows {
                    let mv = masked[r];
                    if mv == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        next[c] += w.values()[r * cols + c] * mv;
                    }
                }
                u = next;
            }
            let masked: Vec<f64> = u
                .iter()
                .zip(pre[l].iter())
                .map(|(uv, z)| if *z > 0.0 { *uv } else { 0.0 })
                .collect();
            let lower: &[f64] = if l == 0 { xi } else { &act[l - 1] };
            let gw = grads[l].values_mut();
            let cols = lower.len();
            for (r, mv) in masked.iter().enumerate() {
                if *mv == 0.0 {
                    continue;
                }
                for (c, lv) in lower.iter().enumerate() {
                    gw[r * cols + c] += resid * mv * lv;
                }
            }
        }
    }
    Ok(grads)
}

/// Max relative deviation between reverse-mode and explicit-formula
/// gradients across all layers.
pub fn verify_layer_gradient_forms(net: &ReluChainNet, x: &Tensor, y: &[f64]) -> Result<f64> {
    let auto = chain_loss_grads(net, x, y)?;
    let explicit = explicit_layer_grads(net, x, y)?;
    let mut worst: f64 = 0.0;
    for (a, e) in auto.iter().zip(explicit.iter()) {
        for (av, ev) in a.values().iter().zip(e.values()) {
            let rel = (av - ev).abs() / av.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Least-squares expansion of each first-layer gradient row over the
/// batch inputs.
#[derive(Debug, Clone, Serialize)]
pub struct SpanDecomposition {
    /// `coefficients[r][j]`: weight of input j in gradient row r.
    pub coefficients: Vec<Vec<f64>>,
    /// L2 residual of each row's expansion.
    pub residuals: Vec<f64>,
    /// Largest gradient-row norm, for judging residual scale.
    pub max_row_norm: f64,
    /// Set when the input batch was rank-deficient for the expansion.
    pub degenerate_batch: bool,
}

/// Check that rows of `∂L/∂W_1` lie in span{x_j}: solve least squares per
/// row and report coefficients and residuals.
pub fn verify_first_layer_span(net: &ReluChainNet, x: &Tensor, y: &[f64]) -> Result<SpanDecomposition> {
    let (b, d) = match x.shape() {
        [b, d] => (*b, *d),
        _ => return Err(Error::Config("expected (batch, input_dim)".into())),
    };
    let grads = chain_loss_grads(net, x, y)?;
    let g1 = &grads[0]; // (m_1, d)
    let m1 = g1.shape()[0];

    // design matrix: columns are the batch inputs, d × b
    let design = linalg::transpose(x.values(), b, d);
    let ls = LeastSquares::new(&design, d, b)?;
    // coefficients are non-unique once the batch vectors are dependent
    let degenerate_batch = ls.rank() < b;

    let mut coefficients = Vec::with_capacity(m1);
    let mut residuals = Vec::with_capacity(m1);
    let mut max_row_norm: f64 = 0.0;
    for r in 0..m1 {
        let row = &g1.values()[r * d..(r + 1) * d];
        max_row_norm = max_row_norm.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        let alpha = ls.solve(row)?;
        let resid = ls.residual_norm(&design, &alpha, row);
        coefficients.push(alpha);
        residuals.push(resid);
    }
    Ok(SpanDecomposition {
        coefficients,
        residuals,
        max_row_norm,
        degenerate_batch,
    })
}

/// One row of the `verify-lemma` report.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaReportRow {
    pub depth: usize,
    pub seed: u64,
    pub batch: usize,
    pub max_span_residual: f64,
    pub max_formula_deviation: f64,
    pub pass: bool,
}

/// Run both checks over depths and seeds; thresholds are the acceptance
/// levels (span residual 1e-8, formula deviation 1e-10).
pub fn lemma_report(depths: &[usize], seeds: &[u64], batch: usize) -> Result<Vec<LemmaReportRow>> {
    let mut rows = Vec::new();
    for &depth in depths {
        for &seed in seeds {
            let mut dims = vec![10usize];
            for l in 0..depth {
                dims.push(12 + 2 * l);
            }
            let net = build_chain(&dims, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let x = Tensor::new(
                vec![batch, dims[0]],
                (0..batch * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            let y: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
            let span = verify_first_layer_span(&net, &x, &y)?;
            let max_span_residual = span.residuals.iter().copied().fold(0.0, f64::max);
            let max_formula_deviation = verify_layer_gradient_forms(&net, &x, &y)?;
            rows.push(LemmaReportRow {
                depth,
                seed,
                batch,
                max_span_residual,
                max_formula_deviation,
                pass: max_span_residual < 1e-8 && max_formula_deviation < 1e-10,
            });
        }
    }
    Ok(rows)
}
