//! Optimization-based gradient inversion: minimize cosine distance between
//! the gradient a candidate batch would produce and the eavesdropped
//! gradient, regularized by total variation and (when statistics must be
//! inferred) a BatchNorm prior. Labels can be granted, inferred from the
//! gradient, or jointly optimized through per-image logits.
//!
//! For encoding defenses the recovered images are *encodings*; the decode
//! step solves a per-pixel least-squares system across eavesdropped epochs
//! using the granted mixing records.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defenses::EncodingRecord;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::label_inference;
use crate::linalg::LeastSquares;
use crate::models::{BnMode, GradientPacket, Model};
use crate::nn;
use crate::tensor::Tensor;

/// α_TV search grid.
pub const ALPHA_TV_GRID: [f64; 7] = [0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5];
/// α_BN search grid.
pub const ALPHA_BN_GRID: [f64; 5] = [0.0, 0.0005, 0.001, 0.01, 0.05];

/// Best α_TV per defense from the search grid.
pub fn alpha_tv_for(defense: &str) -> f64 {
    match defense {
        "gradprune" => 0.05,
        "mixup" => 0.1,
        "instahide" => 0.01,
        _ => 0.01,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKnowledge {
    /// Packet carries the true (possibly composite) labels.
    Granted,
    /// Labels recovered analytically from the final-layer gradient.
    Inferred,
    /// Per-image logits co-optimized; soft labels are their softmax.
    Optimized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub alpha_tv: f64,
    pub alpha_bn: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning rate multiplies by `decay_factor` at these fractions of
    /// the run (applied at `floor(f · iterations)`).
    pub decay_fractions: Vec<f64>,
    pub decay_factor: f64,
    pub restarts: usize,
    pub seed: u64,
    pub labels: LabelKnowledge,
    /// Apply total variation to |x| (sign-flipped encodings keep adjacent
    /// *magnitudes* close, not adjacent values).
    pub abs_tv: bool,
    pub pixel_min: f64,
    pub pixel_max: f64,
    /// Trajectory sampling stride.
    pub log_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha_tv: 0.01,
            alpha_bn: 0.001,
            iterations: 10_000,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_fractions: vec![3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0],
            decay_factor: 0.1,
            restarts: 1,
            seed: 0,
            labels: LabelKnowledge::Granted,
            abs_tv: false,
            pixel_min: 0.0,
            pixel_max: 1.0,
            log_every: 100,
        }
    }
}

/// Total variation of a detached image batch.
pub fn tv(x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x);
    let t = nn::total_variation(&mut g, xn)?;
    Ok(g.item(t))
}

/// `Σ_l ‖mean_l − μ_l‖₂ + Σ_l ‖var_l − σ²_l‖₂` over detached statistics.
pub fn bn_reg(batch_stats: &[(Tensor, Tensor)], aggregated: &[(Tensor, Tensor)]) -> Result<f64> {
    if batch_stats.len() != aggregated.len() {
        return Err(Error::Config(format!(
            "{} batch-stat layers vs {} aggregated",
            batch_stats.len(),
            aggregated.len()
        )));
    }
    let mut total = 0.0;
    for ((m, v), (mu, var)) in batch_stats.iter().zip(aggregated) {
        if m.shape() != mu.shape() || v.shape() != var.shape() {
            return Err(Error::ShapeMismatch {
                op: "bn_reg",
                lhs: m.shape().to_vec(),
                rhs: mu.shape().to_vec(),
            });
        }
        total += m
            .values()
            .iter()
            .zip(mu.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += v
            .values()
            .iter()
            .zip(var.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

fn bn_reg_node(
    g: &mut Graph,
    batch_stats: &[(NodeId, NodeId)],
    aggregated: &[(Tensor, Tensor)],
) -> Result<NodeId> {
    if batch_stats.len() != aggregated.len() {
        return Err(Error::Config(format!(
            "{} batch-stat layers vs {} aggregated",
            batch_stats.len(),
            aggregated.len()
        )));
    }
    let mut total = g.constant_scalar(0.0);
    for ((mn, vn), (mu, var)) in batch_stats.iter().zip(aggregated) {
        let muc = g.constant(mu);
        let varc = g.constant(var);
        let dm = g.sub(*mn, muc)?;
        let dv = g.sub(*vn, varc)?;
        let nm = g.l2_norm(dm)?;
        let nv = g.l2_norm(dv)?;
        let s = g.add(nm, nv)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Cosine distance between two gradient collections flattened in a fixed
/// parameter order: `1 − ⟨g, g*⟩ / (‖g‖‖g*‖)`. A zero-norm side makes the
/// distance 1 with the degenerate flag set.
pub fn grad_match_loss(candidate: &[Tensor], target: &[Tensor]) -> Result<(f64, bool)> {
    if candidate.len() != target.len() {
        return Err(Error::Config(format!(
            "{} candidate gradients vs {} target",
            candidate.len(),
            target.len()
        )));
    }
    let mut ip = 0.0;
    let mut nc = 0.0;
    let mut nt = 0.0;
    for (c, t) in candidate.iter().zip(target) {
        if c.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_match_loss",
                lhs: c.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (a, b) in c.values().iter().zip(t.values()) {
            ip += a * b;
            nc += a * a;
            nt += b * b;
        }
    }
    if nc == 0.0 || nt == 0.0 {
        return Ok((1.0, true));
    }
    Ok((1.0 - ip / (nc.sqrt() * nt.sqrt()), false))
}

/// Graph version: candidate gradients are live nodes, target is constant.
fn grad_match_node(
    g: &mut Graph,
    candidate: &[NodeId],
    target: &[Tensor],
    target_norm: f64,
) -> Result<NodeId> {
    let mut ip: Option<NodeId> = None;
    let mut ncsq: Option<NodeId> = None;
    for (cn, t) in candidate.iter().zip(target) {
        let tc = g.constant(t);
        let i = g.inner_product(*cn, tc)?;
        let n = g.inner_product(*cn, *cn)?;
        ip = Some(match ip {
            Some(prev) => g.add(prev, i)?,
            None => i,
        });
        ncsq = Some(match ncsq {
            Some(prev) => g.add(prev, n)?,
            None => n,
        });
    }
    let ip = ip.ok_or_else(|| Error::Config("empty gradient collection".into()))?;
    let ncsq = ncsq.unwrap();
    let nc = g.sqrt(ncsq)?;
    let denom = g.scalar_mul(nc, target_norm)?;
    let inv = g.recip(denom)?;
    let cosine = g.mul(ip, inv)?;
    let neg = g.scalar_mul(cosine, -1.0)?;
    g.add_scalar(neg, 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub grad_match: f64,
    pub tv: f64,
    pub bn_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub restart: usize,
    pub final_objective: f64,
    /// Diagnostic when the restart aborted on a non-finite loss.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Best candidate batch by final objective.
    pub best: Tensor,
    pub best_restart: usize,
    pub restarts: Vec<RestartOutcome>,
    /// Sampled loss trajectory of the best restart.
    pub trajectory: Vec<LossRow>,
    /// Softmax of the co-optimized logits when labels were optimized.
    pub soft_labels: Option<Tensor>,
    /// Set when the target gradient had zero norm.
    pub degenerate_target: bool,
    pub iterations: usize,
    pub seed: u64,
    pub bn_mode: String,
}

/// Resolve the label rows the attacker will feed the loss.
fn resolve_targets(packet: &GradientPacket, model: &Model, cfg: &AttackConfig) -> Result<Option<Tensor>> {
    match cfg.labels {
        LabelKnowledge::Granted => {
            let labels = packet.labels.as_ref().ok_or_else(|| {
                Error::Config("labels = granted requires a packet carrying labels".into())
            })?;
            Ok(Some(labels.to_target_rows(model.classes)?))
        }
        LabelKnowledge::Inferred => {
            let guess = label_inference::infer_batch_labels(packet, model)?;
            if !guess.decidable {
                return Err(Error::Numerical(
                    "label inference undecidable on this packet".into(),
                ));
            }
            // Distinct classes, cycled to batch length: order within the
            // batch is unknowable and reconstruction is matched up to
            // permutation anyway.
            let mut rows = Vec::with_capacity(packet.batch_size);
            for i in 0..packet.batch_size {
                rows.push(guess.labels[i % guess.labels.len()]);
            }
            Ok(Some(nn::one_hot(&rows, model.classes)?))
        }
        LabelKnowledge::Optimized => Ok(None),
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &AttackConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

struct ObjectiveParts {
    total: NodeId,
    grad_match: f64,
    tv: f64,
    bn: f64,
}

/// Build the full attack objective for the current candidate (and optional
/// label logits) inside `g`.
#[allow(clippy::too_many_arguments)]
fn build_objective(
    g: &mut Graph,
    model: &Model,
    packet: &GradientPacket,
    cfg: &AttackConfig,
    bn_mode: &BnMode,
    x_node: NodeId,
    logits_node: Option<NodeId>,
    granted_rows: Option<&Tensor>,
    target_norm: f64,
    degenerate_target: bool,
) -> Result<ObjectiveParts> {
    let param_nodes = model.param_leaves(g);
    let fwd = model.attacker_forward(g, x_node, &param_nodes, bn_mode, packet.bn_stats.as_deref())?;

    let target_rows = match (granted_rows, logits_node) {
        (Some(rows), None) => g.constant(rows),
        (None, Some(ln)) => nn::softmax_rows(g, ln)?,
        _ => return Err(Error::Config("exactly one label source required".into())),
    };
    let ce = nn::softmax_cross_entropy(g, fwd.logits, target_rows)?;
    let grads = g.backward(ce, &param_nodes, true)?;
    let grad_nodes: Vec<NodeId> = param_nodes
        .iter()
        .map(|p| grads.node(*p).expect("create_graph yields nodes"))
        .collect();
    let target: Vec<&Tensor> = packet.grads.iter().map(|(_, t)| t).collect();
    let target_owned: Vec<Tensor> = target.iter().map(|t| (*t).clone()).collect();

    let match_node = if degenerate_target {
        g.constant_scalar(1.0)
    } else {
        grad_match_node(g, &grad_nodes, &target_owned, target_norm)?
    };

    let mut total = match_node;
    let mut tv_val = 0.0;
    if cfg.alpha_tv > 0.0 {
        let tv_input = if cfg.abs_tv { g.abs(x_node)? } else { x_node };
        let tv_node = nn::total_variation(g, tv_input)?;
        tv_val = g.item(tv_node);
        let scaled = g.scalar_mul(tv_node, cfg.alpha_tv)?;
        total = g.add(total, scaled)?;
    }

    // BatchNorm prior: candidate statistics are pulled toward whatever
    // statistics the attacker holds — the granted private-batch values in
    // the exact regime, the aggregated release in the infer regime. The
    // plain-proxy regime re-normalizes only and adds no prior.
    let mut bn_val = 0.0;
    if cfg.alpha_bn > 0.0 {
        let targets: Option<Vec<(Tensor, Tensor)>> = match bn_mode {
            BnMode::Exact => packet.bn_stats.as_ref().map(|stats| {
                stats
                    .iter()
                    .map(|s| (s.mean.clone(), s.var.clone()))
                    .collect()
            }),
            BnMode::Infer(agg) => Some(agg.0.clone()),
            BnMode::None | BnMode::Proxy(_) => None,
        };
        if let Some(targets) = targets {
            if !fwd.bn_batch_stats.is_empty() {
                let bn_node = bn_reg_node(g, &fwd.bn_batch_stats, &targets)?;
                bn_val = g.item(bn_node);
                let scaled = g.scalar_mul(bn_node, cfg.alpha_bn)?;
                total = g.add(total, scaled)?;
            }
        }
    }

    Ok(ObjectiveParts {
        total,
        grad_match: g.item(match_node),
        tv: tv_val,
        bn: bn_val,
    })
}

/// Evaluate the objective at a fixed candidate without optimizing — the
/// consistency probe used by tests and sweeps.
pub fn evaluate_objective(
    packet: &GradientPacket,
    model: &Model,
    cfg: &AttackConfig,
    bn_mode: &BnMode,
    x: &Tensor,
) -> Result<LossRow> {
    let target: Vec<Tensor> = packet.grads.iter().map(|(_, t)| t.clone()).collect();
    let norm_sq: f64 = target.iter().flat_map(|t| t.values()).map(|v| v * v).sum();
    let degenerate = norm_sq == 0.0;
    let rows = resolve_targets(packet, model, cfg)?;
    let mut g = Graph::new();
    let xn = g.leaf(x);
    let logits = match cfg.labels {
        LabelKnowledge::Optimized => Some(g.leaf(&Tensor::zeros(&[packet.batch_size, model.classes]))),
        _ => None,
    };
    let parts = build_objective(
        &mut g,
        model,
        packet,
        cfg,
        bn_mode,
        xn,
        logits,
        rows.as_ref(),
        norm_sq.sqrt(),
        degenerate,
    )?;
    Ok(LossRow {
        iteration: 0,
        grad_match: parts.grad_match,
        tv: parts.tv,
        bn_reg: parts.bn,
        total: g.item(parts.total),
    })
}

/// `invert` with the default BatchNorm regime: exact when the packet
/// carries statistics, plain otherwise.
pub fn invert(packet: &GradientPacket, model: &Model, cfg: &AttackConfig) -> Result<ReconstructionReport> {
    let mode = if model.bn_layer_count() == 0 {
        BnMode::None
    } else if packet.bn_stats.is_some() {
        BnMode::Exact
    } else {
        BnMode::None
    };
    invert_with_mode(packet, model, cfg, &mode)
}

/// Run the inversion: Gaussian-initialized candidates optimized with Adam
/// under the given threat model; the best restart by final objective wins.
/// Non-finite losses abort their restart with a diagnostic and the
/// remaining restarts continue.
pub fn invert_with_mode(
    packet: &GradientPacket,
    model: &Model,
    cfg: &AttackConfig,
    bn_mode: &BnMode,
) -> Result<ReconstructionReport> {
    if packet.grads.len() != model.params.len() {
        return Err(Error::Config("packet does not match model parameter set".into()));
    }
    for ((name, _), p) in packet.grads.iter().zip(model.params.iter()) {
        if name != &p.name {
            return Err(Error::Config(format!(
                "gradient '{}' does not align with parameter '{}'",
                name, p.name
            )));
        }
    }
    if matches!(bn_mode, BnMode::Exact) && packet.bn_stats.is_none() {
        return Err(Error::Config(
            "BN mode 'exact' requires packet batch statistics".into(),
        ));
    }
    let b = packet.batch_size;
    let (c, h, w) = model.input_shape;
    let shape = [b, c, h, w];
    let n = b * c * h * w;

    let target_norm_sq: f64 = packet
        .grads
        .iter()
        .flat_map(|(_, t)| t.values())
        .map(|v| v * v)
        .sum();
    let degenerate_target = target_norm_sq == 0.0;
    let target_norm = target_norm_sq.sqrt();
    let granted_rows = resolve_targets(packet, model, cfg)?;

    let decay_points: Vec<usize> = cfg
        .decay_fractions
        .iter()
        .map(|f| (f * cfg.iterations as f64).floor() as usize)
        .collect();

    let mut best: Option<(usize, f64, Tensor, Vec<LossRow>, Option<Tensor>)> = None;
    let mut outcomes = Vec::new();

    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64));
        let mut x = Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| standard_normal(&mut rng)).collect(),
        )?;
        x.clamp_in_place(cfg.pixel_min, cfg.pixel_max);
        let mut logits_vals = match cfg.labels {
            LabelKnowledge::Optimized => Some(Tensor::zeros(&[b, model.classes])),
            _ => None,
        };

        let mut adam_x = Adam::new(n, cfg);
        let mut adam_l = logits_vals
            .as_ref()
            .map(|t| Adam::new(t.len(), cfg));
        let mut lr = cfg.learning_rate;
        let mut rows = Vec::new();
        let mut aborted = None;
        let mut final_objective = f64::INFINITY;

        for iter in 0..cfg.iterations {
            if decay_points.contains(&iter) && iter > 0 {
                lr *= cfg.decay_factor;
            }
            let mut g = Graph::new();
            let xn = g.leaf(&x);
            let ln = logits_vals.as_ref().map(|t| g.leaf(t));
            let parts = build_objective(
                &mut g,
                model,
                packet,
                cfg,
                bn_mode,
                xn,
                ln,
                granted_rows.as_ref(),
                target_norm,
                degenerate_target,
            )?;
            let total_val = g.item(parts.total);
            if !total_val.is_finite() {
                aborted = Some(format!("non-finite objective at iteration {}", iter));
                break;
            }
            let mut leaves = vec![xn];
            if let Some(l) = ln {
                leaves.push(l);
            }
            let grads = g.backward(parts.total, &leaves, false)?;
            let gx = grads.get(xn).unwrap();
            if gx.values().iter().any(|v| !v.is_finite()) {
                aborted = Some(format!("non-finite gradient at iteration {}", iter));
                break;
            }

            if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.iterations {
                rows.push(LossRow {
                    iteration: iter,
                    grad_match: parts.grad_match,
                    tv: parts.tv,
                    bn_reg: parts.bn,
                    total: total_val,
                });
            }
            final_objective = total_val;

            adam_x.step(x.values_mut(), gx.values(), lr);
            x.clamp_in_place(cfg.pixel_min, cfg.pixel_max);
            if let (Some(l), Some(opt)) = (ln, adam_l.as_mut()) {
                let gl = grads.get(l).unwrap().clone();
                let lv = logits_vals.as_mut().unwrap();
                opt.step(lv.values_mut(), gl.values(), lr);
            }
        }

        let score = if aborted.is_some() {
            f64::INFINITY
        } else {
            final_objective
        };
        outcomes.push(RestartOutcome {
            restart,
            final_objective: score,
            aborted: aborted.clone(),
        });
        let better = match &best {
            Some((_, prev, ..)) => score < *prev,
            None => aborted.is_none() || cfg.restarts <= 1,
        };
        if better {
            let soft = logits_vals.as_ref().map(|t| {
                let mut g = Graph::new();
                let l = g.constant(t);
                let s = nn::softmax_rows(&mut g, l).expect("logits are (b, classes)");
                g.tensor(s)
            });
            best = Some((restart, score, x.clone(), rows, soft));
        }
    }

    let (best_restart, _, best_x, trajectory, soft_labels) = best.ok_or_else(|| {
        Error::Numerical("every restart aborted on non-finite loss".into())
    })?;

    Ok(ReconstructionReport {
        best: best_x,
        best_restart,
        restarts: outcomes,
        trajectory,
        soft_labels,
        degenerate_target,
        iterations: cfg.iterations,
        seed: cfg.seed,
        bn_mode: bn_mode.name().to_string(),
    })
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeResult {
    /// One estimate per private image.
    pub images: Vec<Tensor>,
    /// True when the record system cannot pin every private image; the
    /// minimum-norm solution is returned.
    pub underdetermined: bool,
    /// Private indices never touched by any encoding.
    pub missing: Vec<usize>,
    /// Condition number of the mixing matrix.
    pub condition: f64,
}

/// Per-pixel least squares over recovered encodings: rows are encodings
/// (sign-corrected via the granted σ for InstaHide), unknowns are private
/// images.
pub fn decode_encodings(
    recovered: &[(EncodingRecord, Tensor)],
    n_private: usize,
    image_shape: &[usize],
) -> Result<DecodeResult> {
    if recovered.is_empty() || n_private == 0 {
        return Err(Error::Config("decode needs encodings and a private set size".into()));
    }
    let d: usize = image_shape.iter().product();
    let m = recovered.len();

    let mut lambda = vec![0.0; m * n_private];
    let mut rhs = vec![0.0; m * d]; // row-major: encoding × pixel
    for (row, (rec, img)) in recovered.iter().enumerate() {
        if img.len() != d {
            return Err(Error::ShapeMismatch {
                op: "decode_encodings",
                lhs: img.shape().to_vec(),
                rhs: image_shape.to_vec(),
            });
        }
        for (&s, &c) in rec.sources.iter().zip(rec.coefficients.iter()) {
            if s >= n_private {
                return Err(Error::Config(format!("source {} outside private set", s)));
            }
            lambda[row * n_private + s] += c;
        }
        match rec.sign_vec() {
            Some(signs) => {
                if signs.len() != d {
                    return Err(Error::Config("sign pattern length mismatch".into()));
                }
                for (q, (v, s)) in img.values().iter().zip(signs.iter()).enumerate() {
                    rhs[row * d + q] = v * s;
                }
            }
            None => rhs[row * d..(row + 1) * d].copy_from_slice(img.values()),
        }
    }

    let missing: Vec<usize> = (0..n_private)
        .filter(|&j| (0..m).all(|i| lambda[i * n_private + j] == 0.0))
        .collect();

    let ls = LeastSquares::new(&lambda, m, n_private)?;
    let mut flat = vec![0.0; n_private * d];
    let mut b = vec![0.0; m];
    for q in 0..d {
        for row in 0..m {
            b[row] = rhs[row * d + q];
        }
        let z = ls.solve(&b)?;
        for j in 0..n_private {
            flat[j * d + q] = z[j];
        }
    }
    let images = (0..n_private)
        .map(|j| Tensor::new(image_shape.to_vec(), flat[j * d..(j + 1) * d].to_vec()))
        .collect::<Result<Vec<_>>>()?;

    Ok(DecodeResult {
        images,
        underdetermined: ls.underdetermined(),
        missing,
        condition: ls.condition(),
    })
}
