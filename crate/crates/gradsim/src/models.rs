//! Client-side model zoo and the gradient a client shares per step.
//!
//! Models are ordered layer descriptors over named parameter tensors. The
//! same descriptor list drives initialization, the client's training-mode
//! forward pass, and the attacker's forward pass under each BatchNorm
//! knowledge regime:
//!
//! * `exact` — normalize with the private batch's statistics (shipped in
//!   the gradient packet),
//! * `proxy` — normalize with aggregated running statistics,
//! * `infer` — normalize with the candidate batch's own statistics and
//!   expose them for a prior penalty.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    Relu,
    Sigmoid,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
    /// `relu(inner(x) + x)`; the inner layers must preserve shape.
    Residual {
        inner: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Per-channel running statistics of one BatchNorm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: String,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Param>,
    pub running: Vec<RunningStats>,
}

/// Labels as a client holds them: hard class ids, or probability rows when
/// the batch was built from composite (encoded) images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Labels {
    Hard(Vec<usize>),
    Soft(Tensor),
}

impl Labels {
    pub fn batch_len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn to_target_rows(&self, classes: usize) -> Result<Tensor> {
        match self {
            Labels::Hard(v) => nn::one_hot(v, classes),
            Labels::Soft(t) => {
                if t.shape().len() != 2 || t.shape()[1] != classes {
                    return Err(Error::Config(format!(
                        "soft labels have shape {:?}, want (_, {})",
                        t.shape(),
                        classes
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

/// Per-layer batch statistics attached to a packet when the client shares
/// them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// What a client shares for one training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientPacket {
    pub grads: Vec<(String, Tensor)>,
    pub bn_stats: Option<Vec<BatchStats>>,
    pub labels: Option<Labels>,
    pub batch_size: usize,
}

impl GradientPacket {
    /// Total number of scalar gradient entries.
    pub fn grad_len(&self) -> usize {
        self.grads.iter().map(|(_, t)| t.len()).sum()
    }
}

/// What the client chooses to expose alongside the gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShareConfig {
    pub bn_stats: bool,
    pub labels: bool,
}

/// Aggregated per-BN-layer statistics `(mean, var)` released after
/// training, used by proxy/infer attackers.
#[derive(Debug, Clone)]
pub struct AggregatedStats(pub Vec<(Tensor, Tensor)>);

/// Attacker knowledge about BatchNorm statistics.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Model has no BatchNorm layers, or the attacker treats it as plain.
    None,
    /// The packet carries the private batch's statistics.
    Exact,
    Proxy(AggregatedStats),
    Infer(AggregatedStats),
}

impl BnMode {
    pub fn name(&self) -> &'static str {
        match self {
            BnMode::None => "none",
            BnMode::Exact => "exact",
            BnMode::Proxy(_) => "proxy",
            BnMode::Infer(_) => "infer",
        }
    }
}

enum Shape {
    Image(usize, usize, usize),
    Flat(usize),
}

fn layer_shape(shape: &Shape, layer: &LayerSpec) -> Result<Shape> {
    match (layer, shape) {
        (
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            },
            Shape::Image(_, h, w),
        ) => {
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            Ok(Shape::Image(*out_channels, oh, ow))
        }
        (LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Sigmoid, Shape::Image(c, h, w)) => {
            Ok(Shape::Image(*c, *h, *w))
        }
        (LayerSpec::Relu | LayerSpec::Sigmoid, Shape::Flat(n)) => Ok(Shape::Flat(*n)),
        (LayerSpec::AvgPool { kernel }, Shape::Image(c, h, w)) => {
            if h % kernel != 0 || w % kernel != 0 {
                return Err(Error::Config(format!(
                    "avgpool {} does not divide {}x{}",
                    kernel, h, w
                )));
            }
            Ok(Shape::Image(*c, h / kernel, w / kernel))
        }
        (LayerSpec::Flatten, Shape::Image(c, h, w)) => Ok(Shape::Flat(c * h * w)),
        (LayerSpec::Flatten, Shape::Flat(n)) => Ok(Shape::Flat(*n)),
        (LayerSpec::Dense { out_features }, Shape::Flat(_)) => Ok(Shape::Flat(*out_features)),
        (LayerSpec::Residual { inner }, Shape::Image(c, h, w)) => {
            let mut s = Shape::Image(*c, *h, *w);
            for l in inner {
                s = layer_shape(&s, l)?;
            }
            match s {
                Shape::Image(c2, h2, w2) if c2 == *c && h2 == *h && w2 == *w => {
                    Ok(Shape::Image(*c, *h, *w))
                }
                _ => Err(Error::Config("residual block must preserve shape".into())),
            }
        }
        _ => Err(Error::Config("layer does not apply to current shape".into())),
    }
}

fn init_layer(
    layers: &[LayerSpec],
    shape: &mut Shape,
    prefix: &str,
    rng: &mut ChaCha8Rng,
    params: &mut Vec<Param>,
    running: &mut Vec<RunningStats>,
) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        let name = format!("{}layer{}", prefix, i);
        match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let in_c = match shape {
                    Shape::Image(c, _, _) => *c,
                    Shape::Flat(_) => return Err(Error::Config("conv on flat input".into())),
                };
                let fan_in = in_c * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let wn = out_channels * in_c * kernel * kernel;
                let w: Vec<f64> = (0..wn).map(|_| rng.random_range(-bound..bound)).collect();
                let b: Vec<f64> = (0..*out_channels)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                params.push(Param {
                    name: format!("{}.weight", name),
                    value: Tensor::new(vec![*out_channels, in_c, *kernel, *kernel], w)?,
                });
                params.push(Param {
                    name: format!("{}.bias", name),
                    value: Tensor::new(vec![*out_channels], b)?,
                });
            }
            LayerSpec::BatchNorm => {
                let c = match shape {
                    Shape::Image(c, _, _) => *c,
                    Shape::Flat(_) => return Err(Error::Config("batchnorm on flat input".into())),
                };
                params.push(Param {
                    name: format!("{}.gamma", name),
                    value: Tensor::ones(&[c]),
                });
                params.push(Param {
                    name: format!("{}.beta", name),
                    value: Tensor::zeros(&[c]),
                });
                running.push(RunningStats {
                    mean: Tensor::zeros(&[c]),
                    var: Tensor::ones(&[c]),
                });
            }
            LayerSpec::Dense { out_features } => {
                let in_f = match shape {
                    Shape::Flat(n) => *n,
                    Shape::Image(..) => {
                        return Err(Error::Config("dense needs flattened input".into()))
                    }
                };
                let bound = 1.0 / (in_f as f64).sqrt();
                let w: Vec<f64> = (0..out_features * in_f)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let b: Vec<f64> = (0..*out_features)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                params.push(Param {
                    name: format!("{}.weight", name),
                    value: Tensor::new(vec![*out_features, in_f], w)?,
                });
                params.push(Param {
                    name: format!("{}.bias", name),
                    value: Tensor::new(vec![*out_features], b)?,
                });
            }
            LayerSpec::Residual { inner } => {
                let mut inner_shape = match shape {
                    Shape::Image(c, h, w) => Shape::Image(*c, *h, *w),
                    Shape::Flat(_) => return Err(Error::Config("residual on flat input".into())),
                };
                init_layer(
                    inner,
                    &mut inner_shape,
                    &format!("{}.", name),
                    rng,
                    params,
                    running,
                )?;
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::AvgPool { .. } | LayerSpec::Flatten => {}
        }
        *shape = layer_shape(shape, layer)?;
    }
    Ok(())
}

/// Architecture zoo. `mlp2` and the three ConvNet variants cover
/// dense-only, plain conv, BatchNorm and skip-connection topologies.
pub fn zoo_layers(arch: &str) -> Result<Vec<LayerSpec>> {
    let conv = |out: usize| LayerSpec::Conv {
        out_channels: out,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    match arch {
        "mlp2" => Ok(vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 256 },
            LayerSpec::Relu,
        ]),
        "convnet6" => Ok(vec![
            conv(16),
            LayerSpec::Relu,
            conv(32),
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2 },
            conv(64),
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2 },
            LayerSpec::Flatten,
        ]),
        "convnet3-bn" => Ok(vec![
            conv(8),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2 },
            LayerSpec::Flatten,
        ]),
        "convnet3-bn-sig" => Ok(vec![
            conv(8),
            LayerSpec::BatchNorm,
            LayerSpec::Sigmoid,
            LayerSpec::AvgPool { kernel: 2 },
            LayerSpec::Flatten,
        ]),
        "convnet6-bn" => Ok(vec![
            conv(16),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            conv(32),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2 },
            conv(64),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2 },
            LayerSpec::Flatten,
        ]),
        "mini-resnet" => {
            let block = || LayerSpec::Residual {
                inner: vec![
                    conv(8),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    conv(8),
                    LayerSpec::BatchNorm,
                ],
            };
            Ok(vec![
                conv(8),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                block(),
                block(),
                LayerSpec::AvgPool { kernel: 2 },
                LayerSpec::Flatten,
            ])
        }
        other => Err(Error::Config(format!("unknown architecture '{}'", other))),
    }
}

/// Deterministically initialize a zoo model.
pub fn build_model(
    arch: &str,
    input_shape: (usize, usize, usize),
    classes: usize,
    seed: u64,
) -> Result<Model> {
    let mut layers = zoo_layers(arch)?;
    layers.push(LayerSpec::Dense {
        out_features: classes,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut running = Vec::new();
    let mut shape = Shape::Image(input_shape.0, input_shape.1, input_shape.2);
    init_layer(&layers, &mut shape, "", &mut rng, &mut params, &mut running)?;
    match shape {
        Shape::Flat(n) if n == classes => {}
        _ => return Err(Error::Config("architecture does not end at class logits".into())),
    }
    Ok(Model {
        arch: arch.to_string(),
        input_shape,
        classes,
        seed,
        layers,
        params,
        running,
    })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bn_layer_count(&self) -> usize {
        self.running.len()
    }

    /// Register every parameter as a differentiable graph leaf, in
    /// parameter order.
    pub fn param_leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(&p.value)).collect()
    }

    /// Aggregated statistics a client would release after training.
    pub fn aggregated_stats(&self) -> AggregatedStats {
        AggregatedStats(
            self.running
                .iter()
                .map(|r| (r.mean.clone(), r.var.clone()))
                .collect(),
        )
    }
}

pub struct ForwardOutput {
    pub logits: NodeId,
    /// Batch statistics of the forward input per BN layer, present when
    /// normalization used batch statistics.
    pub bn_batch_stats: Vec<(NodeId, NodeId)>,
}

enum BnSource<'a> {
    Batch,
    Supplied(&'a [(Tensor, Tensor)]),
}

#[allow(clippy::too_many_arguments)]
fn forward_layers(
    model: &Model,
    layers: &[LayerSpec],
    g: &mut Graph,
    mut x: NodeId,
    param_nodes: &[NodeId],
    cursor: &mut usize,
    bn_cursor: &mut usize,
    bn: &BnSource<'_>,
    want_input_stats: bool,
    bn_stats_out: &mut Vec<(NodeId, NodeId)>,
) -> Result<NodeId> {
    for layer in layers {
        match layer {
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let w = param_nodes[*cursor];
                let b = param_nodes[*cursor + 1];
                *cursor += 2;
                x = nn::conv2d(g, x, w, Some(b), *stride, *padding)?;
            }
            LayerSpec::BatchNorm => {
                let gamma = param_nodes[*cursor];
                let beta = param_nodes[*cursor + 1];
                *cursor += 2;
                let l = *bn_cursor;
                *bn_cursor += 1;
                let stats = match bn {
                    BnSource::Batch => nn::BnStats::Batch,
                    BnSource::Supplied(list) => {
                        let (mean, var) = list.get(l).ok_or_else(|| {
                            Error::Config(format!("missing supplied BN stats for layer {}", l))
                        })?;
                        nn::BnStats::Supplied(mean, var)
                    }
                };
                let out = nn::batchnorm_train(g, x, gamma, beta, stats, want_input_stats)?;
                if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
                    bn_stats_out.push((m, v));
                }
                x = out.out;
            }
            LayerSpec::Relu => x = g.relu(x)?,
            LayerSpec::Sigmoid => x = g.sigmoid(x)?,
            LayerSpec::AvgPool { kernel } => x = nn::avgpool2d(g, x, *kernel)?,
            LayerSpec::Flatten => x = nn::flatten(g, x)?,
            LayerSpec::Dense { .. } => {
                let w = param_nodes[*cursor];
                let b = param_nodes[*cursor + 1];
                *cursor += 2;
                x = nn::dense(g, x, w, b)?;
            }
            LayerSpec::Residual { inner } => {
                let skip = x;
                let y = forward_layers(
                    model, inner, g, x, param_nodes, cursor, bn_cursor, bn, want_input_stats,
                    bn_stats_out,
                )?;
                let s = g.add(y, skip)?;
                x = g.relu(s)?;
            }
        }
    }
    Ok(x)
}

impl Model {
    /// Training-mode forward pass to logits. `want_input_stats` exposes
    /// the candidate's own per-BN-layer statistics even when
    /// normalization uses supplied constants.
    pub fn forward_with_stats(
        &self,
        g: &mut Graph,
        x: NodeId,
        param_nodes: &[NodeId],
        bn_supplied: Option<&[(Tensor, Tensor)]>,
        want_input_stats: bool,
    ) -> Result<ForwardOutput> {
        if param_nodes.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                param_nodes.len()
            )));
        }
        let bn = match bn_supplied {
            Some(list) => BnSource::Supplied(list),
            None => BnSource::Batch,
        };
        let mut cursor = 0;
        let mut bn_cursor = 0;
        let mut bn_stats_out = Vec::new();
        let logits = forward_layers(
            self,
            &self.layers,
            g,
            x,
            param_nodes,
            &mut cursor,
            &mut bn_cursor,
            &bn,
            want_input_stats,
            &mut bn_stats_out,
        )?;
        Ok(ForwardOutput {
            logits,
            bn_batch_stats: bn_stats_out,
        })
    }

    /// Training-mode forward pass to logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        param_nodes: &[NodeId],
        bn_supplied: Option<&[(Tensor, Tensor)]>,
    ) -> Result<ForwardOutput> {
        self.forward_with_stats(g, x, param_nodes, bn_supplied, false)
    }

    /// Attacker-side forward pass under a BatchNorm knowledge regime.
    /// `packet_stats` must be present for `BnMode::Exact`.
    pub fn attacker_forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        param_nodes: &[NodeId],
        mode: &BnMode,
        packet_stats: Option<&[BatchStats]>,
    ) -> Result<ForwardOutput> {
        match mode {
            BnMode::None | BnMode::Infer(_) => self.forward(g, x, param_nodes, None),
            BnMode::Exact => {
                let stats = packet_stats.ok_or_else(|| {
                    Error::Config("BN mode 'exact' requires packet batch statistics".into())
                })?;
                let list: Vec<(Tensor, Tensor)> = stats
                    .iter()
                    .map(|s| (s.mean.clone(), s.var.clone()))
                    .collect();
                self.forward_with_stats(g, x, param_nodes, Some(&list), true)
            }
            BnMode::Proxy(agg) => self.forward(g, x, param_nodes, Some(&agg.0)),
        }
    }
}

/// One local training step: gradient of the batch's mean cross-entropy
/// with respect to every parameter, BatchNorm in training mode. Running
/// statistics update locally; they reach the packet only when
/// `share.bn_stats` is set.
pub fn client_step(
    model: &mut Model,
    batch: &Tensor,
    labels: &Labels,
    share: ShareConfig,
) -> Result<GradientPacket> {
    let bshape = batch.shape().to_vec();
    if bshape.len() != 4 || bshape[0] == 0 {
        return Err(Error::Config(format!(
            "batch must be non-empty (b, c, h, w), got {:?}",
            bshape
        )));
    }
    let b = bshape[0];
    if labels.batch_len() != b {
        return Err(Error::Config(format!(
            "{} labels for batch of {}",
            labels.batch_len(),
            b
        )));
    }
    if let Labels::Hard(v) = labels {
        if let Some(&bad) = v.iter().find(|&&l| l >= model.classes) {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                bad, model.classes
            )));
        }
    }

    let mut g = Graph::new();
    let x = g.constant(batch);
    let param_nodes = model.param_leaves(&mut g);
    let fwd = model.forward(&mut g, x, &param_nodes, None)?;
    let targets = labels.to_target_rows(model.classes)?;
    let tnode = g.constant(&targets);
    let loss = nn::softmax_cross_entropy(&mut g, fwd.logits, tnode)?;
    let grads = g.backward(loss, &param_nodes, false)?;

    let batch_stats: Vec<BatchStats> = fwd
        .bn_batch_stats
        .iter()
        .map(|(m, v)| BatchStats {
            mean: g.tensor(*m),
            var: g.tensor(*v),
        })
        .collect();

    for (run, stat) in model.running.iter_mut().zip(batch_stats.iter()) {
        for (r, b) in run.mean.values_mut().iter_mut().zip(stat.mean.values()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in run.var.values_mut().iter_mut().zip(stat.var.values()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }

    let grad_list = model
        .params
        .iter()
        .zip(param_nodes.iter())
        .map(|(p, n)| {
            (
                p.name.clone(),
                grads.get(*n).expect("every parameter requested").clone(),
            )
        })
        .collect();

    Ok(GradientPacket {
        grads: grad_list,
        bn_stats: (share.bn_stats && !batch_stats.is_empty()).then_some(batch_stats),
        labels: share.labels.then(|| labels.clone()),
        batch_size: b,
    })
}


/// Server aggregation: exact mean of client packets, entry by entry.
/// Optional fields survive only when every packet agrees (labels and
/// statistics from different clients do not mix).
pub fn aggregate_packets(packets: &[GradientPacket]) -> Result<GradientPacket> {
    let first = packets
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    let mut out = first.clone();
    if packets.len() == 1 {
        return Ok(out);
    }
    for p in &packets[1..] {
        if p.grads.len() != out.grads.len() {
            return Err(Error::Config("packets disagree on parameter set".into()));
        }
        for ((name, acc), (other_name, g)) in out.grads.iter_mut().zip(p.grads.iter()) {
            if name != other_name || acc.shape() != g.shape() {
                return Err(Error::Config(format!("packet mismatch at '{}'", name)));
            }
            for (a, v) in acc.values_mut().iter_mut().zip(g.values()) {
                *a += v;
            }
        }
    }
    let n = packets.len() as f64;
    for (_, t) in &mut out.grads {
        for v in t.values_mut() {
            *v /= n;
        }
    }
    out.bn_stats = None;
    out.labels = None;
    out.batch_size = packets.iter().map(|p| p.batch_size).sum();
    Ok(out)
}

// ---------------------------------------------------------------------
// checkpoint format: "GSIM" magic, version, spec (arch, input shape,
// classes, seed), then named little-endian f64 tensors.
// ---------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSIM";
const CHECKPOINT_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(buf, name);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> crate::error::Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            reason: format!("truncated at byte {} (wanted {} more)", self.pos, n),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> crate::error::Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> crate::error::Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> crate::error::Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            path: self.path.clone(),
            reason: "invalid utf-8 in name".into(),
        })
    }

    fn tensor(&mut self) -> crate::error::Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(dims, values)?))
    }
}

/// Serialize parameters and running statistics.
pub fn save_checkpoint(model: &Model, path: &std::path::Path) -> crate::error::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &model.arch);
    for d in [model.input_shape.0, model.input_shape.1, model.input_shape.2, model.classes] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.seed.to_le_bytes());
    let count = model.params.len() + 2 * model.running.len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for p in &model.params {
        put_tensor(&mut buf, &p.name, &p.value);
    }
    for (l, r) in model.running.iter().enumerate() {
        put_tensor(&mut buf, &format!("running{}.mean", l), &r.mean);
        put_tensor(&mut buf, &format!("running{}.var", l), &r.var);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Rebuild a model from a checkpoint, restoring every named tensor.
pub fn load_checkpoint(path: &std::path::Path) -> crate::error::Result<Model> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: r.path,
            reason: format!("bad magic {:?}", magic),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: r.path,
            reason: format!("unsupported checkpoint version {}", version),
        });
    }
    let arch = r.string()?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let seed = r.u64()?;
    let count = r.u32()? as usize;

    let mut model = build_model(&arch, (c, h, w), classes, seed)?;
    for _ in 0..count {
        let (name, tensor) = r.tensor()?;
        if let Some(stripped) = name.strip_prefix("running") {
            let (idx, field) = stripped.split_once('.').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("malformed running-stat name '{}'", name),
            })?;
            let l: usize = idx.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("malformed running-stat name '{}'", name),
            })?;
            let slot = model.running.get_mut(l).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("running-stat index {} out of range", l),
            })?;
            match field {
                "mean" => slot.mean = tensor,
                "var" => slot.var = tensor,
                other => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        reason: format!("unknown running-stat field '{}'", other),
                    })
                }
            }
        } else {
            let slot = model
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("tensor '{}' not in architecture '{}'", name, arch),
                })?;
            if slot.value.shape() != tensor.shape() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("tensor '{}' has shape {:?}", name, tensor.shape()),
                });
            }
            slot.value = tensor;
        }
    }
    Ok(model)
}
