//! Defenses a client can apply before sharing gradients: magnitude-based
//! gradient pruning, and input encodings (MixUp mixing on the simplex,
//! Intra-InstaHide adding a random per-pixel sign flip). Combinations
//! compose as encode-then-train-then-prune.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::GradientPacket;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Fraction of gradient entries zeroed, `0 <= p < 1`.
    pub prune_ratio: f64,
    /// Images mixed per encoding, `k >= 1`.
    pub mix_k: usize,
    /// Per-coefficient cap on the mixing simplex.
    pub coef_upper_bound: f64,
    /// Apply the InstaHide random sign pattern after mixing.
    pub sign_flip: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            prune_ratio: 0.0,
            mix_k: 1,
            coef_upper_bound: 1.0,
            sign_flip: false,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::Infeasible(format!(
                "prune ratio {} outside [0, 1)",
                self.prune_ratio
            )));
        }
        if self.mix_k == 0 {
            return Err(Error::Infeasible("mix_k must be at least 1".into()));
        }
        if self.coef_upper_bound * (self.mix_k as f64) < 1.0 || self.coef_upper_bound > 1.0 {
            return Err(Error::Infeasible(format!(
                "coefficient bound {} infeasible for k = {}",
                self.coef_upper_bound, self.mix_k
            )));
        }
        Ok(())
    }

    pub fn encodes_inputs(&self) -> bool {
        self.mix_k > 1 || self.sign_flip
    }
}

/// Zero the `floor(p * n)` globally smallest-magnitude gradient entries
/// across the concatenation of all parameter gradients. Ties break toward
/// the lower flat index. Every other field passes through untouched.
pub fn grad_prune(packet: &GradientPacket, p: f64) -> Result<GradientPacket> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Infeasible(format!("prune ratio {} outside [0, 1)", p)));
    }
    let n = packet.grad_len();
    let zero_count = (p * n as f64).floor() as usize;
    let mut out = packet.clone();
    if zero_count == 0 {
        return Ok(out);
    }

    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut flat = 0usize;
    for (_, t) in &packet.grads {
        for v in t.values() {
            order.push((v.abs(), flat));
            flat += 1;
        }
    }
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kill = vec![false; n];
    for &(_, idx) in order.iter().take(zero_count) {
        kill[idx] = true;
    }

    let mut flat = 0usize;
    for (_, t) in &mut out.grads {
        for v in t.values_mut() {
            if kill[flat] {
                *v = 0.0;
            }
            flat += 1;
        }
    }
    Ok(out)
}

/// Per-layer variant for sensitivity studies: the prune ratio applies to
/// every parameter tensor independently rather than to the global
/// concatenation.
pub fn grad_prune_per_layer(packet: &GradientPacket, p: f64) -> Result<GradientPacket> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Infeasible(format!("prune ratio {} outside [0, 1)", p)));
    }
    let mut out = packet.clone();
    for (_, t) in &mut out.grads {
        let n = t.len();
        let zero_count = (p * n as f64).floor() as usize;
        if zero_count == 0 {
            continue;
        }
        let mut order: Vec<(f64, usize)> =
            t.values().iter().enumerate().map(|(i, v)| (v.abs(), i)).collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, idx) in order.iter().take(zero_count) {
            t.values_mut()[idx] = 0.0;
        }
    }
    Ok(out)
}

/// Uniform sample from the probability simplex with each coordinate capped
/// by `upper_bound`, via exponential spacings with rejection of violating
/// draws.
pub fn sample_coefficients(k: usize, upper_bound: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if k == 0 || upper_bound * (k as f64) < 1.0 {
        return Err(Error::Infeasible(format!(
            "cannot place {} coefficients summing to 1 under bound {}",
            k, upper_bound
        )));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    loop {
        let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let total: f64 = raw.iter().sum();
        let lambda: Vec<f64> = raw.iter().map(|v| v / total).collect();
        if lambda.iter().all(|&v| v <= upper_bound) {
            return Ok(lambda);
        }
    }
}

/// One encoding: which privates were mixed, with what coefficients, and
/// (for InstaHide) which sign pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodingRecord {
    pub epoch: usize,
    /// Private-set indices; the first entry is the anchor image the
    /// encoding stands in for.
    pub sources: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Per-pixel sign pattern as a bitstring, '1' = +1, '0' = -1.
    /// Absent for MixUp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signs: Option<String>,
}

impl EncodingRecord {
    pub fn sign_vec(&self) -> Option<Vec<f64>> {
        self.signs.as_ref().map(|s| {
            s.chars()
                .map(|c| if c == '1' { 1.0 } else { -1.0 })
                .collect()
        })
    }
}

pub struct EncodedBatch {
    pub images: Vec<Tensor>,
    /// `(n, classes)` probability rows.
    pub labels: Tensor,
    pub records: Vec<EncodingRecord>,
}

/// Encode every private image once: composite `sigma ∘ Σ λ_i x_i` with a
/// composite label built from the same coefficients. Fresh coefficients
/// and sign patterns are drawn per image per call, so successive epochs
/// never repeat an encoding.
pub fn encode_batch(
    images: &[Tensor],
    labels: &[usize],
    classes: usize,
    cfg: &DefenseConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EncodedBatch> {
    cfg.validate()?;
    let n = images.len();
    if n == 0 || n != labels.len() {
        return Err(Error::Config(format!(
            "{} images with {} labels",
            n,
            labels.len()
        )));
    }
    if cfg.mix_k > n {
        return Err(Error::Config(format!(
            "k = {} exceeds private set size {}",
            cfg.mix_k, n
        )));
    }
    let d = images[0].len();
    let k = cfg.mix_k;

    let mut out_images = Vec::with_capacity(n);
    let mut out_labels = vec![0.0; n * classes];
    let mut records = Vec::with_capacity(n);

    // All mixing randomness is drawn before any sign pattern, so a MixUp
    // run and an InstaHide run from equal rng states mix identically and
    // differ only by the flip.
    let mut mixes = Vec::with_capacity(n);
    for anchor in 0..n {
        // anchor plus k-1 distinct partners
        let mut sources = vec![anchor];
        while sources.len() < k {
            let cand = rng.random_range(0..n);
            if !sources.contains(&cand) {
                sources.push(cand);
            }
        }
        let lambda = sample_coefficients(k, cfg.coef_upper_bound, rng)?;
        mixes.push((sources, lambda));
    }

    for (anchor, (sources, lambda)) in mixes.into_iter().enumerate() {
        let mut mixed = vec![0.0; d];
        for (&src, &coef) in sources.iter().zip(lambda.iter()) {
            if images[src].len() != d {
                return Err(Error::Config("private images differ in size".into()));
            }
            for (m, v) in mixed.iter_mut().zip(images[src].values()) {
                *m += coef * v;
            }
            let y = labels[src];
            if y >= classes {
                return Err(Error::Config(format!("label {} out of range", y)));
            }
            out_labels[anchor * classes + y] += coef;
        }

        let signs = if cfg.sign_flip {
            let bits: String = (0..d).map(|_| if rng.random_bool(0.5) { '1' } else { '0' }).collect();
            for (m, c) in mixed.iter_mut().zip(bits.chars()) {
                if c == '0' {
                    *m = -*m;
                }
            }
            Some(bits)
        } else {
            None
        };

        out_images.push(Tensor::new(images[anchor].shape().to_vec(), mixed)?);
        records.push(EncodingRecord {
            epoch,
            sources,
            coefficients: lambda,
            signs,
        });
    }

    Ok(EncodedBatch {
        images: out_images,
        labels: Tensor::new(vec![n, classes], out_labels)?,
        records,
    })
}

/// Composite label for arbitrary (sources, coefficients) pairs; used when
/// reconstructing what a client trained on.
pub fn composite_label(record: &EncodingRecord, labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut row = vec![0.0; classes];
    for (&s, &c) in record.sources.iter().zip(record.coefficients.iter()) {
        let y = labels
            .get(s)
            .copied()
            .ok_or_else(|| Error::Config(format!("source {} outside private set", s)))?;
        row[y] += c;
    }
    Tensor::new(vec![classes], row)
}
