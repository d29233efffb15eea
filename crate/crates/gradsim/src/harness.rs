//! Orchestration: desk-scale training, a federated-sharing simulation with
//! an eavesdropper tap, end-to-end attack experiments (single step for
//! gradient defenses, T eavesdropped epochs plus decode for encoding
//! defenses), hyperparameter sweeps, and reproducible report bundles.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    self, LabelKnowledge, LossRow, ReconstructionReport,
};
use crate::data_io::{
    self, load_config, save_config, save_image_grid, sha256_file, sha256_hex, BnKnowledge, Dataset,
    DatasetSelection, ExperimentConfig, ModelSelection,
};
use crate::defenses::{self, DefenseConfig, EncodingRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{self, MetricReport};
use crate::models::{
    self, aggregate_packets, build_model, client_step, AggregatedStats, BnMode, GradientPacket,
    Labels, Model, ShareConfig,
};
use crate::tensor::Tensor;

/// Batch sizes the evaluation treats as first-class: the minimum (and
/// unrealistic) single image plus two small but realistic sizes.
pub const ATTACK_BATCH_PRESETS: [usize; 3] = [1, 16, 32];

// ---------------------------------------------------------------------
// dataset resolution
// ---------------------------------------------------------------------

/// Synthetic fallback: blocky class-dependent patterns plus seeded noise.
/// Learnable by a small convnet in a handful of steps.
fn synthetic_dataset(n: usize, side: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut v = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let stripe = ((y * classes / side) + class) % 2 == 0;
                let base = if stripe { 0.8 } else { 0.2 };
                let wave = ((x as f64 / side as f64) * std::f64::consts::PI * (1 + class % 3) as f64)
                    .sin()
                    .abs()
                    * 0.3;
                let noise: f64 = rng.random_range(-0.05..0.05);
                v[y * side + x] = (base + wave * ((class % 2) as f64) + noise).clamp(0.0, 1.0);
            }
        }
        images.push(Tensor::new(vec![1, side, side], v).expect("shape"));
        labels.push(class);
    }
    Dataset {
        name: "synthetic".into(),
        images,
        labels,
        classes,
        source: format!("synthetic(seed={})", seed),
        checksum: format!("synthetic-{}-{}-{}", n, side, seed),
    }
}

/// Resolve a dataset selection against the filesystem.
pub fn resolve_dataset(sel: &DatasetSelection) -> Result<Dataset> {
    let mut ds = match sel.name.as_str() {
        "mnist" => {
            let dir = sel
                .path
                .clone()
                .or_else(|| std::env::var("MNIST_DIR").ok())
                .unwrap_or_else(|| "data/mnist".into());
            data_io::load_mnist(Path::new(&dir), "train")?
        }
        "digits" => {
            let dir = sel.path.clone().unwrap_or_else(|| "data/digits".into());
            data_io::load_mnist(Path::new(&dir), "train")?
        }
        "cifar10" => {
            let path = sel.path.clone().unwrap_or_else(|| "data/cifar10/data_batch_1.bin".into());
            data_io::load_cifar10(Path::new(&path))?
        }
        "synthetic" => synthetic_dataset(512, 8, 10, 7),
        other => return Err(Error::Config(format!("unknown dataset '{}'", other))),
    };
    if let Some(idx) = &sel.subset {
        ds = ds.subset(idx)?;
    } else if let Some(take) = sel.take {
        let idx: Vec<usize> = (0..take.min(ds.len())).collect();
        ds = ds.subset(&idx)?;
    }
    for _ in 0..sel.downscale {
        ds = ds.downscale2x()?;
    }
    for _ in 0..sel.upscale {
        ds = ds.upscale2x()?;
    }
    Ok(ds)
}

fn input_shape_of(ds: &Dataset) -> (usize, usize, usize) {
    let s = ds.image_shape();
    (s[0], s[1], s[2])
}

// ---------------------------------------------------------------------
// training
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSelection,
    pub dataset: DatasetSelection,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning rate multiplies by `lr_decay_factor` every this many
    /// epochs (0 disables).
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    /// Fraction of the dataset held out for accuracy measurement.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub defense: DefenseConfig,
    pub seed: u64,
    pub out_dir: String,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub accuracy_log: Vec<(usize, f64)>,
    pub final_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Test-set accuracy with BatchNorm in inference mode (running stats).
pub fn test_accuracy(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let agg: Vec<(Tensor, Tensor)> = model
        .running
        .iter()
        .map(|r| (r.mean.clone(), r.var.clone()))
        .collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(64) {
        let (batch, labels) = ds.batch(chunk)?;
        let mut g = Graph::new();
        let x = g.constant(&batch);
        let nodes = model.param_leaves(&mut g);
        let supplied = (!agg.is_empty()).then_some(agg.as_slice());
        let fwd = model.forward(&mut g, x, &nodes, supplied)?;
        let logits = g.tensor(fwd.logits);
        let c = model.classes;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.values()[i * c..(i + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// SGD-with-momentum training over the defended pipeline: inputs encoded
/// when the defense says so, shared gradients pruned before they update
/// the model (the server only ever sees the defended packet).
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.defense.validate()?;
    let ds = resolve_dataset(&cfg.dataset)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let test_n = ((ds.len() as f64) * cfg.test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(test_n.min(ds.len().saturating_sub(1)));
    let test_idx = test_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let shape = input_shape_of(&ds);
    let mut model = build_model(&cfg.model.arch, shape, cfg.model.classes, cfg.model.seed)?;
    let mut velocity: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut lr = cfg.learning_rate;
    let mut log = Vec::new();

    let initial_acc = test_accuracy(&model, &ds, &test_idx)?;
    log.push((0usize, initial_acc));

    for epoch in 0..cfg.epochs {
        if cfg.lr_decay_every > 0 && epoch > 0 && epoch % cfg.lr_decay_every == 0 {
            lr *= cfg.lr_decay_factor;
        }
        train_idx.shuffle(&mut rng);

        // Encoding defenses re-encode the whole shard each epoch.
        let epoch_data: Option<(Vec<Tensor>, Tensor)> = if cfg.defense.encodes_inputs() {
            let mut imgs = Vec::with_capacity(train_idx.len());
            let mut labels = Vec::with_capacity(train_idx.len());
            for &i in &train_idx {
                imgs.push(ds.images[i].clone());
                labels.push(ds.labels[i]);
            }
            let enc = defenses::encode_batch(&imgs, &labels, ds.classes, &cfg.defense, epoch, &mut rng)?;
            let label_rows = enc.labels;
            Some((enc.images, label_rows))
        } else {
            None
        };

        for (step, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = match &epoch_data {
                Some((enc_imgs, label_rows)) => {
                    let local: Vec<usize> = (step * cfg.batch_size
                        ..(step * cfg.batch_size + chunk.len()))
                        .collect();
                    let mut values = Vec::new();
                    let classes = ds.classes;
                    let mut rows = Vec::new();
                    for &li in &local {
                        values.extend_from_slice(enc_imgs[li].values());
                        rows.extend_from_slice(
                            &label_rows.values()[li * classes..(li + 1) * classes],
                        );
                    }
                    let mut bshape = vec![chunk.len()];
                    bshape.extend_from_slice(enc_imgs[0].shape());
                    (
                        Tensor::new(bshape, values)?,
                        Labels::Soft(Tensor::new(vec![chunk.len(), classes], rows)?),
                    )
                }
                None => {
                    let (b, l) = ds.batch(chunk)?;
                    (b, Labels::Hard(l))
                }
            };

            let mut packet = client_step(&mut model, &batch, &labels, ShareConfig::default())?;
            if cfg.defense.prune_ratio > 0.0 {
                packet = defenses::grad_prune(&packet, cfg.defense.prune_ratio)?;
            }
            for ((_, grad), (param, vel)) in packet
                .grads
                .iter()
                .zip(model.params.iter_mut().zip(velocity.iter_mut()))
            {
                for ((g, p), v) in grad
                    .values()
                    .iter()
                    .zip(param.value.values_mut())
                    .zip(vel.values_mut())
                {
                    if !g.is_finite() {
                        return Err(Error::Numerical(format!(
                            "divergence: non-finite gradient in epoch {} step {}",
                            epoch, step
                        )));
                    }
                    *v = cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        let acc = test_accuracy(&model, &ds, &test_idx)?;
        log.push((epoch + 1, acc));
    }

    let checkpoint = out_dir.join("model.gsim");
    models::save_checkpoint(&model, &checkpoint)?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|(e, a)| vec![e.to_string(), format!("{:.6}", a)])
        .collect();
    data_io::write_csv(&out_dir.join("accuracy.csv"), &["epoch", "test_accuracy"], &rows)?;

    Ok(TrainOutcome {
        checkpoint,
        final_accuracy: log.last().map(|(_, a)| *a).unwrap_or(0.0),
        accuracy_log: log,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    })
}

// ---------------------------------------------------------------------
// federation simulation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TapRecord {
    pub step: usize,
    pub client: usize,
    pub packet: GradientPacket,
}

/// Server plus clients over disjoint shards; the eavesdropper tap records
/// exactly the packets that cross the wire (post-defense).
pub struct FederationSim {
    pub model: Model,
    pub shards: Vec<Vec<usize>>,
    pub defense: DefenseConfig,
    pub share: ShareConfig,
    pub tap: Vec<TapRecord>,
    pub step: usize,
}

impl FederationSim {
    pub fn new(model: Model, shards: Vec<Vec<usize>>, defense: DefenseConfig, share: ShareConfig) -> Self {
        FederationSim {
            model,
            shards,
            defense,
            share,
            tap: Vec::new(),
            step: 0,
        }
    }

    /// One synchronous round: every client computes a defended packet on a
    /// batch from its shard; the server applies the exact mean.
    pub fn round(&mut self, ds: &Dataset, batch_size: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut packets = Vec::new();
        for (ci, shard) in self.shards.iter().enumerate() {
            let take = batch_size.min(shard.len());
            let mut pool = shard.clone();
            pool.shuffle(rng);
            let (batch, labels) = ds.batch(&pool[..take])?;
            let mut packet = client_step(&mut self.model, &batch, &Labels::Hard(labels), self.share)?;
            if self.defense.prune_ratio > 0.0 {
                packet = defenses::grad_prune(&packet, self.defense.prune_ratio)?;
            }
            self.tap.push(TapRecord {
                step: self.step,
                client: ci,
                packet: packet.clone(),
            });
            packets.push(packet);
        }
        let mean = aggregate_packets(&packets)?;
        for ((_, g), p) in mean.grads.iter().zip(self.model.params.iter_mut()) {
            for (gv, pv) in g.values().iter().zip(p.value.values_mut()) {
                *pv -= lr * gv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------
// attack experiments
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    /// Metrics of the final private-image estimates.
    pub metrics: MetricReport,
    /// Metrics of recovered encodings vs true encodings (encoding
    /// defenses only).
    pub encoding_metrics: Option<MetricReport>,
    pub final_objective: f64,
    pub decode_underdetermined: Option<bool>,
    pub files: Vec<PathBuf>,
}

fn bn_mode_from_threat(threat: &data_io::ThreatModelConfig, model: &Model) -> BnMode {
    if model.bn_layer_count() == 0 {
        return BnMode::None;
    }
    let agg = || AggregatedStats(
        model
            .running
            .iter()
            .map(|r| (r.mean.clone(), r.var.clone()))
            .collect(),
    );
    match threat.bn {
        BnKnowledge::None => BnMode::None,
        BnKnowledge::Exact => BnMode::Exact,
        BnKnowledge::Proxy => BnMode::Proxy(agg()),
        BnKnowledge::Infer => BnMode::Infer(agg()),
    }
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                format!("{:.12e}", r.grad_match),
                format!("{:.12e}", r.tv),
                format!("{:.12e}", r.bn_reg),
                format!("{:.12e}", r.total),
            ]
        })
        .collect();
    data_io::write_csv(path, &["iteration", "grad_match", "tv", "bn_reg", "total"], &data)
}

fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut rows: Vec<Vec<String>> = report
        .per_image
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                report.permutation[i].to_string(),
                format!("{:.10e}", s.mse),
                format!("{:.6}", s.psnr),
                format!("{:.6}", s.ssim),
            ]
        })
        .collect();
    rows.push(vec![
        "mean".into(),
        String::new(),
        format!("{:.10e}", report.mean_mse),
        format!("{:.6}", report.mean_psnr),
        format!("{:.6}", report.mean_ssim),
    ]);
    data_io::write_csv(path, &["image", "matched_truth", "mse", "psnr_db", "ssim"], &rows)
}

/// Model resolution for experiments: load a checkpoint when given,
/// otherwise deterministic fresh initialization.
fn resolve_model(sel: &ModelSelection, checkpoint: Option<&str>, shape: (usize, usize, usize)) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let m = models::load_checkpoint(Path::new(p))?;
            if m.arch != sel.arch {
                return Err(Error::Config(format!(
                    "checkpoint is '{}', config wants '{}'",
                    m.arch, sel.arch
                )));
            }
            Ok(m)
        }
        None => build_model(&sel.arch, shape, sel.classes, sel.seed),
    }
}

/// Run one end-to-end attack experiment and persist the report bundle.
pub fn run_attack_experiment(cfg: &ExperimentConfig, checkpoint: Option<&str>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let ds = resolve_dataset(&cfg.dataset)?;
    if ds.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} cannot form a batch of {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let shape = input_shape_of(&ds);
    let mut model = resolve_model(&cfg.model, checkpoint, shape)?;
    let bn_mode = bn_mode_from_threat(&cfg.threat, &model);
    let share = ShareConfig {
        bn_stats: cfg.threat.bn_sharing,
        labels: matches!(cfg.threat.labels, LabelKnowledge::Granted),
    };
    let mut attack_cfg = cfg.attack.clone();
    attack_cfg.labels = cfg.threat.labels;
    attack_cfg.seed = cfg.seed;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xeaea_e5e5);
    let indices: Vec<usize> = (0..cfg.batch_size).collect();
    let mut files = Vec::new();
    let mut stages: Vec<(String, f64)> = Vec::new();
    let mut stage_start = Instant::now();
    let stage = |stages: &mut Vec<(String, f64)>, start: &mut Instant, name: &str| {
        stages.push((name.to_string(), start.elapsed().as_secs_f64()));
        *start = Instant::now();
    };

    let outcome = if cfg.defense.encodes_inputs() {
        // --- encoding defense: eavesdrop T epochs, invert each, decode ---
        if cfg.defense.sign_flip {
            attack_cfg.abs_tv = true;
            attack_cfg.pixel_min = -1.0;
            attack_cfg.pixel_max = 1.0;
        }
        let privates: Vec<Tensor> = indices.iter().map(|&i| ds.images[i].clone()).collect();
        let private_labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
        let (truth_batch, _) = ds.batch(&indices)?;

        let mut pairs: Vec<(EncodingRecord, Tensor)> = Vec::new();
        let mut enc_reports: Vec<(usize, ReconstructionReport)> = Vec::new();
        let mut all_records: Vec<EncodingRecord> = Vec::new();
        let mut enc_metric: Option<MetricReport> = None;

        for epoch in 0..cfg.eavesdrop_epochs {
            let enc = defenses::encode_batch(
                &privates,
                &private_labels,
                ds.classes,
                &cfg.defense,
                epoch,
                &mut rng,
            )?;
            let mut eshape = vec![enc.images.len()];
            eshape.extend_from_slice(enc.images[0].shape());
            let mut evalues = Vec::new();
            for img in &enc.images {
                evalues.extend_from_slice(img.values());
            }
            let encoded_batch = Tensor::new(eshape, evalues)?;
            let labels = Labels::Soft(enc.labels.clone());

            let mut packet = client_step(&mut model, &encoded_batch, &labels, share)?;
            if cfg.defense.prune_ratio > 0.0 {
                packet = defenses::grad_prune(&packet, cfg.defense.prune_ratio)?;
            }

            let mut epoch_cfg = attack_cfg.clone();
            epoch_cfg.seed = cfg.seed.wrapping_add(1_000 + epoch as u64);
            let report = attack::invert_with_mode(&packet, &model, &epoch_cfg, &bn_mode)?;

            // Grant: assign recovered slots to encoding records by
            // matching against the true encoded batch (the similarity
            // pipeline the grants replace).
            let perm = metrics::match_batch(&report.best, &encoded_batch)?;
            let recovered = metrics::split_batch(&report.best);
            if epoch == 0 {
                enc_metric = Some(metrics::score(&report.best, &encoded_batch, &perm)?);
            }
            for (slot, rec_img) in recovered.into_iter().enumerate() {
                let mut record = enc.records[perm[slot]].clone();
                if !cfg.threat.grant_sign_patterns {
                    record.signs = None;
                }
                pairs.push((record, rec_img));
            }
            all_records.extend(enc.records);
            enc_reports.push((epoch, report));
        }

        stage(&mut stages, &mut stage_start, "eavesdrop_and_invert");
        let decode = attack::decode_encodings(&pairs, privates.len(), privates[0].shape())?;
        let mut dvalues = Vec::new();
        for img in &decode.images {
            dvalues.extend_from_slice(img.values());
        }
        let decoded_batch = Tensor::new(truth_batch.shape().to_vec(), dvalues)?;
        stage(&mut stages, &mut stage_start, "decode");
        let metric = metrics::match_and_score(&decoded_batch, &truth_batch)?;

        let records_path = out_dir.join("encoding_records.json");
        fs::write(&records_path, serde_json::to_string_pretty(&all_records)?)?;
        files.push(records_path);

        let losses_path = out_dir.join("losses.csv");
        write_loss_csv(&losses_path, &enc_reports[0].1.trajectory)?;
        files.push(losses_path);

        let truth_grid = save_image_grid(&privates, &out_dir.join(grid_name(&privates, "truth")))?;
        files.push(truth_grid.path);
        let clamped: Vec<Tensor> = decode
            .images
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.clamp_in_place(0.0, 1.0);
                t
            })
            .collect();
        let rec_grid = save_image_grid(&clamped, &out_dir.join(grid_name(&clamped, "recovered")))?;
        files.push(rec_grid.path);

        let final_objective = enc_reports
            .iter()
            .map(|(_, r)| r.restarts[r.best_restart].final_objective)
            .sum::<f64>()
            / enc_reports.len() as f64;

        ExperimentOutcome {
            out_dir: out_dir.clone(),
            metrics: metric,
            encoding_metrics: enc_metric,
            final_objective,
            decode_underdetermined: Some(decode.underdetermined),
            files: files.clone(),
        }
    } else {
        // --- plain or pruned gradients: one shared step ---
        let (batch, labels) = ds.batch(&indices)?;
        let mut packet = client_step(&mut model, &batch, &Labels::Hard(labels), share)?;
        if cfg.defense.prune_ratio > 0.0 {
            packet = defenses::grad_prune(&packet, cfg.defense.prune_ratio)?;
        }
        let report = attack::invert_with_mode(&packet, &model, &attack_cfg, &bn_mode)?;
        stage(&mut stages, &mut stage_start, "invert");
        let metric = metrics::match_and_score(&report.best, &batch)?;

        let losses_path = out_dir.join("losses.csv");
        write_loss_csv(&losses_path, &report.trajectory)?;
        files.push(losses_path);

        let truth_imgs = metrics::split_batch(&batch);
        let truth_grid = save_image_grid(&truth_imgs, &out_dir.join(grid_name(&truth_imgs, "truth")))?;
        files.push(truth_grid.path);
        let rec_imgs = metrics::split_batch(&report.best);
        let rec_grid = save_image_grid(&rec_imgs, &out_dir.join(grid_name(&rec_imgs, "recovered")))?;
        files.push(rec_grid.path);

        ExperimentOutcome {
            out_dir: out_dir.clone(),
            metrics: metric,
            encoding_metrics: None,
            final_objective: report.restarts[report.best_restart].final_objective,
            decode_underdetermined: None,
            files: files.clone(),
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &outcome.metrics)?;
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&outcome)?)?;
    let config_path = out_dir.join("config.json");
    save_config(cfg, &config_path)?;

    stage(&mut stages, &mut stage_start, "score_and_persist");
    let mut all_files = outcome.files.clone();
    all_files.push(metrics_path);
    all_files.push(report_path);
    all_files.push(config_path);
    write_manifest(cfg, &ds, &out_dir, &all_files, started, stages)?;

    Ok(ExperimentOutcome {
        files: all_files,
        ..outcome
    })
}

fn grid_name(images: &[Tensor], stem: &str) -> String {
    if images[0].shape()[0] == 3 {
        format!("{}.ppm", stem)
    } else {
        format!("{}.pgm", stem)
    }
}

// ---------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the canonical config JSON plus input checksums — the
    /// identity of the run.
    pub manifest_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub input_checksums: Vec<(String, String)>,
    pub wall_clock_secs: f64,
    /// Per-stage wall clock (name, seconds), in execution order.
    pub stages: Vec<(String, f64)>,
    /// Every produced file with its checksum.
    pub outputs: Vec<(String, String)>,
}

fn write_manifest(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    out_dir: &Path,
    files: &[PathBuf],
    started: Instant,
    stages: Vec<(String, f64)>,
) -> Result<RunManifest> {
    let config_json = serde_json::to_string(cfg)?;
    let config_hash = sha256_hex(config_json.as_bytes());
    let inputs = vec![(ds.name.clone(), ds.checksum.clone())];
    let manifest_hash = sha256_hex(
        format!(
            "{}|{}",
            config_hash,
            inputs
                .iter()
                .map(|(n, c)| format!("{}:{}", n, c))
                .collect::<Vec<_>>()
                .join(",")
        )
        .as_bytes(),
    );
    let mut outputs = Vec::new();
    for f in files {
        outputs.push((
            f.file_name().unwrap().to_string_lossy().into_owned(),
            sha256_file(f)?,
        ));
    }
    outputs.sort();
    let manifest = RunManifest {
        manifest_hash,
        config_hash,
        seed: cfg.seed,
        input_checksums: inputs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        stages,
        outputs,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

// ---------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub alpha_tv: Vec<f64>,
    #[serde(default)]
    pub prune_ratio: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub alpha_tv: f64,
    pub prune_ratio: f64,
    pub seed: u64,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// α_TV with the lowest median MSE across seeds.
    pub best_alpha_tv: f64,
    pub out_dir: PathBuf,
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Grid sweep: one experiment per (α_TV, prune ratio, seed) cell, rows
/// aggregated into a CSV, best α_TV selected by median MSE.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    let alphas = if cfg.alpha_tv.is_empty() {
        vec![cfg.base.attack.alpha_tv]
    } else {
        cfg.alpha_tv.clone()
    };
    let prunes = if cfg.prune_ratio.is_empty() {
        vec![cfg.base.defense.prune_ratio]
    } else {
        cfg.prune_ratio.clone()
    };
    let seeds = if cfg.seeds.is_empty() {
        vec![cfg.base.seed]
    } else {
        cfg.seeds.clone()
    };

    let out_dir = PathBuf::from(&cfg.base.out_dir);
    fs::create_dir_all(&out_dir)?;
    let mut rows = Vec::new();
    for &alpha in &alphas {
        for &p in &prunes {
            for &seed in &seeds {
                let mut cell = cfg.base.clone();
                cell.attack.alpha_tv = alpha;
                cell.defense.prune_ratio = p;
                cell.seed = seed;
                cell.out_dir = out_dir
                    .join(format!("cell_tv{}_p{}_s{}", alpha, p, seed))
                    .display()
                    .to_string();
                let out = run_attack_experiment(&cell, None)?;
                rows.push(SweepRow {
                    alpha_tv: alpha,
                    prune_ratio: p,
                    seed,
                    mean_mse: out.metrics.mean_mse,
                    mean_psnr: out.metrics.mean_psnr,
                    final_objective: out.final_objective,
                });
            }
        }
    }

    let mut best_alpha_tv = alphas[0];
    let mut best_median = f64::INFINITY;
    for &alpha in &alphas {
        let mut vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.alpha_tv == alpha)
            .map(|r| r.mean_mse)
            .collect();
        let med = median(&mut vals);
        if med < best_median {
            best_median = med;
            best_alpha_tv = alpha;
        }
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.alpha_tv.to_string(),
                r.prune_ratio.to_string(),
                r.seed.to_string(),
                format!("{:.10e}", r.mean_mse),
                format!("{:.6}", r.mean_psnr),
                format!("{:.10e}", r.final_objective),
            ]
        })
        .collect();
    data_io::write_csv(
        &out_dir.join("sweep.csv"),
        &["alpha_tv", "prune_ratio", "seed", "mean_mse", "mean_psnr", "final_objective"],
        &csv_rows,
    )?;

    Ok(SweepOutcome {
        rows,
        best_alpha_tv,
        out_dir,
    })
}

/// Summarize a run directory (report.json or sweep.csv) as printable text.
pub fn render_report(dir: &Path) -> Result<String> {
    let report = dir.join("report.json");
    if report.exists() {
        let outcome: serde_json::Value = load_config(&report)?;
        let m = &outcome["metrics"];
        return Ok(format!(
            "run {}\n  mean mse  {}\n  mean psnr {}\n  mean ssim {}\n  final objective {}\n",
            dir.display(),
            m["mean_mse"],
            m["mean_psnr"],
            m["mean_ssim"],
            outcome["final_objective"],
        ));
    }
    let sweep_csv = dir.join("sweep.csv");
    if sweep_csv.exists() {
        return Ok(fs::read_to_string(sweep_csv)?);
    }
    Err(Error::Config(format!(
        "{} holds neither report.json nor sweep.csv",
        dir.display()
    )))
}
