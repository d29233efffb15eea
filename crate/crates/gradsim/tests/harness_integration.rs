//! End-to-end harness behavior: deterministic training, the eavesdropper
//! tap contract, exact server aggregation, bitwise-reproducible report
//! bundles, and the full encode/eavesdrop/invert/decode pipeline.

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gradsim::attack::{AttackConfig, LabelKnowledge};
use gradsim::data_io::{
    load_config, BnKnowledge, DatasetSelection, ExperimentConfig, ModelSelection,
    ThreatModelConfig, CONFIG_VERSION,
};
use gradsim::defenses::DefenseConfig;
use gradsim::harness::{
    resolve_dataset, run_attack_experiment, sweep, train, FederationSim, RunManifest, SweepConfig,
    TrainConfig,
};
use gradsim::models::{aggregate_packets, build_model, ShareConfig};

fn digits_dir() -> String {
    format!("{}/../../data/digits", env!("CARGO_MANIFEST_DIR"))
}

fn tiny_train_config(out: &str) -> TrainConfig {
    serde_json::from_value(serde_json::json!({
        "model": {"arch": "mlp2", "classes": 10, "seed": 3},
        "dataset": {"name": "digits", "path": digits_dir(), "take": 64},
        "epochs": 1,
        "batch_size": 16,
        "seed": 9,
        "out_dir": out,
    }))
    .unwrap()
}

#[test]
fn training_is_seed_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train(&tiny_train_config(d1.path().to_str().unwrap())).unwrap();
    let b = train(&tiny_train_config(d2.path().to_str().unwrap())).unwrap();
    assert_eq!(a.accuracy_log, b.accuracy_log);
    let ca = fs::read(d1.path().join("model.gsim")).unwrap();
    let cb = fs::read(d2.path().join("model.gsim")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train_config(dir.path().to_str().unwrap());
    cfg.epochs = 0;
    let out = train(&cfg).unwrap();
    let trained = gradsim::models::load_checkpoint(&out.checkpoint).unwrap();
    let fresh = build_model("mlp2", (1, 8, 8), 10, 3).unwrap();
    for (a, b) in trained.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.value, b.value, "{} drifted with zero epochs", a.name);
    }
}

#[test]
fn tap_never_carries_unshared_statistics() {
    let ds = resolve_dataset(&DatasetSelection {
        name: "digits".into(),
        path: Some(digits_dir()),
        subset: None,
        take: Some(48),
        downscale: 0,
        upscale: 0,
    })
    .unwrap();
    let model = build_model("convnet6-bn", (1, 8, 8), 10, 5).unwrap();
    let shards = vec![(0..24).collect::<Vec<_>>(), (24..48).collect()];
    let mut sim = FederationSim::new(
        model,
        shards,
        DefenseConfig::default(),
        ShareConfig {
            bn_stats: false,
            labels: false,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2 {
        sim.round(&ds, 8, 0.05, &mut rng).unwrap();
    }
    assert_eq!(sim.tap.len(), 4);
    // structural scan over everything that crossed the tap
    for rec in &sim.tap {
        let json = serde_json::to_value(rec).unwrap();
        assert!(json["packet"]["bn_stats"].is_null(), "batch stats leaked");
        assert!(json["packet"]["labels"].is_null(), "labels leaked");
    }
}

#[test]
fn server_aggregation_is_exact_mean() {
    let ds = resolve_dataset(&DatasetSelection {
        name: "digits".into(),
        path: Some(digits_dir()),
        subset: None,
        take: Some(32),
        downscale: 0,
        upscale: 0,
    })
    .unwrap();
    let mut model = build_model("mlp2", (1, 8, 8), 10, 7).unwrap();
    let mut packets = Vec::new();
    for c in 0..3 {
        let idx: Vec<usize> = (c * 8..(c + 1) * 8).collect();
        let (batch, labels) = ds.batch(&idx).unwrap();
        packets.push(
            gradsim::models::client_step(
                &mut model,
                &batch,
                &gradsim::models::Labels::Hard(labels),
                ShareConfig::default(),
            )
            .unwrap(),
        );
    }
    let mean = aggregate_packets(&packets).unwrap();
    for (pi, (_, got)) in mean.grads.iter().enumerate() {
        for (vi, v) in got.values().iter().enumerate() {
            let hand = (packets[0].grads[pi].1.values()[vi]
                + packets[1].grads[pi].1.values()[vi]
                + packets[2].grads[pi].1.values()[vi])
                / 3.0;
            assert_eq!(*v, hand, "aggregation differs at {}:{}", pi, vi);
        }
    }
    assert_eq!(mean.batch_size, 24);
}

fn tiny_experiment(out: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        model: ModelSelection {
            arch: "mlp2".into(),
            classes: 10,
            seed: 21,
        },
        dataset: DatasetSelection {
            name: "digits".into(),
            path: Some(digits_dir()),
            subset: None,
            take: Some(8),
            downscale: 0,
            upscale: 0,
        },
        defense: DefenseConfig::default(),
        attack: AttackConfig {
            iterations: 60,
            alpha_tv: 0.0,
            log_every: 20,
            ..AttackConfig::default()
        },
        threat: ThreatModelConfig::default(),
        batch_size: 1,
        eavesdrop_epochs: 2,
        seed,
        out_dir: out.into(),
    }
}

#[test]
fn identical_configs_give_bitwise_identical_bundles() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut c1 = tiny_experiment(d1.path().to_str().unwrap(), 33);
    let mut c2 = tiny_experiment(d2.path().to_str().unwrap(), 33);
    // out_dir differs, so exclude it from the identity by pinning configs
    // to the same logical content: manifest hashes cover config + inputs.
    c1.out_dir = d1.path().join("run").display().to_string();
    c2.out_dir = d2.path().join("run").display().to_string();
    run_attack_experiment(&c1, None).unwrap();
    run_attack_experiment(&c2, None).unwrap();

    let m1: RunManifest = load_config(&d1.path().join("run/manifest.json")).unwrap();
    let m2: RunManifest = load_config(&d2.path().join("run/manifest.json")).unwrap();
    // out_dir participates in the config hash; everything else must agree
    assert_eq!(m1.seed, m2.seed);
    let names1: Vec<&String> = m1.outputs.iter().map(|(n, _)| n).collect();
    let names2: Vec<&String> = m2.outputs.iter().map(|(n, _)| n).collect();
    assert_eq!(names1, names2);
    for ((n1, h1), (n2, h2)) in m1.outputs.iter().zip(m2.outputs.iter()) {
        if n1 == "config.json" || n1 == "report.json" {
            continue; // these embed the differing out_dir path
        }
        assert_eq!(n1, n2);
        assert_eq!(h1, h2, "output {} differs between identical runs", n1);
    }
}

#[test]
fn rerun_in_same_dir_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path().join("run").to_str().unwrap(), 44);
    run_attack_experiment(&cfg, None).unwrap();
    let m1: RunManifest = load_config(&dir.path().join("run/manifest.json")).unwrap();
    run_attack_experiment(&cfg, None).unwrap();
    let m2: RunManifest = load_config(&dir.path().join("run/manifest.json")).unwrap();
    assert_eq!(m1.manifest_hash, m2.manifest_hash);
    assert_eq!(m1.outputs, m2.outputs);
}

#[test]
fn encoding_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(dir.path().join("run").to_str().unwrap(), 55);
    cfg.batch_size = 4;
    cfg.dataset.take = Some(4);
    cfg.defense = DefenseConfig {
        prune_ratio: 0.0,
        mix_k: 2,
        coef_upper_bound: 0.65,
        sign_flip: true,
    };
    cfg.attack.iterations = 150;
    cfg.eavesdrop_epochs = 3;
    let out = run_attack_experiment(&cfg, None).unwrap();
    assert!(out.decode_underdetermined.is_some());
    assert!(out.encoding_metrics.is_some());
    assert!(dir.path().join("run/encoding_records.json").exists());
    assert!(dir.path().join("run/recovered.pgm").exists());
    assert!(out.metrics.mean_mse.is_finite());

    // records are replayable json
    let records: Vec<gradsim::defenses::EncodingRecord> =
        load_config(&dir.path().join("run/encoding_records.json")).unwrap();
    assert_eq!(records.len(), 3 * 4);
    assert!(records.iter().all(|r| r.signs.is_some()));
}

#[test]
fn sweep_grid_size_and_report_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_experiment(dir.path().join("sweep").to_str().unwrap(), 66);
    let cfg = SweepConfig {
        base,
        alpha_tv: vec![0.0, 0.01],
        prune_ratio: vec![0.0],
        seeds: vec![1, 2],
    };
    let out = sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), 4);
    assert!(dir.path().join("sweep/sweep.csv").exists());
    let text = gradsim::harness::render_report(&dir.path().join("sweep")).unwrap();
    assert!(text.contains("alpha_tv"));

    // single-cell report renders too
    let cell = dir.path().join("sweep").join("cell_tv0_p0_s1");
    let text = gradsim::harness::render_report(&cell).unwrap();
    assert!(text.contains("mean mse"));
}

#[test]
fn tuned_alpha_tv_beats_zero_under_heavy_pruning() {
    // with 99.9% of gradient entries zeroed, recovery is noise-dominated
    // and the image prior earns its keep; the sweep's best-alpha selection
    // must find that
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny_experiment(dir.path().join("sweep").to_str().unwrap(), 0);
    base.model.seed = 7_000;
    base.dataset.take = Some(16);
    base.batch_size = 16;
    base.defense.prune_ratio = 0.999;
    base.attack.iterations = 1_500;
    base.attack.log_every = 1_500;
    let cfg = SweepConfig {
        base,
        alpha_tv: vec![0.0, 0.01],
        prune_ratio: vec![],
        seeds: vec![1, 2, 3],
    };
    let out = sweep(&cfg).unwrap();
    assert_eq!(out.rows.len(), 6);
    assert_eq!(out.best_alpha_tv, 0.01);
    let med = |alpha: f64| {
        let mut v: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.alpha_tv == alpha)
            .map(|r| r.mean_mse)
            .collect();
        gradsim::harness::median(&mut v)
    };
    assert!(
        med(0.01) < med(0.0),
        "tuned {} vs zero {}",
        med(0.01),
        med(0.0)
    );
}

#[test]
fn bn_threat_modes_run_through_experiment() {
    for (bn, sharing) in [
        (BnKnowledge::Exact, true),
        (BnKnowledge::Proxy, false),
        (BnKnowledge::Infer, false),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_experiment(dir.path().join("run").to_str().unwrap(), 77);
        cfg.model.arch = "convnet6-bn".into();
        cfg.batch_size = 2;
        cfg.attack.iterations = 30;
        cfg.attack.labels = LabelKnowledge::Granted;
        cfg.threat.bn = bn;
        cfg.threat.bn_sharing = sharing;
        let out = run_attack_experiment(&cfg, None).unwrap();
        assert!(out.final_objective.is_finite(), "mode {:?}", bn);
    }
}
