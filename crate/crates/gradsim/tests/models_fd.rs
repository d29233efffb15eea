//! client_step gradients against finite differences of the training loss
//! for every zoo architecture.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gradsim::graph::Graph;
use gradsim::models::{build_model, client_step, Labels, Model, ShareConfig};
use gradsim::nn;
use gradsim::tensor::Tensor;

fn loss_value(model: &Model, batch: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(batch);
    let nodes = model.param_leaves(&mut g);
    let fwd = model.forward(&mut g, x, &nodes, None).unwrap();
    let t = nn::one_hot(labels, model.classes).unwrap();
    let tn = g.constant(&t);
    let loss = nn::softmax_cross_entropy(&mut g, fwd.logits, tn).unwrap();
    g.item(loss)
}

#[test]
fn client_step_matches_finite_differences_across_zoo() {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for arch in ["mlp2", "convnet6", "convnet6-bn", "mini-resnet"] {
        let mut model = build_model(arch, (1, 8, 8), 10, 21).unwrap();
        let b = 3;
        let batch = Tensor::new(
            vec![b, 1, 8, 8],
            (0..b * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..10)).collect();

        let packet = client_step(
            &mut model,
            &batch,
            &Labels::Hard(labels.clone()),
            ShareConfig::default(),
        )
        .unwrap();
        // client_step drifted the running stats; rebuild so the finite
        // difference sees the same forward pass (batch stats, not running).
        let model = build_model(arch, (1, 8, 8), 10, 21).unwrap();

        let mut worst: f64 = 0.0;
        for (pi, param) in model.params.iter().enumerate() {
            let grad = &packet.grads[pi].1;
            assert_eq!(packet.grads[pi].0, param.name);
            let n = param.value.len();
            let sample: Vec<usize> = if n <= 4 {
                (0..n).collect()
            } else {
                (0..4).map(|_| rng.random_range(0..n)).collect()
            };
            for ci in sample {
                let mut mp = model.clone();
                mp.params[pi].value.values_mut()[ci] += eps;
                let mut mm = model.clone();
                mm.params[pi].value.values_mut()[ci] -= eps;
                let fd = (loss_value(&mp, &batch, &labels) - loss_value(&mm, &batch, &labels))
                    / (2.0 * eps);
                let rel = (grad.values()[ci] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-6,
                    "{} {}[{}]: grad {} vs fd {} (rel {:.2e})",
                    arch,
                    param.name,
                    ci,
                    grad.values()[ci],
                    fd,
                    rel
                );
            }
        }
        println!("{arch}: worst rel err {worst:.3e}");
    }
}

#[test]
fn running_stats_update_is_seed_deterministic() {
    let run = || {
        let mut m = build_model("convnet6-bn", (1, 8, 8), 10, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for step in 0..3 {
            let batch = Tensor::new(
                vec![2, 1, 8, 8],
                (0..128).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            client_step(
                &mut m,
                &batch,
                &Labels::Hard(vec![step % 10, (step + 1) % 10]),
                ShareConfig::default(),
            )
            .unwrap();
        }
        m.running
            .iter()
            .flat_map(|r| r.mean.values().iter().chain(r.var.values()).map(|v| v.to_bits()))
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}
