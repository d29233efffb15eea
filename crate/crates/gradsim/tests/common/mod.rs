//! Shared oracles for the integration and acceptance suites: central
//! finite differences against reverse-mode gradients, and a
//! finite-difference-of-gradients check for Hessian-vector products.
//!
//! Every case is a closure that rebuilds its graph from leaf tensors, so
//! the oracle can re-evaluate the loss under perturbed inputs without
//! touching the differentiation path it is checking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use gradsim::graph::{Graph, NodeId};
use gradsim::nn;
use gradsim::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss over pre-registered leaf nodes (one per entry of
/// `FdCase::leaves`, in order).
pub type LossBuilder = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

pub struct FdCase {
    pub name: String,
    pub leaves: Vec<Tensor>,
    pub build: LossBuilder,
}

fn eval_loss(case: &FdCase, leaves: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t)).collect();
    let loss = (case.build)(&mut g, &ids);
    g.item(loss)
}

/// Max relative error of reverse-mode gradients against central finite
/// differences over up to `max_coords` sampled coordinates per leaf.
pub fn fd_max_rel_err(case: &FdCase, rng: &mut ChaCha8Rng, max_coords: usize) -> f64 {
    let mut g = Graph::new();
    let graph_leaves: Vec<NodeId> = case.leaves.iter().map(|t| g.leaf(t)).collect();
    let loss = (case.build)(&mut g, &graph_leaves);
    let grads = g
        .backward(loss, &graph_leaves, false)
        .expect("backward on fd case");

    let mut worst: f64 = 0.0;
    for (li, leaf) in case.leaves.iter().enumerate() {
        let analytic = grads.get(graph_leaves[li]).unwrap();
        let n = leaf.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for ci in coords {
            let mut plus = case.leaves.to_vec();
            plus[li].values_mut()[ci] += FD_STEP;
            let mut minus = case.leaves.to_vec();
            minus[li].values_mut()[ci] -= FD_STEP;
            let fd = (eval_loss(case, &plus) - eval_loss(case, &minus)) / (2.0 * FD_STEP);
            let ad = analytic.values()[ci];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Max relative error of an analytic Hessian-vector product against the
/// finite difference of first-order gradients (∇L(x+εv) − ∇L(x−εv)) / 2ε.
pub fn hvp_max_rel_err(case: &FdCase, rng: &mut ChaCha8Rng) -> f64 {
    assert_eq!(case.leaves.len(), 1, "hvp cases use a single leaf");
    let x = &case.leaves[0];
    let v = random_tensor(rng, x.shape(), -1.0, 1.0);

    let mut g = Graph::new();
    let xn = g.leaf(x);
    let loss = (case.build)(&mut g, &[xn]);
    let hv = g.hvp(loss, xn, &v).expect("hvp on fd case");

    let grad_at = |point: &Tensor| -> Tensor {
        let mut g = Graph::new();
        let xn = g.leaf(point);
        let loss = (case.build)(&mut g, &[xn]);
        g.backward(loss, &[xn], false).unwrap().get(xn).unwrap().clone()
    };
    let mut plus = x.clone();
    let mut minus = x.clone();
    for ((p, m), d) in plus
        .values_mut()
        .iter_mut()
        .zip(minus.values_mut())
        .zip(v.values())
    {
        *p += FD_STEP * d;
        *m -= FD_STEP * d;
    }
    let gp = grad_at(&plus);
    let gm = grad_at(&minus);

    let mut worst: f64 = 0.0;
    for i in 0..hv.len() {
        let fd = (gp.values()[i] - gm.values()[i]) / (2.0 * FD_STEP);
        let rel = (hv.values()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so relu/abs kinks stay out of fd reach.
pub fn random_tensor_margin(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn weighted_sum(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let w = random_tensor(rng, &g.shape(y).to_vec(), -1.0, 1.0);
    let wn = g.constant(&w);
    let p = g.mul(y, wn).unwrap();
    g.sum(p).unwrap()
}

/// One randomized case per forward op; `seed` controls shapes and data.
pub fn op_cases(seed: u64) -> Vec<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<FdCase> = Vec::new();
    let r = move |lo: f64, hi: f64| ChaCha8Rng::seed_from_u64(seed ^ (lo.to_bits() ^ hi.to_bits()));

    // -- elementwise binary ops ------------------------------------------
    let dim = rng.random_range(2..6usize);
    {
        let mut rr = r(1.0, 2.0);
        cases.push(FdCase {
            name: "add".into(),
            leaves: vec![
                random_tensor(&mut rr, &[dim, dim], -1.0, 1.0),
                random_tensor(&mut rr, &[dim, dim], -1.0, 1.0),
            ],
            build: Box::new(move |g, ids| {
                let a = ids[0];
                let b = ids[1];
                let y = g.add(a, b).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(42);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(3.0, 4.0);
        cases.push(FdCase {
            name: "mul".into(),
            leaves: vec![
                random_tensor(&mut rr, &[dim * dim], -1.0, 1.0),
                random_tensor(&mut rr, &[dim * dim], -1.0, 1.0),
            ],
            build: Box::new(|g, ids| {
                let a = ids[0];
                let b = ids[1];
                let y = g.mul(a, b).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(43);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(5.0, 6.0);
        cases.push(FdCase {
            name: "scalar_mul_add_scalar".into(),
            leaves: vec![random_tensor(&mut rr, &[3, 2], -1.0, 1.0)],
            build: Box::new(|g, ids| {
                let a = ids[0];
                let y = g.scalar_mul(a, -1.7).unwrap();
                let z = g.add_scalar(y, 0.4).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(44);
                weighted_sum(g, z, &mut wr)
            }),
        });
    }

    // -- matmul, all transpose combinations ------------------------------
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut rr = r(7.0 + ta as u64 as f64, 8.0 + tb as u64 as f64);
        let (m, k, n) = (
            rr.random_range(2..5usize),
            rr.random_range(2..5usize),
            rr.random_range(2..5usize),
        );
        let sa = if ta { [k, m] } else { [m, k] };
        let sb = if tb { [n, k] } else { [k, n] };
        cases.push(FdCase {
            name: format!("matmul_t{}{}", ta as u8, tb as u8),
            leaves: vec![
                random_tensor(&mut rr, &sa, -1.0, 1.0),
                random_tensor(&mut rr, &sb, -1.0, 1.0),
            ],
            build: Box::new(move |g, ids| {
                let a = ids[0];
                let b = ids[1];
                let y = g.matmul(a, b, ta, tb).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(45);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }

    // -- unary ops ---------------------------------------------------------
    let unary: Vec<(&str, f64, f64, fn(&mut Graph, NodeId) -> NodeId)> = vec![
        ("relu", 0.05, 1.0, |g, a| g.relu(a).unwrap()),
        ("abs", 0.05, 1.0, |g, a| g.abs(a).unwrap()),
        ("sigmoid", -2.0, 2.0, |g, a| g.sigmoid(a).unwrap()),
        ("exp", -1.0, 1.0, |g, a| g.exp(a).unwrap()),
        ("log", 0.2, 2.0, |g, a| g.log(a).unwrap()),
        ("sqrt", 0.2, 2.0, |g, a| g.sqrt(a).unwrap()),
        ("recip", 0.3, 2.0, |g, a| g.recip(a).unwrap()),
    ];
    for (name, lo, hi, f) in unary {
        let mut rr = r(lo, hi);
        let leaf = if name == "relu" || name == "abs" {
            random_tensor_margin(&mut rr, &[2, 3], lo)
        } else {
            random_tensor(&mut rr, &[2, 3], lo, hi)
        };
        cases.push(FdCase {
            name: name.into(),
            leaves: vec![leaf],
            build: Box::new(move |g, ids| {
                let a = ids[0];
                let y = f(g, a);
                let mut wr = ChaCha8Rng::seed_from_u64(46);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }

    // -- reductions and movement ------------------------------------------
    {
        let mut rr = r(20.0, 21.0);
        cases.push(FdCase {
            name: "sum_mean_broadcast".into(),
            leaves: vec![random_tensor(&mut rr, &[4, 3], -1.0, 1.0)],
            build: Box::new(|g, ids| {
                let a = ids[0];
                let m = g.mean(a).unwrap();
                let b = g.broadcast_scalar(m, &[4, 3]).unwrap();
                let y = g.mul(b, a).unwrap();
                g.sum(y).unwrap()
            }),
        });
    }
    {
        let mut rr = r(22.0, 23.0);
        let src = rr.random_range(4..9usize);
        let out = rr.random_range(4..9usize);
        let idx: Vec<i64> = (0..out)
            .map(|_| {
                if rr.random_bool(0.15) {
                    -1
                } else {
                    rr.random_range(0..src as i64)
                }
            })
            .collect();
        let idx = Arc::new(idx);
        let idx2 = idx.clone();
        cases.push(FdCase {
            name: "gather_scatter".into(),
            leaves: vec![random_tensor(&mut rr, &[src], -1.0, 1.0)],
            build: Box::new(move |g, ids| {
                let a = ids[0];
                let gat = g.gather(a, idx2.clone(), vec![idx2.len()]).unwrap();
                let back = g.scatter_add(gat, idx2.clone(), vec![src]).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(47);
                weighted_sum(g, back, &mut wr)
            }),
        });
        drop(idx);
    }
    {
        let mut rr = r(24.0, 25.0);
        cases.push(FdCase {
            name: "reshape_l2_inner".into(),
            leaves: vec![
                random_tensor(&mut rr, &[2, 6], -1.0, 1.0),
                random_tensor(&mut rr, &[12], -1.0, 1.0),
            ],
            build: Box::new(|g, ids| {
                let a = ids[0];
                let b = ids[1];
                let flat = g.reshape(a, vec![12]).unwrap();
                let ip = g.inner_product(flat, b).unwrap();
                let n = g.l2_norm(b).unwrap();
                g.mul(ip, n).unwrap()
            }),
        });
    }

    // -- composed nn ops ---------------------------------------------------
    {
        let mut rr = r(30.0, 31.0);
        let (b, ci, co) = (2, rr.random_range(1..3usize), rr.random_range(1..3usize));
        cases.push(FdCase {
            name: "conv2d".into(),
            leaves: vec![
                random_tensor(&mut rr, &[b, ci, 5, 5], -1.0, 1.0),
                random_tensor(&mut rr, &[co, ci, 3, 3], -1.0, 1.0),
                random_tensor(&mut rr, &[co], -1.0, 1.0),
            ],
            build: Box::new(|g, ids| {
                let x = ids[0];
                let w = ids[1];
                let bias = ids[2];
                let y = nn::conv2d(g, x, w, Some(bias), 1, 1).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(48);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(32.0, 33.0);
        cases.push(FdCase {
            name: "conv2d_stride2".into(),
            leaves: vec![
                random_tensor(&mut rr, &[1, 2, 6, 6], -1.0, 1.0),
                random_tensor(&mut rr, &[2, 2, 3, 3], -1.0, 1.0),
            ],
            build: Box::new(|g, ids| {
                let x = ids[0];
                let w = ids[1];
                let y = nn::conv2d(g, x, w, None, 2, 0).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(49);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(34.0, 35.0);
        cases.push(FdCase {
            name: "avgpool2d".into(),
            leaves: vec![random_tensor(&mut rr, &[2, 2, 4, 4], -1.0, 1.0)],
            build: Box::new(|g, ids| {
                let x = ids[0];
                let y = nn::avgpool2d(g, x, 2).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(50);
                weighted_sum(g, y, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(36.0, 37.0);
        cases.push(FdCase {
            name: "batchnorm_batch_stats".into(),
            leaves: vec![
                random_tensor(&mut rr, &[3, 2, 3, 3], -1.0, 1.0),
                random_tensor(&mut rr, &[2], 0.5, 1.5),
                random_tensor(&mut rr, &[2], -0.5, 0.5),
            ],
            build: Box::new(|g, ids| {
                let x = ids[0];
                let gamma = ids[1];
                let beta = ids[2];
                let out = nn::batchnorm_train(g, x, gamma, beta, nn::BnStats::Batch, false).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(51);
                weighted_sum(g, out.out, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(38.0, 39.0);
        let mean = random_tensor(&mut rr, &[2], -0.3, 0.3);
        let var = random_tensor(&mut rr, &[2], 0.5, 1.5);
        cases.push(FdCase {
            name: "batchnorm_supplied_stats".into(),
            leaves: vec![
                random_tensor(&mut rr, &[2, 2, 3, 3], -1.0, 1.0),
                random_tensor(&mut rr, &[2], 0.5, 1.5),
                random_tensor(&mut rr, &[2], -0.5, 0.5),
            ],
            build: Box::new(move |g, ids| {
                let x = ids[0];
                let gamma = ids[1];
                let beta = ids[2];
                let out =
                    nn::batchnorm_train(g, x, gamma, beta, nn::BnStats::Supplied(&mean, &var), false)
                        .unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(52);
                weighted_sum(g, out.out, &mut wr)
            }),
        });
    }
    {
        let mut rr = r(40.0, 41.0);
        let targets = {
            let raw = random_tensor(&mut rr, &[3, 4], 0.1, 1.0);
            let mut v = raw.values().to_vec();
            for row in 0..3 {
                let s: f64 = v[row * 4..(row + 1) * 4].iter().sum();
                for j in 0..4 {
                    v[row * 4 + j] /= s;
                }
            }
            Tensor::new(vec![3, 4], v).unwrap()
        };
        cases.push(FdCase {
            name: "softmax_cross_entropy_logits".into(),
            leaves: vec![random_tensor(&mut rr, &[3, 4], -2.0, 2.0)],
            build: Box::new(move |g, ids| {
                let z = ids[0];
                let t = g.constant(&targets);
                nn::softmax_cross_entropy(g, z, t).unwrap()
            }),
        });
    }
    {
        let mut rr = r(42.0, 43.0);
        let logits = random_tensor(&mut rr, &[2, 5], -1.0, 1.0);
        cases.push(FdCase {
            name: "softmax_cross_entropy_soft_targets".into(),
            leaves: vec![random_tensor(&mut rr, &[2, 5], -1.5, 1.5)],
            build: Box::new(move |g, ids| {
                // differentiate through the target side: targets are the
                // softmax of an optimized logit tensor
                let raw = ids[0];
                let t = nn::softmax_rows(g, raw).unwrap();
                let z = g.constant(&logits);
                nn::softmax_cross_entropy(g, z, t).unwrap()
            }),
        });
    }
    {
        let mut rr = r(44.0, 45.0);
        cases.push(FdCase {
            name: "total_variation".into(),
            leaves: vec![random_tensor(&mut rr, &[2, 1, 4, 4], 0.0, 1.0)],
            build: Box::new(|g, ids| {
                let x = ids[0];
                nn::total_variation(g, x).unwrap()
            }),
        });
    }
    {
        let mut rr = r(46.0, 47.0);
        cases.push(FdCase {
            name: "dense".into(),
            leaves: vec![
                random_tensor(&mut rr, &[3, 4], -1.0, 1.0),
                random_tensor(&mut rr, &[2, 4], -1.0, 1.0),
                random_tensor(&mut rr, &[2], -1.0, 1.0),
            ],
            build: Box::new(|g, ids| {
                let x = ids[0];
                let w = ids[1];
                let b = ids[2];
                let y = nn::dense(g, x, w, b).unwrap();
                let s = g.sigmoid(y).unwrap();
                let mut wr = ChaCha8Rng::seed_from_u64(53);
                weighted_sum(g, s, &mut wr)
            }),
        });
    }

    cases
}

/// Smooth single-leaf losses for Hessian-vector oracle checks.
pub fn hvp_cases(seed: u64) -> Vec<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<FdCase> = Vec::new();

    let w1 = random_tensor(&mut rng, &[4, 6], -0.7, 0.7);
    let w2 = random_tensor(&mut rng, &[1, 4], -0.7, 0.7);
    cases.push(FdCase {
        name: "two_layer_sigmoid_net".into(),
        leaves: vec![random_tensor(&mut rng, &[1, 6], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let x = ids[0];
            let w1n = g.constant(&w1);
            let w2n = g.constant(&w2);
            let h = g.matmul(x, w1n, false, true).unwrap();
            let a = g.sigmoid(h).unwrap();
            let o = g.matmul(a, w2n, false, true).unwrap();
            let sq = g.mul(o, o).unwrap();
            g.sum(sq).unwrap()
        }),
    });

    let q = random_tensor(&mut rng, &[5, 5], -1.0, 1.0);
    cases.push(FdCase {
        name: "quartic_quadratic_mix".into(),
        leaves: vec![random_tensor(&mut rng, &[5], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let x = ids[0];
            let xm = g.reshape(x, vec![1, 5]).unwrap();
            let qn = g.constant(&q);
            let qx = g.matmul(xm, qn, false, true).unwrap();
            let quad = g.inner_product(qx, xm).unwrap();
            let sq = g.mul(x, x).unwrap();
            let quart = g.mul(sq, sq).unwrap();
            let s4 = g.sum(quart).unwrap();
            g.add(quad, s4).unwrap()
        }),
    });

    let wts = random_tensor(&mut rng, &[3, 4], -0.8, 0.8);
    cases.push(FdCase {
        name: "cross_entropy_hessian".into(),
        leaves: vec![random_tensor(&mut rng, &[2, 4], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let x = ids[0];
            let w = g.constant(&wts);
            let z = g.matmul(x, w, false, true).unwrap();
            let t = nn::one_hot(&[0, 2], 3).unwrap();
            let tn = g.constant(&t);
            nn::softmax_cross_entropy(g, z, tn).unwrap()
        }),
    });

    let mean = random_tensor(&mut rng, &[1], -0.2, 0.2);
    let var = random_tensor(&mut rng, &[1], 0.6, 1.2);
    cases.push(FdCase {
        name: "batchnorm_hessian".into(),
        leaves: vec![random_tensor(&mut rng, &[2, 1, 2, 2], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let x = ids[0];
            let gamma = g.constant(&Tensor::ones(&[1]));
            let beta = g.constant(&Tensor::zeros(&[1]));
            let out =
                nn::batchnorm_train(g, x, gamma, beta, nn::BnStats::Supplied(&mean, &var), false).unwrap();
            let s = g.sigmoid(out.out).unwrap();
            let sq = g.mul(s, s).unwrap();
            g.sum(sq).unwrap()
        }),
    });

    cases
}
