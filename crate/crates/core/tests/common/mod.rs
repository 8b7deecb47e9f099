//! Reference computations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed::autograd::{Graph, Mode, RunningStats, Tensor, Var};
use splitfed::model::{build_split_unet, monolithic_train_step, ArchConfig};
use splitfed::SplitModelWeights;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / GRAD_FLOOR.max(a.abs()).max(b.abs())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values in random order, so pooling windows never tie.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.into_iter().map(|i| i as f64 / n as f64 - 0.5).collect()).unwrap()
}

/// Builds an op on graph leaves and returns its (possibly non-scalar) output.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Largest relative error between autograd and central differences of
/// `Σ R ⊙ op(inputs)` for a fixed random `R`, over every element of the
/// first `wrt` inputs. Later inputs are constants such as targets.
pub fn gradcheck(inputs: &[Tensor<f64>], wrt: usize, seed: u64, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let weights = random_tensor(&mut rng(seed ^ 0xabc), &shape, -1.0, 1.0);
    let r = g.leaf(weights.clone(), false);
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let value = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate().take(wrt) {
        for (j, &an) in grad.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, an));
        }
    }
    worst
}

/// Train-mode batch norm with throwaway running statistics.
pub fn bn_train(g: &mut Graph<f64>, x: Var, gamma: Var, beta: Var) -> Var {
    let c = g.value(gamma).len();
    let (mut m, mut v) = (vec![0.0; c], vec![1.0; c]);
    g.batchnorm2d(x, gamma, beta, RunningStats { mean: &mut m, var: &mut v }, Mode::Train).unwrap()
}

/// Worst relative error over each op's random instances.
pub fn op_gradchecks(instances: usize) -> Vec<(&'static str, f64)> {
    let mut results = Vec::new();
    let mut run = |name: &'static str, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build| {
        // a target tensor, when present, is always the last input and held constant
        let constant = usize::from(name == "dice_loss");
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut r = rng(1000 * results.len() as u64 + i as u64);
            let inputs = make(&mut r);
            worst = worst.max(gradcheck(&inputs, inputs.len() - constant, i as u64, build));
        }
        results.push((name, worst));
    };
    let dims =
        |r: &mut ChaCha8Rng| [r.gen_range(1..3), r.gen_range(1..4), 2 * r.gen_range(1..4), 2 * r.gen_range(1..4)];

    run(
        "conv2d",
        &|r| {
            let [n, c, h, w] = dims(r);
            let o = r.gen_range(1..4);
            let k = if r.gen_bool(0.5) { 3 } else { 1 };
            vec![
                random_tensor(r, &[n, c, h, w], -1.0, 1.0),
                random_tensor(r, &[o, c, k, k], -1.0, 1.0),
                random_tensor(r, &[o], -1.0, 1.0),
            ]
        },
        &|g, v| g.conv2d(v[0], v[1], v[2]).unwrap(),
    );
    run(
        "relu",
        &|r| {
            let d = dims(r);
            vec![away_from_zero(r, &d)]
        },
        &|g, v| g.relu(v[0]),
    );
    run(
        "batchnorm2d",
        &|r| {
            let [n, c, h, w] = dims(r);
            vec![
                random_tensor(r, &[n, c, h, w], -2.0, 2.0),
                random_tensor(r, &[c], 0.5, 1.5),
                random_tensor(r, &[c], -0.5, 0.5),
            ]
        },
        &|g, v| bn_train(g, v[0], v[1], v[2]),
    );
    run(
        "maxpool2d",
        &|r| {
            let d = dims(r);
            vec![distinct(r, &d)]
        },
        &|g, v| g.maxpool2d(v[0]).unwrap(),
    );
    run(
        "upsample_nearest2x",
        &|r| {
            let d = dims(r);
            vec![random_tensor(r, &d, -1.0, 1.0)]
        },
        &|g, v| g.upsample_nearest2x(v[0]).unwrap(),
    );
    run(
        "concat_channels",
        &|r| {
            let [n, c, h, w] = dims(r);
            let c2 = r.gen_range(1..4);
            vec![random_tensor(r, &[n, c, h, w], -1.0, 1.0), random_tensor(r, &[n, c2, h, w], -1.0, 1.0)]
        },
        &|g, v| g.concat_channels(v[0], v[1]).unwrap(),
    );
    run(
        "softmax_channels",
        &|r| {
            let d = dims(r);
            vec![random_tensor(r, &d, -3.0, 3.0)]
        },
        &|g, v| g.softmax_channels(v[0]).unwrap(),
    );
    run(
        "dice_loss",
        &|r| {
            let [n, c, h, w] = dims(r);
            let mut t = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for p in 0..h * w {
                    let cls = r.gen_range(0..c);
                    t.data_mut()[(b * c + cls) * h * w + p] = 1.0;
                }
            }
            vec![random_tensor(r, &[n, c, h, w], 0.01, 1.0), t]
        },
        &|g, v| {
            let target = g.value(v[1]).clone();
            g.dice_loss(v[0], &target).unwrap()
        },
    );
    run(
        "sum",
        &|r| {
            let d = dims(r);
            vec![random_tensor(r, &d, -1.0, 1.0)]
        },
        &|g, v| g.sum(v[0]),
    );
    run(
        "add",
        &|r| {
            let d = dims(r);
            vec![random_tensor(r, &d, -1.0, 1.0), random_tensor(r, &d, -1.0, 1.0)]
        },
        &|g, v| g.add(v[0], v[1]).unwrap(),
    );
    run(
        "mul",
        &|r| {
            let d = dims(r);
            vec![random_tensor(r, &d, -1.0, 1.0), random_tensor(r, &d, -1.0, 1.0)]
        },
        &|g, v| g.mul(v[0], v[1]).unwrap(),
    );
    results
}

/// One-hot target with a few horizontal bands of classes.
pub fn banded_target(arch: &ArchConfig, n: usize) -> Tensor<f64> {
    let s = arch.input_size;
    let c = arch.num_classes;
    let mut t = Tensor::zeros(&[n, c, s, s]);
    for b in 0..n {
        for p in 0..s * s {
            let cls = (p / s * c / s + b) % c;
            t.data_mut()[(b * c + cls) * s * s + p] = 1.0;
        }
    }
    t
}

/// Outcome of [`model_gradcheck`].
pub struct ModelGradcheck {
    pub worst: f64,
    pub checked: usize,
    /// Entries whose first stencil straddled a ReLU or max-pool switch.
    pub refined: usize,
}

/// Full-model check on one sample: autograd vs central differences on
/// `per_param` evenly spaced entries of every trainable tensor.
///
/// A central difference that changes when its step is halved has a ReLU or
/// max-pool switch inside the stencil; the step is then shrunk tenfold, down to 1e-7.
pub fn model_gradcheck(arch: &ArchConfig, per_param: usize, seed: u64) -> ModelGradcheck {
    let w = build_split_unet::<f64>(arch, seed).unwrap();
    let s = arch.input_size;
    let x = random_tensor(&mut rng(seed), &[1, arch.in_channels, s, s], 0.0, 1.0);
    let t = banded_target(arch, 1);
    let step = monolithic_train_step(arch, &mut w.clone(), &x, &t).unwrap();
    let loss = |w: &SplitModelWeights| monolithic_train_step(arch, &mut w.clone(), &x, &t).unwrap().loss;
    let l0 = loss(&w);
    let grads = [&step.grads.front_end, &step.grads.server, &step.grads.back_end];
    let mut out = ModelGradcheck { worst: 0.0, checked: 0, refined: 0 };
    for (si, stage_grads) in grads.into_iter().enumerate() {
        for (pi, g) in stage_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let stride = (g.len() / per_param).max(1);
            for j in (0..g.len()).step_by(stride).take(per_param) {
                let bump = |d: f64| {
                    let mut w = w.clone();
                    w.stages_mut()[si].iter_mut().nth(pi).unwrap().tensor.data_mut()[j] += d;
                    loss(&w)
                };
                let central = |h: f64| (bump(h) - bump(-h)) / (2.0 * h);
                // rounding noise of a central difference at step h
                let noise = |h: f64| 100.0 * f64::EPSILON * l0.abs().max(1.0) / h;
                let mut h = FD_STEP;
                let mut fd = central(h);
                while h > 1e-7 && {
                    let half = central(h / 2.0);
                    (fd - half).abs() > (GRAD_TOL / 10.0 * fd.abs()).max(noise(h / 2.0))
                } {
                    h /= 10.0;
                    fd = central(h);
                }
                out.refined += usize::from(h < FD_STEP);
                out.worst = out.worst.max(rel_err(fd, g[j]));
                out.checked += 1;
            }
        }
    }
    out
}

/// Small architecture for tests that need many model snapshots.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: 8,
        down_filters: vec![2],
        bottleneck_filters: 3,
        up_filters: vec![2],
        ..ArchConfig::default()
    }
}

pub fn random_snapshot(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> SplitModelWeights {
    let mut w = build_split_unet::<f64>(arch, 0).unwrap();
    for s in w.stages_mut() {
        s.values_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    }
    w
}

/// `Σ_i c_i·x_i` element by element, with the coefficients already normalised.
pub fn reference_average(snapshots: &[SplitModelWeights], coef: &[f64]) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = snapshots.iter().map(|s| s.values().collect()).collect();
    (0..cols[0].len()).map(|j| cols.iter().zip(coef).map(|(c, k)| c[j] * k).sum()).collect()
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: &[f64]) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random points on the probability simplex.
pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Outcome of [`reference_global_epoch`] for one client.
pub struct ReferenceClient {
    pub val_loss: f64,
    pub train_loss: f64,
    pub indicator: f64,
    pub best_local_epoch: usize,
}

/// The first global epoch of `cfg` executed on one unsplit graph per step,
/// without any channel object, aggregated with the configured strategy.
pub fn reference_global_epoch(cfg: &splitfed::protocol::RunConfig) -> (SplitModelWeights, Vec<ReferenceClient>) {
    use rand::seq::SliceRandom;
    use splitfed::aggregation::{aggregate, unreliability_indicator};
    use splitfed::data::{augment, client_datasets, generate_dataset, make_batch};
    use splitfed::model::{dice_value, monolithic_predict, AdamState};

    let arch = &cfg.architecture;
    let nc = arch.num_classes;
    let counts = &cfg.data.sample_counts;
    let pool = generate_dataset(cfg.seeds.data, counts.iter().sum(), arch.input_size).unwrap();
    let clients = client_datasets(&pool, counts, cfg.seeds.data).unwrap();
    let global = build_split_unet::<f64>(arch, cfg.seeds.model).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let losses_of = |w: &SplitModelWeights, samples: &[splitfed::data::Sample]| -> Vec<f64> {
        samples
            .iter()
            .map(|s| {
                let p = monolithic_predict(arch, &mut w.clone(), &s.image_tensor()).unwrap();
                dice_value(&p, &s.one_hot(nc)).unwrap()
            })
            .collect()
    };

    let mut snapshots = Vec::new();
    let mut out = Vec::new();
    for (i, data) in clients.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
        r.set_stream(i as u64 + 1);
        let mut w = global.clone();
        let opt = cfg.protocol.optimizer;
        let mut adam =
            [AdamState::new(opt, &w.front_end), AdamState::new(opt, &w.server), AdamState::new(opt, &w.back_end)];
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut best: Option<(usize, f64, SplitModelWeights)> = None;
        for epoch in 1..=cfg.protocol.local_epochs {
            order.shuffle(&mut r);
            for chunk in order.chunks(cfg.protocol.batch_size) {
                let batch: Vec<_> = chunk
                    .iter()
                    .map(|&k| if cfg.data.augment { augment(&data.train[k], &mut r) } else { data.train[k].clone() })
                    .collect();
                let (x, t) = make_batch::<f64>(&batch.iter().collect::<Vec<_>>(), nc).unwrap();
                let step = monolithic_train_step(arch, &mut w, &x, &t).unwrap();
                adam[0].step(&mut w.front_end, &step.grads.front_end).unwrap();
                adam[1].step(&mut w.server, &step.grads.server).unwrap();
                adam[2].step(&mut w.back_end, &step.grads.back_end).unwrap();
            }
            let val = mean(&losses_of(&w, &data.val));
            if best.as_ref().is_none_or(|(_, b, _)| val < *b) {
                best = Some((epoch, val, w.clone()));
            }
        }
        let (epoch, val, bw) = best.unwrap();
        let train = losses_of(&bw, &data.train);
        out.push(ReferenceClient {
            val_loss: val,
            train_loss: mean(&train),
            indicator: unreliability_indicator(&train).unwrap(),
            best_local_epoch: epoch,
        });
        snapshots.push(bw);
    }
    let b: Vec<f64> = out.iter().map(|c| c.indicator).collect();
    let agg = aggregate(cfg.strategy.name, &snapshots, counts, &b, cfg.strategy.alpha).unwrap();
    (agg.model, out)
}

/// Desk config shrunk for fast protocol tests.
pub fn small_run_config() -> splitfed::protocol::RunConfig {
    let mut cfg = splitfed::protocol::RunConfig {
        architecture: ArchConfig {
            input_size: 16,
            down_filters: vec![4],
            bottleneck_filters: 8,
            up_filters: vec![4],
            ..ArchConfig::default()
        },
        ..Default::default()
    };
    cfg.data.sample_counts = vec![8, 5, 4, 6, 5];
    cfg.data.test_samples = 4;
    cfg.protocol.local_epochs = 2;
    cfg.protocol.global_epochs = 2;
    cfg
}
