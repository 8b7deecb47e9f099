//! Fast self-checks against independent reference computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed::aggregation::{federated_average, naive_average, smart_weights, weighted_average};
use splitfed::autograd::Tensor;
use splitfed::channel::{ChannelState, Direction, GaussianStream, Identity, Payload};
use splitfed::model::{build_split_unet, monolithic_train_step, split_train_step, ArchConfig};
use splitfed::SplitModelWeights;

pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { name, passed, detail }
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_size: 8,
        down_filters: vec![2],
        bottleneck_filters: 3,
        up_filters: vec![2],
        ..ArchConfig::default()
    }
}

fn random_snapshot(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> SplitModelWeights {
    let mut w = build_split_unet::<f64>(arch, 0).unwrap();
    for s in w.stages_mut() {
        s.values_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    w
}

fn aggregation_oracle() -> Outcome {
    let arch = tiny_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(1..=6);
        let snaps: Vec<_> = (0..n).map(|_| random_snapshot(&arch, &mut rng)).collect();
        let m: Vec<usize> = (0..n).map(|_| rng.gen_range(1..50)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r: Vec<f64> = raw.iter().map(|x| x / raw.iter().sum::<f64>()).collect();
        let cols: Vec<Vec<f64>> = snaps.iter().map(|s| s.values().collect()).collect();
        let total: f64 = m.iter().map(|&x| x as f64).sum();
        let checks = [
            (naive_average(&snaps).unwrap(), (0..n).map(|_| 1.0 / n as f64).collect::<Vec<_>>()),
            (federated_average(&snaps, &m).unwrap(), m.iter().map(|&x| x as f64 / total).collect()),
            (weighted_average(&snaps, &r).unwrap(), r.clone()),
        ];
        for (got, coef) in checks {
            for (j, g) in got.values().enumerate() {
                let want: f64 = cols.iter().zip(&coef).map(|(c, k)| c[j] * k).sum();
                worst = worst.max((g - want).abs());
            }
        }
    }
    outcome("aggregation vs elementwise reference", worst <= 1e-14, format!("max abs error {worst:.3e}"))
}

fn smart_two_clients() -> Outcome {
    let r = smart_weights(&[0.1, 0.9], &[1, 1], 10.0).unwrap().r;
    let want = 1.0 / (1.0 + (-8.0f64).exp());
    let err = (r[0] - want).abs().max((r[1] - (1.0 - want)).abs());
    outcome("smart weights, two clients", err <= 1e-12, format!("r = {r:?}"))
}

fn channel_statistics() -> Outcome {
    let sigma = 0.1;
    let n = 200_000;
    let mut s = GaussianStream::new(5, 1, Direction::Uplink);
    let draws: Vec<f64> = (0..n).map(|_| sigma * s.next_standard()).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut clean = ChannelState::new(5, 1, 0.0, Some(1));
    let t = Tensor::from_fn(&[3, 3], |i| i as f64 / 7.0);
    let identity =
        clean.transmit(Payload::Features(t.clone(), Direction::Uplink), 3) == Payload::Features(t, Direction::Uplink);
    let passed = mean.abs() <= 4.0 * sigma / (n as f64).sqrt() && ((std - sigma) / sigma).abs() <= 0.01 && identity;
    outcome("channel noise statistics", passed, format!("mean {mean:.2e}, std {std:.5}"))
}

fn split_equivalence() -> Outcome {
    let arch = tiny_arch();
    let w0 = build_split_unet::<f64>(&arch, 3).unwrap();
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0);
    let t = Tensor::from_fn(&[2, 5, 8, 8], |i| if (i / 64) % 5 == i % 5 { 1.0 } else { 0.0 });
    let (mut a, mut b) = (w0.clone(), w0);
    let sa = split_train_step(&arch, &mut a, &x, &t, &mut Identity).unwrap();
    let sb = monolithic_train_step(&arch, &mut b, &x, &t).unwrap();
    let same = sa.loss.to_bits() == sb.loss.to_bits() && sa.grads == sb.grads && a == b;
    outcome("split pass equals unsplit pass", same, format!("loss {}", sa.loss))
}

fn model_gradient() -> Outcome {
    let arch = tiny_arch();
    let w = build_split_unet::<f64>(&arch, 4).unwrap();
    let x = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 13) % 17) as f64 / 17.0);
    let t = Tensor::from_fn(&[1, 5, 8, 8], |i| if (i / 64) == (i % 64) % 5 { 1.0 } else { 0.0 });
    let step = monolithic_train_step(&arch, &mut w.clone(), &x, &t).unwrap();
    let loss = |w: &SplitModelWeights| monolithic_train_step(&arch, &mut w.clone(), &x, &t).unwrap().loss;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let grads = [&step.grads.front_end, &step.grads.server, &step.grads.back_end];
    for (s, stage_grads) in grads.into_iter().enumerate() {
        for (p, g) in stage_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for j in (0..g.len()).step_by(7) {
                let bump = |w: &mut SplitModelWeights, d: f64| {
                    w.stages_mut()[s].iter_mut().nth(p).unwrap().tensor.data_mut()[j] += d
                };
                let (mut plus, mut minus) = (w.clone(), w.clone());
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                worst = worst.max((fd - g[j]).abs() / 1f64.max(fd.abs()).max(g[j].abs()));
            }
        }
    }
    outcome("model gradient vs finite differences", worst <= 1e-4, format!("max relative error {worst:.2e}"))
}

pub fn run_all() -> Vec<Outcome> {
    vec![aggregation_oracle(), smart_two_clients(), channel_statistics(), split_equivalence(), model_gradient()]
}
