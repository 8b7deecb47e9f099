//! The SplitFed training protocol.
//!
//! Clients train one after another with the server. Each client starts from
//! its copy of the global front/back-end and from the global server weights,
//! runs the local epochs, keeps the weights of its best validation epoch and
//! reports them together with its unreliability indicator. The server
//! averages the reports, keeps the server half, and broadcasts the client half.
//!
//! A client whose every local epoch produced a non-finite loss, or an
//! aggregation that cannot proceed, marks the run as diverged: the global
//! model becomes NaN and every later epoch is recorded without training.

mod config;

pub use config::{
    ChannelConfig, DataConfig, ProtocolConfig, RunConfig, Seeds, StrategyConfig, CONFIG_FORMAT_VERSION,
    DESK_SAMPLE_COUNTS,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate, unreliability_indicator};
use crate::autograd::Tensor;
use crate::channel::{ChannelState, Identity, Payload};
use crate::data::{augment, client_datasets, generate_dataset, make_batch, ClientData, Sample};
use crate::error::Result;
use crate::metrics::{iou_per_class, pixel_accuracy};
use crate::model::{
    build_split_unet, dice_value, per_sample_losses, predict_labels, split_predict, split_train_step, AdamState,
    ClientWeights, SplitGrads, SplitModelWeights,
};

type Pair = (Tensor<f64>, Tensor<f64>);

/// What a client hands to the server after local training.
#[derive(Clone, Debug)]
pub struct ClientReport {
    pub client_id: usize,
    /// Front/back-end weights as received by the server.
    pub client_weights: ClientWeights<f64>,
    /// Server weights of the best local epoch; never transmitted.
    pub server_weights: SplitModelWeights<f64>,
    /// Training-set Dice losses of the best weights, one per sample.
    pub per_sample_losses: Vec<f64>,
    /// Indicator computed by the client.
    pub indicator_sent: f64,
    /// Indicator as received by the server.
    pub indicator: f64,
    /// 1-based; 0 when no local epoch stayed finite.
    pub best_local_epoch: usize,
    pub best_val_loss: f64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

impl ClientReport {
    pub fn failed(&self) -> bool {
        self.best_local_epoch == 0
    }
}

/// Index of the smallest finite value, earliest on ties.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

fn grads_finite(g: &SplitGrads<f64>) -> bool {
    [&g.front_end, &g.server, &g.back_end].into_iter().flatten().flatten().all(|v| v.iter().all(|x| x.is_finite()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pairs(samples: &[Sample], num_classes: usize) -> Vec<Pair> {
    samples.iter().map(|s| (s.image_tensor(), s.one_hot(num_classes))).collect()
}

/// Local training of one client at `global_epoch`; every tensor hop goes through `channel`.
pub fn run_local_training(
    cfg: &RunConfig,
    client_id: usize,
    start: &SplitModelWeights<f64>,
    data: &ClientData,
    channel: &mut ChannelState,
    global_epoch: u32,
    rng: &mut ChaCha8Rng,
) -> Result<ClientReport> {
    let arch = &cfg.architecture;
    let nc = arch.num_classes;
    let train_pairs = pairs(&data.train, nc);
    let val_pairs = pairs(&data.val, nc);
    let opt = cfg.protocol.optimizer;
    let mut w = start.clone();
    let mut adam =
        [AdamState::new(opt, &w.front_end), AdamState::new(opt, &w.server), AdamState::new(opt, &w.back_end)];

    let mut train_losses = Vec::with_capacity(cfg.protocol.local_epochs);
    let mut val_losses = Vec::with_capacity(cfg.protocol.local_epochs);
    let mut best: Option<(usize, f64, SplitModelWeights<f64>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.protocol.local_epochs {
        order.shuffle(rng);
        let mut batch_losses = Vec::new();
        let mut failed = false;
        for chunk in order.chunks(cfg.protocol.batch_size) {
            let augmented: Vec<Sample> = if cfg.data.augment {
                chunk.iter().map(|&i| augment(&data.train[i], rng)).collect()
            } else {
                chunk.iter().map(|&i| data.train[i].clone()).collect()
            };
            let (x, t) = make_batch::<f64>(&augmented.iter().collect::<Vec<_>>(), nc)?;
            let before = w.clone();
            let step = split_train_step(arch, &mut w, &x, &t, &mut channel.link(global_epoch))?;
            if !step.loss.is_finite() || !grads_finite(&step.grads) {
                // discard the batch entirely, including its running-statistics update
                w = before;
                failed = true;
                break;
            }
            let [a_fe, a_s, a_be] = &mut adam;
            a_fe.step(&mut w.front_end, &step.grads.front_end)?;
            a_s.step(&mut w.server, &step.grads.server)?;
            a_be.step(&mut w.back_end, &step.grads.back_end)?;
            batch_losses.push(step.loss);
        }
        if failed {
            train_losses.push(f64::NAN);
            val_losses.push(f64::NAN);
            continue;
        }
        train_losses.push(mean(&batch_losses));
        let val = mean(&per_sample_losses(arch, &mut w, &val_pairs, &mut channel.link(global_epoch))?);
        val_losses.push(val);
        if val.is_finite() && best.as_ref().is_none_or(|(_, b, _)| val < *b) {
            best = Some((epoch, val, w.clone()));
        }
    }

    let (best_local_epoch, best_val_loss, best_w, losses, b) = match best {
        Some((e, v, mut bw)) => {
            let losses = per_sample_losses(arch, &mut bw, &train_pairs, &mut channel.link(global_epoch))?;
            let b = unreliability_indicator(&losses)?;
            (e, v, bw, losses, b)
        }
        None => (0, f64::NAN, start.clone(), vec![f64::NAN; train_pairs.len()], f64::INFINITY),
    };

    let client_weights = match channel.transmit(Payload::ClientWeights(best_w.client()), global_epoch) {
        Payload::ClientWeights(c) => c,
        _ => unreachable!(),
    };
    let indicator = match channel.transmit::<f64>(Payload::Indicator(b), global_epoch) {
        Payload::Indicator(v) => v,
        _ => unreachable!(),
    };
    Ok(ClientReport {
        client_id,
        client_weights,
        server_weights: best_w,
        per_sample_losses: losses,
        indicator_sent: b,
        indicator,
        best_local_epoch,
        best_val_loss,
        train_losses,
        val_losses,
    })
}

/// Per-client outcome of one global epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRecord {
    pub client_id: usize,
    /// Mean per-sample training loss of the reported weights.
    pub train_loss: f64,
    pub val_loss: f64,
    pub indicator: f64,
    pub best_local_epoch: usize,
    /// Averaging weight the client received.
    pub r_weight: f64,
    pub diverged: bool,
}

/// The global model evaluated on the test set, without any channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TestEvaluation {
    pub loss: f64,
    pub accuracy_percent: f64,
    pub iou: Vec<f64>,
    /// Predicted label maps of all test samples, concatenated.
    pub predictions: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub global_epoch: usize,
    pub clients: Vec<ClientRecord>,
    pub test: TestEvaluation,
    /// Set once the run has diverged or the test loss is not finite.
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct SimulationResult {
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
    pub final_model: SplitModelWeights<f64>,
    pub test_set: Vec<Sample>,
    pub background_fraction: f64,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
}

impl SimulationResult {
    pub fn final_epoch(&self) -> &EpochRecord {
        self.history.last().expect("at least one global epoch")
    }
}

/// Runs `weights` on `test` and scores the predictions.
pub fn evaluate(cfg: &RunConfig, weights: &SplitModelWeights<f64>, test: &[Sample]) -> Result<TestEvaluation> {
    let nc = cfg.architecture.num_classes;
    let (x, t) = make_batch::<f64>(&test.iter().collect::<Vec<_>>(), nc)?;
    let mut w = weights.clone();
    let probs = split_predict(&cfg.architecture, &mut w, &x, &mut Identity)?;
    let mut losses = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        losses.push(dice_value(&probs.batch_item(i)?, &t.batch_item(i)?)?);
    }
    let predictions = predict_labels(&probs)?;
    let truth: Vec<u8> = test.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok(TestEvaluation {
        loss: mean(&losses),
        accuracy_percent: pixel_accuracy(&predictions, &truth)?,
        iou: iou_per_class(&predictions, &truth, nc)?,
        predictions,
    })
}

/// Mutable state of a run between global epochs.
pub struct Simulation {
    cfg: RunConfig,
    clients: Vec<ClientData>,
    test: Vec<Sample>,
    global: SplitModelWeights<f64>,
    /// Front/back-end copy each client holds.
    held: Vec<ClientWeights<f64>>,
    channels: Vec<ChannelState>,
    rngs: Vec<ChaCha8Rng>,
    counts: Vec<usize>,
    epoch: usize,
    diverged: Option<String>,
    history: Vec<EpochRecord>,
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.architecture.input_size;
        let counts = cfg.data.sample_counts.clone();
        let pool = generate_dataset(cfg.seeds.data, counts.iter().sum(), size)?;
        let clients = client_datasets(&pool, &counts, cfg.seeds.data)?;
        let test = generate_dataset(cfg.seeds.test, cfg.data.test_samples, size)?;
        let global = build_split_unet::<f64>(&cfg.architecture, cfg.seeds.model)?;
        let n = counts.len();
        let onsets = cfg.channel.onsets(n);
        let channels = (1..=n)
            .map(|id| ChannelState::new(cfg.seeds.channel, id, cfg.channel.sigma_noise, onsets[id - 1]))
            .collect();
        let rngs = (1..=n)
            .map(|id| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
                r.set_stream(id as u64);
                r
            })
            .collect();
        Ok(Simulation {
            cfg: cfg.clone(),
            clients,
            test,
            held: vec![global.client(); n],
            global,
            channels,
            rngs,
            counts,
            epoch: 0,
            diverged: None,
            history: Vec::new(),
        })
    }

    pub fn global_model(&self) -> &SplitModelWeights<f64> {
        &self.global
    }

    pub fn test_set(&self) -> &[Sample] {
        &self.test
    }

    pub fn client_data(&self) -> &[ClientData] {
        &self.clients
    }

    fn diverge(&mut self, reason: String) {
        self.diverged.get_or_insert(reason);
        for v in self.global.stages_mut().into_iter().flat_map(|s| s.values_mut()) {
            *v = f64::NAN;
        }
    }

    /// Trains every client once, aggregates and broadcasts.
    pub fn run_global_epoch(&mut self) -> Result<&EpochRecord> {
        self.epoch += 1;
        let ge = self.epoch as u32;
        let n = self.clients.len();
        let mut clients = Vec::with_capacity(n);

        if self.diverged.is_none() {
            let mut reports = Vec::with_capacity(n);
            for i in 0..n {
                let start = SplitModelWeights::from_parts(self.global.server.clone(), self.held[i].clone());
                reports.push(run_local_training(
                    &self.cfg,
                    i + 1,
                    &start,
                    &self.clients[i],
                    &mut self.channels[i],
                    ge,
                    &mut self.rngs[i],
                )?);
            }
            let snapshots: Vec<_> = reports
                .iter()
                .map(|r| SplitModelWeights::from_parts(r.server_weights.server.clone(), r.client_weights.clone()))
                .collect();
            let b: Vec<f64> = reports.iter().map(|r| r.indicator).collect();
            let outcome = match reports.iter().find(|r| r.failed()) {
                Some(r) => Err(format!("client {} produced no finite local epoch", r.client_id)),
                None => aggregate(self.cfg.strategy.name, &snapshots, &self.counts, &b, self.cfg.strategy.alpha)
                    .map_err(|e| e.to_string()),
            };
            let weights = match outcome {
                Ok(agg) => {
                    self.global = agg.model;
                    for (held, ch) in self.held.iter_mut().zip(&mut self.channels) {
                        *held = match ch.transmit(Payload::GlobalClientWeights(self.global.client()), ge) {
                            Payload::GlobalClientWeights(c) => c,
                            _ => unreachable!(),
                        };
                    }
                    agg.weights
                }
                Err(reason) => {
                    self.diverge(format!("global epoch {ge}: {reason}"));
                    vec![f64::NAN; n]
                }
            };
            for (r, &rw) in reports.iter().zip(&weights) {
                clients.push(ClientRecord {
                    client_id: r.client_id,
                    train_loss: mean(&r.per_sample_losses),
                    val_loss: r.best_val_loss,
                    indicator: r.indicator,
                    best_local_epoch: r.best_local_epoch,
                    r_weight: rw,
                    diverged: r.failed(),
                });
            }
        } else {
            clients = (1..=n)
                .map(|id| ClientRecord {
                    client_id: id,
                    train_loss: f64::NAN,
                    val_loss: f64::NAN,
                    indicator: f64::NAN,
                    best_local_epoch: 0,
                    r_weight: f64::NAN,
                    diverged: true,
                })
                .collect();
        }

        let test = evaluate(&self.cfg, &self.global, &self.test)?;
        let diverged = self.diverged.is_some() || !test.loss.is_finite();
        self.history.push(EpochRecord { global_epoch: self.epoch, clients, test, diverged });
        Ok(self.history.last().unwrap())
    }

    pub fn finish(self) -> SimulationResult {
        let last_bad = self.history.last().is_some_and(|e| !e.test.loss.is_finite());
        let reason = self.diverged.or_else(|| last_bad.then(|| "final test loss is not finite".to_string()));
        let bg = crate::data::background_fraction(&self.test);
        SimulationResult {
            config: self.cfg,
            history: self.history,
            final_model: self.global,
            test_set: self.test,
            background_fraction: bg,
            diverged: reason.is_some(),
            divergence_reason: reason,
        }
    }
}

/// Executes all global epochs of `cfg`.
pub fn run_simulation(cfg: &RunConfig) -> Result<SimulationResult> {
    let mut sim = Simulation::new(cfg)?;
    for _ in 0..cfg.protocol.global_epochs {
        sim.run_global_epoch()?;
    }
    Ok(sim.finish())
}
