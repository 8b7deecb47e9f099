mod common;

use common::{reference_global_epoch, small_run_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitfed::aggregation::Strategy;
use splitfed::channel::ChannelState;
use splitfed::data::background_fraction;
use splitfed::protocol::{run_local_training, run_simulation, Simulation};

#[test]
fn clean_protocol_equals_unsplit_reference() {
    for strategy in Strategy::ALL {
        let mut cfg = small_run_config();
        cfg.strategy.name = strategy;
        let mut sim = Simulation::new(&cfg).unwrap();
        let record = sim.run_global_epoch().unwrap().clone();
        let (model, clients) = reference_global_epoch(&cfg);
        assert_eq!(sim.global_model(), &model, "{strategy}");
        for (got, want) in record.clients.iter().zip(&clients) {
            assert_eq!(got.val_loss.to_bits(), want.val_loss.to_bits());
            assert_eq!(got.train_loss.to_bits(), want.train_loss.to_bits());
            assert_eq!(got.indicator.to_bits(), want.indicator.to_bits());
            assert_eq!(got.best_local_epoch, want.best_local_epoch);
        }
    }
}

#[test]
fn single_client_global_model_is_its_best_snapshot() {
    let mut cfg = small_run_config();
    cfg.data.sample_counts = vec![9];
    cfg.channel.onset_global_epoch = Some(vec![None]);
    for strategy in Strategy::ALL {
        cfg.strategy.name = strategy;
        let mut sim = Simulation::new(&cfg).unwrap();
        let start = sim.global_model().clone();
        let data = sim.client_data()[0].clone();
        sim.run_global_epoch().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
        rng.set_stream(1);
        let mut channel = ChannelState::clean(1);
        let report = run_local_training(&cfg, 1, &start, &data, &mut channel, 1, &mut rng).unwrap();
        assert_eq!(report.per_sample_losses.len(), data.train.len());
        assert_eq!(sim.global_model(), &report.server_weights);
    }
}

#[test]
fn runs_are_deterministic_and_have_full_history() {
    let mut cfg = small_run_config();
    cfg.channel.sigma_noise = 0.05;
    cfg.channel.onset_global_epoch = Some(vec![None, None, Some(1), Some(2), Some(1)]);
    let a = run_simulation(&cfg).unwrap();
    let b = run_simulation(&cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_model, b.final_model);
    assert_eq!(a.history.len(), cfg.protocol.global_epochs);
    assert!(a.history.iter().all(|e| e.clients.len() == 5));
}

#[test]
fn naive_equals_fedavg_for_equal_counts() {
    let mut cfg = small_run_config();
    cfg.data.sample_counts = vec![6; 3];
    cfg.channel.onset_global_epoch = Some(vec![None; 3]);
    cfg.strategy.name = Strategy::Naive;
    let naive = run_simulation(&cfg).unwrap();
    cfg.strategy.name = Strategy::FedAvg;
    let fed = run_simulation(&cfg).unwrap();
    for (x, y) in naive.history.iter().zip(&fed.history) {
        assert!((x.test.loss - y.test.loss).abs() <= 1e-9);
        assert!((x.test.accuracy_percent - y.test.accuracy_percent).abs() <= 1e-9);
        for (a, b) in x.clients.iter().zip(&y.clients) {
            assert!((a.val_loss - b.val_loss).abs() <= 1e-9);
            assert!((a.r_weight - b.r_weight).abs() <= 1e-9);
        }
    }
}

#[test]
fn noisy_clients_change_only_after_onset() {
    let mut cfg = small_run_config();
    cfg.channel.sigma_noise = 0.1;
    cfg.channel.onset_global_epoch = Some(vec![None, None, Some(2), None, None]);
    let noisy = run_simulation(&cfg).unwrap();
    cfg.channel.sigma_noise = 0.0;
    let clean = run_simulation(&cfg).unwrap();
    assert_eq!(noisy.history[0], clean.history[0]);
    assert_ne!(noisy.history[1], clean.history[1]);
}

#[test]
fn extreme_noise_diverges_to_background() {
    let mut cfg = small_run_config();
    cfg.strategy.name = Strategy::Naive;
    cfg.channel.sigma_noise = 1e300;
    cfg.channel.onset_global_epoch = Some(vec![Some(1); 5]);
    let result = run_simulation(&cfg).unwrap();
    assert!(result.diverged, "{:?}", result.final_epoch().test);
    let last = result.final_epoch();
    assert!(last.test.loss.is_nan());
    assert!(last.test.predictions.iter().all(|&l| l == 0));
    let bg = 100.0 * background_fraction(&result.test_set);
    assert!((last.test.accuracy_percent - bg).abs() < 1e-9);
}
