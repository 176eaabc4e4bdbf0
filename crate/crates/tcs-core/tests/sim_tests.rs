//! End-to-end simulator properties: the dense limit of TCS reproduces
//! uncompressed FedAvg bit for bit, baselines reach their expected accuracy,
//! compressed runs track dense ones, and results do not depend on the
//! number of worker threads.

use tcs_core::fedsim::{
    lr_schedule, run_experiment, run_fedavg, run_tcs, ExperimentConfig, MetricsLog, RunScheme,
};
use tcs_core::models::ModelSpec;

fn assert_same_trajectory(a: &MetricsLog, b: &MetricsLog, context: &str) {
    assert_eq!(a.records.len(), b.records.len(), "{context}: record count");
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.round, rb.round, "{context}: round");
        assert_eq!(ra.epoch, rb.epoch, "{context}: epoch round {}", ra.round);
        assert_eq!(ra.lr.to_bits(), rb.lr.to_bits(), "{context}: lr round {}", ra.round);
        assert_eq!(
            ra.train_loss.to_bits(),
            rb.train_loss.to_bits(),
            "{context}: train_loss round {} ({} vs {})",
            ra.round,
            ra.train_loss,
            rb.train_loss,
        );
        assert_eq!(
            ra.test_accuracy.to_bits(),
            rb.test_accuracy.to_bits(),
            "{context}: test_accuracy round {}",
            ra.round,
        );
    }
    for (x, y) in a.final_params.values().iter().zip(b.final_params.values()) {
        assert_eq!(x.to_bits(), y.to_bits(), "{context}: final params");
    }
}

/// TCS with phi_global + phi_local covering every coordinate sends the whole
/// buffered update each round; the residual stays zero and the trajectory
/// must equal uncompressed FedAvg bit for bit, for both one and several
/// local steps.
#[test]
fn dense_limit_matches_fedavg_bit_for_bit() {
    for local_steps in [1usize, 4] {
        let mut dense = ExperimentConfig::new(ModelSpec::logreg(3, 6)); // d = 21
        dense.n_train = 120;
        dense.n_test = 40;
        dense.n_clients = 4;
        dense.local_steps = local_steps;
        dense.epochs = 20;
        dense.batch_size = 10;
        dense.seed = 42;
        dense.validate().unwrap();

        let mut full = dense.clone();
        full.scheme = RunScheme::Tcs;
        // K_global = round(0.75 * 21) = 16, K_local = round(0.25 * 21) = 5;
        // together they cover all 21 coordinates.
        full.phi_global = 0.75;
        full.phi_local = 0.25;
        full.validate().unwrap();

        let base = run_fedavg(&dense).unwrap();
        let tcs = run_tcs(&full).unwrap();
        assert_same_trajectory(&base, &tcs, &format!("H={local_steps}"));

        // The masks really were full: every round reports all before-masking
        // coordinates in the broadcast support.
        for r in &tcs.records {
            assert_eq!(r.downlink_support_size, 21, "round {}", r.round);
        }
    }
}

/// A linearly separable two-class problem (tight clusters) is solved by the
/// dense baseline to at least 95% test accuracy within 50 epochs.
#[test]
fn fedavg_reaches_95_percent_on_easy_two_class_problem() {
    let mut cfg = ExperimentConfig::new(ModelSpec::logreg(2, 2));
    cfg.n_train = 200;
    cfg.n_test = 100;
    cfg.cluster_spread = 0.5;
    cfg.n_clients = 1;
    cfg.epochs = 50;
    cfg.batch_size = 128;
    cfg.seed = 3;
    cfg.validate().unwrap();
    let log = run_fedavg(&cfg).unwrap();
    let best = log
        .records
        .iter()
        .map(|r| r.test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        best >= 0.95,
        "expected >= 95% within 50 epochs, best was {best}"
    );
}

/// At moderate scale, TCS with error feedback stays within two accuracy
/// points of the dense baseline while sending a small fraction of the bits.
#[test]
fn tcs_tracks_dense_within_two_points() {
    let mut dense = ExperimentConfig::new(ModelSpec::logreg(4, 16)); // d = 68
    dense.n_train = 800;
    dense.n_test = 400;
    dense.cluster_spread = 0.8;
    dense.n_clients = 4;
    dense.epochs = 40;
    dense.batch_size = 25;
    dense.seed = 11;
    dense.validate().unwrap();

    let mut tcs = dense.clone();
    tcs.scheme = RunScheme::Tcs;
    tcs.phi_global = 0.15; // K_global = 10
    tcs.phi_local = 0.05; // K_local = 3
    tcs.validate().unwrap();

    let base = run_fedavg(&dense).unwrap();
    let comp = run_tcs(&tcs).unwrap();
    let acc_dense = base.final_test_accuracy();
    let acc_tcs = comp.final_test_accuracy();
    assert!(
        acc_tcs >= acc_dense - 0.02,
        "TCS {acc_tcs} fell more than 2 points below dense {acc_dense}"
    );

    let dense_bits = base.records.last().unwrap().uplink_bits_total;
    let tcs_bits = comp.records.last().unwrap().uplink_bits_total;
    assert!(
        (tcs_bits as f64) < 0.5 * dense_bits as f64,
        "TCS sent {tcs_bits} bits vs dense {dense_bits}"
    );
}

/// The same configuration run on one worker thread and on four produces
/// bit-identical metrics and parameters.
#[test]
fn identical_results_across_thread_pools() {
    let mut cfg = ExperimentConfig::new(ModelSpec::mlp(3, 8, 10)); // d = 123
    cfg.n_train = 240;
    cfg.n_test = 60;
    cfg.n_clients = 6;
    cfg.epochs = 6;
    cfg.batch_size = 20;
    cfg.scheme = RunScheme::Tcs;
    cfg.phi_global = 0.1;
    cfg.phi_local = 0.02;
    cfg.seed = 99;
    cfg.validate().unwrap();

    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).unwrap())
    };
    let one = run_with(1);
    let four = run_with(4);
    assert_same_trajectory(&one, &four, "threads 1 vs 4");
    assert_eq!(
        one.records.last().unwrap().uplink_bits_total,
        four.records.last().unwrap().uplink_bits_total,
    );
    for (a, b) in one.mask_stats.iter().zip(&four.mask_stats) {
        assert_eq!((a.round, a.k_local, a.min_hamming, a.max_hamming), (
            b.round,
            b.k_local,
            b.min_hamming,
            b.max_hamming,
        ));
    }
}

/// Warmup epochs ship the raw update (32 bits per parameter per client) and
/// every record's learning rate agrees with the published schedule.
#[test]
fn warmup_sends_dense_and_lr_follows_schedule() {
    let mut cfg = ExperimentConfig::new(ModelSpec::logreg(3, 6)); // d = 21
    cfg.n_train = 120;
    cfg.n_test = 40;
    cfg.n_clients = 4;
    cfg.epochs = 8;
    cfg.batch_size = 10;
    cfg.scheme = RunScheme::Tcs;
    cfg.phi_global = 0.1;
    cfg.phi_local = 0.05;
    cfg.warmup_epochs = 2;
    cfg.milestones = vec![(4, 0.1)];
    cfg.ref_lr = 0.2;
    cfg.ref_batch = 40; // target lr = 0.2 * (4 * 10) / 40 = 0.2
    cfg.seed = 5;
    cfg.validate().unwrap();

    let log = run_tcs(&cfg).unwrap();
    let d = 21u64;
    let mut saw_warmup = false;
    let mut saw_compressed = false;
    for r in &log.records {
        assert_eq!(r.lr.to_bits(), lr_schedule(r.epoch, &cfg).to_bits(), "round {}", r.round);
        if r.epoch < cfg.warmup_epochs {
            assert_eq!(r.uplink_bits_total, 32 * d * 4, "warmup round {}", r.round);
            saw_warmup = true;
        } else {
            assert!(r.uplink_bits_total < 32 * d * 4, "round {}", r.round);
            saw_compressed = true;
        }
    }
    assert!(saw_warmup && saw_compressed);
    // Milestone at epoch 4 scales the rate down by 10.
    let late = log.records.iter().find(|r| r.epoch >= 4).unwrap();
    let early = log.records.iter().find(|r| r.epoch == 3).unwrap();
    assert!((late.lr - early.lr * 0.1).abs() < 1e-12);
}
