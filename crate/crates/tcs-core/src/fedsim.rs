//! Federated training state machines: dense FedAvg/FedSGD, TCS with error
//! accumulation, and TCS with global momentum, plus the learning-rate
//! schedule, uniform aggregation, metrics, and divergence detection.
//!
//! The simulator keeps one shared parameter vector per run. Every client
//! applies the identical broadcast to the identical previous state, so all
//! per-client model copies are bit-equal at every round; sharing one copy
//! makes that invariant structural instead of checked. The same holds for
//! the momentum vector in momentum runs.
//!
//! Determinism: all randomness flows through [`substream`]-keyed streams
//! (init, data, partition, per-client batch order, rand-K masks), clients
//! are evaluated with order-preserving parallel iterators, and aggregation
//! folds in ascending client order — so any thread count reproduces the
//! same bytes.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::codec::{apply_quantizer, encode_payload, QuantizerKind, QuantizerSpec};
use crate::compress::{
    compress_with_masks, randk_mask, tcs_compress, tcs_global_mask, topk_compress,
    CompressorConfig, ErrorState, Fairness, Scheme, SparseUpdate,
};
use crate::models::{partition_iid, synth_dataset, BatchSampler, Dataset, ModelSpec};
use crate::tensor::{LayerLayout, Mask, ParamVector};

/// A configuration field failed validation.
#[derive(Debug, Clone, thiserror::Error)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn cfg_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Simulation failure.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged at round {round}: non-finite {what}")]
    Diverged { round: u32, what: &'static str },
}

/// Uplink compression scheme for a run; `None` is the dense baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunScheme {
    None,
    TopK,
    RandK,
    Tcs,
}

/// Full description of one experiment; a `(config, seed)` pair determines
/// every byte of the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// Synthetic dataset: training rows, held-out rows, cluster spread.
    pub n_train: usize,
    pub n_test: usize,
    pub cluster_spread: f64,
    /// Federation shape: clients, local steps per round, total passes,
    /// per-client batch size.
    pub n_clients: usize,
    pub local_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Compression.
    pub scheme: RunScheme,
    pub phi_global: f64,
    pub phi_local: f64,
    pub fairness: Fairness,
    pub phi_min_global: f64,
    pub phi_min_local: f64,
    pub quantizer: QuantizerSpec,
    /// Learning-rate schedule: reference point (`ref_lr` at `ref_batch`),
    /// linear warmup length, and multiplicative decay milestones.
    pub ref_lr: f64,
    pub ref_batch: usize,
    pub warmup_epochs: usize,
    pub milestones: Vec<(usize, f64)>,
    /// Regularization and momentum.
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Small dense baseline; tests and callers override what they need.
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            n_train: 512,
            n_test: 128,
            cluster_spread: 1.0,
            n_clients: 4,
            local_steps: 1,
            epochs: 10,
            batch_size: 32,
            scheme: RunScheme::None,
            phi_global: 0.1,
            phi_local: 0.01,
            fairness: Fairness::None,
            phi_min_global: 0.0,
            phi_min_local: 0.0,
            quantizer: QuantizerSpec::none(),
            ref_lr: 0.1,
            ref_batch: 128,
            warmup_epochs: 0,
            milestones: Vec::new(),
            weight_decay: 0.0,
            momentum: 0.0,
            seed: 0,
        }
    }

    /// The compressor parameters for compressed schemes.
    pub fn compressor(&self) -> CompressorConfig {
        let scheme = match self.scheme {
            RunScheme::TopK => Scheme::TopK,
            RunScheme::RandK => Scheme::RandK,
            RunScheme::Tcs => Scheme::Tcs,
            RunScheme::None => panic!("dense runs have no compressor"),
        };
        CompressorConfig {
            scheme,
            phi_global: self.phi_global,
            phi_local: self.phi_local,
            fairness: self.fairness,
            phi_min_global: self.phi_min_global,
            phi_min_local: self.phi_min_local,
        }
    }

    /// Sparsity ratio governing the position-block size on the wire: the
    /// local ratio for TCS, the single ratio for top-K, and 0 (degenerate
    /// one-block stream) for rand-K, whose positions are implicit.
    pub fn encode_phi(&self) -> f64 {
        match self.scheme {
            RunScheme::Tcs => self.phi_local,
            RunScheme::TopK => self.phi_global,
            RunScheme::RandK | RunScheme::None => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_clients < 1 {
            return Err(cfg_err("n_clients", "need at least one client"));
        }
        if self.local_steps < 1 {
            return Err(cfg_err("local_steps", "need at least one local step per round"));
        }
        if self.epochs < 1 {
            return Err(cfg_err("epochs", "need at least one epoch"));
        }
        if self.batch_size < 1 {
            return Err(cfg_err("batch_size", "need a positive batch size"));
        }
        if self.n_train < self.n_clients.max(self.model.n_classes) {
            return Err(cfg_err(
                "n_train",
                format!(
                    "need at least max(n_clients, n_classes) = {} training rows",
                    self.n_clients.max(self.model.n_classes)
                ),
            ));
        }
        if self.n_test < 1 {
            return Err(cfg_err("n_test", "need at least one held-out row"));
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread < 0.0 {
            return Err(cfg_err("cluster_spread", "must be finite and non-negative"));
        }
        if !self.ref_lr.is_finite() || self.ref_lr <= 0.0 {
            return Err(cfg_err("ref_lr", "must be finite and positive"));
        }
        if self.ref_batch < 1 {
            return Err(cfg_err("ref_batch", "need a positive reference batch"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(cfg_err("weight_decay", "must be finite and non-negative"));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err("momentum", "must lie in [0, 1)"));
        }
        for pair in self.milestones.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(cfg_err("milestones", "epochs must be strictly increasing"));
            }
        }
        if self.milestones.iter().any(|(_, f)| !f.is_finite() || *f <= 0.0) {
            return Err(cfg_err("milestones", "factors must be finite and positive"));
        }
        if self.quantizer.kind == QuantizerKind::Fractional && self.quantizer.p < 1 {
            return Err(cfg_err("quantizer", "fractional quantizer needs at least one interval"));
        }
        self.validate_compression()
    }

    fn validate_compression(&self) -> Result<(), ConfigError> {
        let d = self.model.layout().total();
        if self.scheme == RunScheme::None {
            if self.quantizer.kind != QuantizerKind::None {
                return Err(cfg_err("quantizer", "dense runs do not quantize"));
            }
            if self.momentum > 0.0 {
                return Err(cfg_err("momentum", "momentum requires scheme=tcs"));
            }
            return Ok(());
        }
        if !self.phi_global.is_finite() || self.phi_global <= 0.0 || self.phi_global > 1.0 {
            return Err(cfg_err("phi_global", "must lie in (0, 1]"));
        }
        if self.momentum > 0.0 && (self.scheme != RunScheme::Tcs || self.local_steps != 1) {
            return Err(cfg_err("momentum", "momentum requires scheme=tcs and local_steps=1"));
        }
        if self.fairness != Fairness::None && self.scheme != RunScheme::Tcs {
            return Err(cfg_err("fairness", "layer fairness applies to scheme=tcs only"));
        }
        if self.scheme != RunScheme::Tcs {
            return Ok(());
        }
        if !self.phi_local.is_finite() || !(0.0..=1.0).contains(&self.phi_local) {
            return Err(cfg_err("phi_local", "must lie in [0, 1]"));
        }
        if self.phi_local >= self.phi_global {
            return Err(cfg_err(
                "phi_local",
                "the exploration ratio must be smaller than phi_global",
            ));
        }
        let ccfg = self.compressor();
        let (k_global, k_local) = (ccfg.k_global(d), ccfg.k_local(d));
        if k_global + k_local > d {
            return Err(cfg_err(
                "phi_local",
                format!("K_global + K_local = {} exceeds d = {d}", k_global + k_local),
            ));
        }
        for (field, phi_min, phi, k) in [
            ("phi_min_global", self.phi_min_global, self.phi_global, k_global),
            ("phi_min_local", self.phi_min_local, self.phi_local, k_local),
        ] {
            if !phi_min.is_finite() || phi_min < 0.0 {
                return Err(cfg_err(field, "must be finite and non-negative"));
            }
            if phi_min > phi {
                return Err(cfg_err(field, "floor ratio exceeds its target ratio"));
            }
            let layout = self.model.layout();
            let floors: usize = layout
                .layer_sizes()
                .iter()
                .map(|&s| crate::compress::round_half_up(phi_min * s as f64))
                .sum();
            if floors > k {
                return Err(cfg_err(field, format!("per-layer floors total {floors} > K = {k}")));
            }
        }
        Ok(())
    }
}

/// One CSV row of run output; `wall_ms` is recorded as 0 so output bytes
/// are reproducible (timings belong in logs, not the experiment artifact).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: u32,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub uplink_bits_total: u64,
    pub uplink_bits_per_param_per_iter: f64,
    pub downlink_support_size: usize,
    pub wall_ms: u64,
}

/// Per-round mask-correlation statistics over clients (compressed TCS
/// rounds only): Hamming distance between each client's combined mask and
/// the shared global mask. The mask-correlation invariant pins this at
/// exactly `k_local` for every client, so `min_hamming == max_hamming ==
/// k_local` on healthy rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRoundStats {
    pub round: u32,
    pub k_local: usize,
    pub min_hamming: usize,
    pub max_hamming: usize,
}

/// Everything a run produces: per-round metrics, mask statistics, and the
/// final parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
    pub mask_stats: Vec<MaskRoundStats>,
    pub final_params: ParamVector,
}

impl MetricsLog {
    pub fn final_test_accuracy(&self) -> f64 {
        self.records.last().expect("runs produce at least one record").test_accuracy
    }
}

/// Write records as CSV. Floats print with shortest-round-trip precision,
/// so equal logs produce byte-identical files.
pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "epoch",
        "lr",
        "train_loss",
        "test_accuracy",
        "uplink_bits_total",
        "uplink_bits_per_param_per_iter",
        "downlink_support_size",
        "wall_ms",
    ])?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.epoch.to_string(),
            format!("{}", r.lr),
            format!("{}", r.train_loss),
            format!("{}", r.test_accuracy),
            r.uplink_bits_total.to_string(),
            format!("{}", r.uplink_bits_per_param_per_iter),
            r.downlink_support_size.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Linear-scaling schedule: the target rate is
/// `ref_lr · (N·batch_size)/ref_batch`; epochs below `warmup_epochs` ramp
/// linearly from `ref_lr` to the target; each milestone `(epoch, factor)`
/// multiplies the rate from that epoch onward.
pub fn lr_schedule(epoch: usize, cfg: &ExperimentConfig) -> f64 {
    let target =
        cfg.ref_lr * (cfg.n_clients * cfg.batch_size) as f64 / cfg.ref_batch as f64;
    let base = if epoch < cfg.warmup_epochs {
        cfg.ref_lr + (target - cfg.ref_lr) * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        target
    };
    cfg.milestones
        .iter()
        .filter(|(at, _)| epoch >= *at)
        .fold(base, |lr, (_, factor)| lr * factor)
}

/// `H` local SGD steps from `params`, returning the model difference
/// `Δθ = Σ_τ (−η·g_τ)`. The difference accumulates term by term and the
/// working parameters are re-derived as `params + Δ` each step, so with
/// `H = 1` the result is bit-identical to `−η·gradient`.
pub fn client_local_update(
    spec: &ModelSpec,
    params: &ParamVector,
    shard: &Dataset,
    sampler: &mut BatchSampler,
    h: usize,
    lr: f64,
    weight_decay: f64,
) -> ParamVector {
    assert!(h >= 1, "need at least one local step");
    assert!(!shard.is_empty(), "client shard is empty");
    let batch = sampler.next_batch();
    let mut delta = spec.gradient(params, shard, &batch, weight_decay).scale(-lr);
    for _ in 1..h {
        let theta = params.add(&delta);
        let batch = sampler.next_batch();
        delta = delta.add(&spec.gradient(&theta, shard, &batch, weight_decay).scale(-lr));
    }
    delta
}

/// Uniform mean of the client updates, folded in ascending client order
/// (fixed order keeps aggregation deterministic under any parallelism).
pub fn aggregate(updates: &[ParamVector]) -> ParamVector {
    assert!(!updates.is_empty(), "aggregate needs at least one update");
    let mut sum = updates[0].clone();
    for u in &updates[1..] {
        sum = sum.add(u);
    }
    sum.scale(1.0 / updates.len() as f64)
}

/// Per-client state owned exclusively by that client across rounds.
struct ClientState {
    shard: Dataset,
    sampler: BatchSampler,
    error: ErrorState,
}

/// Immutable run skeleton shared by all three training loops.
struct SimSetup {
    spec: ModelSpec,
    layout: Arc<LayerLayout>,
    train: Dataset,
    test: Dataset,
    train_idx: Vec<usize>,
    clients: Vec<ClientState>,
    steps_per_epoch: usize,
    total_rounds: usize,
}

fn setup(cfg: &ExperimentConfig) -> SimSetup {
    let spec = cfg.model.clone();
    let layout = spec.layout();
    let all = synth_dataset(
        spec.n_classes,
        spec.n_features,
        cfg.n_train + cfg.n_test,
        cfg.cluster_spread,
        cfg.seed,
    );
    let (train, test) = all.split_at(cfg.n_train);
    let shards = partition_iid(&train, cfg.n_clients, cfg.seed);
    let steps_per_epoch = BatchSampler::steps_per_epoch(
        shards.iter().map(Dataset::len).max().unwrap(),
        cfg.batch_size,
    );
    let total_rounds = (cfg.epochs * steps_per_epoch).div_ceil(cfg.local_steps);
    let clients = shards
        .into_iter()
        .enumerate()
        .map(|(n, shard)| ClientState {
            sampler: BatchSampler::new(shard.len(), cfg.batch_size, cfg.seed, n as u64),
            error: ErrorState::zeros(layout.clone()),
            shard,
        })
        .collect();
    let train_idx = (0..train.len()).collect();
    SimSetup { spec, layout, train, test, train_idx, clients, steps_per_epoch, total_rounds }
}

/// Client updates larger than this are treated as divergence even while
/// still representable; the margin guarantees later sums (buffers,
/// aggregates, parameter updates) stay finite until the check runs.
const DIVERGENCE_LIMIT: f64 = 1e100;

fn check_client_updates(updates: &[ParamVector], round: u32) -> Result<(), SimError> {
    let ok = updates
        .iter()
        .all(|u| u.values().iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT));
    if ok {
        Ok(())
    } else {
        Err(SimError::Diverged { round, what: "client update" })
    }
}

/// One client's compression step for the configured scheme. Returns the
/// raw (unquantized) sparse update, the new residual, and the exact wire
/// cost in bits of the encoded payload.
fn compress_client(
    cfg: &ExperimentConfig,
    ccfg: &CompressorConfig,
    update: &ParamVector,
    shared_mask: &Mask,
    err: &ErrorState,
    round: u32,
) -> (SparseUpdate, ErrorState, u64) {
    let (su, new_err) = match cfg.scheme {
        RunScheme::Tcs => tcs_compress(update, shared_mask, ccfg, err, round),
        RunScheme::TopK => topk_compress(update, ccfg.k_global(update.d()), err, round),
        RunScheme::RandK => compress_with_masks(
            update,
            err,
            shared_mask,
            &Mask::empty(update.layout().clone()),
            round,
        ),
        RunScheme::None => unreachable!("dense rounds do not compress"),
    };
    let bits = encode_payload(&su, &cfg.quantizer, cfg.encode_phi()).bit_len() as u64;
    (su, new_err, bits)
}

/// The shared mask all clients derive this round: the TCS global mask from
/// the previous broadcast, the shared-seed rand-K mask, or empty for top-K.
fn shared_round_mask(
    cfg: &ExperimentConfig,
    ccfg: &CompressorConfig,
    prev_broadcast: &ParamVector,
    layout: &Arc<LayerLayout>,
    round: u32,
) -> Mask {
    match cfg.scheme {
        RunScheme::Tcs => tcs_global_mask(
            prev_broadcast,
            ccfg.k_global(layout.total()),
            cfg.fairness,
            cfg.phi_min_global,
        ),
        RunScheme::RandK => {
            randk_mask(layout, ccfg.k_global(layout.total()), round as u64, cfg.seed)
        }
        RunScheme::TopK => Mask::empty(layout.clone()),
        RunScheme::None => unreachable!("dense rounds have no shared mask"),
    }
}

/// Outcome of the uplink phase of one round.
struct RoundUplink {
    aggregate: ParamVector,
    bits_total: u64,
    hammings: Vec<usize>,
}

/// Compress every client's update against the shared mask, assert
/// round-level error-feedback conservation, quantize the sent values, and
/// aggregate. Order-preserving parallel map keeps the result independent
/// of the thread count.
fn compressed_uplink(
    cfg: &ExperimentConfig,
    ccfg: &CompressorConfig,
    clients: &mut [ClientState],
    updates: &[ParamVector],
    shared_mask: &Mask,
    round: u32,
) -> RoundUplink {
    let sends: Vec<(SparseUpdate, u64)> = clients
        .par_iter_mut()
        .zip(updates.par_iter())
        .map(|(client, update)| {
            let buffered = update.add(client.error.residual());
            let (su, new_err, bits) =
                compress_client(cfg, ccfg, update, shared_mask, &client.error, round);
            debug_assert!(
                su.to_dense()
                    .add(new_err.residual())
                    .values()
                    .iter()
                    .zip(buffered.values())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "error-feedback conservation violated at round {round}"
            );
            client.error = new_err;
            (su, bits)
        })
        .collect();
    let bits_total = sends.iter().map(|(_, bits)| bits).sum();
    let hammings = sends
        .iter()
        .map(|(su, _)| su.combined_mask().hamming(shared_mask))
        .collect();
    let dense: Vec<ParamVector> = sends
        .iter()
        .map(|(su, _)| {
            su.with_values(&apply_quantizer(&su.all_values(), &cfg.quantizer)).to_dense()
        })
        .collect();
    RoundUplink { aggregate: aggregate(&dense), bits_total, hammings }
}

/// Where a round sits in the schedule: its index, epoch, and learning rate.
#[derive(Clone, Copy)]
struct SchedulePoint {
    round: u32,
    epoch: usize,
    lr: f64,
}

fn make_record(
    cfg: &ExperimentConfig,
    sim: &SimSetup,
    at: SchedulePoint,
    theta: &ParamVector,
    bits_total: u64,
    downlink_support: usize,
) -> Result<MetricsRecord, SimError> {
    if !theta.all_finite() {
        return Err(SimError::Diverged { round: at.round, what: "model parameters" });
    }
    let train_loss = sim.spec.loss(theta, &sim.train, &sim.train_idx, cfg.weight_decay);
    if !train_loss.is_finite() {
        return Err(SimError::Diverged { round: at.round, what: "training loss" });
    }
    let d = sim.layout.total();
    let denom = (cfg.n_clients * d * cfg.local_steps) as f64;
    Ok(MetricsRecord {
        round: at.round,
        epoch: at.epoch,
        lr: at.lr,
        train_loss,
        test_accuracy: sim.spec.accuracy(theta, &sim.test),
        uplink_bits_total: bits_total,
        uplink_bits_per_param_per_iter: bits_total as f64 / denom,
        downlink_support_size: downlink_support,
        wall_ms: 0,
    })
}

/// Dense FedAvg/FedSGD: every round each client runs `H` local steps and
/// uploads its full model difference; the server applies the uniform mean.
pub fn run_fedavg(cfg: &ExperimentConfig) -> Result<MetricsLog, SimError> {
    cfg.validate()?;
    assert_eq!(cfg.scheme, RunScheme::None, "run_fedavg is the dense loop");
    let mut sim = setup(cfg);
    let spec = sim.spec.clone();
    let d = sim.layout.total();
    let mut theta = spec.init_params(cfg.seed);
    let mut records = Vec::with_capacity(sim.total_rounds);
    for t in 0..sim.total_rounds {
        let round = t as u32;
        let epoch = t * cfg.local_steps / sim.steps_per_epoch;
        let lr = lr_schedule(epoch, cfg);
        let updates: Vec<ParamVector> = sim
            .clients
            .par_iter_mut()
            .map(|c| {
                client_local_update(
                    &spec,
                    &theta,
                    &c.shard,
                    &mut c.sampler,
                    cfg.local_steps,
                    lr,
                    cfg.weight_decay,
                )
            })
            .collect();
        check_client_updates(&updates, round)?;
        let agg = aggregate(&updates);
        theta = theta.add(&agg);
        let bits = 32 * (cfg.n_clients * d) as u64;
        let at = SchedulePoint { round, epoch, lr };
        records.push(make_record(cfg, &sim, at, &theta, bits, agg.support_size())?);
    }
    Ok(MetricsLog { records, mask_stats: Vec::new(), final_params: theta })
}

/// Sparsified training (TCS, top-K, or rand-K) with error accumulation.
/// Warmup epochs send dense updates; once compression starts, each round
/// derives the shared mask from the previous broadcast, compresses every
/// client's buffered update, and broadcasts the aggregated sparse mean.
pub fn run_tcs(cfg: &ExperimentConfig) -> Result<MetricsLog, SimError> {
    cfg.validate()?;
    assert_ne!(cfg.scheme, RunScheme::None, "run_tcs needs a compression scheme");
    let ccfg = cfg.compressor();
    let mut sim = setup(cfg);
    let spec = sim.spec.clone();
    let layout = sim.layout.clone();
    let d = layout.total();
    let mut theta = spec.init_params(cfg.seed);
    // Last broadcast; source of the next round's global mask. The first
    // compressed round reads the final dense warmup broadcast (or this
    // zero vector when there is no warmup, degenerating to the lowest-index
    // mask).
    let mut prev_broadcast = ParamVector::zeros(layout.clone());
    let mut records = Vec::with_capacity(sim.total_rounds);
    let mut mask_stats = Vec::new();
    for t in 0..sim.total_rounds {
        let round = t as u32;
        let epoch = t * cfg.local_steps / sim.steps_per_epoch;
        let lr = lr_schedule(epoch, cfg);
        let updates: Vec<ParamVector> = sim
            .clients
            .par_iter_mut()
            .map(|c| {
                client_local_update(
                    &spec,
                    &theta,
                    &c.shard,
                    &mut c.sampler,
                    cfg.local_steps,
                    lr,
                    cfg.weight_decay,
                )
            })
            .collect();
        check_client_updates(&updates, round)?;
        let compressed = epoch >= cfg.warmup_epochs;
        let (agg, bits_total) = if compressed {
            let shared = shared_round_mask(cfg, &ccfg, &prev_broadcast, &layout, round);
            let uplink =
                compressed_uplink(cfg, &ccfg, &mut sim.clients, &updates, &shared, round);
            if cfg.scheme == RunScheme::Tcs {
                mask_stats.push(MaskRoundStats {
                    round,
                    k_local: ccfg.k_local(d),
                    min_hamming: uplink.hammings.iter().copied().min().unwrap(),
                    max_hamming: uplink.hammings.iter().copied().max().unwrap(),
                });
            }
            (uplink.aggregate, uplink.bits_total)
        } else {
            (aggregate(&updates), 32 * (cfg.n_clients * d) as u64)
        };
        theta = theta.add(&agg);
        let support = agg.support_size();
        prev_broadcast = agg;
        let at = SchedulePoint { round, epoch, lr };
        records.push(make_record(cfg, &sim, at, &theta, bits_total, support)?);
    }
    Ok(MetricsLog { records, mask_stats, final_params: theta })
}

/// TCS with global momentum (FedSGD: one local step, gradient-valued
/// pipeline). Clients upload compressed gradients with error accumulation;
/// the momentum buffer is a pure function of the broadcast aggregates, so
/// one shared copy stands for every client's — they are identical by
/// construction.
///
/// The aggregate of round `t` is applied through heavy-ball momentum
/// `w ← β·w + g̃_t`, `θ ← θ − η_{t+1}·w`, using the learning rate of the
/// round the broadcast lands in. With `β = 0` and a constant rate this
/// reproduces [`run_tcs`] with `H = 1` up to the rounding of `η·mean(b)`
/// versus `mean(η·b)`.
pub fn run_tcs_momentum(cfg: &ExperimentConfig) -> Result<MetricsLog, SimError> {
    cfg.validate()?;
    assert_eq!(cfg.scheme, RunScheme::Tcs, "momentum runs require scheme=tcs");
    assert_eq!(cfg.local_steps, 1, "momentum runs are FedSGD (one local step)");
    let ccfg = cfg.compressor();
    let mut sim = setup(cfg);
    let spec = sim.spec.clone();
    let layout = sim.layout.clone();
    let d = layout.total();
    let mut theta = spec.init_params(cfg.seed);
    let mut momentum = ParamVector::zeros(layout.clone());
    // Gradient-valued last broadcast: the momentum variant derives the
    // global mask from the aggregated gradient, not the model difference.
    let mut prev_broadcast = ParamVector::zeros(layout.clone());
    let mut records = Vec::with_capacity(sim.total_rounds);
    let mut mask_stats = Vec::new();
    for t in 0..sim.total_rounds {
        let round = t as u32;
        let epoch = t / sim.steps_per_epoch;
        let gradients: Vec<ParamVector> = sim
            .clients
            .par_iter_mut()
            .map(|c| {
                let batch = c.sampler.next_batch();
                spec.gradient(&theta, &c.shard, &batch, cfg.weight_decay)
            })
            .collect();
        check_client_updates(&gradients, round)?;
        let compressed = epoch >= cfg.warmup_epochs;
        let (agg, bits_total) = if compressed {
            let shared = shared_round_mask(cfg, &ccfg, &prev_broadcast, &layout, round);
            let uplink =
                compressed_uplink(cfg, &ccfg, &mut sim.clients, &gradients, &shared, round);
            mask_stats.push(MaskRoundStats {
                round,
                k_local: ccfg.k_local(d),
                min_hamming: uplink.hammings.iter().copied().min().unwrap(),
                max_hamming: uplink.hammings.iter().copied().max().unwrap(),
            });
            (uplink.aggregate, uplink.bits_total)
        } else {
            (aggregate(&gradients), 32 * (cfg.n_clients * d) as u64)
        };
        // The broadcast reaches clients at the start of round t+1; the
        // descent step therefore uses that round's learning rate.
        let lr_apply = lr_schedule((t + 1) / sim.steps_per_epoch, cfg);
        momentum = momentum.scale(cfg.momentum).add(&agg);
        theta = theta.add(&momentum.scale(-lr_apply));
        let support = agg.support_size();
        prev_broadcast = agg;
        records
            .push(make_record(
                cfg,
                &sim,
                SchedulePoint { round, epoch, lr: lr_apply },
                &theta,
                bits_total,
                support,
            )?);
    }
    Ok(MetricsLog { records, mask_stats, final_params: theta })
}

/// Run the experiment the configuration describes: momentum > 0 selects
/// the momentum loop, otherwise the scheme picks dense or sparsified
/// training.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog, SimError> {
    cfg.validate()?;
    if cfg.momentum > 0.0 {
        run_tcs_momentum(cfg)
    } else if cfg.scheme == RunScheme::None {
        run_fedavg(cfg)
    } else {
        run_tcs(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::substream;
    use rand::Rng;

    fn small_cfg(scheme: RunScheme) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ModelSpec::logreg(3, 6));
        cfg.n_train = 90;
        cfg.n_test = 30;
        cfg.n_clients = 3;
        cfg.epochs = 3;
        cfg.batch_size = 10;
        cfg.scheme = scheme;
        cfg.phi_global = 0.3;
        cfg.phi_local = 0.1;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn lr_schedule_matches_published_settings() {
        let mut cfg = ExperimentConfig::new(ModelSpec::logreg(2, 2));
        cfg.n_clients = 10;
        cfg.batch_size = 64;
        cfg.warmup_epochs = 5;
        cfg.milestones = vec![(150, 0.1), (225, 0.1)];
        assert_eq!(lr_schedule(0, &cfg), 0.1);
        assert!((lr_schedule(2, &cfg) - 0.26).abs() < 1e-15);
        assert_eq!(lr_schedule(5, &cfg), 0.5);
        assert_eq!(lr_schedule(149, &cfg), 0.5);
        assert!((lr_schedule(160, &cfg) - 0.05).abs() < 1e-15);
        assert!((lr_schedule(230, &cfg) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_reference_point_is_flat() {
        let mut cfg = ExperimentConfig::new(ModelSpec::logreg(2, 2));
        cfg.n_clients = 1;
        cfg.batch_size = 128;
        cfg.warmup_epochs = 5;
        for epoch in [0, 1, 4, 5, 100] {
            assert_eq!(lr_schedule(epoch, &cfg), 0.1);
        }
    }

    #[test]
    fn single_step_update_is_scaled_gradient() {
        let spec = ModelSpec::logreg(3, 4);
        let shard = synth_dataset(3, 4, 30, 1.0, 3);
        let params = spec.init_params(4);
        let lr = 0.25;
        let delta = client_local_update(
            &spec,
            &params,
            &shard,
            &mut BatchSampler::new(30, 8, 5, 0),
            1,
            lr,
            1e-4,
        );
        let batch = BatchSampler::new(30, 8, 5, 0).next_batch();
        let expect = spec.gradient(&params, &shard, &batch, 1e-4).scale(-lr);
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&delta), bits(&expect));
    }

    #[test]
    fn zero_learning_rate_freezes_the_model() {
        let spec = ModelSpec::logreg(2, 3);
        let shard = synth_dataset(2, 3, 20, 1.0, 6);
        let delta = client_local_update(
            &spec,
            &spec.init_params(7),
            &shard,
            &mut BatchSampler::new(20, 5, 8, 0),
            3,
            0.0,
            0.0,
        );
        assert!(delta.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn multi_step_update_matches_manual_loop() {
        let spec = ModelSpec::mlp(3, 4, 5);
        let shard = synth_dataset(3, 4, 40, 1.0, 9);
        let params = spec.init_params(10);
        let (h, lr, lambda) = (4, 0.1, 1e-3);
        let delta =
            client_local_update(&spec, &params, &shard, &mut BatchSampler::new(40, 8, 11, 2), h, lr, lambda);
        // Longhand replay of the documented recipe: accumulate −η·g terms,
        // re-deriving the working parameters from the base each step.
        let mut sampler = BatchSampler::new(40, 8, 11, 2);
        let mut manual = spec
            .gradient(&params, &shard, &sampler.next_batch(), lambda)
            .scale(-lr);
        for _ in 1..h {
            let theta = params.add(&manual);
            let g = spec.gradient(&theta, &shard, &sampler.next_batch(), lambda);
            manual = manual.add(&g.scale(-lr));
        }
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&delta), bits(&manual));
    }

    #[test]
    fn aggregate_trivial_cases() {
        let layout = Arc::new(LayerLayout::single(2));
        let u = ParamVector::new(layout.clone(), vec![0.5, -3.0]);
        let mean = aggregate(&[u.clone(), u.clone(), u.clone(), u.clone()]);
        assert_eq!(mean.values(), u.values());
        let a = ParamVector::new(layout.clone(), vec![2.0, 0.0]);
        let b = ParamVector::new(layout, vec![0.0, 4.0]);
        assert_eq!(aggregate(&[a, b]).values(), &[1.0, 2.0]);
    }

    #[test]
    fn aggregate_matches_dense_oracle() {
        let layout = Arc::new(LayerLayout::new(vec![5, 3]));
        let mut rng = substream(77, "test", 0, 0);
        let updates: Vec<ParamVector> = (0..10)
            .map(|_| {
                ParamVector::new(layout.clone(), (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect())
            })
            .collect();
        let got = aggregate(&updates);
        for i in 0..8 {
            let mut sum = updates[0].values()[i];
            for u in &updates[1..] {
                sum += u.values()[i];
            }
            assert_eq!(got.values()[i].to_bits(), (sum * 0.1).to_bits());
        }
    }

    #[test]
    fn fedavg_single_client_reduces_to_sgd() {
        let mut cfg = small_cfg(RunScheme::None);
        cfg.n_clients = 1;
        cfg.batch_size = 16;
        let log = run_fedavg(&cfg).unwrap();
        // Standalone SGD over the same shard, batches, and schedule.
        let spec = cfg.model.clone();
        let all = synth_dataset(3, 6, cfg.n_train + cfg.n_test, cfg.cluster_spread, cfg.seed);
        let (train, _) = all.split_at(cfg.n_train);
        let shard = partition_iid(&train, 1, cfg.seed).remove(0);
        let mut sampler = BatchSampler::new(shard.len(), cfg.batch_size, cfg.seed, 0);
        let mut theta = spec.init_params(cfg.seed);
        let steps_per_epoch = BatchSampler::steps_per_epoch(shard.len(), cfg.batch_size);
        for t in 0..cfg.epochs * steps_per_epoch {
            let lr = lr_schedule(t / steps_per_epoch, &cfg);
            let g = spec.gradient(&theta, &shard, &sampler.next_batch(), cfg.weight_decay);
            theta = theta.add(&g.scale(-lr));
        }
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&log.final_params), bits(&theta));
    }

    #[test]
    fn tcs_run_reports_masks_bits_and_support() {
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.warmup_epochs = 1;
        let log = run_tcs(&cfg).unwrap();
        let d = cfg.model.layout().total();
        let ccfg = cfg.compressor();
        let (kg, kl) = (ccfg.k_global(d), ccfg.k_local(d));
        assert_eq!(log.records.len(), 9, "3 epochs × 3 rounds each");
        let dense_bits = 32 * (cfg.n_clients * d) as u64;
        for r in &log.records {
            if r.epoch < cfg.warmup_epochs {
                assert_eq!(r.uplink_bits_total, dense_bits);
            } else {
                assert!(r.uplink_bits_total < dense_bits);
                assert!(r.downlink_support_size <= kg + cfg.n_clients * kl);
            }
            assert!(r.train_loss.is_finite());
            assert_eq!(r.wall_ms, 0);
        }
        // Mask correlation: every client differs from the global mask in
        // exactly K_local positions, every compressed round.
        assert!(!log.mask_stats.is_empty());
        for s in &log.mask_stats {
            assert_eq!(s.min_hamming, kl, "round {}", s.round);
            assert_eq!(s.max_hamming, kl, "round {}", s.round);
        }
    }

    #[test]
    fn topk_and_randk_run_through_the_same_loop() {
        for scheme in [RunScheme::TopK, RunScheme::RandK] {
            let cfg = small_cfg(scheme);
            let log = run_tcs(&cfg).unwrap();
            let d = cfg.model.layout().total();
            let k = cfg.compressor().k_global(d);
            for r in &log.records {
                assert!(r.uplink_bits_total > 0);
                assert!(r.downlink_support_size <= k * cfg.n_clients.max(1));
            }
            assert!(log.mask_stats.is_empty(), "mask stats are TCS-specific");
        }
    }

    #[test]
    fn dense_limit_reproduces_fedavg() {
        let mut dense = small_cfg(RunScheme::None);
        dense.warmup_epochs = 1;
        let mut full = small_cfg(RunScheme::Tcs);
        full.warmup_epochs = 1;
        full.phi_global = 1.0;
        full.phi_local = 0.0;
        let a = run_fedavg(&dense).unwrap();
        let b = run_tcs(&full).unwrap();
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.final_params), bits(&b.final_params));
    }

    #[test]
    fn momentum_off_tracks_plain_tcs() {
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.epochs = 2;
        // Constant learning rate (no warmup, no milestones): the plain loop
        // scales by η when the gradient is taken, the momentum loop when
        // the broadcast lands, so the rates must not vary across rounds.
        cfg.warmup_epochs = 0;
        let plain = run_tcs(&cfg).unwrap();
        let with_zero_beta = run_tcs_momentum(&cfg).unwrap();
        for (a, b) in plain
            .final_params
            .values()
            .iter()
            .zip(with_zero_beta.final_params.values())
        {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn momentum_run_produces_mask_stats() {
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.momentum = 0.9;
        cfg.warmup_epochs = 1;
        let log = run_tcs_momentum(&cfg).unwrap();
        assert!(!log.mask_stats.is_empty());
        let kl = cfg.compressor().k_local(cfg.model.layout().total());
        for s in &log.mask_stats {
            assert_eq!((s.min_hamming, s.max_hamming), (kl, kl));
        }
        assert!(log.final_params.all_finite());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.quantizer = QuantizerSpec::fractional(4);
        cfg.warmup_epochs = 1;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params.values(), b.final_params.values());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let mut cfg = small_cfg(RunScheme::None);
        cfg.ref_lr = 1e18;
        cfg.weight_decay = 1e-2;
        cfg.epochs = 40;
        match run_fedavg(&cfg) {
            Err(SimError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_offending_field() {
        let field_of = |cfg: &ExperimentConfig| cfg.validate().unwrap_err().field;
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.momentum = 0.5;
        cfg.local_steps = 2;
        assert_eq!(field_of(&cfg), "momentum");
        let mut cfg = small_cfg(RunScheme::None);
        cfg.quantizer = QuantizerSpec::scaled_sign();
        assert_eq!(field_of(&cfg), "quantizer");
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.milestones = vec![(10, 0.1), (10, 0.1)];
        assert_eq!(field_of(&cfg), "milestones");
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.phi_global = 0.0;
        assert_eq!(field_of(&cfg), "phi_global");
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.phi_global = 0.9;
        cfg.phi_local = 0.9;
        assert_eq!(field_of(&cfg), "phi_local");
        // The exploration ratio must stay below the exploitation ratio even
        // when the combined budget would fit.
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.phi_global = 0.2;
        cfg.phi_local = 0.3;
        assert_eq!(field_of(&cfg), "phi_local");
        let mut cfg = small_cfg(RunScheme::Tcs);
        cfg.fairness = Fairness::Lf;
        cfg.phi_min_global = 0.6;
        assert_eq!(field_of(&cfg), "phi_min_global");
        let mut cfg = small_cfg(RunScheme::TopK);
        cfg.fairness = Fairness::Plf;
        assert_eq!(field_of(&cfg), "fairness");
        let mut cfg = small_cfg(RunScheme::None);
        cfg.n_clients = 0;
        assert_eq!(field_of(&cfg), "n_clients");
    }

    #[test]
    fn metrics_csv_has_stable_contractual_columns() {
        let cfg = small_cfg(RunScheme::Tcs);
        let log = run_tcs(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&log.records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,epoch,lr,train_loss,test_accuracy,uplink_bits_total,\
             uplink_bits_per_param_per_iter,downlink_support_size,wall_ms"
        );
        assert_eq!(lines.count(), log.records.len());
        // Byte determinism of the artifact.
        let path2 = dir.path().join("metrics2.csv");
        write_metrics_csv(&run_tcs(&cfg).unwrap().records, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
