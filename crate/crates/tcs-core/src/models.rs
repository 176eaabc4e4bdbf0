//! Desk-scale differentiable models with analytic gradients, synthetic
//! data, IID partitioning, batch sampling, and dataset CSV I/O.
//!
//! Two model kinds: multinomial logistic regression and a one-hidden-layer
//! ReLU MLP with softmax cross-entropy, both with optional L2 weight decay
//! applied to every parameter (weights and biases). Gradients are exact
//! analytic expressions, validated against finite differences in tests.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{substream, LayerLayout, ParamVector};

/// Dataset I/O failure (CSV loading/saving).
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
}

/// A labelled sample matrix: `n × F` features (row-major) and one class id
/// per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, n_features: usize, n_classes: usize) -> Self {
        assert!(n_features >= 1 && n_classes >= 2, "need F >= 1 and C >= 2");
        assert_eq!(features.len(), labels.len() * n_features, "ragged feature matrix");
        assert!(labels.iter().all(|&y| y < n_classes), "label out of range");
        assert!(features.iter().all(|x| x.is_finite()), "non-finite feature");
        Self { features, labels, n_features, n_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copy of the selected rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.n_features);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, n_features: self.n_features, n_classes: self.n_classes }
    }

    /// Split off the first `n` rows; returns `(head, tail)`.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        assert!(n <= self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logreg,
    Mlp,
}

/// Model architecture description; all evaluation is pure given
/// `(spec, params, data)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_classes: usize,
    pub n_features: usize,
    /// Hidden width; meaningful for `Mlp` only.
    pub hidden: usize,
}

impl ModelSpec {
    pub fn logreg(n_classes: usize, n_features: usize) -> Self {
        assert!(n_classes >= 2 && n_features >= 1);
        Self { kind: ModelKind::Logreg, n_classes, n_features, hidden: 0 }
    }

    pub fn mlp(n_classes: usize, n_features: usize, hidden: usize) -> Self {
        assert!(n_classes >= 2 && n_features >= 1 && hidden >= 1);
        Self { kind: ModelKind::Mlp, n_classes, n_features, hidden }
    }

    /// Layer structure of the flat parameter vector: `[W, b]` for logistic
    /// regression, `[W1, b1, W2, b2]` for the MLP. Weight matrices are
    /// row-major with one row per output unit.
    pub fn layout(&self) -> Arc<LayerLayout> {
        let (c, f, h) = (self.n_classes, self.n_features, self.hidden);
        let sizes = match self.kind {
            ModelKind::Logreg => vec![c * f, c],
            ModelKind::Mlp => vec![h * f, h, c * h, c],
        };
        Arc::new(LayerLayout::new(sizes))
    }

    /// Per-layer uniform(−1/√fan_in, 1/√fan_in) initialization from the
    /// seeded stream; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let (f, h) = (self.n_features, self.hidden);
        let fan_ins: Vec<usize> = match self.kind {
            ModelKind::Logreg => vec![f, f],
            ModelKind::Mlp => vec![f, f, h, h],
        };
        let mut rng = substream(seed, "init", 0, 0);
        let mut values = Vec::with_capacity(layout.total());
        for (l, &fan_in) in fan_ins.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in layout.layer_range(l) {
                values.push(rng.gen_range(-bound..bound));
            }
        }
        ParamVector::new(layout, values)
    }

    fn check_batch(&self, params: &ParamVector, ds: &Dataset, idx: &[usize]) {
        assert!(!idx.is_empty(), "batch must be non-empty");
        assert_eq!(params.d(), self.layout().total(), "parameter length mismatch");
        assert_eq!(ds.n_features(), self.n_features, "feature dimension mismatch");
        assert!(ds.n_classes() <= self.n_classes, "dataset has more classes than the model");
        assert!(idx.iter().all(|&i| i < ds.len()), "batch index out of range");
    }

    /// Class scores for one sample; for the MLP also returns the hidden
    /// activations (needed by the backward pass).
    fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c, f, h) = (self.n_classes, self.n_features, self.hidden);
        match self.kind {
            ModelKind::Logreg => {
                let (w, b) = (&params[..c * f], &params[c * f..]);
                let z = (0..c)
                    .map(|ci| {
                        b[ci] + w[ci * f..(ci + 1) * f].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
                    })
                    .collect();
                (z, Vec::new())
            }
            ModelKind::Mlp => {
                let w1 = &params[..h * f];
                let b1 = &params[h * f..h * f + h];
                let w2 = &params[h * f + h..h * f + h + c * h];
                let b2 = &params[h * f + h + c * h..];
                let a: Vec<f64> = (0..h)
                    .map(|j| {
                        let pre = b1[j]
                            + w1[j * f..(j + 1) * f].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                        pre.max(0.0)
                    })
                    .collect();
                let z = (0..c)
                    .map(|ci| {
                        b2[ci] + w2[ci * h..(ci + 1) * h].iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>()
                    })
                    .collect();
                (z, a)
            }
        }
    }

    /// Softmax probabilities and the sample's cross-entropy, computed with
    /// the usual max-shift for stability.
    fn softmax_nll(z: &[f64], y: usize) -> (Vec<f64>, f64) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|zi| (zi - m).exp()).sum();
        let lse = m + sum.ln();
        let p = z.iter().map(|zi| (zi - lse).exp()).collect();
        (p, lse - z[y])
    }

    /// Mean cross-entropy over the batch plus `(λ/2)·‖θ‖²`. Per-sample
    /// losses are sorted before summation, making the result bit-identical
    /// under any sample ordering.
    pub fn loss(&self, params: &ParamVector, ds: &Dataset, idx: &[usize], weight_decay: f64) -> f64 {
        self.check_batch(params, ds, idx);
        let mut per_sample: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let (z, _) = self.forward(params.values(), ds.row(i));
                Self::softmax_nll(&z, ds.label(i)).1
            })
            .collect();
        per_sample.sort_by(f64::total_cmp);
        let mean = per_sample.iter().sum::<f64>() / idx.len() as f64;
        if weight_decay > 0.0 {
            mean + 0.5 * weight_decay * params.norm_sq()
        } else {
            mean
        }
    }

    /// Analytic gradient of [`ModelSpec::loss`], weight-decay term
    /// included: `∇ = (1/n)·Σ ∇ℓ_i + λθ`.
    pub fn gradient(
        &self,
        params: &ParamVector,
        ds: &Dataset,
        idx: &[usize],
        weight_decay: f64,
    ) -> ParamVector {
        self.check_batch(params, ds, idx);
        let (c, f, h) = (self.n_classes, self.n_features, self.hidden);
        let pv = params.values();
        let mut acc = vec![0.0f64; params.d()];
        for &i in idx {
            let x = ds.row(i);
            let (z, a) = self.forward(pv, x);
            let (mut dz, _) = Self::softmax_nll(&z, ds.label(i));
            dz[ds.label(i)] -= 1.0;
            match self.kind {
                ModelKind::Logreg => {
                    for ci in 0..c {
                        for (fi, xi) in x.iter().enumerate() {
                            acc[ci * f + fi] += dz[ci] * xi;
                        }
                        acc[c * f + ci] += dz[ci];
                    }
                }
                ModelKind::Mlp => {
                    let w2 = &pv[h * f + h..h * f + h + c * h];
                    let (w1_at, b1_at, w2_at, b2_at) = (0, h * f, h * f + h, h * f + h + c * h);
                    // Output layer.
                    for ci in 0..c {
                        for (j, aj) in a.iter().enumerate() {
                            acc[w2_at + ci * h + j] += dz[ci] * aj;
                        }
                        acc[b2_at + ci] += dz[ci];
                    }
                    // Backprop through ReLU (gradient 0 at exactly 0).
                    for (j, aj) in a.iter().enumerate() {
                        if *aj > 0.0 {
                            let da: f64 = (0..c).map(|ci| w2[ci * h + j] * dz[ci]).sum();
                            for (fi, xi) in x.iter().enumerate() {
                                acc[w1_at + j * f + fi] += da * xi;
                            }
                            acc[b1_at + j] += da;
                        }
                    }
                }
            }
        }
        let n = idx.len() as f64;
        let values = acc
            .iter()
            .zip(pv)
            .map(|(g, t)| g / n + weight_decay * t)
            .collect();
        // from_raw: a diverging run can push gradients out of f64 range;
        // the simulator reports that as an error rather than panicking here.
        ParamVector::from_raw(params.layout().clone(), values)
    }

    /// Fraction of samples whose argmax score matches the label (ties
    /// resolve to the lowest class index).
    pub fn accuracy(&self, params: &ParamVector, ds: &Dataset) -> f64 {
        assert!(!ds.is_empty(), "accuracy needs at least one sample");
        let correct = (0..ds.len())
            .filter(|&i| {
                let (z, _) = self.forward(params.values(), ds.row(i));
                let mut best = 0;
                for (ci, zi) in z.iter().enumerate() {
                    if *zi > z[best] {
                        best = ci;
                    }
                }
                best == ds.label(i)
            })
            .count();
        correct as f64 / ds.len() as f64
    }
}

/// Gaussian-blob dataset: one standard-normal center per class, samples
/// assigned round-robin (class of sample `i` is `i mod C`, so counts differ
/// by at most one) and scattered `spread` standard deviations around their
/// center. Deterministic in `seed`.
pub fn synth_dataset(
    n_classes: usize,
    n_features: usize,
    n_samples: usize,
    cluster_spread: f64,
    seed: u64,
) -> Dataset {
    assert!(n_classes >= 2 && n_features >= 1 && n_samples >= n_classes);
    assert!(cluster_spread >= 0.0 && cluster_spread.is_finite());
    let mut rng = substream(seed, "data", 0, 0);
    let centers: Vec<f64> =
        (0..n_classes * n_features).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let y = i % n_classes;
        for j in 0..n_features {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(centers[y * n_features + j] + cluster_spread * noise);
        }
        labels.push(y);
    }
    Dataset::new(features, labels, n_features, n_classes)
}

/// Random-permutation IID split into `n_shards` disjoint shards whose sizes
/// differ by at most one; their union is the input (as a multiset).
pub fn partition_iid(ds: &Dataset, n_shards: usize, seed: u64) -> Vec<Dataset> {
    assert!(n_shards >= 1 && n_shards <= ds.len(), "need 1 <= N <= n_samples");
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut substream(seed, "partition", 0, 0));
    let base = ds.len() / n_shards;
    let extra = ds.len() % n_shards;
    let mut shards = Vec::with_capacity(n_shards);
    let mut at = 0;
    for s in 0..n_shards {
        let size = base + usize::from(s < extra);
        shards.push(ds.subset(&perm[at..at + size]));
        at += size;
    }
    shards
}

/// Without-replacement batch sampler: each pass is a fresh shuffle of the
/// shard keyed by `(seed, client, pass)`, sliced into `batch_size` chunks
/// (final chunk may be short). Client-local state keeps batch order
/// independent of scheduling.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    client: u64,
    pass: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, client: u64) -> Self {
        assert!(n >= 1 && batch_size >= 1);
        let mut sampler =
            Self { n, batch_size, seed, client, pass: 0, order: Vec::new(), cursor: 0 };
        sampler.reshuffle();
        sampler
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut substream(self.seed, "batch", self.client, self.pass));
        self.cursor = 0;
    }

    /// Sample indices of the next batch, advancing to a new shuffled pass
    /// when the current one is exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.pass += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// Batches per full pass over a shard of `n` samples.
    pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
        n.div_ceil(batch_size)
    }
}

/// Write `f0,...,f{F-1},label` CSV. Floats use shortest-round-trip decimal
/// text, so loading reproduces them bit-identically.
pub fn save_dataset_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.n_features()).map(|i| format!("f{i}")).collect();
    header.push("label".to_string());
    writer.write_record(&header)?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = ds.row(i).iter().map(|v| format!("{v}")).collect();
        record.push(format!("{}", ds.label(i)));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Load a dataset CSV written by [`save_dataset_csv`] (or compatible).
/// Ragged rows, non-numeric fields, and non-finite values are rejected.
pub fn load_dataset_csv(path: &Path) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[headers.len() - 1] != "label" {
        return Err(DataError::Malformed {
            row: 0,
            message: "header must be f0,...,f{F-1},label".to_string(),
        });
    }
    let n_features = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?; // ragged rows surface here
        let row = row_idx + 1;
        for field in record.iter().take(n_features) {
            let v: f64 = field.parse().map_err(|_| DataError::Malformed {
                row,
                message: format!("bad feature value {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Malformed { row, message: format!("non-finite feature {v}") });
            }
            features.push(v);
        }
        let label_field = &record[n_features];
        let y: usize = label_field.parse().map_err(|_| DataError::Malformed {
            row,
            message: format!("bad label {label_field:?}"),
        })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(DataError::Malformed { row: 0, message: "dataset has no rows".to_string() });
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    Ok(Dataset::new(features, labels, n_features, n_classes.max(2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        for c in [2usize, 4, 7] {
            let spec = ModelSpec::logreg(c, 3);
            let ds = synth_dataset(c, 3, 20, 1.0, 5);
            let params = ParamVector::zeros(spec.layout());
            let loss = spec.loss(&params, &ds, &batch(20), 0.0);
            assert!((loss - (c as f64).ln()).abs() < 1e-12, "C={c}: {loss}");
        }
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let spec = ModelSpec::logreg(2, 1);
        let ds = Dataset::new(vec![1.0], vec![0], 1, 2);
        // W = [30, -30], b = 0: class-0 logit 30, class-1 logit -30.
        let params = ParamVector::new(spec.layout(), vec![30.0, -30.0, 0.0, 0.0]);
        let loss = spec.loss(&params, &ds, &[0], 0.0);
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn loss_matches_naive_reimplementation() {
        let spec = ModelSpec::mlp(3, 4, 5);
        let ds = synth_dataset(3, 4, 30, 1.0, 6);
        let params = spec.init_params(7);
        let idx = batch(30);
        let lambda = 1e-3;
        let got = spec.loss(&params, &ds, &idx, lambda);
        // Straightforward duplicate: unsorted mean of -ln p_y plus the
        // ridge term.
        let mut total = 0.0;
        for &i in &idx {
            let (z, _) = spec.forward(params.values(), ds.row(i));
            let denom: f64 = z.iter().map(|zi| zi.exp()).sum();
            total += -(z[ds.label(i)].exp() / denom).ln();
        }
        let naive = total / idx.len() as f64
            + 0.5 * lambda * params.values().iter().map(|t| t * t).sum::<f64>();
        assert!((got - naive).abs() <= 1e-10 * naive.abs().max(1.0));
    }

    #[test]
    fn loss_is_sample_order_invariant() {
        let spec = ModelSpec::logreg(4, 6);
        let ds = synth_dataset(4, 6, 40, 1.5, 8);
        let params = spec.init_params(9);
        let forward: Vec<usize> = (0..40).collect();
        let backward: Vec<usize> = (0..40).rev().collect();
        let a = spec.loss(&params, &ds, &forward, 1e-4);
        let b = spec.loss(&params, &ds, &backward, 1e-4);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn symmetric_batch_zeroes_bias_gradient() {
        let spec = ModelSpec::logreg(2, 3);
        let x = [0.3, -1.2, 0.7];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let mut features = x.to_vec();
        features.extend_from_slice(&neg);
        let ds = Dataset::new(features, vec![0, 1], 3, 2);
        let params = ParamVector::zeros(spec.layout());
        let g = spec.gradient(&params, &ds, &[0, 1], 0.0);
        // Bias entries sit after the 2×3 weight block.
        assert_eq!(g.values()[6], 0.0);
        assert_eq!(g.values()[7], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for spec in [ModelSpec::logreg(3, 5), ModelSpec::mlp(3, 5, 4)] {
            let ds = synth_dataset(3, 5, 16, 1.0, 11);
            let params = spec.init_params(12);
            let idx = batch(16);
            for lambda in [0.0, 1e-4] {
                let grad = spec.gradient(&params, &ds, &idx, lambda);
                let step = 1e-5;
                for coord in (0..params.d()).step_by(3) {
                    let mut plus = params.values().to_vec();
                    let mut minus = params.values().to_vec();
                    plus[coord] += step;
                    minus[coord] -= step;
                    let lp = spec.loss(
                        &ParamVector::new(params.layout().clone(), plus),
                        &ds,
                        &idx,
                        lambda,
                    );
                    let lm = spec.loss(
                        &ParamVector::new(params.layout().clone(), minus),
                        &ds,
                        &idx,
                        lambda,
                    );
                    let fd = (lp - lm) / (2.0 * step);
                    let g = grad.values()[coord];
                    assert!(
                        (fd - g).abs() <= 1e-4 * g.abs().max(1.0),
                        "{:?} λ={lambda} coord {coord}: fd={fd} analytic={g}",
                        spec.kind
                    );
                }
            }
        }
    }

    #[test]
    fn weight_decay_decomposes() {
        let spec = ModelSpec::mlp(2, 3, 4);
        let ds = synth_dataset(2, 3, 10, 1.0, 13);
        let params = spec.init_params(14);
        let lambda = 1e-4;
        let with = spec.gradient(&params, &ds, &batch(10), lambda);
        let without = spec.gradient(&params, &ds, &batch(10), 0.0);
        for ((w, wo), t) in with.values().iter().zip(without.values()).zip(params.values()) {
            let want = lambda * t;
            // One addition separates the two paths, so agreement is to
            // rounding of that addition, not bit-exact.
            assert!((w - wo - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn synth_dataset_is_deterministic_and_balanced() {
        let a = synth_dataset(4, 3, 103, 0.7, 42);
        let b = synth_dataset(4, 3, 103, 0.7, 42);
        assert_eq!(a, b);
        let c = synth_dataset(4, 3, 103, 0.7, 43);
        assert_ne!(a, c);
        let mut counts = [0usize; 4];
        for i in 0..a.len() {
            counts[a.label(i)] += 1;
        }
        assert_eq!(counts.iter().max().unwrap() - counts.iter().min().unwrap(), 1);
    }

    #[test]
    fn partition_preserves_rows_and_sizes() {
        let ds = synth_dataset(3, 4, 103, 1.0, 15);
        let shards = partition_iid(&ds, 4, 16);
        assert_eq!(shards.iter().map(Dataset::len).sum::<usize>(), 103);
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        assert_eq!(sizes, vec![26, 26, 26, 25]);
        // Multiset equality via sorted row serialization.
        let rows = |d: &Dataset| {
            let mut v: Vec<String> = (0..d.len())
                .map(|i| format!("{:?}|{}", d.row(i), d.label(i)))
                .collect();
            v.sort();
            v
        };
        let mut shard_rows: Vec<String> = Vec::new();
        for s in &shards {
            shard_rows.extend(rows(s));
        }
        shard_rows.sort();
        assert_eq!(shard_rows, rows(&ds));
        assert_eq!(partition_iid(&ds, 4, 16), shards);
    }

    #[test]
    fn single_shard_partition_is_a_permutation() {
        let ds = synth_dataset(2, 2, 10, 1.0, 17);
        let shards = partition_iid(&ds, 1, 18);
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), ds.len());
    }

    #[test]
    fn sampler_covers_each_pass_exactly_once() {
        let mut sampler = BatchSampler::new(10, 3, 21, 2);
        for _pass in 0..3 {
            let mut seen: Vec<usize> = Vec::new();
            for step in 0..4 {
                let b = sampler.next_batch();
                assert_eq!(b.len(), if step < 3 { 3 } else { 1 });
                seen.extend(b);
            }
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        // Deterministic replay.
        let mut replay = BatchSampler::new(10, 3, 21, 2);
        let mut original = BatchSampler::new(10, 3, 21, 2);
        for _ in 0..12 {
            assert_eq!(replay.next_batch(), original.next_batch());
        }
        assert_eq!(BatchSampler::steps_per_epoch(10, 3), 4);
        assert_eq!(BatchSampler::steps_per_epoch(400, 64), 7);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = synth_dataset(3, 5, 40, 1.3, 19);
        save_dataset_csv(&ds, &path).unwrap();
        let back = load_dataset_csv(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn csv_loader_rejects_ragged_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "f0,f1,label\n1.0,2.0,0\n1.0,1\n").unwrap();
        assert!(matches!(load_dataset_csv(&ragged), Err(DataError::Csv(_))));
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,f1,label\n1.0,x,0\n").unwrap();
        assert!(matches!(load_dataset_csv(&bad), Err(DataError::Malformed { row: 1, .. })));
        let header = dir.path().join("header.csv");
        std::fs::write(&header, "a,b,c\n1.0,2.0,0\n").unwrap();
        assert!(matches!(load_dataset_csv(&header), Err(DataError::Malformed { row: 0, .. })));
    }
}
