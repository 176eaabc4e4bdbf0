//! Flat parameter vectors with layer structure, sparsity masks, and
//! deterministic RNG substreams.
//!
//! Everything downstream (compressors, codec, simulator) works on these
//! types. Values are `f64` throughout; the wire format is the only lossy
//! representation. All types are immutable after construction and safe to
//! share across threads.

use std::ops::Range;
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Layer structure of a flat parameter vector: per-layer sizes plus
/// cumulative offsets for index-to-layer lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>, // offsets[l] = start of layer l; offsets[L] = d
}

impl LayerLayout {
    /// Build a layout from per-layer parameter counts.
    ///
    /// Panics if `sizes` is empty or any layer is empty.
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(!sizes.is_empty(), "layout needs at least one layer");
        assert!(sizes.iter().all(|&s| s >= 1), "every layer must be non-empty");
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Self { sizes, offsets }
    }

    /// Single-layer layout of `d` parameters.
    pub fn single(d: usize) -> Self {
        Self::new(vec![d])
    }

    /// Total parameter count `d`.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Index range `[start, end)` of layer `l`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    /// Layer owning flat index `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        assert!(i < self.total(), "index {i} out of range (d={})", self.total());
        // offsets is sorted; find the last offset <= i.
        match self.offsets.binary_search(&i) {
            Ok(l) => l.min(self.num_layers() - 1),
            Err(ins) => ins - 1,
        }
    }
}

/// Flat real-valued parameter (or update) vector tied to a [`LayerLayout`].
///
/// Entries are finite by construction; NaN/Inf at an API boundary is a
/// contract violation, not a silent pass-through.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParamVector {
    /// Wrap `values` under `layout`. Panics on length mismatch or
    /// non-finite entries.
    pub fn new(layout: Arc<LayerLayout>, values: Vec<f64>) -> Self {
        Self::try_new(layout, values).expect("invalid ParamVector")
    }

    /// Fallible constructor used where non-finite values are a runtime
    /// condition (e.g. divergence detection) rather than a bug.
    pub fn try_new(layout: Arc<LayerLayout>, values: Vec<f64>) -> Result<Self, String> {
        if values.len() != layout.total() {
            return Err(format!(
                "value length {} does not match layout d={}",
                values.len(),
                layout.total()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite entry {} at index {i}", values[i]));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        let d = layout.total();
        Self { values: vec![0.0; d], layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn d(&self) -> usize {
        self.layout.total()
    }

    fn assert_same_layout(&self, other: &ParamVector) {
        assert!(
            self.layout == other.layout,
            "layout mismatch: {:?} vs {:?}",
            self.layout.layer_sizes(),
            other.layout.layer_sizes()
        );
    }

    /// Construct without the finiteness check. Arithmetic results may
    /// legitimately overflow when training diverges; callers on those paths
    /// (the simulator) detect non-finite values per round and report them as
    /// an error instead of a panic.
    pub(crate) fn from_raw(layout: Arc<LayerLayout>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), layout.total(), "value length mismatch");
        Self { values, layout }
    }

    /// True when every entry is finite (divergence probe).
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &ParamVector) -> ParamVector {
        self.assert_same_layout(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        ParamVector::from_raw(self.layout.clone(), values)
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.assert_same_layout(other);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector::from_raw(self.layout.clone(), values)
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        let values = self.values.iter().map(|v| v * factor).collect();
        ParamVector::from_raw(self.layout.clone(), values)
    }

    /// Squared L2 norm, summed in index order.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Number of exactly-zero entries' complement, i.e. the support size.
    pub fn support_size(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Keep entries selected by `m`, zero the rest. Selected entries are
    /// copied bit-for-bit, never recomputed.
    pub fn apply_mask(&self, m: &Mask) -> ParamVector {
        assert!(self.layout == *m.layout(), "layout mismatch in apply_mask");
        let mut values = vec![0.0; self.values.len()];
        for &i in m.indices() {
            values[i] = self.values[i];
        }
        ParamVector { values, layout: self.layout.clone() }
    }

    /// Values at the mask's indices, in ascending index order.
    pub fn gather(&self, m: &Mask) -> Vec<f64> {
        assert!(self.layout == *m.layout(), "layout mismatch in gather");
        m.indices().iter().map(|&i| self.values[i]).collect()
    }
}

/// Binary selection vector stored as a sorted set of selected indices.
///
/// Sparse storage: iteration and memory cost scale with the selected
/// count, not with `d`. `to_dense` is provided for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    indices: Vec<usize>,
    layout: Arc<LayerLayout>,
}

impl Mask {
    /// Build from strictly increasing indices, all `< d`. Panics otherwise.
    pub fn from_indices(layout: Arc<LayerLayout>, indices: Vec<usize>) -> Self {
        let d = layout.total();
        for w in indices.windows(2) {
            assert!(w[0] < w[1], "mask indices must be strictly increasing");
        }
        if let Some(&last) = indices.last() {
            assert!(last < d, "mask index {last} out of range (d={d})");
        }
        Self { indices, layout }
    }

    /// Build from indices in any order; sorts and rejects duplicates.
    pub fn from_unsorted(layout: Arc<LayerLayout>, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self::from_indices(layout, indices)
    }

    pub fn empty(layout: Arc<LayerLayout>) -> Self {
        Self { indices: Vec::new(), layout }
    }

    pub fn full(layout: Arc<LayerLayout>) -> Self {
        let d = layout.total();
        Self { indices: (0..d).collect(), layout }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    /// Number of selected indices, `||m||_1`.
    pub fn popcount(&self) -> usize {
        self.indices.len()
    }

    /// Sparsification ratio `popcount / d`.
    pub fn ratio(&self) -> f64 {
        self.popcount() as f64 / self.layout.total() as f64
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    fn assert_same_layout(&self, other: &Mask) {
        assert!(self.layout == other.layout, "layout mismatch between masks");
    }

    /// Indices selected by either mask.
    pub fn union(&self, other: &Mask) -> Mask {
        self.assert_same_layout(other);
        let mut out = Vec::with_capacity(self.indices.len() + other.indices.len());
        let (mut a, mut b) = (0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => {
                    out.push(self.indices[a]);
                    a += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.indices[b]);
                    b += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(self.indices[a]);
                    a += 1;
                    b += 1;
                }
            }
        }
        out.extend_from_slice(&self.indices[a..]);
        out.extend_from_slice(&other.indices[b..]);
        Mask { indices: out, layout: self.layout.clone() }
    }

    /// Indices in `[0, d)` not selected by `self`.
    pub fn complement(&self) -> Mask {
        let d = self.layout.total();
        let mut out = Vec::with_capacity(d - self.indices.len());
        let mut sel = self.indices.iter().peekable();
        for i in 0..d {
            if sel.peek() == Some(&&i) {
                sel.next();
            } else {
                out.push(i);
            }
        }
        Mask { indices: out, layout: self.layout.clone() }
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.assert_same_layout(other);
        let (mut a, mut b) = (0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    /// Hamming distance `||a - b||_1`, i.e. the symmetric difference size.
    pub fn hamming(&self, other: &Mask) -> usize {
        self.assert_same_layout(other);
        let (mut a, mut b) = (0, 0);
        let mut dist = 0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => {
                    dist += 1;
                    a += 1;
                }
                std::cmp::Ordering::Greater => {
                    dist += 1;
                    b += 1;
                }
                std::cmp::Ordering::Equal => {
                    a += 1;
                    b += 1;
                }
            }
        }
        dist + (self.indices.len() - a) + (other.indices.len() - b)
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut bits = vec![false; self.layout.total()];
        for &i in &self.indices {
            bits[i] = true;
        }
        bits
    }
}

/// Deterministic RNG stream; see [`substream`].
pub type RngStream = ChaCha8Rng;

/// Derive an independent, reproducible RNG stream from a root seed and a
/// `(purpose, client, round)` key.
///
/// The same inputs always yield the same sequence; any change to any input
/// yields an unrelated stream. The derivation hashes the key, so streams
/// stay independent of the order they are created in.
pub fn substream(root_seed: u64, purpose: &str, client: u64, round: u64) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([purpose.len() as u8]);
    hasher.update(purpose.as_bytes());
    hasher.update(client.to_le_bytes());
    hasher.update(round.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
