//! Mask construction and sparsification strategies.
//!
//! Implements the magnitude selector `S_top`, top-K compression with error
//! feedback, shared-seed rand-K, the TCS global/local mask split, and the
//! layer-fair variants (floors per layer). All compressors thread an
//! explicit [`ErrorState`] — the un-sent residual carried into the next
//! round — and satisfy the conservation law
//! `sent + new_residual = update + old_residual` bit-identically.

use std::sync::Arc;

use crate::tensor::{substream, LayerLayout, Mask, ParamVector};

/// Sparsification scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    TopK,
    RandK,
    Tcs,
}

/// Layer-fairness mode: `Plf` applies per-layer floors to the global mask
/// only (fairness enforced at the parameter server side); `Lf` applies them
/// to both the global and local masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fairness {
    None,
    Plf,
    Lf,
}

/// Sparsifier parameters. Ratios are converted to counts with
/// [`round_half_up`]; `K_global` is clamped to at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorConfig {
    pub scheme: Scheme,
    pub phi_global: f64,
    pub phi_local: f64,
    pub fairness: Fairness,
    pub phi_min_global: f64,
    pub phi_min_local: f64,
}

impl CompressorConfig {
    /// Plain TCS configuration without fairness floors.
    pub fn tcs(phi_global: f64, phi_local: f64) -> Self {
        Self {
            scheme: Scheme::Tcs,
            phi_global,
            phi_local,
            fairness: Fairness::None,
            phi_min_global: 0.0,
            phi_min_local: 0.0,
        }
    }

    /// Global mask size `K_global = round(φ_global · d)`, at least 1.
    pub fn k_global(&self, d: usize) -> usize {
        round_half_up(self.phi_global * d as f64).max(1)
    }

    /// Local mask size `K_local = round(φ_local · d)`; may be 0.
    pub fn k_local(&self, d: usize) -> usize {
        round_half_up(self.phi_local * d as f64)
    }

    /// Per-layer floors for the global mask (`Plf` and `Lf` modes).
    pub fn global_floors(&self, layout: &LayerLayout) -> Vec<usize> {
        match self.fairness {
            Fairness::None => vec![0; layout.num_layers()],
            Fairness::Plf | Fairness::Lf => ratio_floors(layout, self.phi_min_global),
        }
    }

    /// Per-layer floors for the local mask (`Lf` mode only).
    pub fn local_floors(&self, layout: &LayerLayout) -> Vec<usize> {
        match self.fairness {
            Fairness::None | Fairness::Plf => vec![0; layout.num_layers()],
            Fairness::Lf => ratio_floors(layout, self.phi_min_local),
        }
    }
}

fn ratio_floors(layout: &LayerLayout, phi_min: f64) -> Vec<usize> {
    layout
        .layer_sizes()
        .iter()
        .map(|&d_l| round_half_up(phi_min * d_l as f64))
        .collect()
}

/// Round-half-up for non-negative counts derived from ratios.
pub fn round_half_up(x: f64) -> usize {
    assert!(x >= 0.0 && x.is_finite(), "count must be non-negative, got {x}");
    // f64::round rounds half away from zero, which is half-up for x >= 0.
    x.round() as usize
}

/// Per-client error-feedback memory: the accumulated residual of everything
/// not yet transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState {
    residual: ParamVector,
}

impl ErrorState {
    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        Self { residual: ParamVector::zeros(layout) }
    }

    pub fn new(residual: ParamVector) -> Self {
        Self { residual }
    }

    pub fn residual(&self) -> &ParamVector {
        &self.residual
    }
}

/// A masked update split into the implicit-position global section and the
/// explicit-position local section.
///
/// The split mirrors what goes on the wire: global positions are never
/// transmitted (the receiver holds the same global mask), local positions
/// are encoded as a block bitstream. Top-K baselines put everything in the
/// local section; rand-K puts everything in the global section (the mask is
/// reproducible from the shared seed).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    round: u32,
    global_mask: Mask,
    global_values: Vec<f64>,
    local_mask: Mask,
    local_values: Vec<f64>,
}

impl SparseUpdate {
    /// Assemble an update from disjoint mask/value sections. Values are in
    /// ascending index order of their mask. Panics on layout mismatch,
    /// overlapping masks, length mismatch, or non-finite values.
    pub fn new(
        round: u32,
        global_mask: Mask,
        global_values: Vec<f64>,
        local_mask: Mask,
        local_values: Vec<f64>,
    ) -> Self {
        assert!(
            global_mask.layout() == local_mask.layout(),
            "mask layouts differ in SparseUpdate"
        );
        assert!(global_mask.is_disjoint(&local_mask), "global and local masks overlap");
        assert_eq!(global_mask.popcount(), global_values.len(), "global section length");
        assert_eq!(local_mask.popcount(), local_values.len(), "local section length");
        let finite = |vs: &[f64]| vs.iter().all(|v| v.is_finite());
        assert!(finite(&global_values) && finite(&local_values), "non-finite update value");
        Self { round, global_mask, global_values, local_mask, local_values }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        self.global_mask.layout()
    }

    pub fn global_mask(&self) -> &Mask {
        &self.global_mask
    }

    pub fn global_values(&self) -> &[f64] {
        &self.global_values
    }

    pub fn local_mask(&self) -> &Mask {
        &self.local_mask
    }

    pub fn local_values(&self) -> &[f64] {
        &self.local_values
    }

    /// Union of the global and local masks — the client's full mask `m`.
    pub fn combined_mask(&self) -> Mask {
        self.global_mask.union(&self.local_mask)
    }

    /// All transmitted values as one block, global section first. This is
    /// the unit the quantizer operates on.
    pub fn all_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.global_values.len() + self.local_values.len());
        out.extend_from_slice(&self.global_values);
        out.extend_from_slice(&self.local_values);
        out
    }

    /// Same masks, new values (e.g. after quantization). The block is split
    /// back into global-then-local order.
    pub fn with_values(&self, all_values: &[f64]) -> SparseUpdate {
        let ng = self.global_values.len();
        assert_eq!(all_values.len(), ng + self.local_values.len(), "value block length");
        SparseUpdate::new(
            self.round,
            self.global_mask.clone(),
            all_values[..ng].to_vec(),
            self.local_mask.clone(),
            all_values[ng..].to_vec(),
        )
    }

    /// Dense form: values placed at their positions, zeros elsewhere.
    pub fn to_dense(&self) -> ParamVector {
        let mut values = vec![0.0; self.layout().total()];
        for (&i, &v) in self.global_mask.indices().iter().zip(&self.global_values) {
            values[i] = v;
        }
        for (&i, &v) in self.local_mask.indices().iter().zip(&self.local_values) {
            values[i] = v;
        }
        ParamVector::new(self.layout().clone(), values)
    }

    pub fn support_size(&self) -> usize {
        self.global_mask.popcount() + self.local_mask.popcount()
    }
}

/// Indices of `v` ranked by magnitude descending, ties broken by lower
/// index. Shared by every selector so tie-breaking is uniform.
fn ranked_indices(values: &[f64], candidates: &[usize]) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    idx.sort_unstable_by(|&a, &b| {
        values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
    });
    idx
}

/// `S_top`: mask of the `k` largest-magnitude entries of `v`. Exactly `k`
/// indices are returned; ties prefer the lower index.
pub fn s_top(v: &ParamVector, k: usize) -> Mask {
    let d = v.d();
    assert!(k <= d, "S_top k={k} exceeds d={d}");
    let all: Vec<usize> = (0..d).collect();
    let ranked = ranked_indices(v.values(), &all);
    Mask::from_unsorted(v.layout().clone(), ranked[..k].to_vec())
}

/// Greedy fair selection: per-layer top-`floor_l` first, then fill the rest
/// of the budget by global magnitude order over the remaining candidates.
/// `candidates` must be sorted ascending. Panics when the floors are
/// infeasible for the candidate set or exceed `k_total`.
fn fair_select(v: &ParamVector, candidates: &[usize], k_total: usize, floors: &[usize]) -> Vec<usize> {
    let layout = v.layout();
    assert_eq!(floors.len(), layout.num_layers(), "one floor per layer");
    assert!(k_total <= candidates.len(), "k_total exceeds candidate count");
    let floor_sum: usize = floors.iter().sum();
    assert!(floor_sum <= k_total, "floors (sum {floor_sum}) exceed k_total {k_total}");

    // Partition the (sorted) candidates by layer.
    let mut per_layer: Vec<Vec<usize>> = vec![Vec::new(); layout.num_layers()];
    for &i in candidates {
        per_layer[layout.layer_of(i)].push(i);
    }

    let mut selected = vec![false; layout.total()];
    for (l, layer_candidates) in per_layer.iter().enumerate() {
        assert!(
            floors[l] <= layer_candidates.len(),
            "floor {} infeasible for layer {l} ({} candidates)",
            floors[l],
            layer_candidates.len()
        );
        for &i in ranked_indices(v.values(), layer_candidates).iter().take(floors[l]) {
            selected[i] = true;
        }
    }

    let leftover: Vec<usize> = candidates.iter().copied().filter(|&i| !selected[i]).collect();
    for &i in ranked_indices(v.values(), &leftover).iter().take(k_total - floor_sum) {
        selected[i] = true;
    }

    (0..layout.total()).filter(|&i| selected[i]).collect()
}

/// Layer-fair `S_top`: exactly `k_total` indices with at least
/// `per_layer_floor[l]` chosen in every layer. With all-zero floors this is
/// exactly [`s_top`].
pub fn lf_mask(v: &ParamVector, k_total: usize, per_layer_floor: &[usize]) -> Mask {
    let d = v.d();
    assert!(k_total <= d, "k_total={k_total} exceeds d={d}");
    for (l, (&fl, &dl)) in per_layer_floor.iter().zip(v.layout().layer_sizes()).enumerate() {
        assert!(fl <= dl, "floor {fl} exceeds layer {l} size {dl}");
    }
    let all: Vec<usize> = (0..d).collect();
    Mask::from_indices(v.layout().clone(), fair_select(v, &all, k_total, per_layer_floor))
}

/// Shared-seed random mask: `k` indices drawn without replacement from the
/// round-keyed stream. Every client derives the identical mask because the
/// client id is not part of the stream key.
pub fn randk_mask(layout: &Arc<LayerLayout>, k: usize, round: u64, root_seed: u64) -> Mask {
    let d = layout.total();
    assert!(k <= d, "rand-K k={k} exceeds d={d}");
    let mut rng = substream(root_seed, "randk", 0, round);
    let picked = rand::seq::index::sample(&mut rng, d, k).into_vec();
    Mask::from_unsorted(layout.clone(), picked)
}

/// The shared TCS global mask: top `k_global` magnitudes of the previous
/// broadcast, optionally with per-layer floors (`Plf`/`Lf`). Identical
/// across clients since it is a pure function of broadcast data.
pub fn tcs_global_mask(
    prev_global_delta: &ParamVector,
    k_global: usize,
    fairness: Fairness,
    phi_min_global: f64,
) -> Mask {
    match fairness {
        Fairness::None => s_top(prev_global_delta, k_global),
        Fairness::Plf | Fairness::Lf => {
            let floors = ratio_floors(prev_global_delta.layout(), phi_min_global);
            lf_mask(prev_global_delta, k_global, &floors)
        }
    }
}

/// Per-client local mask: `k_local` top magnitudes of the buffered update
/// restricted to the complement of the global mask; disjoint from it by
/// construction. In `Lf` mode per-layer floors apply, clamped to the
/// candidates the global mask left available in each layer.
pub fn tcs_local_mask(
    buffered: &ParamVector,
    global_mask: &Mask,
    k_local: usize,
    fairness: Fairness,
    phi_min_local: f64,
) -> Mask {
    let d = buffered.d();
    assert!(buffered.layout() == global_mask.layout(), "layout mismatch");
    assert!(
        k_local <= d - global_mask.popcount(),
        "k_local={k_local} exceeds complement of global mask"
    );
    let candidates = global_mask.complement();
    let mut floors = match fairness {
        Fairness::None | Fairness::Plf => vec![0; buffered.layout().num_layers()],
        Fairness::Lf => ratio_floors(buffered.layout(), phi_min_local),
    };
    // The global mask may have consumed most of a layer; a floor can never
    // demand more than the candidates that remain there.
    let layout = buffered.layout();
    let mut available = vec![0usize; layout.num_layers()];
    for &i in candidates.indices() {
        available[layout.layer_of(i)] += 1;
    }
    for (f, a) in floors.iter_mut().zip(&available) {
        *f = (*f).min(*a);
    }
    Mask::from_indices(
        buffered.layout().clone(),
        fair_select(buffered, candidates.indices(), k_local, &floors),
    )
}

/// Core error-feedback step shared by all compressors: buffer the update
/// with the residual, send the masked part, keep the complement.
fn split_and_send(
    b: &ParamVector,
    global_mask: &Mask,
    local_mask: &Mask,
    round: u32,
) -> (SparseUpdate, ErrorState) {
    let sent = SparseUpdate::new(
        round,
        global_mask.clone(),
        b.gather(global_mask),
        local_mask.clone(),
        b.gather(local_mask),
    );
    let residual = b.apply_mask(&global_mask.union(local_mask).complement());
    (sent, ErrorState::new(residual))
}

/// Top-K with error feedback. All positions are explicit (local section).
pub fn topk_compress(
    update: &ParamVector,
    k: usize,
    err: &ErrorState,
    round: u32,
) -> (SparseUpdate, ErrorState) {
    let b = update.add(err.residual());
    let m = s_top(&b, k);
    split_and_send(&b, &Mask::empty(update.layout().clone()), &m, round)
}

/// Error-feedback compression against externally chosen masks. Used for
/// rand-K (shared-seed mask, implicit positions) and for tests.
pub fn compress_with_masks(
    update: &ParamVector,
    err: &ErrorState,
    global_mask: &Mask,
    local_mask: &Mask,
    round: u32,
) -> (SparseUpdate, ErrorState) {
    let b = update.add(err.residual());
    split_and_send(&b, global_mask, local_mask, round)
}

/// One TCS client compression step (error accumulation included): buffer
/// the update, pick the local mask from the complement of the shared global
/// mask, send both sections, keep the rest as the new residual.
pub fn tcs_compress(
    update: &ParamVector,
    global_mask: &Mask,
    cfg: &CompressorConfig,
    err: &ErrorState,
    round: u32,
) -> (SparseUpdate, ErrorState) {
    let b = update.add(err.residual());
    let k_local = cfg.k_local(update.d());
    let m_local = tcs_local_mask(&b, global_mask, k_local, cfg.fairness, cfg.phi_min_local);
    split_and_send(&b, global_mask, &m_local, round)
}
