//! Analytic uplink bit budgets: average bits per parameter per local
//! iteration for each scheme.
//!
//! The default formulas price an explicit position at `log2(1/φ) + 2` bits,
//! the block code's average cost. The `_log2d` variants price it at
//! `log2 d` instead (a plain index), which is what the headline formulas in
//! the literature use; block encoding wins once `d` is large. All use exact
//! (non-integer) logarithms — the measured cost of a real payload uses the
//! integer width `⌈log2 block_size⌉` and converges to the analytic value as
//! `d` grows.

/// Average position-code bits per nonzero at sparsity `φ`.
pub fn position_bits_per_value(phi: f64) -> f64 {
    assert!(phi > 0.0 && phi <= 1.0, "phi must be in (0,1]");
    (1.0 / phi).log2() + 2.0
}

/// TCS uplink budget: `q` value bits for every global and local entry plus
/// position bits for local entries only, amortized over `H` local steps.
pub fn tcs_budget(q: u32, phi_global: f64, phi_local: f64, h: u32) -> f64 {
    assert!(h >= 1, "H must be at least 1");
    let position_term =
        if phi_local > 0.0 { position_bits_per_value(phi_local) * phi_local } else { 0.0 };
    (q as f64 * (phi_local + phi_global) + position_term) / h as f64
}

/// TCS budget with plain `log2 d` position indices.
pub fn tcs_budget_log2d(q: u32, phi_global: f64, phi_local: f64, d: usize, h: u32) -> f64 {
    assert!(h >= 1, "H must be at least 1");
    (q as f64 * (phi_local + phi_global) + (d as f64).log2() * phi_local) / h as f64
}

/// Top-K uplink budget: every entry pays value plus position bits.
pub fn topk_budget(q: u32, phi: f64, h: u32) -> f64 {
    assert!(h >= 1, "H must be at least 1");
    phi * (q as f64 + position_bits_per_value(phi)) / h as f64
}

/// Top-K budget with plain `log2 d` position indices.
pub fn topk_budget_log2d(q: u32, phi: f64, d: usize, h: u32) -> f64 {
    assert!(h >= 1, "H must be at least 1");
    phi * (q as f64 + (d as f64).log2()) / h as f64
}

/// Rand-K uplink budget: positions are free (shared seed), only values pay.
pub fn randk_budget(q: u32, phi: f64, h: u32) -> f64 {
    assert!(h >= 1, "H must be at least 1");
    q as f64 * phi / h as f64
}
