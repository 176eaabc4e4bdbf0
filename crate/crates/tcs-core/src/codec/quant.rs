//! Value quantizers: scaled-sign and fractional (geometric magnitude
//! intervals).
//!
//! Quantization is exact f64 math — the per-value relative error bound
//! `γ = (1−σ)/σ` holds as stated, and an all-equal block quantizes with
//! zero error. The payload layer narrows level magnitudes to `f32` when
//! framing, because that is their wire width ([`QuantizedBlock::wire_levels`]).

use super::bitstream::intra_bits;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    /// Raw 32-bit float per value.
    None,
    /// One shared magnitude (the block's mean absolute value) plus a sign
    /// bit per value.
    ScaledSign,
    /// P geometric magnitude intervals; each value sends its interval index
    /// and sign, the level table sends the per-interval means.
    Fractional,
}

/// Quantizer selection plus its interval count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    pub p: u16,
}

impl QuantizerSpec {
    pub fn none() -> Self {
        Self { kind: QuantizerKind::None, p: 0 }
    }

    pub fn scaled_sign() -> Self {
        Self { kind: QuantizerKind::ScaledSign, p: 1 }
    }

    pub fn fractional(p: u16) -> Self {
        assert!(p >= 1, "fractional quantizer needs P >= 1");
        Self { kind: QuantizerKind::Fractional, p }
    }

    /// Wire bits per transmitted value, `q`: 32 raw, 1 for scaled-sign,
    /// `⌈log2 P⌉ + 1` for fractional.
    pub fn bits_per_value(&self) -> u32 {
        match self.kind {
            QuantizerKind::None => 32,
            QuantizerKind::ScaledSign => 1,
            QuantizerKind::Fractional => self.index_bits() + 1,
        }
    }

    /// Width of the per-value interval index (0 for P=1).
    pub fn index_bits(&self) -> u32 {
        match self.kind {
            QuantizerKind::Fractional => intra_bits(self.p as usize),
            _ => 0,
        }
    }

    /// Number of f32 levels carried in the payload's level table.
    pub fn level_count(&self) -> usize {
        match self.kind {
            QuantizerKind::None => 0,
            QuantizerKind::ScaledSign => 1,
            QuantizerKind::Fractional => self.p as usize,
        }
    }
}

fn sign_of(x: f64) -> f64 {
    // sign(0) is +1 by decision (a transmitted zero keeps a positive sign bit).
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Scaled-sign quantization: every value becomes the block's mean absolute
/// value with the original sign.
pub fn scaled_sign_quantize(u: &[f64]) -> Vec<f64> {
    let mean = scaled_sign_mean(u);
    u.iter().map(|&x| mean * sign_of(x)).collect()
}

fn scaled_sign_mean(u: &[f64]) -> f64 {
    assert!(u.iter().all(|x| x.is_finite()), "scaled-sign needs finite values");
    if u.is_empty() {
        return 0.0;
    }
    u.iter().map(|x| x.abs()).sum::<f64>() / u.len() as f64
}

/// A quantized value block: unsigned level magnitudes, one level index and
/// one sign flag per value.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub levels: Vec<f64>,
    pub level_index: Vec<usize>,
    pub negative: Vec<bool>,
}

impl QuantizedBlock {
    /// Reconstruct the quantized values (exact f64 levels).
    pub fn dequantize(&self) -> Vec<f64> {
        self.level_index
            .iter()
            .zip(&self.negative)
            .map(|(&p, &neg)| {
                let mag = self.levels[p];
                if neg {
                    -mag
                } else {
                    mag
                }
            })
            .collect()
    }

    /// Levels narrowed to their 32-bit wire representation.
    pub fn wire_levels(&self) -> Vec<f32> {
        self.levels.iter().map(|&l| l as f32).collect()
    }
}

/// Fractional quantization of a value block into P geometric intervals.
///
/// With `u_max` and `u_min` the largest and smallest *nonzero* magnitudes
/// and `σ = (u_min/u_max)^{1/P}`, interval `I_p` covers magnitudes in
/// `(σ^p·u_max, σ^{p−1}·u_max]`; a magnitude exactly on a boundary lands in
/// the smaller-magnitude interval, and `u_min` itself belongs to `I_P`. The
/// level of an interval is the mean of the nonzero magnitudes assigned to
/// it (geometric midpoint when empty — such a level is never referenced by
/// any value). Every nonzero value satisfies `|Q_f(u_i) − u_i| ≤ γ·|u_i|`
/// with `γ = (1−σ)/σ`. A block with a single distinct magnitude is
/// reproduced exactly (σ = 1, γ = 0).
///
/// Exact zeros carry no magnitude information the wire could encode: they
/// land in `I_P` with a positive sign and reconstruct as its level (they are
/// excluded from the level means so the error bound for genuine values is
/// unaffected). An all-zero or empty block reconstructs exactly.
pub fn fractional_quantize(u: &[f64], p: u16) -> QuantizedBlock {
    assert!(p >= 1, "fractional quantizer needs P >= 1");
    assert!(u.iter().all(|x| x.is_finite()), "fractional quantization needs finite values");
    let p_count = p as usize;
    let negative: Vec<bool> = u.iter().map(|&x| x < 0.0).collect();
    let nonzero = u.iter().map(|x| x.abs()).filter(|&m| m > 0.0);
    let u_max = nonzero.clone().fold(0.0, f64::max);
    let u_min = nonzero.fold(f64::INFINITY, f64::min);
    if u_max == 0.0 {
        // No nonzero magnitude at all (possibly an empty block): zero levels
        // reproduce every value exactly.
        return QuantizedBlock {
            levels: vec![0.0; p_count],
            level_index: vec![p_count - 1; u.len()],
            negative,
        };
    }
    if u_min == u_max {
        // σ = 1: every interval collapses onto the single magnitude. Using
        // that magnitude directly (instead of averaging k copies of it)
        // keeps the degenerate case bit-exact.
        return QuantizedBlock {
            levels: vec![u_min; p_count],
            level_index: vec![p_count - 1; u.len()],
            negative,
        };
    }
    let sigma = (u_min / u_max).powf(1.0 / p as f64);
    // boundaries[k] = σ^k · u_max; I_p = (boundaries[p], boundaries[p-1]].
    let boundaries: Vec<f64> = (0..=p_count).map(|k| sigma.powi(k as i32) * u_max).collect();

    let mut level_index = Vec::with_capacity(u.len());
    let mut sums = vec![0.0f64; p_count];
    let mut counts = vec![0usize; p_count];
    for &x in u {
        let mag = x.abs();
        // Smallest p whose lower boundary the magnitude strictly exceeds;
        // anything at or below the last interior boundary (u_min and exact
        // zeros included) falls into I_P.
        let mut interval = p_count;
        for (k, &b) in boundaries.iter().enumerate().take(p_count).skip(1) {
            if mag > b {
                interval = k;
                break;
            }
        }
        let idx = interval - 1;
        level_index.push(idx);
        if mag > 0.0 {
            sums[idx] += mag;
            counts[idx] += 1;
        }
    }

    let levels: Vec<f64> = (0..p_count)
        .map(|idx| {
            if counts[idx] > 0 {
                sums[idx] / counts[idx] as f64
            } else {
                (boundaries[idx] * boundaries[idx + 1]).sqrt()
            }
        })
        .collect();

    QuantizedBlock { levels, level_index, negative }
}

/// Quantize a value block under `spec`. Panics for `QuantizerKind::None`,
/// which has no block form (raw values go on the wire individually).
pub fn quantize_block(u: &[f64], spec: &QuantizerSpec) -> QuantizedBlock {
    match spec.kind {
        QuantizerKind::None => panic!("kind=none has no quantized block form"),
        QuantizerKind::ScaledSign => QuantizedBlock {
            levels: vec![scaled_sign_mean(u)],
            level_index: vec![0; u.len()],
            negative: u.iter().map(|&x| x < 0.0).collect(),
        },
        QuantizerKind::Fractional => fractional_quantize(u, spec.p),
    }
}

/// The transmitted form of a value block: identity for `none`, quantized
/// values otherwise.
pub fn apply_quantizer(u: &[f64], spec: &QuantizerSpec) -> Vec<f64> {
    match spec.kind {
        QuantizerKind::None => u.to_vec(),
        _ => quantize_block(u, spec).dequantize(),
    }
}
