//! Payload framing: header, level table, value sections, and the local
//! position bitstream.
//!
//! Byte layout (header fields little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | `d` — vector length (u32) |
//! | 4..8  | `round` (u32) |
//! | 8..12 | `K_global` (u32) |
//! | 12..16| `K_local` (u32) |
//! | 16    | quantizer kind: 0 none, 1 scaled-sign, 2 fractional |
//! | 17..19| level count `P` (u16): 0 none, 1 scaled-sign, ≥1 fractional |
//!
//! After the header the payload is a single MSB-first bitstream: `P` level
//! magnitudes as 32-bit floats, then `K_global` encoded values in ascending
//! global-mask order (their positions are never transmitted — the receiver
//! holds the identical global mask), then the local position bitstream over
//! blocks of `⌈1/φ_local⌉` slots, then `K_local` encoded values, then zero
//! padding to the byte boundary. A value encodes as its raw f32 bits (kind
//! none) or as `⌈log2 P⌉` index bits followed by one sign bit (1 =
//! negative).

use crate::compress::SparseUpdate;
use crate::tensor::Mask;

use super::bitstream::{read_positions, write_positions, BitReader, BitWriter};
use super::quant::{quantize_block, QuantizedBlock, QuantizerKind, QuantizerSpec};
use super::CodecError;

pub const HEADER_BYTES: usize = 19;

const KIND_NONE: u8 = 0;
const KIND_SCALED_SIGN: u8 = 1;
const KIND_FRACTIONAL: u8 = 2;

/// Encoded wire bytes of one client update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPayload {
    bytes: Vec<u8>,
}

impl EncodedPayload {
    /// Wrap received bytes; validation happens in [`decode_payload`].
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Transmitted size in bits (padding included — it travels too).
    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

/// Position-code block size for a local ratio: `⌈1/φ_local⌉`, capped to `d`
/// (a whole-vector block) — which is also the degenerate `φ_local = 0`
/// case, where the section is a single terminator bit.
pub fn block_size_for(phi_local: f64, d: usize) -> usize {
    assert!(d >= 1, "d must be positive");
    assert!((0.0..=1.0).contains(&phi_local), "phi_local must be in [0,1]");
    if phi_local <= 0.0 {
        return d;
    }
    ((1.0 / phi_local).ceil() as usize).clamp(1, d)
}

fn push_f32(writer: &mut BitWriter, v: f32) {
    writer.push_bits(v.to_bits() as u64, 32);
}

/// Encode a sparse update. The quantizer runs over the full value block
/// (global section first, then local) so one level table covers both.
pub fn encode_payload(su: &SparseUpdate, spec: &QuantizerSpec, phi_local: f64) -> EncodedPayload {
    let d = su.layout().total();
    assert!(d <= u32::MAX as usize, "d exceeds the wire format's u32 range");
    let k_global = su.global_mask().popcount();
    let k_local = su.local_mask().popcount();

    let mut header = Vec::with_capacity(HEADER_BYTES);
    header.extend_from_slice(&(d as u32).to_le_bytes());
    header.extend_from_slice(&su.round().to_le_bytes());
    header.extend_from_slice(&(k_global as u32).to_le_bytes());
    header.extend_from_slice(&(k_local as u32).to_le_bytes());
    header.push(match spec.kind {
        QuantizerKind::None => KIND_NONE,
        QuantizerKind::ScaledSign => KIND_SCALED_SIGN,
        QuantizerKind::Fractional => KIND_FRACTIONAL,
    });
    header.extend_from_slice(&(spec.level_count() as u16).to_le_bytes());

    let mut writer = BitWriter::from_bytes(header);

    let raw_values = su.all_values();
    let quantized: Option<QuantizedBlock> = match spec.kind {
        QuantizerKind::None => None,
        _ => Some(quantize_block(&raw_values, spec)),
    };
    if let Some(block) = &quantized {
        for level in block.wire_levels() {
            push_f32(&mut writer, level);
        }
    }

    let index_bits = spec.index_bits();
    let write_value = |writer: &mut BitWriter, value_idx: usize| match &quantized {
        None => push_f32(writer, raw_values[value_idx] as f32),
        Some(block) => {
            writer.push_bits(block.level_index[value_idx] as u64, index_bits);
            writer.push_bit(block.negative[value_idx]);
        }
    };

    for i in 0..k_global {
        write_value(&mut writer, i);
    }
    write_positions(&mut writer, su.local_mask().indices(), d, block_size_for(phi_local, d));
    for i in 0..k_local {
        write_value(&mut writer, k_global + i);
    }

    EncodedPayload { bytes: writer.into_bytes() }
}

fn read_le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decode untrusted payload bytes against the receiver's copy of the global
/// mask. Positions round-trip exactly; values are the raw f32s (kind none)
/// or the f32 wire levels with signs applied.
pub fn decode_payload(
    payload: &EncodedPayload,
    m_global: &Mask,
    phi_local: f64,
) -> Result<SparseUpdate, CodecError> {
    let bytes = payload.bytes();
    if bytes.len() < HEADER_BYTES {
        return Err(CodecError::malformed(bytes.len() * 8, "truncated header"));
    }
    let layout = m_global.layout().clone();
    let d = read_le_u32(bytes, 0) as usize;
    let round = read_le_u32(bytes, 4);
    let k_global = read_le_u32(bytes, 8) as usize;
    let k_local = read_le_u32(bytes, 12) as usize;
    let kind_byte = bytes[16];
    let p = u16::from_le_bytes([bytes[17], bytes[18]]);

    if d != layout.total() {
        return Err(CodecError::malformed(
            0,
            format!("header d={d} does not match receiver layout d={}", layout.total()),
        ));
    }
    if k_global != m_global.popcount() {
        return Err(CodecError::malformed(
            64,
            format!(
                "header K_global={k_global} does not match global mask ({})",
                m_global.popcount()
            ),
        ));
    }
    if k_global + k_local > d {
        return Err(CodecError::malformed(96, "K_global + K_local exceeds d"));
    }
    let kind = match kind_byte {
        KIND_NONE => QuantizerKind::None,
        KIND_SCALED_SIGN => QuantizerKind::ScaledSign,
        KIND_FRACTIONAL => QuantizerKind::Fractional,
        other => {
            return Err(CodecError::malformed(128, format!("unknown quantizer kind {other}")));
        }
    };
    let level_count_ok = match kind {
        QuantizerKind::None => p == 0,
        QuantizerKind::ScaledSign => p == 1,
        QuantizerKind::Fractional => p >= 1,
    };
    if !level_count_ok {
        return Err(CodecError::malformed(136, format!("level count {p} invalid for kind {kind_byte}")));
    }
    let spec = QuantizerSpec { kind, p };

    let mut reader = BitReader::at_offset(bytes, HEADER_BYTES * 8);

    let mut levels = Vec::with_capacity(spec.level_count());
    for _ in 0..spec.level_count() {
        let at = reader.bit_pos();
        let level = f32::from_bits(reader.read_bits(32)? as u32);
        if !level.is_finite() || level < 0.0 {
            return Err(CodecError::malformed(at, format!("invalid level magnitude {level}")));
        }
        levels.push(level as f64);
    }

    let index_bits = spec.index_bits();
    let read_value = |reader: &mut BitReader| -> Result<f64, CodecError> {
        match kind {
            QuantizerKind::None => {
                let at = reader.bit_pos();
                let v = f32::from_bits(reader.read_bits(32)? as u32);
                if !v.is_finite() {
                    return Err(CodecError::malformed(at, format!("non-finite value {v}")));
                }
                Ok(v as f64)
            }
            _ => {
                let at = reader.bit_pos();
                let idx = reader.read_bits(index_bits)? as usize;
                if idx >= levels.len() {
                    return Err(CodecError::malformed(at, format!("level index {idx} out of range")));
                }
                let negative = reader.read_bit()?;
                Ok(if negative { -levels[idx] } else { levels[idx] })
            }
        }
    };

    let mut global_values = Vec::with_capacity(k_global);
    for _ in 0..k_global {
        global_values.push(read_value(&mut reader)?);
    }

    let limit = bytes.len() * 8;
    let positions =
        read_positions(&mut reader, d, block_size_for(phi_local, d), limit)?;
    if positions.len() != k_local {
        return Err(CodecError::malformed(
            reader.bit_pos(),
            format!("position count {} does not match header K_local={k_local}", positions.len()),
        ));
    }
    for &i in &positions {
        if m_global.contains(i) {
            return Err(CodecError::malformed(
                reader.bit_pos(),
                format!("local position {i} overlaps the global mask"),
            ));
        }
    }

    let mut local_values = Vec::with_capacity(k_local);
    for _ in 0..k_local {
        local_values.push(read_value(&mut reader)?);
    }

    if reader.remaining_bits() >= 8 {
        return Err(CodecError::malformed(reader.bit_pos(), "trailing bytes after payload"));
    }
    while reader.remaining_bits() > 0 {
        if reader.read_bit()? {
            return Err(CodecError::malformed(reader.bit_pos() - 1, "nonzero padding bit"));
        }
    }

    Ok(SparseUpdate::new(
        round,
        m_global.clone(),
        global_values,
        Mask::from_indices(layout, positions),
        local_values,
    ))
}
