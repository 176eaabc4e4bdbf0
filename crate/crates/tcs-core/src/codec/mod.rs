//! Bit-exact wire encoding for sparse updates.
//!
//! Four pieces:
//!
//! * [`bitstream`](self) — MSB-first bit I/O and the block position code:
//!   each nonzero costs a flag bit plus a `⌈log2 block_size⌉`-bit intra-block
//!   offset, each block costs one terminator bit;
//! * quantizers — scaled-sign (mean magnitude × sign) and fractional
//!   (geometric magnitude intervals with per-interval mean levels);
//! * payload framing — a little-endian 19-byte header followed by the level
//!   table, the global value section (positions implicit: the receiver holds
//!   the same global mask), the local position bitstream, and the local
//!   value section, zero-padded to a byte boundary;
//! * bit-budget accounting — analytic bits/parameter/iteration formulas for
//!   the supported schemes.
//!
//! Encoding panics on contract violations (malformed caller data); decoding
//! treats its input as untrusted and returns [`CodecError`] instead.

mod bitstream;
mod budget;
mod payload;
mod quant;

pub use bitstream::{
    decode_positions, encode_positions, intra_bits, BitReader, BitWriter, PositionBitstream,
};
pub use budget::{
    position_bits_per_value, randk_budget, tcs_budget, tcs_budget_log2d, topk_budget,
    topk_budget_log2d,
};
pub use payload::{
    block_size_for, decode_payload, encode_payload, EncodedPayload, HEADER_BYTES,
};
pub use quant::{
    apply_quantizer, fractional_quantize, quantize_block, scaled_sign_quantize, QuantizedBlock,
    QuantizerKind, QuantizerSpec,
};

/// Decoding failure on untrusted payload bytes. Contract violations in
/// encoder input panic instead; this error is reserved for wire data.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("malformed payload at bit offset {bit_offset}: {reason}")]
    Malformed { bit_offset: usize, reason: String },
}

impl CodecError {
    pub(crate) fn malformed(bit_offset: usize, reason: impl Into<String>) -> Self {
        CodecError::Malformed { bit_offset, reason: reason.into() }
    }
}
