//! Golden-byte pinning of the payload wire format.
//!
//! The two `.bin` files under `tests/golden/` were produced by an
//! independent generator that implements the documented wire layout
//! directly (header fields, MSB-first bitstream, block position code,
//! f32/level-index value encodings). These tests pin `encode_payload` to
//! those exact bytes and check that decoding them reproduces the expected
//! update, so any framing change shows up as a byte diff — not just as a
//! self-consistent round-trip.

use std::sync::Arc;

use tcs_core::codec::{decode_payload, encode_payload, EncodedPayload, QuantizerSpec};
use tcs_core::compress::SparseUpdate;
use tcs_core::tensor::{LayerLayout, Mask};

const GOLDEN_NONE: &[u8] = include_bytes!("golden/golden_none.bin");
const GOLDEN_FRAC: &[u8] = include_bytes!("golden/golden_frac.bin");

fn layout12() -> Arc<LayerLayout> {
    Arc::new(LayerLayout::single(12))
}

#[test]
fn raw_payload_matches_golden_bytes() {
    let lo = layout12();
    let su = SparseUpdate::new(
        7,
        Mask::empty(lo.clone()),
        vec![],
        Mask::from_indices(lo.clone(), vec![0, 2, 9]),
        vec![1.5, -2.0, 3.25],
    );
    let encoded = encode_payload(&su, &QuantizerSpec::none(), 0.25);
    assert_eq!(encoded.bytes(), GOLDEN_NONE);
    // The position stream for {0, 2, 9} with block size 4 is the
    // twelve-bit word 100110001010; it leads the bitstream, so the first
    // byte after the 19-byte header is 0b1001_1000.
    assert_eq!(encoded.bytes()[19], 0x98);

    let decoded = decode_payload(
        &EncodedPayload::from_bytes(GOLDEN_NONE.to_vec()),
        &Mask::empty(lo),
        0.25,
    )
    .unwrap();
    assert_eq!(decoded.round(), 7);
    assert_eq!(decoded.local_mask().indices(), &[0, 2, 9]);
    // 1.5, -2.0, 3.25 are all exactly representable in f32, so the f64 ->
    // f32 wire narrowing is lossless here.
    assert_eq!(decoded.local_values(), &[1.5, -2.0, 3.25]);
    assert!(decoded.global_values().is_empty());
}

#[test]
fn fractional_payload_matches_golden_bytes() {
    let lo = layout12();
    let su = SparseUpdate::new(
        3,
        Mask::from_indices(lo.clone(), vec![4, 11]),
        vec![8.0, -4.0],
        Mask::from_indices(lo.clone(), vec![0, 2, 9]),
        vec![2.0, -1.0, 1.5],
    );
    let encoded = encode_payload(&su, &QuantizerSpec::fractional(2), 0.25);
    assert_eq!(encoded.bytes(), GOLDEN_FRAC);

    // The concatenated magnitude block [8, 4, 2, 1, 1.5] quantizes to two
    // intervals with means 6.0 and 1.5 (both f32-exact), so decoding the
    // golden bytes yields signed level values.
    let m_global = Mask::from_indices(lo, vec![4, 11]);
    let decoded =
        decode_payload(&EncodedPayload::from_bytes(GOLDEN_FRAC.to_vec()), &m_global, 0.25)
            .unwrap();
    assert_eq!(decoded.round(), 3);
    assert_eq!(decoded.global_mask().indices(), &[4, 11]);
    assert_eq!(decoded.global_values(), &[6.0, -6.0]);
    assert_eq!(decoded.local_mask().indices(), &[0, 2, 9]);
    assert_eq!(decoded.local_values(), &[1.5, -1.5, 1.5]);
}

#[test]
fn golden_bytes_survive_reencoding_after_decode() {
    // decode -> encode is stable for quantized payloads: the decoded
    // values are exact signed copies of the f32 levels, so re-quantizing
    // them reproduces the same level table and indices.
    let lo = layout12();
    let m_global = Mask::from_indices(lo, vec![4, 11]);
    let decoded =
        decode_payload(&EncodedPayload::from_bytes(GOLDEN_FRAC.to_vec()), &m_global, 0.25)
            .unwrap();
    let reencoded = encode_payload(&decoded, &QuantizerSpec::fractional(2), 0.25);
    // The decoded block [6, -6, 1.5, -1.5, 1.5] re-quantizes to the same
    // two levels, so the bytes are reproduced exactly.
    assert_eq!(reencoded.bytes(), GOLDEN_FRAC);
    let redecoded = decode_payload(&reencoded, &m_global, 0.25).unwrap();
    assert_eq!(redecoded.global_values(), decoded.global_values());
    assert_eq!(redecoded.local_values(), decoded.local_values());
}
