//! MSB-first bit I/O and the block-based sparse position code.

use super::CodecError;

/// Append-only bit buffer. The first bit pushed becomes the most
/// significant bit of the first byte; unfilled trailing bits are zero.
#[derive(Debug, Clone, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continue a bitstream after existing byte-aligned content (e.g. a
    /// payload header).
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let bit_len = bytes.len() * 8;
        Self { bytes, bit_len }
    }

    pub fn push_bit(&mut self, bit: bool) {
        if self.bit_len == self.bytes.len() * 8 {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[self.bit_len / 8] |= 0x80 >> (self.bit_len % 8);
        }
        self.bit_len += 1;
    }

    /// Push the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        assert!(width <= 64, "width {width} exceeds 64");
        assert!(
            width == 64 || value < (1u64 << width),
            "value {value} does not fit in {width} bits"
        );
        for i in (0..width).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    /// Finished buffer, zero-padded to the byte boundary.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Cursor over a byte slice reading bits MSB-first. Running off the end is
/// a [`CodecError`], not a panic: readers consume untrusted data.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Start reading at a bit offset (header bytes already consumed).
    pub fn at_offset(bytes: &'a [u8], bit_offset: usize) -> Self {
        assert!(bit_offset <= bytes.len() * 8, "offset beyond buffer");
        Self { bytes, pos: bit_offset }
    }

    pub fn bit_pos(&self) -> usize {
        self.pos
    }

    pub fn remaining_bits(&self) -> usize {
        self.bytes.len() * 8 - self.pos
    }

    pub fn read_bit(&mut self) -> Result<bool, CodecError> {
        if self.pos >= self.bytes.len() * 8 {
            return Err(CodecError::malformed(self.pos, "unexpected end of stream"));
        }
        let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    /// Read `width` bits MSB-first into the low bits of a u64.
    pub fn read_bits(&mut self, width: u32) -> Result<u64, CodecError> {
        assert!(width <= 64, "width {width} exceeds 64");
        let mut out = 0u64;
        for _ in 0..width {
            out = (out << 1) | self.read_bit()? as u64;
        }
        Ok(out)
    }
}

/// Intra-block offset width `w = ⌈log2 block_size⌉` (0 when the block holds
/// a single slot).
pub fn intra_bits(block_size: usize) -> u32 {
    assert!(block_size >= 1, "block_size must be positive");
    usize::BITS - (block_size - 1).leading_zeros()
}

/// An encoded sparse position list together with the geometry needed to
/// decode it. Total length is exactly `K·(w+1) + num_blocks` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionBitstream {
    bytes: Vec<u8>,
    bit_len: usize,
    d: usize,
    block_size: usize,
}

impl PositionBitstream {
    /// Wrap raw bits (used by tests to feed corrupted streams through the
    /// decoder). `bit_len` must fit in `bytes`.
    pub fn from_parts(bytes: Vec<u8>, bit_len: usize, d: usize, block_size: usize) -> Self {
        assert!(bit_len <= bytes.len() * 8, "bit_len exceeds buffer");
        assert!(block_size >= 1 && d >= 1);
        Self { bytes, bit_len, d, block_size }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.d.div_ceil(self.block_size)
    }

    /// The bits as a 0/1 string, for tests and debugging.
    pub fn bit_string(&self) -> String {
        (0..self.bit_len)
            .map(|i| if (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1 { '1' } else { '0' })
            .collect()
    }
}

/// Encode strictly increasing positions (`< d`) as a block bitstream: per
/// position a `1` flag plus its w-bit intra-block offset, and a `0`
/// terminator after every block.
pub fn encode_positions(positions: &[usize], d: usize, block_size: usize) -> PositionBitstream {
    let mut writer = BitWriter::new();
    write_positions(&mut writer, positions, d, block_size);
    let bit_len = writer.bit_len();
    PositionBitstream { bytes: writer.into_bytes(), bit_len, d, block_size }
}

/// Decode a standalone position bitstream; every bit must be accounted for.
pub fn decode_positions(stream: &PositionBitstream) -> Result<Vec<usize>, CodecError> {
    let mut reader = BitReader::new(&stream.bytes);
    let positions = read_positions(&mut reader, stream.d, stream.block_size, stream.bit_len)?;
    if reader.bit_pos() != stream.bit_len {
        return Err(CodecError::malformed(
            reader.bit_pos(),
            format!("{} trailing bits after final block", stream.bit_len - reader.bit_pos()),
        ));
    }
    Ok(positions)
}

/// Append a position section to an in-progress payload.
pub(crate) fn write_positions(
    writer: &mut BitWriter,
    positions: &[usize],
    d: usize,
    block_size: usize,
) {
    assert!(d >= 1, "d must be positive");
    let w = intra_bits(block_size);
    for pair in positions.windows(2) {
        assert!(pair[0] < pair[1], "positions must be strictly increasing");
    }
    if let Some(&last) = positions.last() {
        assert!(last < d, "position {last} out of range (d={d})");
    }
    let num_blocks = d.div_ceil(block_size);
    let mut next = positions.iter().peekable();
    for block in 0..num_blocks {
        let base = block * block_size;
        let end = (base + block_size).min(d);
        while let Some(&&p) = next.peek() {
            if p >= end {
                break;
            }
            writer.push_bit(true);
            writer.push_bits((p - base) as u64, w);
            next.next();
        }
        writer.push_bit(false);
    }
}

/// Consume one position section from a payload. `limit` bounds how far the
/// section may extend (payloads pass the whole buffer's bit length; the
/// standalone decoder passes the stream's declared length so corruption in
/// padding is caught).
pub(crate) fn read_positions(
    reader: &mut BitReader,
    d: usize,
    block_size: usize,
    limit: usize,
) -> Result<Vec<usize>, CodecError> {
    let w = intra_bits(block_size);
    let num_blocks = d.div_ceil(block_size);
    let mut out = Vec::new();
    for block in 0..num_blocks {
        let base = block * block_size;
        let end = (base + block_size).min(d);
        loop {
            if reader.bit_pos() >= limit {
                return Err(CodecError::malformed(
                    reader.bit_pos(),
                    format!("stream ended inside block {block} ({num_blocks} blocks expected)"),
                ));
            }
            if !reader.read_bit()? {
                break;
            }
            let offset_at = reader.bit_pos();
            if offset_at + w as usize > limit {
                return Err(CodecError::malformed(offset_at, "stream ended inside an offset"));
            }
            let offset = reader.read_bits(w)? as usize;
            let index = base + offset;
            if index >= end {
                return Err(CodecError::malformed(
                    offset_at,
                    format!("offset {offset} lands at {index}, outside block extent {base}..{end}"),
                ));
            }
            if out.last().is_some_and(|&prev| index <= prev) {
                return Err(CodecError::malformed(
                    offset_at,
                    format!("position {index} not strictly increasing"),
                ));
            }
            out.push(index);
        }
    }
    Ok(out)
}
