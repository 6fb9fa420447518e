//! Fixed-width packing of code grids.
//!
//! Layout: an 18-byte little-endian header followed by `F·k` indices of
//! `log2 V` bits each, frame-major, most significant bit first, with the last
//! byte zero-padded.
//!
//! ```
//! use jhcodec::bitstream::{pack, unpack, BitstreamHeader};
//! use jhcodec::{CodeGrid, Style};
//!
//! let grid = CodeGrid::new(vec![1, 1023, 0, 512], 2, 2, 50).unwrap();
//! let header = BitstreamHeader::for_grid(&grid, Style::Dac, 8, 1024, 0);
//! let bytes = pack(&grid, &header).unwrap();
//! assert_eq!(bytes.len(), 18 + 5);
//! let (h, back) = unpack(&bytes).unwrap();
//! assert_eq!(h, header);
//! assert_eq!(back, grid);
//! ```

use thiserror::Error;

use crate::codec::CodeGrid;
use crate::config::Style;

pub const MAGIC: [u8; 4] = *b"JHCB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown style code {0}")]
    Style(u8),
    #[error("stream truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{extra} trailing bytes after payload")]
    Trailing { extra: usize },
    #[error("k = {k} exceeds K = {max}")]
    KExceedsMax { k: u8, max: u8 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("codebook size {0} is not a power of two")]
    VocabNotPowerOfTwo(u32),
    #[error("index {index} does not fit in {bits} bits")]
    IndexOverflow { index: u32, bits: u32 },
    #[error("header {field} = {value} disagrees with grid")]
    HeaderMismatch { field: &'static str, value: u64 },
    #[error("{field} = {value} does not fit the header")]
    FieldRange { field: &'static str, value: u64 },
    #[error("padding bits are not zero")]
    NonZeroPadding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub style: Style,
    /// Quantizer levels of the model (K).
    pub num_quantizers: u8,
    /// Levels present in the payload (k).
    pub k: u8,
    pub codebook_size: u16,
    pub frame_rate: u16,
    /// Zero samples appended to complete the last frame.
    pub pad_samples: u16,
    pub frame_count: u32,
}

impl BitstreamHeader {
    /// Header describing `grid`; panics only if `grid` already violates the
    /// header field widths, which [`pack`] reports as an error instead.
    pub fn for_grid(grid: &CodeGrid, style: Style, num_quantizers: usize, codebook_size: usize, pad: usize) -> Self {
        Self {
            version: VERSION,
            style,
            num_quantizers: num_quantizers.min(255) as u8,
            k: grid.k().min(255) as u8,
            codebook_size: codebook_size.min(u16::MAX as usize) as u16,
            frame_rate: grid.frame_rate().min(u16::MAX as u32) as u16,
            pad_samples: pad.min(u16::MAX as usize) as u16,
            frame_count: grid.frames().min(u32::MAX as usize) as u32,
        }
    }

    pub fn bits_per_index(&self) -> u32 {
        (self.codebook_size as u32).trailing_zeros()
    }

    /// `⌈F·k·log2 V / 8⌉`.
    pub fn payload_len(&self) -> usize {
        let bits = self.frame_count as u64 * self.k as u64 * self.bits_per_index() as u64;
        bits.div_ceil(8) as usize
    }

    /// Nominal bitrate `k · log2 V · frame_rate`.
    pub fn bitrate(&self) -> u32 {
        self.k as u32 * self.bits_per_index() * self.frame_rate as u32
    }

    fn validate(&self) -> Result<(), BitstreamError> {
        if self.version != VERSION {
            return Err(BitstreamError::Version(self.version));
        }
        let v = self.codebook_size as u32;
        // V = 1 would carry zero bits per index and is rejected with the rest.
        if v < 2 || !v.is_power_of_two() {
            return Err(BitstreamError::VocabNotPowerOfTwo(v));
        }
        if self.k == 0 {
            return Err(BitstreamError::ZeroK);
        }
        if self.k > self.num_quantizers {
            return Err(BitstreamError::KExceedsMax {
                k: self.k,
                max: self.num_quantizers,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5] = self.style.code();
        b[6] = self.num_quantizers;
        b[7] = self.k;
        b[8..10].copy_from_slice(&self.codebook_size.to_le_bytes());
        b[10..12].copy_from_slice(&self.frame_rate.to_le_bytes());
        b[12..14].copy_from_slice(&self.pad_samples.to_le_bytes());
        b[14..18].copy_from_slice(&self.frame_count.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, BitstreamError> {
        if b.len() < HEADER_LEN {
            return Err(BitstreamError::Truncated {
                needed: HEADER_LEN,
                have: b.len(),
            });
        }
        let magic: [u8; 4] = b[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(BitstreamError::BadMagic(magic));
        }
        let h = Self {
            version: b[4],
            style: Style::from_code(b[5]).ok_or(BitstreamError::Style(b[5]))?,
            num_quantizers: b[6],
            k: b[7],
            codebook_size: u16::from_le_bytes([b[8], b[9]]),
            frame_rate: u16::from_le_bytes([b[10], b[11]]),
            pad_samples: u16::from_le_bytes([b[12], b[13]]),
            frame_count: u32::from_le_bytes([b[14], b[15], b[16], b[17]]),
        };
        h.validate()?;
        Ok(h)
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn put(&mut self, value: u32, bits: u32) {
        self.acc = (self.acc << bits) | value as u64;
        self.n += bits;
        while self.n >= 8 {
            self.n -= 8;
            self.out.push((self.acc >> self.n) as u8);
        }
        self.acc &= (1u64 << self.n) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.out.push((self.acc << (8 - self.n)) as u8);
        }
        self.out
    }
}

/// Serializes `grid` under `header`.
pub fn pack(grid: &CodeGrid, header: &BitstreamHeader) -> Result<Vec<u8>, BitstreamError> {
    header.validate()?;
    if header.k as usize != grid.k() {
        return Err(BitstreamError::HeaderMismatch {
            field: "k",
            value: header.k as u64,
        });
    }
    if header.frame_count as usize != grid.frames() {
        return Err(BitstreamError::HeaderMismatch {
            field: "frame_count",
            value: header.frame_count as u64,
        });
    }
    if header.frame_rate as u32 != grid.frame_rate() {
        return Err(BitstreamError::HeaderMismatch {
            field: "frame_rate",
            value: header.frame_rate as u64,
        });
    }
    let bits = header.bits_per_index();
    let mut w = BitWriter {
        out: Vec::with_capacity(HEADER_LEN + header.payload_len()),
        acc: 0,
        n: 0,
    };
    w.out.extend_from_slice(&header.to_bytes());
    for &idx in grid.indices() {
        if idx >> bits != 0 {
            return Err(BitstreamError::IndexOverflow { index: idx, bits });
        }
        w.put(idx, bits);
    }
    Ok(w.finish())
}

/// Parses a stream produced by [`pack`].
pub fn unpack(bytes: &[u8]) -> Result<(BitstreamHeader, CodeGrid), BitstreamError> {
    let h = BitstreamHeader::from_bytes(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let need = h.payload_len();
    if payload.len() < need {
        return Err(BitstreamError::Truncated {
            needed: HEADER_LEN + need,
            have: bytes.len(),
        });
    }
    if payload.len() > need {
        return Err(BitstreamError::Trailing {
            extra: payload.len() - need,
        });
    }
    let bits = h.bits_per_index();
    let count = h.frame_count as usize * h.k as usize;
    let mut indices = Vec::with_capacity(count);
    let (mut acc, mut n, mut pos) = (0u64, 0u32, 0usize);
    for _ in 0..count {
        while n < bits {
            acc = (acc << 8) | payload[pos] as u64;
            pos += 1;
            n += 8;
        }
        n -= bits;
        indices.push(((acc >> n) & ((1u64 << bits) - 1)) as u32);
        acc &= (1u64 << n) - 1;
    }
    if acc != 0 {
        return Err(BitstreamError::NonZeroPadding);
    }
    let grid = CodeGrid::new(indices, h.frame_count as usize, h.k as usize, h.frame_rate as u32)
        .map_err(|_| BitstreamError::HeaderMismatch {
            field: "frame_count",
            value: h.frame_count as u64,
        })?;
    Ok((h, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(frames: usize, k: usize, v: u32) -> CodeGrid {
        let idx = (0..frames * k).map(|i| (i as u32).wrapping_mul(2654435761) % v).collect();
        CodeGrid::new(idx, frames, k, 50).unwrap()
    }

    #[test]
    fn one_second_at_eight_levels_is_500_bytes() {
        let g = grid(50, 8, 1024);
        let h = BitstreamHeader::for_grid(&g, Style::Dac, 8, 1024, 0);
        let bytes = pack(&g, &h).unwrap();
        assert_eq!(bytes.len() - HEADER_LEN, 500);
        assert_eq!(h.bitrate(), 4000);
    }

    #[test]
    fn empty_grid_is_header_only() {
        let g = CodeGrid::new(vec![], 0, 3, 50).unwrap();
        let h = BitstreamHeader::for_grid(&g, Style::Dac, 8, 1024, 0);
        let bytes = pack(&g, &h).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(unpack(&bytes).unwrap().1, g);
    }

    #[test]
    fn msb_first_bit_order() {
        // V=4: two bits per index, [1, 2, 3] -> 01 10 11 00
        let g = CodeGrid::new(vec![1, 2, 3], 3, 1, 50).unwrap();
        let h = BitstreamHeader::for_grid(&g, Style::Dac, 1, 4, 0);
        let bytes = pack(&g, &h).unwrap();
        assert_eq!(&bytes[HEADER_LEN..], &[0b0110_1100]);
    }

    #[test]
    fn corruption_yields_typed_errors() {
        let g = grid(10, 4, 1024);
        let h = BitstreamHeader::for_grid(&g, Style::Mimi, 8, 1024, 17);
        let bytes = pack(&g, &h).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(unpack(&bad), Err(BitstreamError::BadMagic(_))));

        assert!(matches!(unpack(&bytes[..bytes.len() - 1]), Err(BitstreamError::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[7] = 9;
        assert!(matches!(unpack(&bad), Err(BitstreamError::KExceedsMax { .. })));

        let mut bad = bytes.clone();
        bad[8..10].copy_from_slice(&1000u16.to_le_bytes());
        assert!(matches!(unpack(&bad), Err(BitstreamError::VocabNotPowerOfTwo(1000))));
    }

    #[test]
    fn oversized_index_is_rejected() {
        let g = CodeGrid::new(vec![4], 1, 1, 50).unwrap();
        let h = BitstreamHeader::for_grid(&g, Style::Dac, 1, 4, 0);
        assert!(matches!(pack(&g, &h), Err(BitstreamError::IndexOverflow { index: 4, bits: 2 })));
    }
}
