//! MAC frame layout and the frame <-> symbol pipeline.
//!
//! On the wire a frame is
//!
//! ```text
//! | preamble (24 sym) | SFD (8 sym) | Manchester( RS( Length | Dst | Src | Protocol | Payload | CRC ) ) |
//! ```
//!
//! All 16-bit fields and the CRC are big-endian. `Length` counts payload
//! bytes only; a zero length marks an ACK. The serialized frame (header,
//! payload and CRC, `D = length + 10` bytes) is cut greedily into 200-byte
//! blocks, and each block is extended with 16 Reed-Solomon parity bytes.

pub mod crc;
pub mod rs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{self, PhyError, Symbol, SYNC_HEADER_LEN};
pub use crc::crc16;
pub use rs::{rs_decode_block, rs_encode_block, RsError};

pub const HEADER_LEN: usize = 8;
pub const CRC_LEN: usize = 2;
/// Header plus CRC.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + CRC_LEN;
pub const DEFAULT_MAX_PAYLOAD: usize = 1500;
pub const BROADCAST: u16 = 0xFFFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {len} bytes exceeds the maximum of {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("declared length does not match the received byte count")]
    BadLength,
    #[error("CRC mismatch")]
    BadCrc,
    #[error("uncorrectable Reed-Solomon block")]
    Uncorrectable,
    #[error(transparent)]
    Phy(#[from] PhyError),
}

impl From<RsError> for FrameError {
    fn from(e: RsError) -> Self {
        match e {
            RsError::Uncorrectable => FrameError::Uncorrectable,
            // Block sizes are derived internally; a size error means the
            // received length was inconsistent.
            _ => FrameError::BadLength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacFrame {
    pub dst: u16,
    pub src: u16,
    pub protocol: u16,
    pub payload: Vec<u8>,
}

impl MacFrame {
    pub fn data(dst: u16, src: u16, protocol: u16, payload: Vec<u8>) -> Self {
        MacFrame {
            dst,
            src,
            protocol,
            payload,
        }
    }

    pub fn ack(dst: u16, src: u16, protocol: u16) -> Self {
        MacFrame {
            dst,
            src,
            protocol,
            payload: Vec::new(),
        }
    }

    /// Value of the Length field.
    pub fn length(&self) -> usize {
        self.payload.len()
    }

    pub fn is_ack(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn coded_len(&self) -> usize {
        coded_len_for_payload(self.length())
    }
}

/// Bytes after RS coding for a serialized frame of `serialized_len` bytes.
pub fn coded_len(serialized_len: usize) -> usize {
    serialized_len + rs::PARITY_LEN * serialized_len.div_ceil(rs::MAX_DATA_LEN)
}

pub fn coded_len_for_payload(payload_len: usize) -> usize {
    coded_len(payload_len + FRAME_OVERHEAD)
}

/// Total symbols on the air, sync header included.
pub fn frame_symbol_count(payload_len: usize) -> usize {
    SYNC_HEADER_LEN + 16 * coded_len_for_payload(payload_len)
}

/// Inverts [`coded_len`]. `None` when no serialized length maps to `coded`.
pub fn serialized_len_from_coded(coded: usize) -> Option<usize> {
    let full = rs::MAX_DATA_LEN + rs::PARITY_LEN;
    let blocks = coded.div_ceil(full);
    let serialized = coded.checked_sub(blocks * rs::PARITY_LEN)?;
    (serialized > 0 && coded_len(serialized) == coded).then_some(serialized)
}

pub fn frame_serialize(frame: &MacFrame, max_payload: usize) -> Result<Vec<u8>, FrameError> {
    let len = frame.payload.len();
    if len > max_payload || len > u16::MAX as usize {
        return Err(FrameError::PayloadTooLarge {
            len,
            max: max_payload,
        });
    }
    let mut out = Vec::with_capacity(len + FRAME_OVERHEAD);
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.extend_from_slice(&frame.dst.to_be_bytes());
    out.extend_from_slice(&frame.src.to_be_bytes());
    out.extend_from_slice(&frame.protocol.to_be_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn frame_parse(bytes: &[u8]) -> Result<MacFrame, FrameError> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(FrameError::BadLength);
    }
    let field = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
    let length = field(0) as usize;
    if length != bytes.len() - FRAME_OVERHEAD {
        return Err(FrameError::BadLength);
    }
    let body_end = bytes.len() - CRC_LEN;
    if crc16(&bytes[..body_end]) != field(body_end) {
        return Err(FrameError::BadCrc);
    }
    Ok(MacFrame {
        dst: field(2),
        src: field(4),
        protocol: field(6),
        payload: bytes[HEADER_LEN..body_end].to_vec(),
    })
}

/// RS-codes a serialized frame block by block.
pub fn rs_encode_frame(serialized: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(coded_len(serialized.len()));
    for block in serialized.chunks(rs::MAX_DATA_LEN) {
        out.extend(rs_encode_block(block).expect("chunk size within block limit"));
    }
    out
}

/// Inverse of [`rs_encode_frame`]. Returns the serialized bytes and the
/// total number of corrected bytes.
pub fn rs_decode_frame(coded: &[u8]) -> Result<(Vec<u8>, usize), FrameError> {
    let serialized_len = serialized_len_from_coded(coded.len()).ok_or(FrameError::BadLength)?;
    let mut out = Vec::with_capacity(serialized_len);
    let mut corrected = 0;
    for block in coded.chunks(rs::MAX_DATA_LEN + rs::PARITY_LEN) {
        let (data, fixed) = rs_decode_block(block)?;
        out.extend(data);
        corrected += fixed;
    }
    Ok((out, corrected))
}

/// A frame ready for the LED: raw sync header plus Manchester-coded body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedFrame {
    pub sync_header: Vec<Symbol>,
    pub body_symbols: Vec<Symbol>,
}

impl CodedFrame {
    pub fn len(&self) -> usize {
        self.sync_header.len() + self.body_symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coded_byte_count(&self) -> usize {
        self.body_symbols.len() / 16
    }

    pub fn to_symbols(&self) -> Vec<Symbol> {
        let mut all = Vec::with_capacity(self.len());
        all.extend_from_slice(&self.sync_header);
        all.extend_from_slice(&self.body_symbols);
        all
    }
}

pub fn frame_to_symbols(frame: &MacFrame, max_payload: usize) -> Result<CodedFrame, FrameError> {
    let serialized = frame_serialize(frame, max_payload)?;
    let coded = rs_encode_frame(&serialized);
    Ok(CodedFrame {
        sync_header: phy::build_sync_header(),
        body_symbols: phy::manchester_encode_bytes(&coded),
    })
}

/// Decoded frame plus the number of bytes the RS stage repaired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedFrame {
    pub frame: MacFrame,
    pub corrected: usize,
    pub coded_bytes: usize,
}

/// Recovers a frame from sliced body symbols (everything after the SFD).
///
/// The coded byte count follows from the symbol count, which fixes the block
/// layout; the Length field recovered from the first block must agree with
/// it. Invalid Manchester pairs are handed to the RS stage as byte errors
/// rather than rejected outright.
pub fn symbols_to_frame(body_symbols: &[Symbol]) -> Result<DecodedFrame, FrameError> {
    let (coded, _damaged) = phy::manchester_decode_bytes_lenient(body_symbols)?;
    let (serialized, corrected) = rs_decode_frame(&coded)?;
    let frame = frame_parse(&serialized)?;
    Ok(DecodedFrame {
        frame,
        corrected,
        coded_bytes: coded.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::{manchester_decode, Symbol::*};

    fn ack() -> MacFrame {
        MacFrame::ack(0x0001, 0x0002, 0x0000)
    }

    #[test]
    fn ack_serializes_to_ten_bytes() {
        let bytes = frame_serialize(&ack(), DEFAULT_MAX_PAYLOAD).unwrap();
        assert_eq!(&bytes[..8], &[0, 0, 0, 1, 0, 2, 0, 0]);
        assert_eq!(bytes.len(), 10);
        assert_eq!(u16::from_be_bytes([bytes[8], bytes[9]]), crc16(&bytes[..8]));
        assert_eq!(frame_parse(&bytes).unwrap(), ack());
    }

    #[test]
    fn one_byte_payload_is_eleven_bytes() {
        let f = MacFrame::data(1, 2, 3, vec![0xAB]);
        assert_eq!(frame_serialize(&f, DEFAULT_MAX_PAYLOAD).unwrap().len(), 11);
    }

    #[test]
    fn parse_errors() {
        let mut bytes = frame_serialize(&ack(), DEFAULT_MAX_PAYLOAD).unwrap();
        *bytes.last_mut().unwrap() ^= 0xFF;
        assert_eq!(frame_parse(&bytes), Err(FrameError::BadCrc));
        assert_eq!(frame_parse(&[0, 0, 0, 0, 0]), Err(FrameError::BadLength));
        let mut long = frame_serialize(&MacFrame::data(1, 2, 3, vec![9; 4]), 1500).unwrap();
        long[1] = 5;
        assert_eq!(frame_parse(&long), Err(FrameError::BadLength));
    }

    #[test]
    fn oversize_payload_is_rejected() {
        let f = MacFrame::data(1, 2, 3, vec![0; 1501]);
        assert!(matches!(
            frame_serialize(&f, 1500),
            Err(FrameError::PayloadTooLarge { len: 1501, max: 1500 })
        ));
        assert!(frame_to_symbols(&f, 1500).is_err());
    }

    #[test]
    fn symbol_counts_for_reference_lengths() {
        assert_eq!(frame_symbol_count(1000), 17728);
        assert_eq!(frame_symbol_count(0), 448);
        assert_eq!(frame_symbol_count(50), 1248);
        assert_eq!(coded_len_for_payload(1000), 1106);
        assert_eq!(coded_len_for_payload(0), 26);
        let coded = frame_to_symbols(&MacFrame::data(1, 2, 3, vec![7; 1000]), 1500).unwrap();
        assert_eq!(coded.len(), 17728);
        assert_eq!(coded.coded_byte_count(), 1106);
    }

    #[test]
    fn serialized_length_inversion() {
        for d in 1..=3000 {
            assert_eq!(serialized_len_from_coded(coded_len(d)), Some(d), "d={d}");
        }
        assert_eq!(serialized_len_from_coded(16), None);
        assert_eq!(serialized_len_from_coded(216 + 5), None);
    }

    #[test]
    fn pipeline_round_trip() {
        for len in [0usize, 1, 50, 199, 200, 201, 1000, 1500] {
            let f = MacFrame::data(9, 5, 0x0011, (0..len).map(|i| (i * 7) as u8).collect());
            let coded = frame_to_symbols(&f, 1500).unwrap();
            let decoded = symbols_to_frame(&coded.body_symbols).unwrap();
            assert_eq!(decoded.frame, f, "len={len}");
            assert_eq!(decoded.corrected, 0);
        }
    }

    #[test]
    fn pipeline_repairs_corrupted_pairs_in_one_block() {
        let f = MacFrame::data(9, 5, 0x0011, (0..300).map(|i| i as u8).collect());
        let mut body = frame_to_symbols(&f, 1500).unwrap().body_symbols;
        let mut invalid = body.clone();
        // Eight inverted symbol pairs spread over eight bytes of block 0.
        for byte in [0usize, 3, 17, 40, 99, 150, 199, 210] {
            let at = byte * 16 + 4;
            body.swap(at, at + 1);
            invalid[at] = Low;
            invalid[at + 1] = Low;
        }
        let decoded = symbols_to_frame(&body).unwrap();
        assert_eq!(decoded.frame, f);
        assert_eq!(decoded.corrected, 8);
        // Invalid pairs decode to a guess; whatever it gets wrong RS repairs.
        let decoded = symbols_to_frame(&invalid).unwrap();
        assert_eq!(decoded.frame, f);
        assert!(decoded.corrected <= 8);
    }

    #[test]
    fn all_low_body_fails() {
        assert!(symbols_to_frame(&vec![Low; 16 * 26]).is_err());
        assert!(manchester_decode(&[Low, Low]).is_err());
    }
}
