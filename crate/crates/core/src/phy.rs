//! Line coding and frame synchronisation for on-off keyed LED links.
//!
//! Bits are Manchester coded (1 -> LOW,HIGH; 0 -> HIGH,LOW). Every frame is
//! preceded by a raw, uncoded sync header: 24 alternating preamble symbols
//! starting with HIGH, then an 8-symbol start-of-frame delimiter. The
//! receiver averages the preamble samples to obtain its slicing threshold
//! for the rest of the frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binary light level of one symbol period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symbol {
    High,
    Low,
}

impl Symbol {
    pub fn is_high(self) -> bool {
        self == Symbol::High
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::High => 'H',
            Symbol::Low => 'L',
        }
    }

    pub fn from_char(c: char) -> Option<Symbol> {
        match c {
            'H' | 'h' | '1' => Some(Symbol::High),
            'L' | 'l' | '0' => Some(Symbol::Low),
            _ => None,
        }
    }
}

/// Quantised receiver reading in ADC counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdcSample(pub u16);

impl AdcSample {
    pub fn counts(self) -> u16 {
        self.0
    }
}

pub const PREAMBLE_LEN: usize = 24;
pub const SFD_LEN: usize = 8;
pub const SYNC_HEADER_LEN: usize = PREAMBLE_LEN + SFD_LEN;

use Symbol::{High as H, Low as L};

/// Start-of-frame delimiter. Its repeated symbols can never occur inside the
/// alternating preamble.
pub const SFD: [Symbol; SFD_LEN] = [H, H, L, L, H, L, L, H];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PhyError {
    #[error("invalid Manchester pair at pair index {0}")]
    InvalidPair(usize),
    #[error("symbol stream has odd length {0}")]
    OddLength(usize),
    #[error("expected {expected} preamble samples, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("no preamble and delimiter found in the sample stream")]
    NoSync,
}

/// Result of a successful frame search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncResult {
    /// Index of the first body symbol, just past the delimiter.
    pub payload_symbol_start: usize,
    /// Slicing threshold derived from the preamble, in ADC counts.
    pub threshold: f64,
}

/// Tolerances of the frame search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Minimum number of preamble symbols (out of 24) that must slice to
    /// the expected alternation.
    pub preamble_min_matches: usize,
    /// Maximum delimiter symbol mismatches. Zero means exact match.
    pub sfd_max_errors: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            preamble_min_matches: 22,
            sfd_max_errors: 0,
        }
    }
}

pub fn manchester_encode(bits: &[bool]) -> Vec<Symbol> {
    let mut out = Vec::with_capacity(bits.len() * 2);
    for &bit in bits {
        out.extend_from_slice(&manchester_pair(bit));
    }
    out
}

fn manchester_pair(bit: bool) -> [Symbol; 2] {
    if bit {
        [L, H]
    } else {
        [H, L]
    }
}

/// Manchester-encodes bytes MSB first.
pub fn manchester_encode_bytes(bytes: &[u8]) -> Vec<Symbol> {
    let mut out = Vec::with_capacity(bytes.len() * 16);
    for &byte in bytes {
        for shift in (0..8).rev() {
            out.extend_from_slice(&manchester_pair(byte >> shift & 1 == 1));
        }
    }
    out
}

pub fn manchester_decode(symbols: &[Symbol]) -> Result<Vec<bool>, PhyError> {
    if !symbols.len().is_multiple_of(2) {
        return Err(PhyError::OddLength(symbols.len()));
    }
    symbols
        .chunks_exact(2)
        .enumerate()
        .map(|(i, pair)| match (pair[0], pair[1]) {
            (L, H) => Ok(true),
            (H, L) => Ok(false),
            _ => Err(PhyError::InvalidPair(i)),
        })
        .collect()
}

/// Decodes 16 symbols per byte, MSB first, without failing on invalid
/// pairs. An invalid pair decodes as the bit its second symbol implies and
/// is reported in the returned per-byte flags, so a downstream FEC stage can
/// still repair the byte.
pub fn manchester_decode_bytes_lenient(symbols: &[Symbol]) -> Result<(Vec<u8>, Vec<bool>), PhyError> {
    if !symbols.len().is_multiple_of(16) {
        if !symbols.len().is_multiple_of(2) {
            return Err(PhyError::OddLength(symbols.len()));
        }
        return Err(PhyError::InvalidPair(symbols.len() / 2));
    }
    let mut bytes = Vec::with_capacity(symbols.len() / 16);
    let mut damaged = Vec::with_capacity(symbols.len() / 16);
    for chunk in symbols.chunks_exact(16) {
        let mut byte = 0u8;
        let mut bad = false;
        for pair in chunk.chunks_exact(2) {
            let bit = match (pair[0], pair[1]) {
                (L, H) => 1,
                (H, L) => 0,
                (_, second) => {
                    bad = true;
                    second.is_high() as u8
                }
            };
            byte = byte << 1 | bit;
        }
        bytes.push(byte);
        damaged.push(bad);
    }
    Ok((bytes, damaged))
}

pub fn build_sync_header() -> Vec<Symbol> {
    let mut out = Vec::with_capacity(SYNC_HEADER_LEN);
    out.extend((0..PREAMBLE_LEN).map(|i| if i % 2 == 0 { H } else { L }));
    out.extend_from_slice(&SFD);
    out
}

pub fn compute_threshold(preamble_samples: &[AdcSample]) -> Result<f64, PhyError> {
    if preamble_samples.len() != PREAMBLE_LEN {
        return Err(PhyError::WrongLength {
            expected: PREAMBLE_LEN,
            got: preamble_samples.len(),
        });
    }
    Ok(mean_counts(preamble_samples))
}

fn mean_counts(samples: &[AdcSample]) -> f64 {
    let sum: u64 = samples.iter().map(|s| s.0 as u64).sum();
    sum as f64 / samples.len() as f64
}

/// Ties slice to HIGH.
pub fn slice_sample(sample: AdcSample, threshold: f64) -> Symbol {
    if sample.0 as f64 >= threshold {
        H
    } else {
        L
    }
}

pub fn slice_all(samples: &[AdcSample], threshold: f64) -> Vec<Symbol> {
    samples.iter().map(|&s| slice_sample(s, threshold)).collect()
}

pub fn locate_frame(samples: &[AdcSample]) -> Result<SyncResult, PhyError> {
    locate_frame_with(samples, &SyncConfig::default())
}

/// Scans for the earliest window of 24 samples whose own mean slices them
/// into the expected alternation (within tolerance), immediately followed by
/// the delimiter.
pub fn locate_frame_with(samples: &[AdcSample], cfg: &SyncConfig) -> Result<SyncResult, PhyError> {
    if samples.len() < SYNC_HEADER_LEN {
        return Err(PhyError::NoSync);
    }
    let header = build_sync_header();
    let preamble = &header[..PREAMBLE_LEN];
    let mut window_sum: u64 = samples[..PREAMBLE_LEN].iter().map(|s| s.0 as u64).sum();
    for start in 0..=samples.len() - SYNC_HEADER_LEN {
        if start > 0 {
            window_sum -= samples[start - 1].0 as u64;
            window_sum += samples[start + PREAMBLE_LEN - 1].0 as u64;
        }
        let threshold = window_sum as f64 / PREAMBLE_LEN as f64;
        let window = &samples[start..start + PREAMBLE_LEN];
        let matches = window
            .iter()
            .zip(preamble)
            .filter(|(s, expected)| slice_sample(**s, threshold) == **expected)
            .count();
        if matches < cfg.preamble_min_matches {
            continue;
        }
        let sfd = &samples[start + PREAMBLE_LEN..start + SYNC_HEADER_LEN];
        let sfd_errors = sfd
            .iter()
            .zip(SFD.iter())
            .filter(|(s, expected)| slice_sample(**s, threshold) != **expected)
            .count();
        if sfd_errors <= cfg.sfd_max_errors {
            return Ok(SyncResult {
                payload_symbol_start: start + SYNC_HEADER_LEN,
                threshold,
            });
        }
    }
    Err(PhyError::NoSync)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn render(symbols: &[Symbol], high: u16, low: u16) -> Vec<AdcSample> {
        symbols
            .iter()
            .map(|s| AdcSample(if s.is_high() { high } else { low }))
            .collect()
    }

    #[test]
    fn manchester_maps_bits_to_pairs() {
        assert_eq!(manchester_encode(&[true]), vec![L, H]);
        assert_eq!(manchester_encode(&[false]), vec![H, L]);
        assert!(manchester_encode(&[]).is_empty());
        assert_eq!(manchester_decode(&[L, H, H, L]).unwrap(), vec![true, false]);
    }

    #[test]
    fn manchester_decode_rejects_bad_input() {
        assert_eq!(manchester_decode(&[H, H]), Err(PhyError::InvalidPair(0)));
        assert_eq!(manchester_decode(&[L, H, L, L]), Err(PhyError::InvalidPair(1)));
        assert_eq!(manchester_decode(&[L, H, L]), Err(PhyError::OddLength(3)));
    }

    #[test]
    fn byte_coding_is_msb_first() {
        let symbols = manchester_encode_bytes(&[0x80]);
        assert_eq!(&symbols[..4], &[L, H, H, L]);
        let (bytes, damaged) = manchester_decode_bytes_lenient(&symbols).unwrap();
        assert_eq!(bytes, vec![0x80]);
        assert_eq!(damaged, vec![false]);
    }

    #[test]
    fn lenient_decode_flags_damaged_bytes() {
        let mut symbols = manchester_encode_bytes(&[0xA5, 0x3C]);
        symbols[16] = L;
        symbols[17] = L;
        let (_, damaged) = manchester_decode_bytes_lenient(&symbols).unwrap();
        assert_eq!(damaged, vec![false, true]);
    }

    #[test]
    fn sync_header_layout() {
        let header = build_sync_header();
        assert_eq!(header.len(), 32);
        assert_eq!(&header[..4], &[H, L, H, L]);
        assert_eq!(header[..24].iter().filter(|s| s.is_high()).count(), 12);
        assert_eq!(&header[24..], &[H, H, L, L, H, L, L, H]);
    }

    #[test]
    fn threshold_is_the_preamble_mean() {
        let alternating: Vec<_> = (0..24).map(|i| AdcSample(if i % 2 == 0 { 800 } else { 100 })).collect();
        assert_eq!(compute_threshold(&alternating).unwrap(), 450.0);
        assert_eq!(compute_threshold(&[AdcSample(77); 24]).unwrap(), 77.0);
        assert_eq!(
            compute_threshold(&[AdcSample(1); 23]),
            Err(PhyError::WrongLength { expected: 24, got: 23 })
        );
    }

    #[test]
    fn slicing_ties_go_high() {
        assert_eq!(slice_sample(AdcSample(500), 450.0), H);
        assert_eq!(slice_sample(AdcSample(100), 450.0), L);
        assert_eq!(slice_sample(AdcSample(450), 450.0), H);
    }

    #[test]
    fn locate_clean_frame() {
        let mut symbols = build_sync_header();
        symbols.extend(manchester_encode_bytes(&[0x12, 0x34]));
        let samples = render(&symbols, 800, 100);
        let sync = locate_frame(&samples).unwrap();
        assert_eq!(sync.payload_symbol_start, 32);
        assert_eq!(sync.threshold, 450.0);

        let shifted = render(&symbols, 900, 200);
        let sync = locate_frame(&shifted).unwrap();
        assert_eq!(sync.payload_symbol_start, 32);
        assert_eq!(sync.threshold, 550.0);
    }

    #[test]
    fn locate_after_leading_silence() {
        let mut symbols = vec![L; 13];
        symbols.extend(build_sync_header());
        symbols.extend(manchester_encode_bytes(&[0xFF]));
        let sync = locate_frame(&render(&symbols, 700, 50)).unwrap();
        assert_eq!(sync.payload_symbol_start, 13 + 32);
    }

    #[test]
    fn locate_fails_without_preamble() {
        assert_eq!(locate_frame(&[AdcSample(100); 200]), Err(PhyError::NoSync));
        assert_eq!(locate_frame(&[AdcSample(100); 10]), Err(PhyError::NoSync));
    }

    #[test]
    fn locate_tolerates_two_preamble_errors_but_not_sfd_errors() {
        let mut symbols = build_sync_header();
        symbols.extend(manchester_encode_bytes(&[0x00; 4]));
        let mut samples = render(&symbols, 800, 100);
        samples[3] = AdcSample(800);
        samples[9] = AdcSample(800);
        assert_eq!(locate_frame(&samples).unwrap().payload_symbol_start, 32);

        let mut samples = render(&symbols, 800, 100);
        samples[26] = AdcSample(800);
        assert_eq!(locate_frame(&samples), Err(PhyError::NoSync));
    }

    proptest! {
        #[test]
        fn manchester_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..256)) {
            let symbols = manchester_encode(&bits);
            prop_assert_eq!(symbols.len(), 2 * bits.len());
            prop_assert_eq!(manchester_decode(&symbols).unwrap(), bits);
        }

        #[test]
        fn sync_is_invariant_to_gain_and_offset(
            payload in proptest::collection::vec(any::<u8>(), 1..24),
            gain in 0.05f64..4.0,
            offset in 0u16..200,
        ) {
            let mut symbols = build_sync_header();
            symbols.extend(manchester_encode_bytes(&payload));
            let reference = render(&symbols, 200, 0);
            let transformed: Vec<_> = reference
                .iter()
                .map(|s| AdcSample((s.0 as f64 * gain).round() as u16 + offset))
                .collect();
            let a = locate_frame(&reference).unwrap();
            let b = locate_frame(&transformed).unwrap();
            prop_assert_eq!(a.payload_symbol_start, b.payload_symbol_start);
            prop_assert!(b.payload_symbol_start >= SYNC_HEADER_LEN);
            prop_assert_eq!(
                slice_all(&reference[a.payload_symbol_start..], a.threshold),
                slice_all(&transformed[b.payload_symbol_start..], b.threshold)
            );
        }
    }
}
