//! Shortened systematic Reed-Solomon code over GF(2^8).
//!
//! - Field polynomial x^8 + x^4 + x^3 + x^2 + 1 (0x11D), primitive element 2.
//! - Generator roots alpha^0 .. alpha^15 (first consecutive root 0).
//! - Mother code (255, 239), shortened by implicit leading zero symbols. A
//!   full block is (216, 200) and corrects up to 8 byte errors.

use thiserror::Error;

pub const PARITY_LEN: usize = 16;
pub const MAX_DATA_LEN: usize = 200;
pub const MAX_CORRECTABLE: usize = PARITY_LEN / 2;
const FIELD_POLY: u16 = 0x11D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RsError {
    #[error("data block of {0} bytes exceeds {MAX_DATA_LEN}")]
    BlockTooLarge(usize),
    #[error("data block is empty")]
    EmptyBlock,
    #[error("coded block of {0} bytes is outside 17..=216")]
    BadBlockLength(usize),
    #[error("block has more errors than the code can correct")]
    Uncorrectable,
}

struct Tables {
    exp: [u8; 512],
    log: [u8; 256],
}

const fn build_tables() -> Tables {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= FIELD_POLY;
        }
        i += 1;
    }
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    Tables { exp, log }
}

static GF: Tables = build_tables();

const fn build_generator() -> [u8; PARITY_LEN + 1] {
    // Coefficients highest degree first; g(x) = prod (x - alpha^i), i in 0..16.
    let mut g = [0u8; PARITY_LEN + 1];
    g[0] = 1;
    let mut len = 1;
    let mut root = 0;
    while root < PARITY_LEN {
        let alpha = GF.exp[root];
        let mut next = [0u8; PARITY_LEN + 1];
        let mut j = 0;
        while j < len {
            next[j] ^= g[j];
            next[j + 1] ^= mul_const(g[j], alpha);
            j += 1;
        }
        g = next;
        len += 1;
        root += 1;
    }
    g
}

const fn mul_const(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        return 0;
    }
    GF.exp[GF.log[a as usize] as usize + GF.log[b as usize] as usize]
}

static GENERATOR: [u8; PARITY_LEN + 1] = build_generator();

#[inline]
fn mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        0
    } else {
        GF.exp[GF.log[a as usize] as usize + GF.log[b as usize] as usize]
    }
}

#[inline]
fn div(a: u8, b: u8) -> u8 {
    debug_assert!(b != 0);
    if a == 0 {
        0
    } else {
        GF.exp[GF.log[a as usize] as usize + 255 - GF.log[b as usize] as usize]
    }
}

#[inline]
fn pow_alpha(e: usize) -> u8 {
    GF.exp[e % 255]
}

fn inv(a: u8) -> u8 {
    div(1, a)
}

/// Appends 16 parity bytes to `data`.
pub fn rs_encode_block(data: &[u8]) -> Result<Vec<u8>, RsError> {
    if data.is_empty() {
        return Err(RsError::EmptyBlock);
    }
    if data.len() > MAX_DATA_LEN {
        return Err(RsError::BlockTooLarge(data.len()));
    }
    // Remainder of data(x) * x^16 divided by g(x), LFSR form.
    let mut parity = [0u8; PARITY_LEN];
    for &byte in data {
        let feedback = byte ^ parity[0];
        parity.copy_within(1.., 0);
        parity[PARITY_LEN - 1] = 0;
        if feedback != 0 {
            for (p, &g) in parity.iter_mut().zip(&GENERATOR[1..]) {
                *p ^= mul(g, feedback);
            }
        }
    }
    let mut out = Vec::with_capacity(data.len() + PARITY_LEN);
    out.extend_from_slice(data);
    out.extend_from_slice(&parity);
    Ok(out)
}

fn syndromes(coded: &[u8]) -> [u8; PARITY_LEN] {
    let mut s = [0u8; PARITY_LEN];
    for (i, slot) in s.iter_mut().enumerate() {
        let x = pow_alpha(i);
        *slot = coded.iter().fold(0u8, |acc, &c| mul(acc, x) ^ c);
    }
    s
}

/// Evaluates a polynomial stored lowest degree first.
fn eval_low_first(poly: &[u8], x: u8) -> u8 {
    poly.iter().rev().fold(0u8, |acc, &c| mul(acc, x) ^ c)
}

/// Berlekamp-Massey. Returns the error locator, lowest degree first.
fn error_locator(s: &[u8; PARITY_LEN]) -> Vec<u8> {
    let mut lambda = vec![1u8];
    let mut prev = vec![1u8];
    let mut l = 0usize;
    let mut m = 1usize;
    let mut b = 1u8;
    for n in 0..PARITY_LEN {
        let mut delta = s[n];
        for i in 1..=l.min(lambda.len() - 1) {
            delta ^= mul(lambda[i], s[n - i]);
        }
        if delta == 0 {
            m += 1;
            continue;
        }
        let coef = div(delta, b);
        let mut next = lambda.clone();
        if next.len() < prev.len() + m {
            next.resize(prev.len() + m, 0);
        }
        for (i, &p) in prev.iter().enumerate() {
            next[i + m] ^= mul(coef, p);
        }
        if 2 * l <= n {
            l = n + 1 - l;
            prev = lambda;
            b = delta;
            m = 1;
        } else {
            m += 1;
        }
        lambda = next;
    }
    while lambda.len() > 1 && *lambda.last().unwrap() == 0 {
        lambda.pop();
    }
    lambda
}

/// Corrects up to 8 byte errors in place and returns the number corrected.
pub fn rs_correct_in_place(coded: &mut [u8]) -> Result<usize, RsError> {
    let n = coded.len();
    if !(PARITY_LEN + 1..=MAX_DATA_LEN + PARITY_LEN).contains(&n) {
        return Err(RsError::BadBlockLength(n));
    }
    let s = syndromes(coded);
    if s.iter().all(|&v| v == 0) {
        return Ok(0);
    }
    let lambda = error_locator(&s);
    let degree = lambda.len() - 1;
    if degree == 0 || degree > MAX_CORRECTABLE {
        return Err(RsError::Uncorrectable);
    }

    // Chien search restricted to positions that exist in the shortened code.
    // Byte j carries the coefficient of x^(n-1-j).
    let mut positions = Vec::with_capacity(degree);
    for j in 0..n {
        let power = n - 1 - j;
        let x_inv = pow_alpha(255 - power % 255);
        if eval_low_first(&lambda, x_inv) == 0 {
            positions.push(j);
        }
    }
    if positions.len() != degree {
        return Err(RsError::Uncorrectable);
    }

    // Omega(x) = S(x) * Lambda(x) mod x^16.
    let mut omega = [0u8; PARITY_LEN];
    for (i, &si) in s.iter().enumerate() {
        for (k, &lk) in lambda.iter().enumerate() {
            if i + k < PARITY_LEN {
                omega[i + k] ^= mul(si, lk);
            }
        }
    }
    // Formal derivative: only odd-degree terms survive in characteristic 2.
    let derivative: Vec<u8> = lambda
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| if k % 2 == 1 { c } else { 0 })
        .collect();

    for &j in &positions {
        let power = n - 1 - j;
        let x = pow_alpha(power);
        let x_inv = inv(x);
        let denom = eval_low_first(&derivative, x_inv);
        if denom == 0 {
            return Err(RsError::Uncorrectable);
        }
        // Forney with first consecutive root 0: e = X * Omega(X^-1) / Lambda'(X^-1).
        let magnitude = mul(x, div(eval_low_first(&omega, x_inv), denom));
        coded[j] ^= magnitude;
    }

    if syndromes(coded).iter().any(|&v| v != 0) {
        return Err(RsError::Uncorrectable);
    }
    Ok(positions.len())
}

/// Returns the data part of a coded block and the number of corrected bytes.
pub fn rs_decode_block(coded: &[u8]) -> Result<(Vec<u8>, usize), RsError> {
    let mut work = coded.to_vec();
    let corrected = rs_correct_in_place(&mut work)?;
    work.truncate(coded.len() - PARITY_LEN);
    Ok((work, corrected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_tables_are_consistent() {
        for a in 1..=255u8 {
            assert_eq!(mul(a, inv(a)), 1);
        }
        assert_eq!(pow_alpha(8), 0x1D);
    }

    #[test]
    fn generator_has_its_roots() {
        let low_first: Vec<u8> = GENERATOR.iter().rev().copied().collect();
        for i in 0..PARITY_LEN {
            assert_eq!(eval_low_first(&low_first, pow_alpha(i)), 0, "root {i}");
        }
        assert_eq!(GENERATOR[0], 1);
    }

    #[test]
    fn zero_block_has_zero_parity() {
        let coded = rs_encode_block(&[0u8; 200]).unwrap();
        assert_eq!(coded, vec![0u8; 216]);
    }

    #[test]
    fn encoding_is_systematic_and_sized() {
        let data: Vec<u8> = (0..57).map(|i| (i * 31 + 7) as u8).collect();
        let coded = rs_encode_block(&data).unwrap();
        assert_eq!(coded.len(), 57 + 16);
        assert_eq!(&coded[..57], &data[..]);
        assert!(syndromes(&coded).iter().all(|&v| v == 0));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert_eq!(rs_encode_block(&[0u8; 201]), Err(RsError::BlockTooLarge(201)));
        assert_eq!(rs_encode_block(&[]), Err(RsError::EmptyBlock));
        assert_eq!(rs_decode_block(&[0u8; 16]), Err(RsError::BadBlockLength(16)));
        assert_eq!(rs_decode_block(&[0u8; 217]), Err(RsError::BadBlockLength(217)));
    }

    #[test]
    fn corrects_up_to_eight_random_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &k in &[1usize, 10, 100, 200] {
            for _ in 0..200 {
                let data: Vec<u8> = (0..k).map(|_| rng.random()).collect();
                let clean = rs_encode_block(&data).unwrap();
                let errors = rng.random_range(1..=MAX_CORRECTABLE);
                let mut noisy = clean.clone();
                for pos in sample(&mut rng, clean.len(), errors) {
                    noisy[pos] ^= rng.random_range(1..=255u8);
                }
                let (decoded, fixed) = rs_decode_block(&noisy).unwrap();
                assert_eq!(decoded, data);
                assert_eq!(fixed, errors);
            }
        }
    }

    #[test]
    fn nine_errors_are_mostly_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 300;
        let mut rejected = 0;
        for _ in 0..trials {
            let data: Vec<u8> = (0..200).map(|_| rng.random()).collect();
            let mut noisy = rs_encode_block(&data).unwrap();
            for pos in sample(&mut rng, noisy.len(), 9) {
                noisy[pos] ^= rng.random_range(1..=255u8);
            }
            match rs_decode_block(&noisy) {
                Err(RsError::Uncorrectable) => rejected += 1,
                Ok((decoded, _)) => assert_ne!(decoded, data),
                Err(e) => panic!("unexpected {e}"),
            }
        }
        assert!(rejected * 10 >= trials * 9, "only {rejected}/{trials} rejected");
    }
}
