//! The proof-of-work predicate, nonce search, and difficulty retargeting.
//!
//! A nonce `x` solves the puzzle `(d, c)` when `sha256(x || c)` starts with
//! at least `d` zero bits. Checking is one hash; finding a solution takes
//! 2^d hashes in expectation, so per-nonce success is a Bernoulli(2^-d)
//! trial and the attempt count is geometric.

use crate::identity::{sha256, Digest};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest meaningful difficulty: the hash output width in bits.
pub const MAX_DIFFICULTY: u32 = 256;

/// An 8-byte nonce. Wide enough that independent searches never exhaust it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Nonce(pub u64);

/// A difficulty/challenge pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PowPuzzle {
    pub difficulty: u32,
    pub challenge: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PowError {
    #[error("difficulty {0} outside 1..={MAX_DIFFICULTY}")]
    BadDifficulty(u32),
    #[error("empty interval list")]
    NoIntervals,
    #[error("target interval must be positive")]
    BadTarget,
}

impl PowPuzzle {
    pub fn new(difficulty: u32, challenge: Vec<u8>) -> Result<Self, PowError> {
        if difficulty == 0 || difficulty > MAX_DIFFICULTY {
            return Err(PowError::BadDifficulty(difficulty));
        }
        Ok(PowPuzzle {
            difficulty,
            challenge,
        })
    }
}

/// Number of leading zero bits in a digest.
pub fn leading_zero_bits(digest: &Digest) -> u32 {
    let mut bits = 0;
    for byte in digest.0 {
        if byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

/// True iff `nonce` is a proof of work for `(difficulty, challenge)`. Pure;
/// one hash evaluation per call.
pub fn pow_check(difficulty: u32, challenge: &[u8], nonce: Nonce) -> bool {
    let mut buf = Vec::with_capacity(8 + challenge.len());
    buf.extend_from_slice(&nonce.0.to_be_bytes());
    buf.extend_from_slice(challenge);
    leading_zero_bits(&sha256(&buf)) >= difficulty
}

/// Search for a nonce, scanning sequentially from a random starting point.
/// Returns `None` when the attempt budget runs out; that is an expected
/// outcome at high difficulties, not a fault.
pub fn pow_solve(
    difficulty: u32,
    challenge: &[u8],
    max_attempts: u64,
    rng: &mut impl RngCore,
) -> Option<Nonce> {
    let start = rng.next_u64();
    for i in 0..max_attempts {
        let nonce = Nonce(start.wrapping_add(i));
        if pow_check(difficulty, challenge, nonce) {
            return Some(nonce);
        }
    }
    None
}

/// Like [`pow_solve`] but also reports how many attempts were used. The
/// attempt counts feed the retargeting tests.
pub fn pow_solve_counted(
    difficulty: u32,
    challenge: &[u8],
    max_attempts: u64,
    rng: &mut impl RngCore,
) -> Option<(Nonce, u64)> {
    let start = rng.next_u64();
    for i in 0..max_attempts {
        let nonce = Nonce(start.wrapping_add(i));
        if pow_check(difficulty, challenge, nonce) {
            return Some((nonce, i + 1));
        }
    }
    None
}

/// Retarget difficulty from observed inter-block intervals: one difficulty
/// step halves or doubles the expected solve time, so the correction is the
/// rounded log2 of target over observed mean. Pure.
pub fn adjust_difficulty(
    recent_intervals: &[f64],
    target: f64,
    current: u32,
) -> Result<u32, PowError> {
    if recent_intervals.is_empty() {
        return Err(PowError::NoIntervals);
    }
    if target <= 0.0 {
        return Err(PowError::BadTarget);
    }
    let mean = recent_intervals.iter().sum::<f64>() / recent_intervals.len() as f64;
    let step = (target / mean).log2().round() as i64;
    let new = (current as i64 + step).clamp(1, MAX_DIFFICULTY as i64);
    Ok(new as u32)
}
