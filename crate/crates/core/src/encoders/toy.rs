//! Deterministic stand-in text encoder for desk-scale runs.
//!
//! Every token maps to a pseudorandom vector seeded by a 64-bit FNV-1a hash
//! of its UTF-8 bytes mixed with the run seed, expanded with SplitMix64.
//! Components are uniform in `[-1, 1)`. The sentence vector is the mean over
//! content tokens (the sentinels stand in when there are none), L2-normalized.
//! Only integer arithmetic and IEEE add/mul/div/sqrt are involved, so the
//! output is identical on every platform.

use super::tokenize::TokenSequence;
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const SALT: u64 = 0x5851_f42d_4c95_7f2d;
const MAX_ATTEMPTS: u64 = 16;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(GOLDEN);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn next_signed_unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn accumulate_token(acc: &mut [f64], token: &str, seed: u64) {
    let mut rng = SplitMix64(fnv1a(token.as_bytes()) ^ seed.wrapping_mul(GOLDEN));
    for a in acc.iter_mut() {
        *a += rng.next_signed_unit();
    }
}

pub fn toy_encode(tokens: &TokenSequence, seed: u64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::InvalidInput(format!("toy encoder needs dim >= 2, got {dim}")));
    }
    let pooled: &[String] = if tokens.content().is_empty() { tokens.tokens() } else { tokens.content() };
    for attempt in 0..MAX_ATTEMPTS {
        let salted = seed ^ attempt.wrapping_mul(SALT);
        let mut acc = vec![0.0; dim];
        for tok in pooled {
            accumulate_token(&mut acc, tok, salted);
        }
        let n = pooled.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in acc.iter_mut() {
                *a /= norm;
            }
            return Ok(acc);
        }
    }
    Err(Error::InvalidInput("toy encoder produced a zero vector after re-drawing".into()))
}

/// Tokenizes and encodes in one step.
pub fn toy_encode_text(text: &str, seed: u64, dim: usize) -> Result<Vec<f64>> {
    toy_encode(&super::tokenize::tokenize(text), seed, dim)
}
