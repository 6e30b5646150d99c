//! Synthetic sequence-to-sequence tasks for desk-scale training runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Letter rotation by 13 within each case, other characters unchanged.
    Rot13,
}

impl SyntheticTask {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "rot13" => Ok(SyntheticTask::Rot13),
            other => Err(Error::Config(format!(
                "unknown synthetic task `{}` (copy, reverse, rot13)",
                other
            ))),
        }
    }

    pub fn apply(&self, source: &str) -> String {
        match self {
            SyntheticTask::Copy => source.to_string(),
            SyntheticTask::Reverse => source.chars().rev().collect(),
            SyntheticTask::Rot13 => source.chars().map(rot13_char).collect(),
        }
    }
}

fn rot13_char(c: char) -> char {
    match c {
        'a'..='z' => (((c as u8 - b'a' + 13) % 26) + b'a') as char,
        'A'..='Z' => (((c as u8 - b'A' + 13) % 26) + b'A') as char,
        other => other,
    }
}

/// Generates `count` pairs with source lengths uniform in
/// `min_len..=max_len` and characters uniform over `alphabet`.
/// The same arguments and seed always give the same pairs.
pub fn gen_synthetic(
    task: SyntheticTask,
    count: usize,
    min_len: usize,
    max_len: usize,
    alphabet: &[char],
    seed: u64,
) -> Result<Vec<(String, String)>> {
    if alphabet.is_empty() {
        return Err(Error::Contract("gen_synthetic: empty alphabet".into()));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Contract(format!(
            "gen_synthetic: bad length range {}..={}",
            min_len, max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.random_range(min_len..=max_len);
        let source: String =
            (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let target = task.apply(&source);
        out.push((source, target));
    }
    Ok(out)
}

/// The first `n` lowercase letters, the usual alphabet for desk tasks.
pub fn lowercase_alphabet(n: usize) -> Vec<char> {
    ('a'..='z').take(n.min(26)).collect()
}
