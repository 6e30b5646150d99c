//! Length bucketing for translation pairs.
//!
//! Sequences are padded to the next strictly greater multiple of the length
//! quantum (a 25-character source becomes 50 with quantum 25, never 25), so
//! every sequence ends with at least one PAD and the unpadded length is
//! always recoverable. Pairs sharing (padded source, padded target) land in
//! the same bucket; normalization statistics are keyed by these bucket ids.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{Vocabulary, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

/// A (padded source length, padded target length) pair. The language-model
/// configuration has no source and no target padding, which is represented
/// as the all-zero bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketId {
    pub source: u32,
    pub target: u32,
}

impl BucketId {
    pub fn new(source: u32, target: u32) -> Self {
        BucketId { source, target }
    }

    /// The bucket under which a language model keeps its statistics.
    pub fn lm() -> Self {
        BucketId { source: 0, target: 0 }
    }
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.source, self.target)
    }
}

/// One length bucket: indices into the original pair list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub id: BucketId,
    pub pairs: Vec<usize>,
}

/// Smallest multiple of `quantum` strictly greater than `len`.
pub fn padded_len(len: usize, quantum: usize) -> usize {
    debug_assert!(quantum > 0);
    (len / quantum + 1) * quantum
}

/// Groups pairs by (padded source, padded target) length. Empty-sided pairs
/// are skipped; the second return value counts them. Buckets come back
/// sorted by id, pair indices in input order.
pub fn bucketize(pairs: &[(String, String)], quantum: usize) -> Result<(Vec<Bucket>, usize)> {
    if quantum == 0 {
        return Err(Error::Contract("bucketize: quantum must be positive".into()));
    }
    let mut map = std::collections::BTreeMap::<BucketId, Vec<usize>>::new();
    let mut skipped = 0;
    for (i, (src, tgt)) in pairs.iter().enumerate() {
        let (ns, nt) = (src.chars().count(), tgt.chars().count());
        if ns == 0 || nt == 0 {
            skipped += 1;
            continue;
        }
        // Target framing appends EOS before padding, so the padded target
        // must strictly exceed the content length including EOS.
        let id = BucketId::new(
            padded_len(ns, quantum) as u32,
            padded_len(nt + 1, quantum) as u32,
        );
        map.entry(id).or_default().push(i);
    }
    Ok((map.into_iter().map(|(id, pairs)| Bucket { id, pairs }).collect(), skipped))
}

/// Encodes one pair into fixed-width id rows for its bucket.
///
/// Source: character ids, then PAD to the padded source length.
/// Target: character ids, then one EOS, then PAD to the padded target
/// length. Training predicts the EOS, so it is part of the target row.
pub fn pad_and_encode(
    vocab: &Vocabulary,
    source: &str,
    target: &str,
    id: BucketId,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut src = vocab.encode(source)?;
    let mut tgt = vocab.encode(target)?;
    if src.len() >= id.source as usize {
        return Err(Error::Contract(format!(
            "source of {} chars does not fit bucket {}",
            src.len(),
            id
        )));
    }
    if tgt.len() + 1 > id.target as usize {
        return Err(Error::Contract(format!(
            "target of {} chars (+EOS) does not fit bucket {}",
            tgt.len(),
            id
        )));
    }
    src.resize(id.source as usize, PAD_ID);
    tgt.push(EOS_ID);
    tgt.resize(id.target as usize, PAD_ID);
    Ok((src, tgt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn padding_is_strictly_greater() {
        assert_eq!(padded_len(23, 25), 25);
        assert_eq!(padded_len(25, 25), 50);
        assert_eq!(padded_len(1, 25), 25);
        assert_eq!(padded_len(24, 25), 25);
        assert_eq!(padded_len(50, 25), 75);
    }

    #[test]
    fn bucketize_groups_and_skips_empty() {
        let pairs = vec![
            ("abc".to_string(), "de".to_string()),
            ("".to_string(), "xx".to_string()),
            ("xyzxy".to_string(), "qqq".to_string()),
            ("ab".to_string(), "".to_string()),
        ];
        let (buckets, skipped) = bucketize(&pairs, 4).unwrap();
        assert_eq!(skipped, 2);
        // "abc"/"de": src 3 -> 4, tgt 2+1 -> 4. "xyzxy"/"qqq": src 5 -> 8, tgt 3+1 -> 8.
        assert_eq!(buckets.len(), 2);
        assert_eq!(buckets[0].id, BucketId::new(4, 4));
        assert_eq!(buckets[0].pairs, vec![0]);
        assert_eq!(buckets[1].id, BucketId::new(8, 8));
        assert_eq!(buckets[1].pairs, vec![2]);
    }

    #[test]
    fn pad_and_encode_frames_target_with_eos() {
        let v = Vocabulary::from_text("abcdeqxyz");
        let id = BucketId::new(4, 4);
        let (src, tgt) = pad_and_encode(&v, "abc", "de", id).unwrap();
        assert_eq!(src.len(), 4);
        assert_eq!(src[3], PAD_ID);
        assert_eq!(tgt, vec![v.id_of('d').unwrap(), v.id_of('e').unwrap(), EOS_ID, PAD_ID]);
    }

    #[test]
    fn pad_and_encode_rejects_overlong() {
        let v = Vocabulary::from_text("abcd");
        // Source of exactly the padded length needs a bigger bucket.
        assert!(pad_and_encode(&v, "abcd", "a", BucketId::new(4, 4)).is_err());
        // Target content + EOS must fit.
        assert!(pad_and_encode(&v, "a", "abcd", BucketId::new(4, 4)).is_err());
    }

    proptest! {
        #[test]
        fn padded_len_properties(len in 0usize..500, quantum in 1usize..60) {
            let p = padded_len(len, quantum);
            // strictly greater, multiple of quantum, and minimal
            prop_assert!(p > len);
            prop_assert_eq!(p % quantum, 0);
            prop_assert!(p - len <= quantum);
        }

        #[test]
        fn every_nonempty_pair_lands_in_exactly_one_bucket(
            lens in proptest::collection::vec((1usize..40, 1usize..40), 1..30),
            quantum in 1usize..12,
        ) {
            let pairs: Vec<(String, String)> = lens
                .iter()
                .map(|&(a, b)| ("x".repeat(a), "y".repeat(b)))
                .collect();
            let (buckets, skipped) = bucketize(&pairs, quantum).unwrap();
            prop_assert_eq!(skipped, 0);
            let mut seen = vec![0usize; pairs.len()];
            for b in &buckets {
                for &i in &b.pairs {
                    seen[i] += 1;
                    let (ns, nt) = (pairs[i].0.chars().count(), pairs[i].1.chars().count());
                    prop_assert_eq!(b.id.source as usize, padded_len(ns, quantum));
                    prop_assert_eq!(b.id.target as usize, padded_len(nt + 1, quantum));
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
