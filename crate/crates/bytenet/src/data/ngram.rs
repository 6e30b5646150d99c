//! Character n-gram tables with per-order count cutoffs.
//!
//! Orders run from 2 to `max_order`; order 1 is the character vocabulary
//! itself. A window that was pruned (or never seen) is simply absent at
//! lookup time: the embedding bag then contributes nothing for that order,
//! and the always-present unigram keeps the input defined.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramVocab {
    max_order: usize,
    /// Cutoff for order n at index n-2. A window is kept iff its corpus
    /// count is >= the cutoff.
    cutoffs: Vec<u64>,
    /// Window -> row id, one table per order starting at order 2. Ids are
    /// assigned in sorted window order, so equal corpora give equal tables.
    tables: Vec<BTreeMap<String, u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NGramFile {
    format: u32,
    max_order: usize,
    cutoffs: Vec<u64>,
    orders: Vec<OrderFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrderFile {
    order: usize,
    windows: Vec<String>,
}

impl NGramVocab {
    /// Counts sliding windows over all texts, merges the counts, then
    /// applies the per-order cutoffs. `cutoffs[i]` governs order `i + 2`.
    pub fn build(texts: &[&str], max_order: usize, cutoffs: &[u64]) -> Result<Self> {
        if max_order < 2 {
            return Err(Error::Contract(format!(
                "n-gram tables start at order 2, got max_order {}",
                max_order
            )));
        }
        if cutoffs.len() != max_order - 1 {
            return Err(Error::Contract(format!(
                "expected {} cutoffs for orders 2..={}, got {}",
                max_order - 1,
                max_order,
                cutoffs.len()
            )));
        }
        let mut tables = Vec::with_capacity(max_order - 1);
        for order in 2..=max_order {
            let mut counts = BTreeMap::<String, u64>::new();
            for text in texts {
                let chars: Vec<char> = text.chars().collect();
                for w in chars.windows(order) {
                    *counts.entry(w.iter().collect()).or_insert(0) += 1;
                }
            }
            let cutoff = cutoffs[order - 2];
            let table: BTreeMap<String, u32> = counts
                .into_iter()
                .filter(|&(_, c)| c >= cutoff)
                .enumerate()
                .map(|(i, (w, _))| (w, i as u32))
                .collect();
            tables.push(table);
        }
        Ok(NGramVocab { max_order, cutoffs: cutoffs.to_vec(), tables })
    }

    pub fn build_from_files<P: AsRef<Path>>(
        paths: &[P],
        max_order: usize,
        cutoffs: &[u64],
    ) -> Result<Self> {
        let mut texts = Vec::new();
        for p in paths {
            texts.push(super::vocab::read_utf8(p.as_ref())?);
        }
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        Self::build(&refs, max_order, cutoffs)
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// Row id of a window in its order's table, or None if pruned/unseen.
    pub fn lookup(&self, window: &str) -> Option<u32> {
        let order = window.chars().count();
        if order < 2 || order > self.max_order {
            return None;
        }
        self.tables[order - 2].get(window).copied()
    }

    /// Row counts for orders 2..=max_order, in order. Sizes the embedding
    /// tables.
    pub fn table_sizes(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.len()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let orders = self
            .tables
            .iter()
            .enumerate()
            .map(|(i, t)| OrderFile { order: i + 2, windows: t.keys().cloned().collect() })
            .collect();
        let file = NGramFile {
            format: 1,
            max_order: self.max_order,
            cutoffs: self.cutoffs.clone(),
            orders,
        };
        let json = serde_json::to_string_pretty(&file).expect("n-gram serialization cannot fail");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NGramFile =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
        if file.format != 1 {
            return Err(Error::parse(path, format!("unsupported n-gram format {}", file.format)));
        }
        if file.max_order < 2
            || file.cutoffs.len() != file.max_order - 1
            || file.orders.len() != file.max_order - 1
        {
            return Err(Error::parse(path, "inconsistent n-gram table header"));
        }
        let mut tables = Vec::new();
        for (i, of) in file.orders.iter().enumerate() {
            if of.order != i + 2 {
                return Err(Error::parse(path, format!("order {} out of sequence", of.order)));
            }
            let mut sorted = of.windows.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted != of.windows {
                return Err(Error::parse(path, "n-gram windows must be sorted and unique"));
            }
            if of.windows.iter().any(|w| w.chars().count() != of.order) {
                return Err(Error::parse(path, format!("window of wrong length in order {}", of.order)));
            }
            tables.push(
                of.windows.iter().enumerate().map(|(j, w)| (w.clone(), j as u32)).collect(),
            );
        }
        Ok(NGramVocab { max_order: file.max_order, cutoffs: file.cutoffs, tables })
    }
}

/// Embedding-bag entry: `(table, row)`. Table 0 is the character (unigram)
/// table indexed by token id; table `n - 1` holds order-n windows.
pub type BagEntry = (usize, u32);

/// The n-gram id set for one position of a token sequence.
///
/// The order-n window at position i covers tokens `[i-n+1, i]` (causal,
/// ending at i). Windows that would start before the sequence, or that touch
/// a reserved token (PAD, EOS), are absent. The unigram entry is always
/// present, reserved tokens included.
pub fn position_bag(
    tokens: &[u32],
    pos: usize,
    vocab: &Vocabulary,
    ngrams: Option<&NGramVocab>,
) -> Vec<BagEntry> {
    let mut out = vec![(0usize, tokens[pos])];
    let Some(ng) = ngrams else { return out };
    for order in 2..=ng.max_order() {
        if pos + 1 < order {
            break;
        }
        let window = &tokens[pos + 1 - order..=pos];
        if window.iter().any(|&t| t < 2) {
            continue;
        }
        let text: String = window
            .iter()
            .map(|&t| vocab.char_of(t).expect("non-reserved token decodes"))
            .collect();
        if let Some(row) = ng.lookup(&text) {
            out.push((order - 1, row));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_windows_are_counted() {
        // "aaaa" contains the bigram "aa" three times.
        let ng = NGramVocab::build(&["aaaa"], 2, &[3]).unwrap();
        assert!(ng.lookup("aa").is_some());
        let ng = NGramVocab::build(&["aaaa"], 2, &[4]).unwrap();
        assert!(ng.lookup("aa").is_none());
    }

    #[test]
    fn cutoff_one_keeps_all_observed() {
        let ng = NGramVocab::build(&["abcab"], 3, &[1, 1]).unwrap();
        assert_eq!(ng.table_sizes(), vec![3, 3]); // ab, bc, ca / abc, bca, cab
        for w in ["ab", "bc", "ca", "abc", "bca", "cab"] {
            assert!(ng.lookup(w).is_some(), "{} missing", w);
        }
        assert!(ng.lookup("ba").is_none());
    }

    #[test]
    fn huge_cutoff_gives_empty_tables() {
        let ng = NGramVocab::build(&["abcabc"], 2, &[u64::MAX]).unwrap();
        assert_eq!(ng.table_sizes(), vec![0]);
    }

    #[test]
    fn counts_merge_across_texts_before_cutoff() {
        // "xy" once per text; cutoff 2 keeps it only if counts merge first.
        let ng = NGramVocab::build(&["xy", "xy"], 2, &[2]).unwrap();
        assert!(ng.lookup("xy").is_some());
    }

    #[test]
    fn ids_are_sorted_window_order() {
        let ng = NGramVocab::build(&["ba", "ab"], 2, &[1]).unwrap();
        assert_eq!(ng.lookup("ab").unwrap(), 0);
        assert_eq!(ng.lookup("ba").unwrap(), 1);
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let ng = NGramVocab::build(&["the cat sat on the mat"], 3, &[1, 2]).unwrap();
        ng.save(&a).unwrap();
        let loaded = NGramVocab::load(&a).unwrap();
        assert_eq!(loaded, ng);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn position_bag_has_unigram_always_and_skips_reserved() {
        use crate::data::vocab::{EOS_ID, PAD_ID};
        let v = Vocabulary::from_text("ab");
        let ng = NGramVocab::build(&["ab", "ba", "aa", "bb"], 2, &[1]).unwrap();
        let a = v.id_of('a').unwrap();
        let b = v.id_of('b').unwrap();
        // Window off the left edge: only the unigram.
        let bag = position_bag(&[a, b], 0, &v, Some(&ng));
        assert_eq!(bag, vec![(0, a)]);
        // Full window present.
        let bag = position_bag(&[a, b], 1, &v, Some(&ng));
        assert_eq!(bag, vec![(0, b), (1, ng.lookup("ab").unwrap())]);
        // EOS in the window suppresses the bigram but not the unigram.
        let bag = position_bag(&[EOS_ID, b], 1, &v, Some(&ng));
        assert_eq!(bag, vec![(0, b)]);
        // PAD at the position itself still has a unigram row.
        let bag = position_bag(&[a, PAD_ID], 1, &v, Some(&ng));
        assert_eq!(bag, vec![(0, PAD_ID)]);
    }

    #[test]
    fn build_rejects_bad_arity() {
        assert!(NGramVocab::build(&["ab"], 1, &[]).is_err());
        assert!(NGramVocab::build(&["ab"], 3, &[1]).is_err());
    }
}
