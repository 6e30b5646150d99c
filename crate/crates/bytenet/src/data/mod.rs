//! Corpus handling: character vocabularies, n-gram tables, length
//! bucketing, and synthetic task generators.

pub mod bucket;
pub mod ngram;
pub mod synth;
pub mod vocab;

pub use bucket::{bucketize, padded_len, Bucket, BucketId};
pub use ngram::NGramVocab;
pub use synth::{gen_synthetic, SyntheticTask};
pub use vocab::{Vocabulary, EOS_ID, PAD_ID};
