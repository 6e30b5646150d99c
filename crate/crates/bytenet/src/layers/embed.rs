//! Bag-of-character-n-grams embedding.
//!
//! Each position's input vector is the componentwise sum of the embedding
//! rows of every n-gram present at that position: the unigram (token id)
//! row always, plus one row per higher order whose window survived pruning.

use rand::Rng;

use crate::data::ngram::BagEntry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BackwardRule, Tape, TapeView, Var};
use crate::tensor::Tensor;

/// Embedding tables: `char_table` is `[vocab, 2d]` indexed by token id
/// (reserved ids included); `ngram_tables[n-2]` is `[rows(n), 2d]`.
#[derive(Debug, Clone)]
pub struct EmbedParams<T: Scalar> {
    pub char_table: Tensor<T>,
    pub ngram_tables: Vec<Tensor<T>>,
}

impl<T: Scalar> EmbedParams<T> {
    pub fn init(
        vocab_size: usize,
        ngram_rows: &[usize],
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / (channels as f64).sqrt();
        let char_table = Tensor::rand_uniform(&[vocab_size, channels], -scale, scale, rng)
            .with_requires_grad(true);
        let ngram_tables = ngram_rows
            .iter()
            .map(|&rows| {
                Tensor::rand_uniform(&[rows, channels], -scale, scale, rng)
                    .with_requires_grad(true)
            })
            .collect();
        EmbedParams { char_table, ngram_tables }
    }

    pub fn channels(&self) -> usize {
        self.char_table.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        let mut vars = vec![tape.leaf(&self.char_table)];
        vars.extend(self.ngram_tables.iter().map(|t| tape.leaf(t)));
        vars
    }
}

/// Sums the table rows for one position's bag into `out` (which must be
/// zeroed). Shared with the incremental decoder.
#[inline]
pub(crate) fn embed_col_into<T: Scalar>(
    tables: &[&[T]],
    channels: usize,
    bag: &[BagEntry],
    out: &mut [T],
) {
    for &(table, row) in bag {
        let base = row as usize * channels;
        let src = &tables[table][base..base + channels];
        for (o, &v) in out.iter_mut().zip(src) {
            *o += v;
        }
    }
}

/// Embeds `bags` (one id set per position, row-major over `batch x width`)
/// into a `[batch, width, channels]` tensor. `tables[0]` is the unigram
/// table; every position must carry a unigram entry.
pub fn embed_bag<T: Scalar>(
    tape: &mut Tape<T>,
    tables: &[Var],
    bags: &[Vec<BagEntry>],
    batch: usize,
    width: usize,
) -> Result<Var> {
    if tables.is_empty() {
        return Err(Error::Contract("embed_bag: no tables".into()));
    }
    if bags.len() != batch * width {
        return Err(Error::Shape(format!(
            "embed_bag: {} bags for batch {} x width {}",
            bags.len(),
            batch,
            width
        )));
    }
    let channels = tape.shape(tables[0])[1];
    let mut table_rows = Vec::with_capacity(tables.len());
    for &t in tables {
        let s = tape.shape(t);
        if s.len() != 2 || s[1] != channels {
            return Err(Error::Shape(format!(
                "embed_bag: table shape {:?}, expected [_, {}]",
                s, channels
            )));
        }
        table_rows.push(s[0]);
    }
    for (pos, bag) in bags.iter().enumerate() {
        if bag.first().map(|&(t, _)| t) != Some(0) {
            return Err(Error::Contract(format!(
                "embed_bag: position {} lacks its unigram entry",
                pos
            )));
        }
        for &(table, row) in bag {
            if table >= tables.len() || row as usize >= table_rows[table] {
                return Err(Error::Vocab(format!(
                    "embed_bag: id {} out of range for table {} ({} rows)",
                    row,
                    table,
                    table_rows.get(table).copied().unwrap_or(0)
                )));
            }
        }
    }
    let table_values: Vec<&[T]> = tables.iter().map(|&t| tape.values(t)).collect();
    let mut out = vec![T::zero(); batch * width * channels];
    for (pos, bag) in bags.iter().enumerate() {
        embed_col_into(&table_values, channels, bag, &mut out[pos * channels..(pos + 1) * channels]);
    }
    drop(table_values);
    Ok(tape.custom(
        tables,
        out,
        vec![batch, width, channels],
        Box::new(EmbedBagRule { bags: bags.to_vec(), channels }),
    ))
}

struct EmbedBagRule {
    bags: Vec<Vec<BagEntry>>,
    channels: usize,
}

impl<T: Scalar> BackwardRule<T> for EmbedBagRule {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        _inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let c = self.channels;
        for (pos, bag) in self.bags.iter().enumerate() {
            let g = &grad_out[pos * c..(pos + 1) * c];
            for &(table, row) in bag {
                let dst = &mut input_grads[table][row as usize * c..(row as usize + 1) * c];
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
    }
}
