//! Incremental target-network evaluation for generation.
//!
//! [`TargetState`] replays the target stack one column at a time, caching
//! exactly one stream per block: the input to its dilated convolution
//! (everything else in a block is column-local). Each column runs the same
//! per-position kernels as the batched tape forward, in the same order, so
//! incremental logits are bit-identical to a full-prefix recomputation.

use crate::data::bucket::BucketId;
use crate::data::ngram::position_bag;
use crate::data::vocab::EOS_ID;
use crate::error::{Error, Result};
use crate::kernels::{inv_std_s, relu_s, sigmoid_s, tanh_s};
use crate::layers::blocks::{AnyBlockParams, BlockSpec, MuParams};
use crate::layers::conv::{conv_col_into, Conv1dSpec, ConvParams};
use crate::layers::embed::embed_col_into;
use crate::layers::norm::{norm_col_into, SubBnParams, DEFAULT_EPS};
use crate::scalar::Scalar;

use super::{Lexicon, Model, SourceRepresentation};

/// Inference-mode normalization of one Sub-BN layer, resolved for a fixed
/// bucket at state creation.
#[derive(Clone)]
struct ResolvedBn<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

fn resolve<T: Scalar>(bn: &SubBnParams<T>, bucket: BucketId, layer: &str) -> Result<ResolvedBn<T>> {
    let stats = bn
        .running
        .get(&bucket)
        .ok_or_else(|| Error::MissingStats { bucket, layer: layer.to_string() })?;
    let eps = T::from_f64_lossy(DEFAULT_EPS);
    Ok(ResolvedBn {
        mean: stats.mean.clone(),
        inv_std: stats.var.iter().map(|&v| inv_std_s(v, eps)).collect(),
        gamma: bn.gamma.values().to_vec(),
        beta: bn.beta.values().to_vec(),
    })
}

/// Cached decoding state over a model snapshot: the generated prefix plus
/// per-block activation history. Cloning a state forks the hypothesis
/// (used by beam search).
#[derive(Clone)]
pub struct TargetState<'m, T: Scalar> {
    model: &'m Model<T>,
    lex: Lexicon<'m>,
    bucket: BucketId,
    /// Per block: the Sub-BN layers in forward order (2 for MU, 3 for ReLU).
    bns: Vec<Vec<ResolvedBn<T>>>,
    specs: Vec<BlockSpec>,
    /// Network input tokens: EOS start marker, then the generated tokens.
    input_tokens: Vec<u32>,
    /// Per block, per processed column: the dilated convolution's input.
    mid_hist: Vec<Vec<Vec<T>>>,
    cols_done: usize,
}

impl<'m, T: Scalar> TargetState<'m, T> {
    /// Statistics for `bucket` must exist in every target-network Sub-BN
    /// layer; a trained checkpoint has them for each training bucket.
    pub fn new(model: &'m Model<T>, lex: Lexicon<'m>, bucket: BucketId) -> Result<Self> {
        let specs = model.config.block_specs(true);
        let mut bns = Vec::with_capacity(specs.len());
        for (i, block) in model.target.blocks.iter().enumerate() {
            let label = |sub: &str| format!("target.block{}.{}", i, sub);
            let resolved = match block {
                AnyBlockParams::Relu(p) => vec![
                    resolve(&p.bn_in, bucket, &label("bn_in"))?,
                    resolve(&p.bn_mid, bucket, &label("bn_mid"))?,
                    resolve(&p.bn_out, bucket, &label("bn_out"))?,
                ],
                AnyBlockParams::Mu(p) => vec![
                    resolve(&p.bn_in, bucket, &label("bn_in"))?,
                    resolve(&p.bn_mid, bucket, &label("bn_mid"))?,
                ],
            };
            bns.push(resolved);
        }
        let mid_hist = vec![Vec::new(); specs.len()];
        Ok(TargetState {
            model,
            lex,
            bucket,
            bns,
            specs,
            input_tokens: vec![EOS_ID],
            mid_hist,
            cols_done: 0,
        })
    }

    pub fn bucket(&self) -> BucketId {
        self.bucket
    }

    /// Number of logit columns produced so far; also the position of the
    /// next prediction.
    pub fn position(&self) -> usize {
        self.cols_done
    }

    /// The generated tokens (the start marker is not part of the output).
    pub fn tokens(&self) -> &[u32] {
        &self.input_tokens[1..]
    }

    /// Runs one column through the target stack and returns the raw logits
    /// for the next token. `cond` is the conditioning column (2d values):
    /// pass the source-representation column while the position is inside
    /// the source, a zero column beyond it, and `None` in language-model
    /// mode (where no conditioning is attached at all).
    pub fn step(&mut self, cond: Option<&[T]>) -> Result<Vec<T>> {
        let model: &'m Model<T> = self.model;
        let pos = self.cols_done;
        if pos >= self.input_tokens.len() {
            return Err(Error::Contract(format!(
                "decode_step: {} columns already computed for a {}-token prefix; push a token first",
                pos,
                self.input_tokens.len() - 1
            )));
        }
        let c2 = model.config.outer();
        let mut x = vec![T::zero(); c2];
        let bag = position_bag(&self.input_tokens, pos, self.lex.vocab, self.lex.ngrams);
        let embed = &model.target.embed;
        let tables: Vec<&[T]> = std::iter::once(embed.char_table.values())
            .chain(embed.ngram_tables.iter().map(|t| t.values()))
            .collect();
        embed_col_into(&tables, c2, &bag, &mut x);
        if let Some(c) = cond {
            if c.len() != c2 {
                return Err(Error::Shape(format!(
                    "decode_step: conditioning column of {} values, expected {}",
                    c.len(),
                    c2
                )));
            }
            for (xi, &ci) in x.iter_mut().zip(c) {
                *xi = *xi + ci;
            }
        }
        for b in 0..self.specs.len() {
            x = self.step_block(b, pos, &x)?;
        }
        let head = model
            .target
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("decode_step: target network lacks its head".into()))?;
        let spec = Conv1dSpec::pointwise(c2, model.config.vocab_size);
        let mut logits = vec![T::zero(); model.config.vocab_size];
        conv_col_into(&spec, head.weight.values(), head.bias.values(), |p| {
            (p == 0).then_some(x.as_slice())
        }, 0, &mut logits);
        self.cols_done += 1;
        Ok(logits)
    }

    /// Commits the token chosen for the last computed column; it becomes
    /// the input of the next step.
    pub fn push(&mut self, token: u32) -> Result<()> {
        if self.input_tokens.len() != self.cols_done {
            return Err(Error::Contract(format!(
                "decode_step: cannot push token at column {} with {} inputs committed",
                self.cols_done,
                self.input_tokens.len()
            )));
        }
        if token as usize >= self.model.config.vocab_size {
            return Err(Error::Vocab(format!(
                "decode_step: token {} outside vocabulary of {}",
                token, self.model.config.vocab_size
            )));
        }
        self.input_tokens.push(token);
        Ok(())
    }

    fn pointwise(&self, conv: &ConvParams<T>, cin: usize, cout: usize, x: &[T]) -> Vec<T> {
        let spec = Conv1dSpec::pointwise(cin, cout);
        let mut out = vec![T::zero(); cout];
        conv_col_into(&spec, conv.weight.values(), conv.bias.values(), |p| {
            (p == 0).then_some(x)
        }, 0, &mut out);
        out
    }

    fn norm(bn: &ResolvedBn<T>, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        norm_col_into(x, &bn.mean, &bn.inv_std, &bn.gamma, &bn.beta, &mut out);
        out
    }

    fn mu(&self, p: &MuParams<T>, h: &[T], c: usize) -> Vec<T> {
        let u_pre = self.pointwise(&p.update, c, c, h);
        let u: Vec<T> = u_pre.into_iter().map(tanh_s).collect();
        let g1: Vec<T> = self.pointwise(&p.gate_out, c, c, h).into_iter().map(sigmoid_s).collect();
        let g2: Vec<T> =
            self.pointwise(&p.gate_hidden, c, c, h).into_iter().map(sigmoid_s).collect();
        let g3: Vec<T> =
            self.pointwise(&p.gate_update, c, c, h).into_iter().map(sigmoid_s).collect();
        (0..c).map(|i| g1[i] * tanh_s(g2[i] * h[i] + g3[i] * u[i])).collect()
    }

    fn dilated(&self, b: usize, conv: &ConvParams<T>, pos: usize) -> Vec<T> {
        let spec = self.specs[b].dilated();
        let hist = &self.mid_hist[b];
        let mut out = vec![T::zero(); spec.out_channels];
        conv_col_into(&spec, conv.weight.values(), conv.bias.values(), |p| {
            if p < 0 {
                None
            } else {
                hist.get(p as usize).map(|v| v.as_slice())
            }
        }, pos, &mut out);
        out
    }

    fn step_block(&mut self, b: usize, pos: usize, x: &[T]) -> Result<Vec<T>> {
        let model: &'m Model<T> = self.model;
        let spec = self.specs[b].clone();
        let (inner, outer) = (spec.inner, spec.outer);
        let f = match &model.target.blocks[b] {
            AnyBlockParams::Relu(p) => {
                let a = Self::norm(&self.bns[b][0], x);
                let a: Vec<T> = a.into_iter().map(relu_s).collect();
                let a = self.pointwise(&p.conv_reduce, outer, inner, &a);
                let a = Self::norm(&self.bns[b][1], &a);
                let mid: Vec<T> = a.into_iter().map(relu_s).collect();
                self.mid_hist[b].push(mid);
                let a = self.dilated(b, &p.conv_dilated, pos);
                let a = Self::norm(&self.bns[b][2], &a);
                let a: Vec<T> = a.into_iter().map(relu_s).collect();
                self.pointwise(&p.conv_expand, inner, outer, &a)
            }
            AnyBlockParams::Mu(p) => {
                let a = Self::norm(&self.bns[b][0], x);
                let a = self.pointwise(&p.conv_reduce, outer, inner, &a);
                let mid = self.mu(&p.mu_in, &a, inner);
                self.mid_hist[b].push(mid);
                let a = self.dilated(b, &p.conv_dilated, pos);
                let a = Self::norm(&self.bns[b][1], &a);
                let a = self.mu(&p.mu_out, &a, inner);
                self.pointwise(&p.conv_expand, inner, outer, &a)
            }
        };
        if self.mid_hist[b].len() != pos + 1 {
            return Err(Error::Contract(format!(
                "decode_step: block {} cache holds {} columns at position {}",
                b,
                self.mid_hist[b].len(),
                pos
            )));
        }
        Ok(x.iter().zip(&f).map(|(&xi, &fi)| xi + fi).collect())
    }
}

/// First index of the largest logit. Ties break toward the lowest token id,
/// which keeps generation deterministic.
pub fn argmax<T: Scalar>(logits: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unfolded {
    pub tokens: Vec<u32>,
    /// True when generation hit `max_len` without producing EOS.
    pub truncated: bool,
}

/// Greedy dynamic unfolding: step i is conditioned on source column i while
/// i is inside the source, on a zero column beyond it, and generation ends
/// at EOS or after `max_len` tokens.
pub fn unfold<T: Scalar>(
    model: &Model<T>,
    lex: Lexicon<'_>,
    source: &SourceRepresentation<T>,
    max_len: usize,
) -> Result<Unfolded> {
    if max_len == 0 {
        return Err(Error::Contract("unfold: max_len must be at least 1".into()));
    }
    let zeros = vec![T::zero(); source.channels];
    let mut state = TargetState::new(model, lex, source.bucket)?;
    for i in 0..max_len {
        let cond = if i < source.length {
            source.column(i).expect("conditioning column inside the source")
        } else {
            &zeros
        };
        let logits = state.step(Some(cond))?;
        let tok = argmax(&logits);
        if tok == EOS_ID {
            return Ok(Unfolded { tokens: state.tokens().to_vec(), truncated: false });
        }
        state.push(tok)?;
    }
    Ok(Unfolded { tokens: state.tokens().to_vec(), truncated: true })
}

/// Default generation budget for translation: generous next to the
/// near-linear source/target length correlation.
pub fn default_max_len(source_len: usize) -> usize {
    3 * source_len + 50
}
