//! Model assembly: the source network (unmasked) and target network
//! (masked) stacked over shared embedding machinery, teacher-forced
//! evaluation, and log-likelihoods.
//!
//! One forward function serves training and evaluation of both the
//! translator and the language model: the language model is the target
//! network with no conditioning attached (`has_source = false`).

pub mod checkpoint;
pub mod stepper;

pub use stepper::{unfold, TargetState, Unfolded};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::bucket::BucketId;
use crate::data::ngram::{position_bag, BagEntry, NGramVocab};
use crate::data::vocab::{Vocabulary, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::kernels::log_softmax_col;
use crate::layers::blocks::{
    block_forward, AnyBlockParams, AnyBlockVars, BlockSpec, BlockVariant, NormCtx,
};
use crate::layers::conv::{conv1d, Conv1dSpec, ConvParams};
use crate::layers::embed::{embed_bag, EmbedParams};
use crate::layers::norm::{BnMode, SubBnParams, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::scalar::Scalar;
use crate::tape::{BackwardRule, Tape, TapeView, Var};
use crate::tensor::Tensor;

/// Architecture description. Serializable as the head of every checkpoint
/// and as part of run configs; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Inner block width d; the residual stack runs at 2d channels.
    pub hidden: usize,
    pub num_sets: usize,
    /// Dilation rates of one set: starts at 1, doubles each layer.
    pub dilations_per_set: Vec<usize>,
    /// Source network kernel size (odd; the convolution is centered).
    pub source_kernel: usize,
    /// Target network kernel size (masked; taps reach backward only).
    pub target_kernel: usize,
    pub block_variant: BlockVariant,
    /// 1 means unigrams only; order n > 1 requires a table size below.
    pub ngram_max_order: usize,
    /// Row counts of the order-2..=max tables, in order.
    pub ngram_table_sizes: Vec<usize>,
    /// False puts the model in language-model mode: no source network,
    /// conditioning fixed to zero.
    pub has_source: bool,
    pub eos_id: u32,
    pub pad_id: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 3 {
            return fail(format!(
                "vocab_size {} leaves no room for PAD, EOS and a character",
                self.vocab_size
            ));
        }
        if self.hidden == 0 {
            return fail("hidden width must be positive".into());
        }
        if self.num_sets == 0 {
            return fail("num_sets must be positive".into());
        }
        if self.dilations_per_set.is_empty() {
            return fail("dilations_per_set must not be empty".into());
        }
        if self.dilations_per_set[0] != 1 {
            return fail(format!(
                "dilation schedule {:?} must start at 1",
                self.dilations_per_set
            ));
        }
        for w in self.dilations_per_set.windows(2) {
            if w[1] != 2 * w[0] {
                return fail(format!(
                    "dilation schedule {:?} must double every layer",
                    self.dilations_per_set
                ));
            }
        }
        if self.has_source && self.source_kernel % 2 == 0 {
            return fail(format!(
                "source_kernel {} must be odd (centered convolution)",
                self.source_kernel
            ));
        }
        if self.source_kernel == 0 || self.target_kernel == 0 {
            return fail("kernel sizes must be positive".into());
        }
        if self.ngram_max_order == 0 {
            return fail("ngram_max_order must be at least 1".into());
        }
        if self.ngram_table_sizes.len() != self.ngram_max_order - 1 {
            return fail(format!(
                "ngram_max_order {} needs {} table sizes, got {}",
                self.ngram_max_order,
                self.ngram_max_order - 1,
                self.ngram_table_sizes.len()
            ));
        }
        if self.pad_id != PAD_ID || self.eos_id != EOS_ID {
            return fail(format!(
                "reserved ids are fixed: PAD={}, EOS={} (got PAD={}, EOS={})",
                PAD_ID, EOS_ID, self.pad_id, self.eos_id
            ));
        }
        if self.eos_id as usize >= self.vocab_size {
            return fail("eos_id outside vocabulary".into());
        }
        Ok(())
    }

    /// Residual stack width (2d).
    pub fn outer(&self) -> usize {
        2 * self.hidden
    }

    /// Dilation of every block in network order.
    pub fn schedule(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_sets * self.dilations_per_set.len());
        for _ in 0..self.num_sets {
            out.extend_from_slice(&self.dilations_per_set);
        }
        out
    }

    pub fn block_specs(&self, masked: bool) -> Vec<BlockSpec> {
        let kernel = if masked { self.target_kernel } else { self.source_kernel };
        self.schedule()
            .into_iter()
            .map(|dilation| BlockSpec {
                variant: self.block_variant,
                outer: self.outer(),
                inner: self.hidden,
                kernel,
                dilation,
                masked,
            })
            .collect()
    }
}

/// Embedding tables, residual blocks, and (target network only) the output
/// head mapping 2d channels to vocabulary logits.
#[derive(Debug, Clone)]
pub struct NetParams<T: Scalar> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<AnyBlockParams<T>>,
    pub head: Option<ConvParams<T>>,
}

impl<T: Scalar> NetParams<T> {
    fn init(config: &ModelConfig, masked: bool, with_head: bool, rng: &mut ChaCha8Rng) -> Self {
        let embed =
            EmbedParams::init(config.vocab_size, &config.ngram_table_sizes, config.outer(), rng);
        let blocks = config
            .block_specs(masked)
            .iter()
            .map(|spec| AnyBlockParams::init(spec, rng))
            .collect();
        let head = with_head.then(|| {
            ConvParams::init(&Conv1dSpec::pointwise(config.outer(), config.vocab_size), rng)
        });
        NetParams { embed, blocks, head }
    }

    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (k, t) in std::iter::once(&mut self.embed.char_table)
            .chain(self.embed.ngram_tables.iter_mut())
            .enumerate()
        {
            out.push((format!("{}embed.table{}", prefix, k), t));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{}block{}.", prefix, i), out);
        }
        if let Some(h) = &mut self.head {
            h.visit_params(&format!("{}head.", prefix), out);
        }
    }

    fn visit_params_ref<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (k, t) in std::iter::once(&self.embed.char_table)
            .chain(self.embed.ngram_tables.iter())
            .enumerate()
        {
            out.push((format!("{}embed.table{}", prefix, k), t));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params_ref(&format!("{}block{}.", prefix, i), out);
        }
        if let Some(h) = &self.head {
            h.visit_params_ref(&format!("{}head.", prefix), out);
        }
    }

    fn visit_bn(&self, prefix: &str, f: &mut dyn FnMut(String, &SubBnParams<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_bn(&format!("{}block{}.", prefix, i), f);
        }
    }

    fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut SubBnParams<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_bn_mut(&format!("{}block{}.", prefix, i), f);
        }
    }
}

/// A full model: target network always, source network in translation mode.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub source: Option<NetParams<T>>,
    pub target: NetParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters from one seeded stream: source network first (when
    /// present), then target. Same seed, same model, per scalar type.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = config.has_source.then(|| NetParams::init(&config, false, false, &mut rng));
        let target = NetParams::init(&config, true, true, &mut rng);
        Ok(Model { config, source, target })
    }

    /// Every trainable tensor with its canonical name. Order is fixed and
    /// matches the binding order of [`forward`].
    pub fn visit_params(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(s) = &mut self.source {
            s.visit_params("source.", &mut out);
        }
        self.target.visit_params("target.", &mut out);
        out
    }

    pub fn visit_params_ref(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(s) = &self.source {
            s.visit_params_ref("source.", &mut out);
        }
        self.target.visit_params_ref("target.", &mut out);
        out
    }

    /// Every Sub-BN layer with its canonical label, network order.
    pub fn visit_bn(&self, f: &mut dyn FnMut(String, &SubBnParams<T>)) {
        if let Some(s) = &self.source {
            s.visit_bn("source.", f);
        }
        self.target.visit_bn("target.", f);
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(String, &mut SubBnParams<T>)) {
        if let Some(s) = &mut self.source {
            s.visit_bn_mut("source.", f);
        }
        self.target.visit_bn_mut("target.", f);
    }

    /// Installs identity statistics (mean 0, variance 1) for `bucket` in
    /// every Sub-BN layer, so an untrained model can run in inference mode.
    pub fn seed_identity_stats(&mut self, bucket: BucketId) {
        self.visit_bn_mut(&mut |_, bn| bn.seed_identity(bucket));
    }

    /// Buckets for which every Sub-BN layer holds inference statistics.
    pub fn stat_buckets(&self) -> Vec<BucketId> {
        let mut sets: Vec<std::collections::BTreeSet<BucketId>> = Vec::new();
        self.visit_bn(&mut |_, bn| sets.push(bn.running.keys().copied().collect()));
        let Some(first) = sets.first().cloned() else { return Vec::new() };
        first
            .into_iter()
            .filter(|b| sets.iter().all(|s| s.contains(b)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.visit_params_ref().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Vocabulary plus optional n-gram tables; everything needed to turn token
/// ids into embedding bags.
#[derive(Clone, Copy)]
pub struct Lexicon<'a> {
    pub vocab: &'a Vocabulary,
    pub ngrams: Option<&'a NGramVocab>,
}

impl<'a> Lexicon<'a> {
    pub fn bags(&self, tokens: &[u32]) -> Vec<Vec<BagEntry>> {
        (0..tokens.len()).map(|i| position_bag(tokens, i, self.vocab, self.ngrams)).collect()
    }
}

/// One batch of already-encoded rows for a teacher-forced forward pass.
///
/// `target_rows` hold the network INPUT tokens: EOS as the start marker,
/// then the shifted target. All rows must share one width (bucketed or
/// windowed batches guarantee this).
pub struct BatchInput<'a, T: Scalar> {
    pub source_rows: Option<&'a [Vec<u32>]>,
    /// True (unpadded) source lengths; conditioning columns at or beyond a
    /// row's length are zero. Ignored in language-model mode.
    pub source_lengths: &'a [usize],
    pub target_rows: &'a [Vec<u32>],
    pub mode: BnMode,
    pub bucket: BucketId,
    /// Optional additive perturbation leaves on the embedding outputs,
    /// used by gradient probes; shapes must match the embeddings.
    pub target_embed_offset: Option<&'a Tensor<T>>,
    pub source_embed_offset: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> BatchInput<'a, T> {
    pub fn lm(target_rows: &'a [Vec<u32>], mode: BnMode) -> Self {
        BatchInput {
            source_rows: None,
            source_lengths: &[],
            target_rows,
            mode,
            bucket: BucketId::lm(),
            target_embed_offset: None,
            source_embed_offset: None,
        }
    }
}

/// Tape handles produced by [`forward`].
pub struct ForwardVars {
    /// `[rows, target_width, vocab]`, raw (pre-softmax).
    pub logits: Var,
    pub target_embed: Var,
    pub source_embed: Option<Var>,
    pub source_rep: Option<Var>,
    /// Bound parameter leaves, aligned with [`Model::visit_params`] order.
    pub param_vars: Vec<Var>,
}

fn rows_width(rows: &[Vec<u32>], what: &str) -> Result<usize> {
    let Some(first) = rows.first() else {
        return Err(Error::Contract(format!("{}: empty batch", what)));
    };
    let w = first.len();
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::Shape(format!("{}: rows must share one positive width", what)));
    }
    Ok(w)
}

/// Teacher-forced forward pass over a batch. In training mode the Sub-BN
/// layers update their running statistics for `input.bucket` as a side
/// effect; inference mode leaves the model untouched.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    input: &BatchInput<'_, T>,
) -> Result<ForwardVars> {
    let rows = input.target_rows.len();
    let wt = rows_width(input.target_rows, "forward: target")?;
    let (src_specs, tgt_specs) =
        (model.config.block_specs(false), model.config.block_specs(true));
    let ctx = NormCtx {
        mode: input.mode.clone(),
        bucket: input.bucket,
        eps: DEFAULT_EPS,
        momentum: DEFAULT_MOMENTUM,
    };

    match (&model.source, input.source_rows) {
        (Some(_), Some(sr)) => {
            if sr.len() != rows || input.source_lengths.len() != rows {
                return Err(Error::Shape(format!(
                    "forward: {} source rows / {} lengths for {} target rows",
                    sr.len(),
                    input.source_lengths.len(),
                    rows
                )));
            }
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::Contract("forward: model expects source rows".into()))
        }
        (None, Some(_)) => {
            return Err(Error::Contract(
                "forward: language model got source rows".into(),
            ))
        }
    }

    // Bind every parameter first, in visit_params order, so callers can zip
    // leaf handles with the model's tensors.
    let vars_start = tape.len();
    let src_vars: Option<(Vec<Var>, Vec<AnyBlockVars>)> = model.source.as_ref().map(|net| {
        (net.embed.bind(tape), net.blocks.iter().map(|b| b.bind(tape)).collect())
    });
    let tgt_tables = model.target.embed.bind(tape);
    let tgt_blocks: Vec<AnyBlockVars> = model.target.blocks.iter().map(|b| b.bind(tape)).collect();
    let head = model
        .target
        .head
        .as_ref()
        .ok_or_else(|| Error::Contract("forward: target network lacks its head".into()))?
        .bind(tape);
    let param_vars: Vec<Var> = (vars_start..tape.len()).map(Var).collect();

    // Source network.
    let mut source_embed = None;
    let mut source_rep = None;
    if let (Some(net), Some(sr), Some((tables, block_vars))) =
        (&mut model.source, input.source_rows, src_vars)
    {
        let ws = rows_width(sr, "forward: source")?;
        let mut bags = Vec::with_capacity(rows * ws);
        for row in sr {
            bags.extend(lex.bags(row));
        }
        let mut e = embed_bag(tape, &tables, &bags, rows, ws)?;
        if let Some(off) = input.source_embed_offset {
            let o = tape.leaf(off);
            e = tape.add(e, o)?;
        }
        source_embed = Some(e);
        let mut x = e;
        for (i, (spec, bv)) in src_specs.iter().zip(&block_vars).enumerate() {
            x = block_forward(
                tape,
                x,
                spec,
                bv,
                &mut net.blocks[i],
                &ctx,
                &format!("source.block{}", i),
            )?;
        }
        source_rep = Some(x);
    }

    // Target network.
    let mut bags = Vec::with_capacity(rows * wt);
    for row in input.target_rows {
        bags.extend(lex.bags(row));
    }
    let mut e = embed_bag(tape, &tgt_tables, &bags, rows, wt)?;
    if let Some(off) = input.target_embed_offset {
        let o = tape.leaf(off);
        e = tape.add(e, o)?;
    }
    let target_embed = e;
    let mut x = match source_rep {
        Some(rep) => {
            let cond = cond_fit(tape, rep, input.source_lengths, wt)?;
            tape.add(target_embed, cond)?
        }
        None => target_embed,
    };
    for (i, (spec, bv)) in tgt_specs.iter().zip(&tgt_blocks).enumerate() {
        x = block_forward(
            tape,
            x,
            spec,
            bv,
            &mut model.target.blocks[i],
            &ctx,
            &format!("target.block{}", i),
        )?;
    }
    let logits = conv1d(
        tape,
        &Conv1dSpec::pointwise(model.config.outer(), model.config.vocab_size),
        head,
        x,
    )?;

    Ok(ForwardVars { logits, target_embed, source_embed, source_rep, param_vars })
}

/// Fits the source representation `[rows, ws, c]` to the target width:
/// column i of row r is copied when `i < min(ws, lengths[r])`, zero
/// otherwise. Gradients flow back into the copied columns, so the source
/// network trains through the conditioning.
fn cond_fit<T: Scalar>(
    tape: &mut Tape<T>,
    src_rep: Var,
    lengths: &[usize],
    target_width: usize,
) -> Result<Var> {
    let shape = tape.shape(src_rep).to_vec();
    let (rows, ws, c) = (shape[0], shape[1], shape[2]);
    if lengths.len() != rows {
        return Err(Error::Shape(format!(
            "cond_fit: {} lengths for {} rows",
            lengths.len(),
            rows
        )));
    }
    let src = tape.values(src_rep);
    let mut out = vec![T::zero(); rows * target_width * c];
    for r in 0..rows {
        let copy = lengths[r].min(ws).min(target_width);
        for i in 0..copy {
            out[(r * target_width + i) * c..(r * target_width + i + 1) * c]
                .copy_from_slice(&src[(r * ws + i) * c..(r * ws + i + 1) * c]);
        }
    }
    let rule = CondFitRule { lengths: lengths.to_vec(), src_width: ws, channels: c };
    Ok(tape.custom(&[src_rep], out, vec![rows, target_width, c], Box::new(rule)))
}

struct CondFitRule {
    lengths: Vec<usize>,
    src_width: usize,
    channels: usize,
}

impl<T: Scalar> BackwardRule<T> for CondFitRule {
    fn backward(
        &self,
        grad_out: &[T],
        output: TapeView<'_, T>,
        _inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let wt = output.shape[1];
        let c = self.channels;
        for (r, &len) in self.lengths.iter().enumerate() {
            let copy = len.min(self.src_width).min(wt);
            for i in 0..copy {
                let src_off = (r * self.src_width + i) * c;
                let out_off = (r * wt + i) * c;
                for ch in 0..c {
                    input_grads[0][src_off + ch] += grad_out[out_off + ch];
                }
            }
        }
    }
}

/// Log-softmax over the last axis of a `[rows, width, vocab]` tensor.
pub fn log_softmax3<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("log_softmax3: rank-3 input required, got {:?}", shape)));
    }
    let v = shape[2];
    let xs = tape.values(x);
    let mut out = vec![T::zero(); xs.len()];
    for (col_in, col_out) in xs.chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        log_softmax_col(col_in, col_out);
    }
    Ok(tape.custom(&[x], out, shape, Box::new(LogSoftmaxRule { vocab: v })))
}

/// dx = g - softmax * sum(g) per column, with softmax = exp(output).
struct LogSoftmaxRule {
    vocab: usize,
}

impl<T: Scalar> BackwardRule<T> for LogSoftmaxRule {
    fn backward(
        &self,
        grad_out: &[T],
        output: TapeView<'_, T>,
        _inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let v = self.vocab;
        for col in 0..output.values.len() / v {
            let g = &grad_out[col * v..(col + 1) * v];
            let y = &output.values[col * v..(col + 1) * v];
            let gsum: T = crate::kernels::sum_fixed(g);
            for i in 0..v {
                input_grads[0][col * v + i] += g[i] - y[i].exp() * gsum;
            }
        }
    }
}

/// Mean negative log-likelihood over picked positions of a log-probability
/// tensor: `-(1/n) * sum logp[row, pos, id]`. The picks define the loss
/// mask; PAD and context positions are simply never picked.
pub fn nll_mean<T: Scalar>(
    tape: &mut Tape<T>,
    logp: Var,
    picks: &[(usize, usize, u32)],
) -> Result<Var> {
    let shape = tape.shape(logp).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("nll_mean: rank-3 input required, got {:?}", shape)));
    }
    if picks.is_empty() {
        return Err(Error::Contract("nll_mean: no positions picked".into()));
    }
    let (w, v) = (shape[1], shape[2]);
    let values = tape.values(logp);
    let mut acc = 0.0f64;
    for &(r, p, id) in picks {
        if r >= shape[0] || p >= w || id as usize >= v {
            return Err(Error::Contract(format!(
                "nll_mean: pick ({}, {}, {}) outside {:?}",
                r, p, id, shape
            )));
        }
        acc += values[(r * w + p) * v + id as usize].to_f64().unwrap_or(f64::NAN);
    }
    let n = picks.len() as f64;
    let loss = T::from_f64_lossy(-acc / n);
    let rule = NllMeanRule { picks: picks.to_vec(), width: w, vocab: v, inv_n: 1.0 / n };
    Ok(tape.custom(&[logp], vec![loss], vec![1], Box::new(rule)))
}

struct NllMeanRule {
    picks: Vec<(usize, usize, u32)>,
    width: usize,
    vocab: usize,
    inv_n: f64,
}

impl<T: Scalar> BackwardRule<T> for NllMeanRule {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        _inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let scale = grad_out[0] * T::from_f64_lossy(self.inv_n);
        for &(r, p, id) in &self.picks {
            input_grads[0][(r * self.width + p) * self.vocab + id as usize] -= scale;
        }
    }
}

/// Resolution-preserving encoding of one source sequence, plus the true
/// length that bounds the conditioning columns.
#[derive(Debug, Clone)]
pub struct SourceRepresentation<T> {
    pub values: Vec<T>,
    pub width: usize,
    pub channels: usize,
    /// Unpadded source length; conditioning is zero from here on.
    pub length: usize,
    /// Statistics bucket the encoding ran under; decoding must match it.
    pub bucket: BucketId,
}

impl<T> SourceRepresentation<T> {
    pub fn column(&self, i: usize) -> Option<&[T]> {
        (i < self.width).then(|| &self.values[i * self.channels..(i + 1) * self.channels])
    }
}

/// Encodes a source sequence at its own width (inference mode; statistics
/// for `bucket` must exist). `padded_width` extends the input with PAD
/// tokens first, reproducing the training-time layout of a bucketed row;
/// the true length still bounds the conditioning columns.
pub fn encode_source<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    source_ids: &[u32],
    bucket: BucketId,
    padded_width: Option<usize>,
) -> Result<SourceRepresentation<T>> {
    if source_ids.is_empty() {
        return Err(Error::Contract("encode_source: empty source".into()));
    }
    if model.source.is_none() {
        return Err(Error::Contract("encode_source: model has no source network".into()));
    }
    let length = source_ids.len();
    let mut row = source_ids.to_vec();
    if let Some(w) = padded_width {
        if w < length {
            return Err(Error::Contract(format!(
                "encode_source: padded width {} below source length {}",
                w, length
            )));
        }
        row.resize(w, PAD_ID);
    }
    // The target side of this forward is a dummy single-EOS row; only the
    // source representation is read. Cheap: one column through the stack.
    let rows = [row];
    let tgt = [vec![EOS_ID]];
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        model,
        lex,
        &BatchInput {
            source_rows: Some(&rows),
            source_lengths: &[length],
            target_rows: &tgt,
            mode: BnMode::Infer,
            bucket,
            target_embed_offset: None,
            source_embed_offset: None,
        },
    )?;
    let rep = out.source_rep.expect("translation model produced a source representation");
    Ok(SourceRepresentation {
        values: tape.values(rep).to_vec(),
        width: rows[0].len(),
        channels: model.config.outer(),
        length,
        bucket,
    })
}

/// Total and per-token conditional log-likelihood (nats) of a target
/// sequence, teacher-forced. `target_ids` must end with EOS; the per-token
/// vector covers every target position, EOS included.
#[derive(Debug, Clone)]
pub struct Likelihood {
    pub total_nats: f64,
    pub per_token: Vec<f64>,
}

pub fn log_likelihood<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    source_ids: Option<&[u32]>,
    target_ids: &[u32],
    bucket: BucketId,
) -> Result<Likelihood> {
    if target_ids.is_empty() {
        return Err(Error::Contract("log_likelihood: empty target".into()));
    }
    if *target_ids.last().unwrap() != EOS_ID {
        return Err(Error::Contract("log_likelihood: target must end with EOS".into()));
    }
    let mut input_row = Vec::with_capacity(target_ids.len());
    input_row.push(EOS_ID);
    input_row.extend_from_slice(&target_ids[..target_ids.len() - 1]);
    let target_rows = [input_row];
    let source_rows = source_ids.map(|s| vec![s.to_vec()]);
    let lengths = source_ids.map(|s| vec![s.len()]).unwrap_or_default();

    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        model,
        lex,
        &BatchInput {
            source_rows: source_rows.as_deref(),
            source_lengths: &lengths,
            target_rows: &target_rows,
            mode: BnMode::Infer,
            bucket,
            target_embed_offset: None,
            source_embed_offset: None,
        },
    )?;
    let logp = log_softmax3(&mut tape, out.logits)?;
    let values = tape.values(logp);
    let v = model.config.vocab_size;
    let per_token: Vec<f64> = target_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| values[i * v + id as usize].to_f64().unwrap_or(f64::NAN))
        .collect();
    let total_nats = per_token.iter().sum();
    Ok(Likelihood { total_nats, per_token })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::Vocabulary;

    pub(crate) fn tiny_config(has_source: bool, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: 4,
            num_sets: 1,
            dilations_per_set: vec![1, 2],
            source_kernel: 3,
            target_kernel: 3,
            block_variant: BlockVariant::Relu,
            ngram_max_order: 1,
            ngram_table_sizes: vec![],
            has_source,
            eos_id: EOS_ID,
            pad_id: PAD_ID,
        }
    }

    fn vocab_ab() -> Vocabulary {
        Vocabulary::from_text("ab")
    }

    #[test]
    fn config_rejects_bad_dilation_schedules() {
        let mut c = tiny_config(false, 4);
        c.dilations_per_set = vec![2, 4];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.dilations_per_set = vec![1, 3];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.dilations_per_set = vec![1, 2, 4, 8, 16];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_deserialization_rejects_unknown_keys() {
        let mut json = serde_json::to_value(tiny_config(false, 4)).unwrap();
        json.as_object_mut().unwrap().insert("surprise".into(), 1.into());
        let err = serde_json::from_value::<ModelConfig>(json);
        assert!(err.is_err());
    }

    #[test]
    fn zeroed_head_gives_uniform_likelihood() {
        let vocab = vocab_ab();
        let mut model = Model::<f64>::init(tiny_config(false, vocab.size()), 0).unwrap();
        model.seed_identity_stats(BucketId::lm());
        if let Some(h) = &mut model.target.head {
            h.weight.values_mut().fill(0.0);
            h.bias.values_mut().fill(0.0);
        }
        let lex = Lexicon { vocab: &vocab, ngrams: None };
        let target: Vec<u32> = vec![2, 3, 2, EOS_ID];
        let ll = log_likelihood(&mut model, lex, None, &target, BucketId::lm()).unwrap();
        let expected = -(target.len() as f64) * (vocab.size() as f64).ln();
        assert!((ll.total_nats - expected).abs() < 1e-9, "{} vs {}", ll.total_nats, expected);
        assert_eq!(ll.per_token.len(), target.len());
        let sum: f64 = ll.per_token.iter().sum();
        assert!((sum - ll.total_nats).abs() < 1e-10);
    }

    #[test]
    fn encode_source_preserves_width() {
        let vocab = vocab_ab();
        let mut model = Model::<f64>::init(tiny_config(true, vocab.size()), 1).unwrap();
        let bucket = BucketId::new(25, 25);
        model.seed_identity_stats(bucket);
        let lex = Lexicon { vocab: &vocab, ngrams: None };
        let ids = vocab.encode(&"ab".repeat(9)[..17]).unwrap();
        assert_eq!(ids.len(), 17);
        let rep = encode_source(&mut model, lex, &ids, bucket, None).unwrap();
        assert_eq!(rep.width, 17);
        assert_eq!(rep.length, 17);
        assert_eq!(rep.channels, 8);
        assert_eq!(rep.values.len(), 17 * 8);
    }

    #[test]
    fn param_vars_align_with_visit_params() {
        let vocab = vocab_ab();
        let mut model = Model::<f64>::init(tiny_config(true, vocab.size()), 2).unwrap();
        let lex = Lexicon { vocab: &vocab, ngrams: None };
        let mut tape = Tape::new();
        let src = [vec![2u32, 3, 2]];
        let tgt = [vec![EOS_ID, 2, 3]];
        let out = forward(
            &mut tape,
            &mut model,
            lex,
            &BatchInput {
                source_rows: Some(&src),
                source_lengths: &[3],
                target_rows: &tgt,
                mode: BnMode::Train { aux_rows: 0..1 },
                bucket: BucketId::new(25, 25),
                target_embed_offset: None,
                source_embed_offset: None,
            },
        )
        .unwrap();
        let named = model.visit_params();
        assert_eq!(named.len(), out.param_vars.len());
        let mut seen = std::collections::BTreeSet::new();
        for ((name, tensor), var) in named.iter().zip(&out.param_vars) {
            assert!(seen.insert(name.clone()), "duplicate parameter name {}", name);
            assert_eq!(tape.shape(*var), tensor.shape(), "shape mismatch at {}", name);
            assert_eq!(tape.values(*var), tensor.values(), "value mismatch at {}", name);
        }
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let shape = [2usize, 3, 4];
        let x0 = Tensor::<f64>::rand_uniform(&shape, -2.0, 2.0, &mut rng).with_requires_grad(true);
        let picks = vec![(0usize, 0usize, 1u32), (0, 2, 3), (1, 1, 0)];
        let eval = |t: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(t);
            let lp = log_softmax3(&mut tape, x).unwrap();
            let loss = nll_mean(&mut tape, lp, &picks).unwrap();
            tape.values(loss)[0]
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let lp = log_softmax3(&mut tape, x).unwrap();
        // Probability normalization: every column of exp(logp) sums to 1.
        for col in tape.values(lp).chunks_exact(4) {
            let s: f64 = col.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let loss = nll_mean(&mut tape, lp, &picks).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let mut t = x0;
        let h = 1e-6;
        for i in 0..t.numel() {
            let orig = t.values()[i];
            t.values_mut()[i] = orig + h;
            let up = eval(&t);
            t.values_mut()[i] = orig - h;
            let down = eval(&t);
            t.values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (analytic[i] - fd).abs() / (fd.abs() + 1e-8) < 1e-4,
                "slot {}: {} vs {}",
                i,
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn cond_fit_copies_and_zeroes() {
        let mut tape = Tape::<f64>::new();
        // rows=2, ws=3, c=2; lengths 2 and 3; target width 4.
        let src = Tensor::from_vec(
            &[2, 3, 2],
            (1..=12).map(|v| v as f64).collect(),
        )
        .unwrap()
        .with_requires_grad(true);
        let s = tape.leaf(&src);
        let out = cond_fit(&mut tape, s, &[2, 3], 4).unwrap();
        let v = tape.values(out);
        assert_eq!(v.len(), 2 * 4 * 2);
        // Row 0: columns 0,1 copied, 2,3 zero (length 2 < ws).
        assert_eq!(&v[0..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&v[4..8], &[0.0; 4]);
        // Row 1: columns 0..3 copied, 3 zero.
        assert_eq!(&v[8..14], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(&v[14..16], &[0.0; 2]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let g = tape.grad(s).unwrap();
        let expected = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(g, &expected);
    }

    #[test]
    fn lm_mode_rejects_source_rows() {
        let vocab = vocab_ab();
        let mut model = Model::<f64>::init(tiny_config(false, vocab.size()), 0).unwrap();
        let lex = Lexicon { vocab: &vocab, ngrams: None };
        let mut tape = Tape::new();
        let rows = [vec![EOS_ID, 2]];
        let out = forward(
            &mut tape,
            &mut model,
            lex,
            &BatchInput {
                source_rows: Some(&rows),
                source_lengths: &[2],
                target_rows: &rows,
                mode: BnMode::Infer,
                bucket: BucketId::lm(),
                target_embed_offset: None,
                source_embed_offset: None,
            },
        );
        assert!(matches!(out, Err(Error::Contract(_))));
    }
}
