//! Optimization: Adam with decoupled weight decay, windowed language-model
//! training, and bucketed translation training with main/auxiliary batch
//! halves feeding Sub-BN.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::bucket::{bucketize, pad_and_encode, BucketId};
use crate::data::vocab::{EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::layers::norm::BnMode;
use crate::network::{forward, log_softmax3, nll_mean, BatchInput, Lexicon, Model};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Optional global-norm gradient clip; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// First/second moment buffers keyed by parameter name, plus the shared
/// step count. Buffers are allocated on first sight of a parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { moments: BTreeMap::new(), step: 0 }
    }
}

/// One Adam step over named parameters and their gradients (aligned
/// lists; `None` gradients count as zero). The whole step aborts before
/// touching any parameter if a gradient is non-finite.
///
/// Update, with bias-corrected moments and the decay decoupled from the
/// adaptive scaling:
///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
///   theta -= lr * mhat / (sqrt(vhat) + eps) + lr * wd * theta
pub fn adam_step<T: Scalar>(
    cfg: &AdamConfig,
    state: &mut AdamState<T>,
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Option<&[T]>],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, tensor), grad) in params.iter().zip(grads) {
        if let Some(g) = grad {
            if g.len() != tensor.numel() {
                return Err(Error::Shape(format!(
                    "adam_step: gradient of {} values for {} ({} elements)",
                    g.len(),
                    name,
                    tensor.numel()
                )));
            }
            if g.iter().any(|v| !v.to_f64().map(f64::is_finite).unwrap_or(false)) {
                return Err(Error::NonFiniteGrad { param: name.clone(), step: state.step + 1 });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let clip_scale = match cfg.clip_norm {
        Some(c) if c > 0.0 => {
            let mut sq = 0.0f64;
            for g in grads.iter().flatten() {
                for v in g.iter() {
                    let f = v.to_f64().unwrap_or(0.0);
                    sq += f * f;
                }
            }
            let norm = sq.sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        _ => 1.0,
    };

    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one_m_b1 = T::from_f64_lossy(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64_lossy(1.0 - cfg.beta2);
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.epsilon);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let clip = T::from_f64_lossy(clip_scale);

    for ((name, tensor), grad) in params.iter_mut().zip(grads) {
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); tensor.numel()], vec![T::zero(); tensor.numel()]));
        if m.len() != tensor.numel() {
            return Err(Error::Shape(format!(
                "adam_step: moment buffer for {} holds {} values, parameter has {}",
                name,
                m.len(),
                tensor.numel()
            )));
        }
        let theta = tensor.values_mut();
        for i in 0..theta.len() {
            let g = grad.map(|g| g[i] * clip).unwrap_or_else(T::zero);
            m[i] = b1 * m[i] + one_m_b1 * g;
            v[i] = b2 * v[i] + one_m_b2 * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta[i] = theta[i] - lr * mhat / (vhat.sqrt() + eps) - lr * wd * theta[i];
        }
    }
    Ok(())
}

/// Language-model window layout: a context prefix the loss never covers
/// and a predicted suffix it does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LMWindowSpec {
    pub total_len: usize,
    pub context_len: usize,
    pub predict_len: usize,
}

impl LMWindowSpec {
    pub fn new(total_len: usize, context_len: usize, predict_len: usize) -> Result<Self> {
        let s = LMWindowSpec { total_len, context_len, predict_len };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len + self.predict_len != self.total_len || self.predict_len == 0 {
            return Err(Error::Config(format!(
                "window {}+{} must equal total {} with a nonempty prediction span",
                self.context_len, self.predict_len, self.total_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: u64,
    pub loss_nats: f64,
    pub bits_per_char: f64,
}

/// Per-step training loss, exportable as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn push(&mut self, step: u64, loss_nats: f64) {
        self.entries.push(TraceEntry {
            step,
            loss_nats,
            bits_per_char: loss_nats / std::f64::consts::LN_2,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_nats,bits_per_char\n");
        for e in &self.entries {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", e.step, e.loss_nats, e.bits_per_char));
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Shared knobs of both training loops.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub steps: u64,
    pub seed: u64,
    pub batch_main: usize,
    pub batch_aux: usize,
    pub adam: AdamConfig,
}

impl TrainOpts {
    fn validate(&self) -> Result<()> {
        if self.batch_main == 0 || self.batch_aux == 0 {
            return Err(Error::Config(
                "both batch halves (main and auxiliary) must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

fn batch_loss<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    input: &BatchInput<'_, T>,
    picks: &[(usize, usize, u32)],
    step: u64,
) -> Result<(Tape<T>, crate::tape::Var, Vec<crate::tape::Var>, f64)> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, lex, input)?;
    let logp = log_softmax3(&mut tape, out.logits)?;
    let loss = nll_mean(&mut tape, logp, picks)?;
    let value = tape.values(loss)[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    Ok((tape, loss, out.param_vars, value))
}

fn optimize<T: Scalar>(
    model: &mut Model<T>,
    tape: &mut Tape<T>,
    loss: crate::tape::Var,
    param_vars: &[crate::tape::Var],
    cfg: &AdamConfig,
    state: &mut AdamState<T>,
) -> Result<()> {
    tape.backward(loss)?;
    let grads: Vec<Option<Vec<T>>> =
        param_vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect();
    let mut params = model.visit_params();
    let grad_slices: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
    adam_step(cfg, state, &mut params, &grad_slices)
}

/// Windowed language-model training: each step samples main and auxiliary
/// rows of `window.total_len` characters from the corpus, and the loss
/// covers the final `predict_len` positions of the main rows only.
pub fn train_lm<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    corpus: &str,
    window: &LMWindowSpec,
    opts: &TrainOpts,
    mut progress: impl FnMut(u64, f64),
) -> Result<LossTrace> {
    window.validate()?;
    opts.validate()?;
    if model.config.has_source {
        return Err(Error::Config("train_lm: model is not in language-model mode".into()));
    }
    let ids = lex.vocab.encode(corpus)?;
    if ids.len() < window.total_len {
        return Err(Error::Config(format!(
            "corpus of {} characters is shorter than one {}-character window",
            ids.len(),
            window.total_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = AdamState::new();
    let mut trace = LossTrace::default();
    let rows_total = opts.batch_main + opts.batch_aux;
    let max_start = ids.len() - window.total_len;

    for step in 0..opts.steps {
        let mut rows = Vec::with_capacity(rows_total);
        for _ in 0..rows_total {
            let start = rng.random_range(0..=max_start);
            let w = &ids[start..start + window.total_len];
            let mut input = Vec::with_capacity(window.total_len);
            input.push(EOS_ID);
            input.extend_from_slice(&w[..window.total_len - 1]);
            rows.push((input, w));
        }
        let mut picks = Vec::with_capacity(opts.batch_main * window.predict_len);
        for (r, (_, w)) in rows.iter().enumerate().take(opts.batch_main) {
            for pos in window.context_len..window.total_len {
                picks.push((r, pos, w[pos]));
            }
        }
        let inputs: Vec<Vec<u32>> = rows.iter().map(|(i, _)| i.clone()).collect();
        let input = BatchInput::lm(
            &inputs,
            BnMode::Train { aux_rows: opts.batch_main..rows_total },
        );
        let (mut tape, loss, param_vars, value) = batch_loss(model, lex, &input, &picks, step)?;
        optimize(model, &mut tape, loss, &param_vars, &opts.adam, &mut state)?;
        trace.push(step, value);
        progress(step, value);
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct MtTrainReport {
    pub trace: LossTrace,
    /// Buckets with too few pairs for one main+aux batch.
    pub skipped_buckets: usize,
    /// Pairs dropped during bucketing (an empty side).
    pub skipped_pairs: usize,
}

/// k distinct values from 0..n by partial Fisher-Yates; deterministic
/// under the caller's seeded generator.
fn sample_distinct(rng: &mut ChaCha8Rng, pool: &mut [usize], k: usize) -> Vec<usize> {
    let n = pool.len();
    debug_assert!(k <= n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Bucketed translation training. Every step draws one bucket (weighted by
/// its pair count), samples disjoint main and auxiliary rows from it, and
/// takes the loss over all non-PAD target positions of the main rows.
pub fn train_mt<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    pairs: &[(String, String)],
    quantum: usize,
    opts: &TrainOpts,
    mut progress: impl FnMut(u64, f64),
) -> Result<MtTrainReport> {
    opts.validate()?;
    if !model.config.has_source {
        return Err(Error::Config("train_mt: model lacks a source network".into()));
    }
    let (buckets, skipped_pairs) = bucketize(pairs, quantum)?;
    let rows_total = opts.batch_main + opts.batch_aux;
    let eligible: Vec<_> = buckets.iter().filter(|b| b.pairs.len() >= rows_total).collect();
    let skipped_buckets = buckets.len() - eligible.len();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no bucket holds the {} pairs one batch needs (main {} + aux {})",
            rows_total, opts.batch_main, opts.batch_aux
        )));
    }
    // Pre-encode every eligible bucket once.
    struct Encoded {
        id: BucketId,
        sources: Vec<Vec<u32>>,
        lengths: Vec<usize>,
        targets: Vec<Vec<u32>>,
    }
    let mut encoded = Vec::with_capacity(eligible.len());
    for b in &eligible {
        let mut sources = Vec::with_capacity(b.pairs.len());
        let mut lengths = Vec::with_capacity(b.pairs.len());
        let mut targets = Vec::with_capacity(b.pairs.len());
        for &pi in &b.pairs {
            let (src, tgt) = pad_and_encode(lex.vocab, &pairs[pi].0, &pairs[pi].1, b.id)?;
            lengths.push(pairs[pi].0.chars().count());
            sources.push(src);
            targets.push(tgt);
        }
        encoded.push(Encoded { id: b.id, sources, lengths, targets });
    }
    let weights: Vec<usize> = encoded.iter().map(|e| e.sources.len()).collect();
    let total_weight: usize = weights.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = AdamState::new();
    let mut trace = LossTrace::default();
    let mut pools: Vec<Vec<usize>> =
        encoded.iter().map(|e| (0..e.sources.len()).collect()).collect();

    for step in 0..opts.steps {
        let mut pickw = rng.random_range(0..total_weight);
        let mut bi = 0;
        for (i, w) in weights.iter().enumerate() {
            if pickw < *w {
                bi = i;
                break;
            }
            pickw -= w;
        }
        let e = &encoded[bi];
        let chosen = sample_distinct(&mut rng, &mut pools[bi], rows_total);

        let mut src_rows = Vec::with_capacity(rows_total);
        let mut lengths = Vec::with_capacity(rows_total);
        let mut tgt_inputs = Vec::with_capacity(rows_total);
        let mut picks = Vec::new();
        for (r, &idx) in chosen.iter().enumerate() {
            src_rows.push(e.sources[idx].clone());
            lengths.push(e.lengths[idx]);
            let tgt = &e.targets[idx];
            let mut input = Vec::with_capacity(tgt.len());
            input.push(EOS_ID);
            input.extend_from_slice(&tgt[..tgt.len() - 1]);
            tgt_inputs.push(input);
            if r < opts.batch_main {
                for (pos, &tok) in tgt.iter().enumerate() {
                    if tok != PAD_ID {
                        picks.push((r, pos, tok));
                    }
                }
            }
        }
        let input = BatchInput {
            source_rows: Some(&src_rows),
            source_lengths: &lengths,
            target_rows: &tgt_inputs,
            mode: BnMode::Train { aux_rows: opts.batch_main..rows_total },
            bucket: e.id,
            target_embed_offset: None,
            source_embed_offset: None,
        };
        let (mut tape, loss, param_vars, value) = batch_loss(model, lex, &input, &picks, step)?;
        optimize(model, &mut tape, loss, &param_vars, &opts.adam, &mut state)?;
        trace.push(step, value);
        progress(step, value);
    }
    Ok(MtTrainReport { trace, skipped_buckets, skipped_pairs })
}
