//! Beam search over target-length intervals with average-likelihood
//! ranking, plus temperature sampling for the language-model mode.
//!
//! Each interval carries its own normalization statistics, so the source is
//! encoded once per interval and hypotheses never outgrow the interval's
//! padded length. Finished hypotheses from all intervals are pooled and
//! ranked by average per-token log-likelihood with the EOS counted.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::bucket::{padded_len, BucketId};
use crate::data::vocab::EOS_ID;
use crate::error::{Error, Result};
use crate::kernels::log_softmax_col;
use crate::network::stepper::{argmax, TargetState};
use crate::network::{encode_source, Lexicon, Model, SourceRepresentation};
use crate::scalar::Scalar;

pub const DEFAULT_BEAM_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Step budget per interval: positions, so a finished hypothesis holds
    /// at most `max_len` tokens counting its EOS.
    pub max_len: usize,
    /// Padded target lengths to search; each needs its own statistics.
    pub length_intervals: Vec<usize>,
}

impl BeamConfig {
    pub fn new(beam_width: usize, max_len: usize, length_intervals: Vec<usize>) -> Self {
        BeamConfig { beam_width, max_len, length_intervals }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Contract(
                "beam search: width and step budget must be at least 1".into(),
            ));
        }
        if self.length_intervals.is_empty() || self.length_intervals.contains(&0) {
            return Err(Error::Contract(
                "beam search: need at least one nonzero length interval".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeHypothesis {
    /// Token ids; the terminating EOS is included when finished.
    pub tokens: Vec<u32>,
    pub cum_logprob: f64,
    pub finished: bool,
    /// Padded target length whose statistics conditioned this hypothesis.
    pub interval: usize,
}

impl DecodeHypothesis {
    /// Average per-token log-likelihood; the EOS counts as a token.
    pub fn avg_logprob(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.cum_logprob / self.tokens.len() as f64
        }
    }

    /// Tokens without the EOS terminator.
    pub fn content(&self) -> &[u32] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// One autoregressive decoding column at a time, abstracted so the search
/// can run against both the real network and rigged table models.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> u32;
    /// Fresh state for an interval (a padded target length).
    fn start(&self, interval: usize) -> Result<Self::State>;
    /// Log-probabilities over the vocabulary at the next position.
    fn step(&self, state: &mut Self::State) -> Result<Vec<f64>>;
    fn push(&self, state: &mut Self::State, token: u32) -> Result<()>;
}

struct Live<S> {
    state: S,
    tokens: Vec<u32>,
    cum: f64,
}

fn run_interval<M: StepModel>(
    model: &M,
    interval: usize,
    cfg: &BeamConfig,
    finished: &mut Vec<DecodeHypothesis>,
    unfinished: &mut Vec<DecodeHypothesis>,
) -> Result<()> {
    let vocab = model.vocab_size();
    let eos = model.eos_id();
    // A hypothesis must fit EOS and all inside the interval's padded
    // length; when the interval is roomier than the step budget, the beam
    // truncates instead and survivors stay unfinished.
    let (free_steps, forced_eos) = if interval <= cfg.max_len {
        (interval - 1, true)
    } else {
        (cfg.max_len, false)
    };

    let mut live =
        vec![Live { state: model.start(interval)?, tokens: Vec::new(), cum: 0.0 }];
    for _ in 0..free_steps {
        let mut logps = Vec::with_capacity(live.len());
        for h in live.iter_mut() {
            let lp = model.step(&mut h.state)?;
            if lp.len() != vocab {
                return Err(Error::Contract(format!(
                    "beam search: {} log-probs for a {}-token vocabulary",
                    lp.len(),
                    vocab
                )));
            }
            logps.push(lp);
        }
        let mut cands: Vec<(usize, u32, f64)> = Vec::with_capacity(live.len() * vocab);
        for (hi, lp) in logps.iter().enumerate() {
            for (t, &l) in lp.iter().enumerate() {
                cands.push((hi, t as u32, live[hi].cum + l));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.beam_width);

        let mut next = Vec::with_capacity(cands.len());
        for (hi, tok, cum) in cands {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            if tok == eos {
                finished.push(DecodeHypothesis { tokens, cum_logprob: cum, finished: true, interval });
            } else {
                let mut state = live[hi].state.clone();
                model.push(&mut state, tok)?;
                next.push(Live { state, tokens, cum });
            }
        }
        live = next;
        if live.is_empty() {
            return Ok(());
        }
    }
    for mut h in live {
        if forced_eos {
            // Last admissible position: only EOS keeps the hypothesis
            // inside the interval.
            let lp = model.step(&mut h.state)?;
            h.tokens.push(eos);
            finished.push(DecodeHypothesis {
                tokens: h.tokens,
                cum_logprob: h.cum + lp[eos as usize],
                finished: true,
                interval,
            });
        } else {
            unfinished.push(DecodeHypothesis {
                tokens: h.tokens,
                cum_logprob: h.cum,
                finished: false,
                interval,
            });
        }
    }
    Ok(())
}

fn rank(mut pool: Vec<DecodeHypothesis>) -> Vec<DecodeHypothesis> {
    pool.sort_by(|a, b| {
        b.avg_logprob()
            .total_cmp(&a.avg_logprob())
            .then_with(|| a.tokens.cmp(&b.tokens))
            .then(a.interval.cmp(&b.interval))
    });
    pool
}

/// Width-limited beam per interval, then one pooled ranking. When nothing
/// finishes anywhere, the truncated survivors are ranked instead, flagged.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Vec<DecodeHypothesis>> {
    cfg.validate()?;
    let mut finished = Vec::new();
    let mut unfinished = Vec::new();
    for &interval in &cfg.length_intervals {
        run_interval(model, interval, cfg, &mut finished, &mut unfinished)?;
    }
    if !finished.is_empty() {
        Ok(rank(finished))
    } else if !unfinished.is_empty() {
        Ok(rank(unfinished))
    } else {
        Err(Error::Contract("beam search: no hypothesis survived any interval".into()))
    }
}

/// The real translation model behind the `StepModel` interface: the source
/// is encoded once per interval up front (statistics are per-bucket), and
/// states fork cheaply during the search.
pub struct MtStepper<'m, T: Scalar> {
    model: &'m Model<T>,
    lex: Lexicon<'m>,
    reps: BTreeMap<usize, Rc<SourceRepresentation<T>>>,
    zeros: Vec<T>,
}

#[derive(Clone)]
pub struct MtState<'m, T: Scalar> {
    target: TargetState<'m, T>,
    rep: Rc<SourceRepresentation<T>>,
}

impl<'m, T: Scalar> MtStepper<'m, T> {
    pub fn prepare(
        model: &'m mut Model<T>,
        lex: Lexicon<'m>,
        source_ids: &[u32],
        intervals: &[usize],
        quantum: usize,
    ) -> Result<Self> {
        if source_ids.is_empty() {
            return Err(Error::Contract("translate: source is empty".into()));
        }
        if intervals.is_empty() {
            return Err(Error::Contract("translate: no target-length intervals".into()));
        }
        let ps = padded_len(source_ids.len(), quantum);
        let mut reps = BTreeMap::new();
        for &iv in intervals {
            let bucket = BucketId::new(ps as u32, iv as u32);
            let rep = encode_source(model, lex, source_ids, bucket, Some(ps))?;
            reps.insert(iv, Rc::new(rep));
        }
        let zeros = vec![T::zero(); model.config.outer()];
        let model: &'m Model<T> = model;
        Ok(MtStepper { model, lex, reps, zeros })
    }

    pub fn source_rep(&self, interval: usize) -> Option<&SourceRepresentation<T>> {
        self.reps.get(&interval).map(|r| r.as_ref())
    }
}

impl<'m, T: Scalar> StepModel for MtStepper<'m, T> {
    type State = MtState<'m, T>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn start(&self, interval: usize) -> Result<Self::State> {
        let rep = self.reps.get(&interval).ok_or_else(|| {
            Error::Contract(format!("translate: interval {} was not prepared", interval))
        })?;
        let target = TargetState::new(self.model, self.lex, rep.bucket)?;
        Ok(MtState { target, rep: Rc::clone(rep) })
    }

    fn step(&self, state: &mut Self::State) -> Result<Vec<f64>> {
        let pos = state.target.position();
        let cond = if pos < state.rep.length {
            state.rep.column(pos).expect("conditioning column inside the source")
        } else {
            &self.zeros
        };
        let logits = state.target.step(Some(cond))?;
        let mut logp = vec![T::zero(); logits.len()];
        log_softmax_col(&logits, &mut logp);
        Ok(logp.iter().map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY)).collect())
    }

    fn push(&self, state: &mut Self::State, token: u32) -> Result<()> {
        state.target.push(token)
    }
}

/// Target-length intervals the checkpoint can decode a source of this
/// length under: every stored statistics bucket matching the source's
/// padded length.
pub fn decode_intervals<T: Scalar>(
    model: &Model<T>,
    source_len: usize,
    quantum: usize,
) -> Vec<usize> {
    let ps = padded_len(source_len, quantum) as u32;
    let mut out: Vec<usize> = model
        .stat_buckets()
        .into_iter()
        .filter(|b| b.source == ps)
        .map(|b| b.target as usize)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Encode-and-search in one call.
pub fn beam_translate<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    source_ids: &[u32],
    quantum: usize,
    cfg: &BeamConfig,
) -> Result<Vec<DecodeHypothesis>> {
    cfg.validate()?;
    let stepper = MtStepper::prepare(model, lex, source_ids, &cfg.length_intervals, quantum)?;
    beam_search(&stepper, cfg)
}

/// Autoregressive sampling from the language model. The prime tokens are
/// fed through first; generation stops at EOS or after `length` tokens.
/// Temperatures below 1e-4 collapse to argmax.
pub fn sample_lm<T: Scalar>(
    model: &Model<T>,
    lex: Lexicon<'_>,
    prime: &[u32],
    length: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::Contract(format!(
            "sample: temperature must be nonnegative, got {}",
            temperature
        )));
    }
    let mut state = TargetState::new(model, lex, BucketId::lm())?;
    for &tok in prime {
        state.step(None)?;
        state.push(tok)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let logits = state.step(None)?;
        let tok = if temperature < 1e-4 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY) / temperature)
                .collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&l| (l - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = exps.len() - 1;
            for (i, &e) in exps.iter().enumerate() {
                acc += e;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick as u32
        };
        if tok == EOS_ID {
            break;
        }
        state.push(tok)?;
        out.push(tok);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{Vocabulary, PAD_ID};
    use crate::layers::blocks::BlockVariant;
    use crate::network::stepper::unfold;
    use crate::network::ModelConfig;

    /// Prefix-conditioned categorical table; log-probs derived from a
    /// little integer hash so every prefix gets a fixed distribution.
    struct TableModel {
        vocab: usize,
        eos: u32,
        overrides: BTreeMap<Vec<u32>, Vec<f64>>,
    }

    impl TableModel {
        fn hashed(vocab: usize, eos: u32) -> Self {
            TableModel { vocab, eos, overrides: BTreeMap::new() }
        }

        fn weights(&self, prefix: &[u32]) -> Vec<f64> {
            if let Some(p) = self.overrides.get(prefix) {
                return p.clone();
            }
            let mut h: u64 = 0xcbf29ce484222325;
            for &t in prefix {
                h = (h ^ (t as u64 + 1)).wrapping_mul(0x100000001b3);
            }
            let mut w = Vec::with_capacity(self.vocab);
            for t in 0..self.vocab {
                let ht = (h ^ (t as u64).wrapping_mul(0x9e3779b97f4a7c15)) >> 17;
                let mut weight = (ht % 97 + 3) as f64;
                if prefix.is_empty() && t as u32 == self.eos {
                    // An immediate EOS would make the empty hypothesis a
                    // contender; keep it out of the running.
                    weight = 1e-6;
                }
                w.push(weight);
            }
            w
        }

        fn logp(&self, prefix: &[u32]) -> Vec<f64> {
            let w = self.weights(prefix);
            let total: f64 = w.iter().sum();
            w.iter().map(|&x| (x / total).ln()).collect()
        }
    }

    impl StepModel for TableModel {
        type State = Vec<u32>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn eos_id(&self) -> u32 {
            self.eos
        }

        fn start(&self, _interval: usize) -> Result<Self::State> {
            Ok(Vec::new())
        }

        fn step(&self, state: &mut Self::State) -> Result<Vec<f64>> {
            Ok(self.logp(state))
        }

        fn push(&self, state: &mut Self::State, token: u32) -> Result<()> {
            state.push(token);
            Ok(())
        }
    }

    /// Every EOS-terminated sequence of at most `max_positions` tokens
    /// (EOS included), scored autoregressively.
    fn enumerate_finished(model: &TableModel, max_positions: usize) -> Vec<DecodeHypothesis> {
        let content: Vec<u32> =
            (0..model.vocab as u32).filter(|&t| t != model.eos).collect();
        let mut out = Vec::new();
        let mut stack: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        while let Some((prefix, cum)) = stack.pop() {
            let lp = model.logp(&prefix);
            let mut tokens = prefix.clone();
            tokens.push(model.eos);
            out.push(DecodeHypothesis {
                tokens,
                cum_logprob: cum + lp[model.eos as usize],
                finished: true,
                interval: max_positions,
            });
            if prefix.len() + 1 < max_positions {
                for &t in &content {
                    let mut next = prefix.clone();
                    next.push(t);
                    stack.push((next, cum + lp[t as usize]));
                }
            }
        }
        rank(out)
    }

    #[test]
    fn exhaustive_width_agrees_with_brute_force() {
        let model = TableModel::hashed(3, 2);
        // 3 + 9 + 27 token strings of length 1..=3 exist over a 3-symbol
        // alphabet; the well-formed decodes among them are the
        // EOS-terminated ones this enumeration walks.
        let brute = enumerate_finished(&model, 3);
        assert_eq!(brute.len(), 7);
        let cfg = BeamConfig::new(27, 3, vec![3]);
        let beam = beam_search(&model, &cfg).unwrap();
        assert_eq!(beam.len(), brute.len());
        assert_eq!(beam[0].tokens, brute[0].tokens);
        assert!((beam[0].cum_logprob - brute[0].cum_logprob).abs() < 1e-12);
        for (b, e) in beam.iter().zip(&brute) {
            assert_eq!(b.tokens, e.tokens);
        }
    }

    #[test]
    fn average_ranking_prefers_the_better_per_token_hypothesis() {
        // Two-token hypothesis [0, EOS]: p = 0.399 * 0.4. Five-token
        // hypothesis [1,1,1,1,EOS]: p = 0.6^5. The longer one has the
        // higher average but the lower total, so average ranking must put
        // it first where total ranking would not.
        let mut model = TableModel::hashed(3, 2);
        model.overrides.insert(vec![], vec![0.399, 0.6, 0.001]);
        model.overrides.insert(vec![0], vec![0.3, 0.3, 0.4]);
        for len in 1..=3 {
            model.overrides.insert(vec![1u32; len], vec![0.2, 0.6, 0.2]);
        }
        model.overrides.insert(vec![1u32; 4], vec![0.2, 0.2, 0.6]);
        let cfg = BeamConfig::new(8, 10, vec![12]);
        let ranked = beam_search(&model, &cfg).unwrap();
        let top = &ranked[0];
        assert_eq!(top.tokens, vec![1, 1, 1, 1, 2]);
        let short = ranked.iter().find(|h| h.tokens == vec![0, 2]).unwrap();
        assert!(top.avg_logprob() > short.avg_logprob());
        assert!(top.cum_logprob < short.cum_logprob, "discrimination needs a lower total");
    }

    #[test]
    fn ranking_does_not_depend_on_interval_order() {
        let model = TableModel::hashed(4, 0);
        let a = beam_search(&model, &BeamConfig::new(3, 8, vec![4, 9])).unwrap();
        let b = beam_search(&model, &BeamConfig::new(3, 8, vec![9, 4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wider_beams_never_rank_a_worse_top_hypothesis() {
        let model = TableModel::hashed(4, 1);
        let mut prev = f64::NEG_INFINITY;
        for width in 1..=30 {
            let ranked =
                beam_search(&model, &BeamConfig::new(width, 5, vec![5])).unwrap();
            let top = ranked[0].avg_logprob();
            assert!(
                top >= prev - 1e-12,
                "width {} top {} dropped below {}",
                width,
                top,
                prev
            );
            prev = prev.max(top);
        }
    }

    #[test]
    fn every_finished_hypothesis_ends_in_eos() {
        let model = TableModel::hashed(3, 2);
        let ranked = beam_search(&model, &BeamConfig::new(4, 6, vec![4, 6])).unwrap();
        for h in &ranked {
            assert!(h.finished);
            assert_eq!(*h.tokens.last().unwrap(), 2);
            assert_eq!(h.content().len(), h.tokens.len() - 1);
        }
    }

    fn mt_config(vocab_size: usize) -> ModelConfig {
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
            has_source: true,
            eos_id: EOS_ID,
            pad_id: PAD_ID,
        }
    }

    #[test]
    fn beam_width_one_reproduces_greedy_unfolding() {
        let vocab = Vocabulary::from_text("abcd");
        let mut model = Model::<f64>::init(mt_config(vocab.size()), 11).unwrap();
        let quantum = 8;
        let source_ids = vocab.encode("cabd").unwrap();
        let interval = 16;
        model.seed_identity_stats(BucketId::new(8, 16));
        let max_len = 9; // below interval - 1, so truncation matches too

        let mut model2 = model.clone();
        let cfg = BeamConfig::new(1, max_len, vec![interval]);
        let ranked = beam_translate(&mut model2, lexi(&vocab), &source_ids, quantum, &cfg).unwrap();
        let top = &ranked[0];

        let rep = encode_source(
            &mut model,
            lexi(&vocab),
            &source_ids,
            BucketId::new(8, interval as u32),
            Some(8),
        )
        .unwrap();
        let greedy = unfold(&model, lexi(&vocab), &rep, max_len).unwrap();
        assert_eq!(top.content(), greedy.tokens.as_slice());
        assert_eq!(top.finished, !greedy.truncated);
    }

    fn lexi(vocab: &Vocabulary) -> Lexicon<'_> {
        Lexicon { vocab, ngrams: None }
    }

    #[test]
    fn unprepared_statistics_fail_early() {
        let vocab = Vocabulary::from_text("ab");
        let mut model = Model::<f32>::init(mt_config(vocab.size()), 0).unwrap();
        let ids = vocab.encode("ab").unwrap();
        let cfg = BeamConfig::new(2, 5, vec![8]);
        let err = beam_translate(&mut model, lexi(&vocab), &ids, 8, &cfg);
        assert!(matches!(err, Err(Error::MissingStats { .. })));
    }

    #[test]
    fn interval_listing_follows_stored_buckets() {
        let vocab = Vocabulary::from_text("ab");
        let mut model = Model::<f32>::init(mt_config(vocab.size()), 0).unwrap();
        for b in [BucketId::new(8, 8), BucketId::new(8, 16), BucketId::new(16, 8)] {
            model.seed_identity_stats(b);
        }
        assert_eq!(decode_intervals(&model, 3, 8), vec![8, 16]);
        assert_eq!(decode_intervals(&model, 9, 8), vec![8]);
        assert_eq!(decode_intervals(&model, 20, 8), Vec::<usize>::new());
    }

    fn lm_config(vocab_size: usize) -> ModelConfig {
        ModelConfig { has_source: false, ..mt_config(vocab_size) }
    }

    /// Zero every parameter and plant fixed head biases, so the logits are
    /// exactly the bias vector at every position.
    fn constant_logit_model(vocab: &Vocabulary, bias: &[f64]) -> Model<f64> {
        let mut model = Model::<f64>::init(lm_config(vocab.size()), 0).unwrap();
        for (_, t) in model.visit_params() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for (name, t) in model.visit_params() {
            if name == "target.head.bias" {
                t.values_mut().copy_from_slice(bias);
            }
        }
        model.seed_identity_stats(BucketId::lm());
        model
    }

    #[test]
    fn near_zero_temperature_is_argmax() {
        let vocab = Vocabulary::from_text("abc");
        let mut bias = vec![-40.0; vocab.size()];
        let b = vocab.encode("b").unwrap()[0] as usize;
        bias[b] = 2.0;
        let model = constant_logit_model(&vocab, &bias);
        let out = sample_lm(&model, lexi(&vocab), &[], 12, 0.0, 123).unwrap();
        assert_eq!(out, vec![b as u32; 12]);
        let out2 = sample_lm(&model, lexi(&vocab), &[], 12, 5e-5, 9).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn fixed_seed_reproduces_samples() {
        let vocab = Vocabulary::from_text("abc");
        let mut bias = vec![-40.0; vocab.size()];
        for (i, ch) in ["a", "b", "c"].iter().enumerate() {
            let id = vocab.encode(ch).unwrap()[0] as usize;
            bias[id] = (i as f64 + 1.0) * 0.3;
        }
        let model = constant_logit_model(&vocab, &bias);
        let one = sample_lm(&model, lexi(&vocab), &[], 50, 0.8, 17).unwrap();
        let two = sample_lm(&model, lexi(&vocab), &[], 50, 0.8, 17).unwrap();
        assert_eq!(one, two);
        let three = sample_lm(&model, lexi(&vocab), &[], 50, 0.8, 18).unwrap();
        assert_ne!(one, three);
    }

    #[test]
    fn sampled_frequencies_match_the_softmax_within_three_sigma() {
        let vocab = Vocabulary::from_text("abc");
        let mut bias = vec![-40.0; vocab.size()];
        let ids: Vec<usize> =
            ["a", "b", "c"].iter().map(|c| vocab.encode(c).unwrap()[0] as usize).collect();
        bias[ids[0]] = 0.2f64.ln();
        bias[ids[1]] = 0.3f64.ln();
        bias[ids[2]] = 0.5f64.ln();
        let model = constant_logit_model(&vocab, &bias);

        let n = 10_000usize;
        let draws = sample_lm(&model, lexi(&vocab), &[], n, 1.0, 42).unwrap();
        assert_eq!(draws.len(), n, "EOS mass should be far too small to fire");

        let m = bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = bias.iter().map(|&l| (l - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut counts = vec![0usize; vocab.size()];
        for &t in &draws {
            counts[t as usize] += 1;
        }
        for &id in &ids {
            let p = exps[id] / total;
            let expect = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let diff = (counts[id] as f64 - expect).abs();
            assert!(
                diff <= 3.0 * sigma,
                "token {}: count {} vs expected {} (3 sigma = {})",
                id,
                counts[id],
                expect,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn negative_temperature_is_rejected() {
        let vocab = Vocabulary::from_text("a");
        let model = constant_logit_model(&vocab, &vec![0.0; vocab.size()]);
        let err = sample_lm(&model, lexi(&vocab), &[], 5, -0.5, 0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
