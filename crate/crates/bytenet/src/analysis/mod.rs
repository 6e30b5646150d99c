//! Receptive-field arithmetic and gradient probes, saliency heatmaps,
//! bits-per-character evaluation, and BLEU scoring.

pub mod bleu;

pub use bleu::{bleu, BleuReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::bucket::{pad_and_encode, padded_len, BucketId};
use crate::data::vocab::EOS_ID;
use crate::error::{Error, Result};
use crate::layers::conv::{conv1d, Conv1dSpec, ConvParams};
use crate::layers::norm::BnMode;
use crate::network::{
    forward, log_likelihood, log_softmax3, nll_mean, BatchInput, Lexicon, Model, ModelConfig,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Analytic receptive field in positions. Masked stacks look back
/// `(k-1)·d` per block plus the current position; unmasked stacks span the
/// same total as a centered diameter.
pub fn receptive_field(config: &ModelConfig, masked: bool) -> usize {
    let k = if masked { config.target_kernel } else { config.source_kernel };
    1 + config.schedule().iter().map(|d| (k - 1) * d).sum::<usize>()
}

/// Result of a gradient probe: how many input positions influence the
/// output, and the width of the interval they cover. Dilations with holes
/// make these differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfProbe {
    pub count: usize,
    pub span: usize,
}

fn probe_from_column_norms(norms: &[f64]) -> RfProbe {
    let hit: Vec<usize> =
        norms.iter().enumerate().filter(|(_, &n)| n != 0.0).map(|(i, _)| i).collect();
    match (hit.first(), hit.last()) {
        (Some(&a), Some(&b)) => RfProbe { count: hit.len(), span: b - a + 1 },
        _ => RfProbe { count: 0, span: 0 },
    }
}

/// Scalar view of one column: sum of `x` masked to column `col`.
fn column_sum<T: Scalar>(tape: &mut Tape<T>, x: Var, col: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || col >= shape[1] {
        return Err(Error::Contract(format!(
            "column_sum: column {} of shape {:?}",
            col, shape
        )));
    }
    let mut mask = vec![T::zero(); shape.iter().product()];
    let per_col = shape[2];
    let row_stride = shape[1] * per_col;
    for r in 0..shape[0] {
        let base = r * row_stride + col * per_col;
        mask[base..base + per_col].iter_mut().for_each(|v| *v = T::one());
    }
    let m = tape.constant(mask, &shape)?;
    let masked = tape.mul(x, m)?;
    Ok(tape.sum_all(masked))
}

/// Gradient probe of the masked target stack: which embedding positions
/// the last output column depends on, under the model's actual parameters.
/// Identity statistics are seeded for any normalization layer missing the
/// probe's bucket (training statistics would couple every position).
pub fn empirical_receptive_field<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    width: usize,
) -> Result<RfProbe> {
    if model.config.has_source {
        return Err(Error::Contract(
            "receptive-field probe expects a source-free model (masked stack only)".into(),
        ));
    }
    if lex.vocab.size() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "probe vocabulary of {} entries against a model for {}",
            lex.vocab.size(),
            model.config.vocab_size
        )));
    }
    let analytic = receptive_field(&model.config, true);
    if width <= analytic {
        return Err(Error::Contract(format!(
            "probe width {} must exceed the analytic receptive field {}",
            width, analytic
        )));
    }
    let bucket = BucketId::lm();
    model.visit_bn_mut(&mut |_, bn| {
        if !bn.running.contains_key(&bucket) {
            bn.seed_identity(bucket);
        }
    });

    let content = (model.config.vocab_size - 2).max(1) as u32;
    let row: Vec<u32> = (0..width).map(|i| 2 + (i as u32) % content).collect();
    let rows = vec![row];
    let input = BatchInput::lm(&rows, BnMode::Infer);
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, lex, &input)?;
    let root = column_sum(&mut tape, out.logits, width - 1)?;
    tape.backward(root)?;
    let grads = tape
        .grad(out.target_embed)
        .ok_or_else(|| Error::Contract("probe: no gradient reached the embedding".into()))?;
    let channels = model.config.outer();
    let norms: Vec<f64> = (0..width)
        .map(|j| {
            grads[j * channels..(j + 1) * channels]
                .iter()
                .map(|g| {
                    let f = g.to_f64().unwrap_or(0.0);
                    f * f
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(probe_from_column_norms(&norms))
}

/// Same probe for a single convolution: taps of the last column when
/// masked, of the center column otherwise.
pub fn empirical_receptive_field_conv<T: Scalar>(
    spec: &Conv1dSpec,
    width: usize,
    seed: u64,
) -> Result<RfProbe> {
    let span = 1 + (spec.kernel_size - 1) * spec.dilation;
    if width < span + 2 {
        return Err(Error::Contract(format!(
            "probe width {} must exceed the kernel span {}",
            width, span
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ConvParams::<T>::init(spec, &mut rng);
    let x = Tensor::<T>::rand_uniform(&[1, width, spec.in_channels], 0.1, 1.0, &mut rng)
        .with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let vars = params.bind(&mut tape);
    let y = conv1d(&mut tape, spec, vars, xv)?;
    let col = if spec.masked { width - 1 } else { width / 2 };
    let root = column_sum(&mut tape, y, col)?;
    tape.backward(root)?;
    let grads = tape.grad(xv).ok_or_else(|| {
        Error::Contract("probe: no gradient reached the convolution input".into())
    })?;
    let norms: Vec<f64> = (0..width)
        .map(|j| {
            grads[j * spec.in_channels..(j + 1) * spec.in_channels]
                .iter()
                .map(|g| {
                    let f = g.to_f64().unwrap_or(0.0);
                    f * f
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(probe_from_column_norms(&norms))
}

/// Labeled magnitude matrix, row-major `rows x cols`. Rows are input
/// labels, columns are output labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.col_labels.len() + col]
    }

    /// Each column scaled to sum 1; all-zero columns stay zero.
    pub fn normalize_columns(&mut self) {
        let cols = self.col_labels.len();
        for c in 0..cols {
            let total: f64 = (0..self.row_labels.len()).map(|r| self.values[r * cols + c]).sum();
            if total > 0.0 {
                for r in 0..self.row_labels.len() {
                    self.values[r * cols + c] /= total;
                }
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        let mut out = String::new();
        out.push_str("input");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(&quote(c));
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(&quote(label));
            for c in 0..self.col_labels.len() {
                out.push_str(&format!(",{:.12e}", self.get(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Whitespace word spans as (word, char index range) over `text.chars()`.
fn word_spans(text: &str) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push((std::mem::take(&mut current), start..i));
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(ch);
        }
    }
    if !current.is_empty() {
        let n = text.chars().count();
        out.push((current, start..n));
    }
    out
}

/// Sums char-level cells into word-level cells on both axes.
fn pool_words(
    chars: &SaliencyMap,
    input_text: &str,
    output_text: &str,
) -> SaliencyMap {
    let in_words = word_spans(input_text);
    let out_words = word_spans(output_text);
    let cols = chars.col_labels.len();
    let mut values = vec![0.0; in_words.len() * out_words.len()];
    for (wi, (_, ri)) in in_words.iter().enumerate() {
        for (wo, (_, ro)) in out_words.iter().enumerate() {
            let mut sum = 0.0;
            for r in ri.clone() {
                for c in ro.clone() {
                    if r < chars.row_labels.len() && c < cols {
                        sum += chars.values[r * cols + c];
                    }
                }
            }
            values[wi * out_words.len() + wo] = sum;
        }
    }
    SaliencyMap {
        row_labels: in_words.into_iter().map(|(w, _)| w).collect(),
        col_labels: out_words.into_iter().map(|(w, _)| w).collect(),
        values,
    }
}

/// Char-level magnitudes plus the word-pooled, column-normalized maps.
#[derive(Debug, Clone)]
pub struct SaliencyAnalysis {
    /// Rows: source chars. Cols: output chars. Raw L2 magnitudes.
    pub source_chars: SaliencyMap,
    /// Rows: target input chars (teacher-forced). Cols: output chars.
    pub target_chars: SaliencyMap,
    pub source_words: SaliencyMap,
    pub target_words: SaliencyMap,
}

/// Gradient saliency of each output character's log-probability with
/// respect to the source and the teacher-forced target input embeddings.
pub fn saliency<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    source_text: &str,
    target_text: &str,
    quantum: usize,
) -> Result<SaliencyAnalysis> {
    if !model.config.has_source {
        return Err(Error::Contract("saliency: model lacks a source network".into()));
    }
    let slen = source_text.chars().count();
    let tlen = target_text.chars().count();
    if slen == 0 || tlen == 0 {
        return Err(Error::Contract("saliency: source and target must be nonempty".into()));
    }
    let bucket = BucketId::new(
        padded_len(slen, quantum) as u32,
        padded_len(tlen, quantum) as u32,
    );
    let (src_row, tgt_row) = pad_and_encode(lex.vocab, source_text, target_text, bucket)?;
    let targets = lex.vocab.encode(target_text)?;
    let w = tgt_row.len();
    let mut input_row = Vec::with_capacity(w);
    input_row.push(EOS_ID);
    input_row.extend_from_slice(&tgt_row[..w - 1]);

    let src_rows = vec![src_row];
    let tgt_rows = vec![input_row];
    let lengths = vec![slen];
    let input = BatchInput {
        source_rows: Some(&src_rows),
        source_lengths: &lengths,
        target_rows: &tgt_rows,
        mode: BnMode::Infer,
        bucket,
        target_embed_offset: None,
        source_embed_offset: None,
    };
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, lex, &input)?;
    let logp = log_softmax3(&mut tape, out.logits)?;
    let source_embed = out
        .source_embed
        .ok_or_else(|| Error::Contract("saliency: forward produced no source embedding".into()))?;

    let channels = model.config.outer();
    let col_norms = |grads: &[T], pos: usize| -> f64 {
        grads[pos * channels..(pos + 1) * channels]
            .iter()
            .map(|g| {
                let f = g.to_f64().unwrap_or(0.0);
                f * f
            })
            .sum::<f64>()
            .sqrt()
    };

    // One scalar per predicted character, differentiated separately.
    let picks: Vec<Var> = (0..tlen)
        .map(|i| nll_mean(&mut tape, logp, &[(0, i, targets[i])]))
        .collect::<Result<_>>()?;

    let mut src_vals = vec![0.0; slen * tlen];
    let mut tgt_vals = vec![0.0; tlen * tlen];
    for (i, &root) in picks.iter().enumerate() {
        tape.zero_grads();
        tape.backward(root)?;
        if let Some(g) = tape.grad(source_embed) {
            for j in 0..slen {
                src_vals[j * tlen + i] = col_norms(g, j);
            }
        }
        if let Some(g) = tape.grad(out.target_embed) {
            // Input position j+1 carries target char j; position 0 is EOS.
            for j in 0..tlen {
                if j + 1 < w {
                    tgt_vals[j * tlen + i] = col_norms(g, j + 1);
                }
            }
        }
    }

    let char_labels = |text: &str| text.chars().map(|c| c.to_string()).collect::<Vec<_>>();
    let source_chars = SaliencyMap {
        row_labels: char_labels(source_text),
        col_labels: char_labels(target_text),
        values: src_vals,
    };
    let target_chars = SaliencyMap {
        row_labels: char_labels(target_text),
        col_labels: char_labels(target_text),
        values: tgt_vals,
    };
    let mut source_words = pool_words(&source_chars, source_text, target_text);
    let mut target_words = pool_words(&target_chars, target_text, target_text);
    source_words.normalize_columns();
    target_words.normalize_columns();
    Ok(SaliencyAnalysis { source_chars, target_chars, source_words, target_words })
}

/// Average negative log-likelihood of the text in bits per character,
/// excluding the end-of-sequence prediction.
pub fn bits_per_char<T: Scalar>(
    model: &mut Model<T>,
    lex: Lexicon<'_>,
    text: &str,
) -> Result<f64> {
    let mut ids = lex.vocab.encode(text)?;
    let n = ids.len();
    if n == 0 {
        return Err(Error::Contract("bits_per_char: empty text".into()));
    }
    ids.push(EOS_ID);
    let ll = log_likelihood(model, lex, None, &ids, BucketId::lm())?;
    let nats: f64 = -ll.per_token[..n].iter().sum::<f64>();
    Ok(nats / std::f64::consts::LN_2 / n as f64)
}
