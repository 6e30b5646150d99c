//! Command-line surface. Flag docs double as --help text.

use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};

use bytenet::data::SyntheticTask;
use bytenet::decoding::DEFAULT_BEAM_WIDTH;

#[derive(Subcommand)]
pub enum Command {
    /// Build a character vocabulary from corpus files.
    BuildVocab(BuildVocabArgs),
    /// Count character n-grams and build pruned lookup tables.
    BuildNgrams(BuildNgramsArgs),
    /// Train a character-level language model.
    TrainLm(TrainLmArgs),
    /// Train a translation model on sentence pairs.
    TrainMt(TrainMtArgs),
    /// Beam-decode stdin lines through a trained translation model.
    Translate(TranslateArgs),
    /// Sample text from a trained language model.
    Sample(SampleArgs),
    /// Score text under a trained language model in bits per character.
    EvalLm(EvalLmArgs),
    /// Corpus-level BLEU between a hypothesis file and a reference file.
    Bleu(BleuArgs),
    /// Gradient attribution of each output word to the input words.
    Saliency(SaliencyArgs),
    /// Receptive field of a configuration, analytic and optionally probed.
    Rf(RfArgs),
}

#[derive(Args)]
pub struct BuildVocabArgs {
    /// Corpus files; every distinct character becomes one symbol.
    #[arg(required = true)]
    pub corpus: Vec<PathBuf>,
    /// Output vocabulary file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BuildNgramsArgs {
    #[arg(required = true)]
    pub corpus: Vec<PathBuf>,
    /// Highest n-gram order; orders 2 through this each get a table.
    #[arg(long, default_value_t = 5)]
    pub max_order: usize,
    /// Keep order-n windows seen at least this often, as n=count.
    /// Repeatable; unmentioned orders keep everything observed.
    #[arg(long = "cutoff")]
    pub cutoffs: Vec<String>,
    /// Output table file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainLmArgs {
    /// Training text, one contiguous UTF-8 file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Named settings: `desk` (default, minutes on one core) or
    /// `paper-lm` (the full-scale configuration).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON settings file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer steps; overrides the settings value.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (checkpoint, trace, vocabulary, manifest).
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse an existing vocabulary instead of building one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// N-gram tables to add bag-of-n-gram embeddings at the input.
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum TaskArg {
    Copy,
    Reverse,
    Rot13,
}

impl From<TaskArg> for SyntheticTask {
    fn from(t: TaskArg) -> SyntheticTask {
        match t {
            TaskArg::Copy => SyntheticTask::Copy,
            TaskArg::Reverse => SyntheticTask::Reverse,
            TaskArg::Rot13 => SyntheticTask::Rot13,
        }
    }
}

#[derive(Args)]
pub struct TrainMtArgs {
    /// Source sentences, one per line (needs --target).
    #[arg(long, requires = "target", conflicts_with = "task")]
    pub source: Option<PathBuf>,
    /// Target sentences, line-aligned with --source.
    #[arg(long, requires = "source", conflicts_with = "task")]
    pub target: Option<PathBuf>,
    /// Generate pairs instead of reading files.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Generated pair count (with --task).
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    /// Characters the generated sources draw from.
    #[arg(long, default_value = "abcdefghijklmnop")]
    pub alphabet: String,
    /// Seed for pair generation, independent of --seed.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
}

#[derive(Args)]
pub struct TranslateArgs {
    /// Training output directory, or a checkpoint file (then --vocab).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam_width: usize,
    /// Generation budget in tokens, end marker included; defaults to the
    /// largest candidate target length.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Bucket length quantum the model was trained with.
    #[arg(long, default_value_t = 25)]
    pub quantum: usize,
    /// Also write a run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
    /// Characters to draw (generation stops early at the end marker).
    #[arg(long, default_value_t = 250)]
    pub length: usize,
    /// Text to condition on before sampling.
    #[arg(long, default_value = "")]
    pub prime: String,
    /// 0 picks the argmax; higher flattens the distribution.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalLmArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
    /// Text to score, one sequence per line; stdin when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Worker threads for scoring; the result is identical for any value.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct BleuArgs {
    /// Hypothesis file, one sentence per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference file, line-aligned with --hyp.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Highest n-gram order in the precision mean.
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
    /// Add-one smoothing for every order (tiny corpora).
    #[arg(long)]
    pub smooth: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ngrams: Option<PathBuf>,
    /// Source sentence.
    #[arg(long)]
    pub source: String,
    /// Target sentence to attribute, character by character.
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 25)]
    pub quantum: usize,
    /// Directory for the four CSV maps (word and character level).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RfArgs {
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also probe a randomly initialized model with input gradients.
    #[arg(long)]
    pub empirical: bool,
    /// Probe width; must exceed the analytic field. Default: analytic + 1.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
