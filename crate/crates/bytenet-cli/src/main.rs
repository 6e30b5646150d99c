//! Character-level sequence modelling from the command line: vocabulary
//! and n-gram table construction, language-model and translation training,
//! beam decoding, sampling, and analysis.
//!
//! Exit codes: 2 for input ingestion problems (missing or malformed
//! files), 3 for a non-finite training loss, 4 for checkpoint or
//! configuration mismatches, 1 for everything else.

use clap::Parser;

use bytenet::Error;

mod args;
mod commands;
mod config;
mod manifest;

use args::Command;

#[derive(Parser)]
#[command(name = "bytenet", version, about = "Dilated-convolution character sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::CorpusEncoding { .. } | Error::Vocab(_) => {
            2
        }
        Error::NonFiniteLoss { .. } | Error::NonFiniteGrad { .. } => 3,
        Error::Checkpoint(_) | Error::Config(_) | Error::MissingStats { .. } => 4,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildVocab(a) => commands::build_vocab(a),
        Command::BuildNgrams(a) => commands::build_ngrams(a),
        Command::TrainLm(a) => commands::train_lm_cmd(a),
        Command::TrainMt(a) => commands::train_mt_cmd(a),
        Command::Translate(a) => commands::translate_cmd(a),
        Command::Sample(a) => commands::sample_cmd(a),
        Command::EvalLm(a) => commands::eval_lm_cmd(a),
        Command::Bleu(a) => commands::bleu_cmd(a),
        Command::Saliency(a) => commands::saliency_cmd(a),
        Command::Rf(a) => commands::rf_cmd(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e);
        std::process::exit(exit_code(&e));
    }
}
