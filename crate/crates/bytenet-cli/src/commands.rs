//! Implementations behind each subcommand. All of them speak files and
//! stdin/stdout; nothing here is interactive.

use std::io::Read;
use std::path::{Path, PathBuf};

use bytenet::analysis::{bits_per_char, bleu, empirical_receptive_field, receptive_field, saliency};
use bytenet::data::vocab::read_utf8;
use bytenet::data::{gen_synthetic, padded_len, NGramVocab, Vocabulary};
use bytenet::decoding::{beam_translate, decode_intervals, sample_lm, BeamConfig};
use bytenet::network::{checkpoint, Lexicon, Model};
use bytenet::training::{train_lm, train_mt, LMWindowSpec, TrainOpts};
use bytenet::{Error, Result};

use crate::args::*;
use crate::config::resolve;
use crate::manifest::RunManifest;

// ---- vocabulary and n-gram table construction ----

pub fn build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let mut manifest = RunManifest::begin(0);
    let mut text = String::new();
    for path in &args.corpus {
        manifest.hash_input(path)?;
        text.push_str(&read_utf8(path)?);
    }
    let vocab = Vocabulary::from_text(&text);
    vocab.save(&args.out)?;
    manifest.artifact(&args.out);
    eprintln!("vocabulary: {} symbols (padding and end marker included)", vocab.size());
    manifest.finish(&args.out.with_extension("manifest.json"))
}

fn parse_cutoffs(max_order: usize, specs: &[String]) -> Result<Vec<u64>> {
    // Orders without an explicit cutoff keep every observed window.
    let mut cutoffs = vec![1u64; max_order.saturating_sub(1)];
    for spec in specs {
        let (n, c) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--cutoff wants n=count, got `{}`", spec)))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--cutoff order `{}` is not a number", n)))?;
        let c: u64 = c
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--cutoff count `{}` is not a number", c)))?;
        if n < 2 || n > max_order {
            return Err(Error::Config(format!(
                "--cutoff order {} outside 2..={}",
                n, max_order
            )));
        }
        cutoffs[n - 2] = c;
    }
    Ok(cutoffs)
}

pub fn build_ngrams(args: &BuildNgramsArgs) -> Result<()> {
    let cutoffs = parse_cutoffs(args.max_order, &args.cutoffs)?;
    let mut manifest = RunManifest::begin(0);
    for path in &args.corpus {
        manifest.hash_input(path)?;
    }
    let tables = NGramVocab::build_from_files(&args.corpus, args.max_order, &cutoffs)?;
    tables.save(&args.out)?;
    manifest.artifact(&args.out);
    let sizes = tables.table_sizes();
    for (i, n) in sizes.iter().enumerate() {
        eprintln!("order {}: {} windows kept", i + 2, n);
    }
    manifest.finish(&args.out.with_extension("manifest.json"))
}

// ---- training ----

fn load_or_build_vocab(
    explicit: Option<&Path>,
    corpus_text: &str,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Vocabulary> {
    match explicit {
        Some(path) => {
            manifest.hash_input(path)?;
            Vocabulary::load(path)
        }
        None => {
            let vocab = Vocabulary::from_text(corpus_text);
            let path = out_dir.join("vocab.json");
            vocab.save(&path)?;
            manifest.artifact(&path);
            Ok(vocab)
        }
    }
}

fn load_ngrams(
    explicit: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<Option<NGramVocab>> {
    match explicit {
        Some(path) => {
            manifest.hash_input(path)?;
            Ok(Some(NGramVocab::load(path)?))
        }
        None => Ok(None),
    }
}

fn ngram_shape(tables: &Option<NGramVocab>) -> (usize, Vec<usize>) {
    match tables {
        Some(t) => (t.max_order(), t.table_sizes()),
        None => (1, Vec::new()),
    }
}

fn progress_printer(steps: u64) -> impl FnMut(u64, f64) {
    let every = (steps / 10).max(1);
    move |step, loss| {
        if step % every == 0 || step == steps {
            eprintln!("step {} loss {:.4}", step, loss);
        }
    }
}

pub fn train_lm_cmd(args: &TrainLmArgs) -> Result<()> {
    let settings = resolve(args.preset.as_deref(), args.config.as_deref())?;
    let steps = args.steps.unwrap_or(settings.steps);
    let mut manifest = RunManifest::begin(args.seed);
    manifest.config = serde_json::to_value(&settings).expect("settings serialize");
    manifest.hash_input(&args.corpus)?;
    let corpus = read_utf8(&args.corpus)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let vocab = load_or_build_vocab(args.vocab.as_deref(), &corpus, &args.out, &mut manifest)?;
    let ngrams = load_ngrams(args.ngrams.as_deref(), &mut manifest)?;
    let (max_order, table_sizes) = ngram_shape(&ngrams);
    let config = settings.model_config(vocab.size(), false, max_order, table_sizes);
    let mut model = Model::<f32>::init(config, args.seed)?;
    eprintln!("model: {} parameters", model.param_count());

    let lex = Lexicon { vocab: &vocab, ngrams: ngrams.as_ref() };
    let window = LMWindowSpec::new(
        settings.window_total,
        settings.window_context,
        settings.window_total.saturating_sub(settings.window_context),
    )?;
    let opts = TrainOpts {
        steps,
        seed: args.seed,
        batch_main: settings.batch_main,
        batch_aux: settings.batch_aux,
        adam: settings.adam(),
    };
    let trace = train_lm(&mut model, lex, &corpus, &window, &opts, progress_printer(steps))?;

    let ckpt = args.out.join("model.bnet");
    checkpoint::save(&model, &ckpt)?;
    manifest.artifact(&ckpt);
    let trace_path = args.out.join("trace.csv");
    trace.save(&trace_path)?;
    manifest.artifact(&trace_path);
    manifest.finish(&args.out.join("manifest.json"))
}

pub fn train_mt_cmd(args: &TrainMtArgs) -> Result<()> {
    let settings = resolve(args.preset.as_deref(), args.config.as_deref())?;
    let steps = args.steps.unwrap_or(settings.steps);
    let mut manifest = RunManifest::begin(args.seed);

    let (pairs, data_desc) = match (&args.task, &args.source, &args.target) {
        (Some(task), None, None) => {
            let alphabet: Vec<char> = args.alphabet.chars().collect();
            let pairs = gen_synthetic(
                (*task).into(),
                args.count,
                args.min_len,
                args.max_len,
                &alphabet,
                args.data_seed,
            )?;
            let desc = serde_json::json!({
                "task": format!("{:?}", task).to_lowercase(),
                "count": args.count,
                "min_len": args.min_len,
                "max_len": args.max_len,
                "alphabet": args.alphabet,
                "data_seed": args.data_seed,
            });
            (pairs, desc)
        }
        (None, Some(source), Some(target)) => {
            manifest.hash_input(source)?;
            manifest.hash_input(target)?;
            let src_text = read_utf8(source)?;
            let tgt_text = read_utf8(target)?;
            let src_lines: Vec<&str> = src_text.lines().collect();
            let tgt_lines: Vec<&str> = tgt_text.lines().collect();
            if src_lines.len() != tgt_lines.len() {
                return Err(Error::parse(
                    source,
                    format!(
                        "{} source lines, but {} has {} target lines",
                        src_lines.len(),
                        target.display(),
                        tgt_lines.len()
                    ),
                ));
            }
            let pairs = src_lines
                .iter()
                .zip(&tgt_lines)
                .map(|(s, t)| (s.to_string(), t.to_string()))
                .collect();
            let desc = serde_json::json!({
                "source": source.display().to_string(),
                "target": target.display().to_string(),
            });
            (pairs, desc)
        }
        _ => {
            return Err(Error::Config(
                "train-mt wants either --task or both --source and --target".into(),
            ))
        }
    };
    manifest.config = serde_json::json!({ "settings": settings, "data": data_desc });

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let all_text: String =
        pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
    let vocab = load_or_build_vocab(args.vocab.as_deref(), &all_text, &args.out, &mut manifest)?;
    let ngrams = load_ngrams(args.ngrams.as_deref(), &mut manifest)?;
    let (max_order, table_sizes) = ngram_shape(&ngrams);
    let config = settings.model_config(vocab.size(), true, max_order, table_sizes);
    let mut model = Model::<f32>::init(config, args.seed)?;
    eprintln!("model: {} parameters, {} pairs", model.param_count(), pairs.len());

    let lex = Lexicon { vocab: &vocab, ngrams: ngrams.as_ref() };
    let opts = TrainOpts {
        steps,
        seed: args.seed,
        batch_main: settings.batch_main,
        batch_aux: settings.batch_aux,
        adam: settings.adam(),
    };
    let report = train_mt(
        &mut model,
        lex,
        &pairs,
        settings.bucket_quantum,
        &opts,
        progress_printer(steps),
    )?;
    if report.skipped_pairs > 0 {
        eprintln!(
            "skipped {} pairs in {} undersized buckets",
            report.skipped_pairs, report.skipped_buckets
        );
    }

    let ckpt = args.out.join("model.bnet");
    checkpoint::save(&model, &ckpt)?;
    manifest.artifact(&ckpt);
    let trace_path = args.out.join("trace.csv");
    report.trace.save(&trace_path)?;
    manifest.artifact(&trace_path);
    manifest.finish(&args.out.join("manifest.json"))
}

// ---- model loading shared by the inference commands ----

struct ModelBundle {
    model: Model<f32>,
    vocab: Vocabulary,
    ngrams: Option<NGramVocab>,
}

impl ModelBundle {
    fn lexicon(&self) -> Lexicon<'_> {
        Lexicon { vocab: &self.vocab, ngrams: self.ngrams.as_ref() }
    }
}

/// `--model` may be a training output directory (model.bnet, vocab.json
/// and optional ngrams.json inside) or a bare checkpoint file plus an
/// explicit `--vocab`.
fn load_bundle(
    model_path: &Path,
    vocab: Option<&Path>,
    ngrams: Option<&Path>,
) -> Result<ModelBundle> {
    let (ckpt, vocab_path, ngram_path) = if model_path.is_dir() {
        let default_ngrams = model_path.join("ngrams.json");
        (
            model_path.join("model.bnet"),
            vocab.map(PathBuf::from).unwrap_or_else(|| model_path.join("vocab.json")),
            ngrams.map(PathBuf::from).or_else(|| default_ngrams.exists().then_some(default_ngrams)),
        )
    } else {
        let vocab_path = vocab.ok_or_else(|| {
            Error::Config("--vocab is required when --model is a checkpoint file".into())
        })?;
        (model_path.to_path_buf(), vocab_path.to_path_buf(), ngrams.map(PathBuf::from))
    };
    let model = checkpoint::load(&ckpt)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let ngrams = ngram_path.map(|p| NGramVocab::load(&p)).transpose()?;

    if model.config.vocab_size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects a vocabulary of {} symbols, {} holds {}",
            model.config.vocab_size,
            vocab_path.display(),
            vocab.size()
        )));
    }
    match (&ngrams, model.config.ngram_max_order > 1) {
        (None, true) => {
            return Err(Error::Checkpoint(
                "checkpoint uses n-gram bags; pass --ngrams with the tables it was trained with"
                    .into(),
            ))
        }
        (Some(t), true) => {
            if t.max_order() != model.config.ngram_max_order
                || t.table_sizes() != model.config.ngram_table_sizes
            {
                return Err(Error::Checkpoint(
                    "n-gram tables do not match the checkpoint's table shapes".into(),
                ));
            }
        }
        (Some(_), false) => {
            return Err(Error::Checkpoint(
                "checkpoint was trained without n-gram bags, but --ngrams was given".into(),
            ))
        }
        (None, false) => {}
    }
    Ok(ModelBundle { model, vocab, ngrams })
}

fn require_source(bundle: &ModelBundle, want: bool) -> Result<()> {
    if bundle.model.config.has_source != want {
        let msg = if want {
            "checkpoint is a source-free language model; this command wants a translation model"
        } else {
            "checkpoint is a translation model; this command wants a source-free language model"
        };
        return Err(Error::Checkpoint(msg.into()));
    }
    Ok(())
}

fn read_stdin() -> Result<String> {
    let mut text = String::new();
    std::io::stdin()
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<stdin>", e))?;
    Ok(text)
}

fn finish_optional(manifest: RunManifest, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => manifest.finish(p),
        None => Ok(()),
    }
}

// ---- decoding ----

pub fn translate_cmd(args: &TranslateArgs) -> Result<()> {
    let mut bundle = load_bundle(&args.model, args.vocab.as_deref(), args.ngrams.as_deref())?;
    require_source(&bundle, true)?;
    let mut manifest = RunManifest::begin(0);
    manifest.config = serde_json::json!({
        "beam_width": args.beam_width,
        "quantum": args.quantum,
        "max_len": args.max_len,
    });

    let input = read_stdin()?;
    for line in input.lines() {
        if line.is_empty() {
            println!();
            continue;
        }
        let ids = bundle.vocab.encode(line)?;
        let intervals = decode_intervals(&bundle.model, ids.len(), args.quantum);
        if intervals.is_empty() {
            return Err(Error::Decode(format!(
                "no stored statistics for padded source length {}; the model was not trained \
                 on sources this long (check --quantum against the training bucket size)",
                padded_len(ids.len(), args.quantum)
            )));
        }
        let max_len = args.max_len.unwrap_or_else(|| *intervals.iter().max().unwrap());
        let cfg = BeamConfig {
            beam_width: args.beam_width,
            max_len,
            length_intervals: intervals,
        };
        let lex = Lexicon { vocab: &bundle.vocab, ngrams: bundle.ngrams.as_ref() };
        let hyps = beam_translate(&mut bundle.model, lex, &ids, args.quantum, &cfg)?;
        let best = &hyps[0];
        if !best.finished {
            eprintln!("warning: best hypothesis hit the length cap without finishing");
        }
        println!("{}", bundle.vocab.decode(best.content())?);
    }
    finish_optional(manifest, args.manifest.as_deref())
}

pub fn sample_cmd(args: &SampleArgs) -> Result<()> {
    let bundle = load_bundle(&args.model, args.vocab.as_deref(), args.ngrams.as_deref())?;
    require_source(&bundle, false)?;
    let mut manifest = RunManifest::begin(args.seed);
    manifest.config = serde_json::json!({
        "length": args.length,
        "temperature": args.temperature,
        "prime": args.prime,
    });
    let prime_ids = bundle.vocab.encode(&args.prime)?;
    let tokens = sample_lm(
        &bundle.model,
        bundle.lexicon(),
        &prime_ids,
        args.length,
        args.temperature,
        args.seed,
    )?;
    println!("{}{}", args.prime, bundle.vocab.decode(&tokens)?);
    finish_optional(manifest, args.manifest.as_deref())
}

// ---- evaluation and analysis ----

pub fn eval_lm_cmd(args: &EvalLmArgs) -> Result<()> {
    let bundle = load_bundle(&args.model, args.vocab.as_deref(), args.ngrams.as_deref())?;
    require_source(&bundle, false)?;
    let mut manifest = RunManifest::begin(0);
    let text = match &args.corpus {
        Some(path) => {
            manifest.hash_input(path)?;
            read_utf8(path)?
        }
        None => read_stdin()?,
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::Contract("eval-lm: no nonempty input lines".into()));
    }

    // Each line is scored independently, so the corpus splits cleanly
    // across threads; per-line results are summed in line order, which
    // keeps the total identical for every thread count.
    let threads = args.threads.clamp(1, lines.len());
    let chunk = lines.len().div_ceil(threads);
    let mut per_line: Vec<(f64, usize)> = Vec::with_capacity(lines.len());
    let vocab_ref = &bundle.vocab;
    let ngrams_ref = bundle.ngrams.as_ref();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for slice in lines.chunks(chunk) {
            let mut model = bundle.model.clone();
            handles.push(scope.spawn(move || -> Result<Vec<(f64, usize)>> {
                let lex = Lexicon { vocab: vocab_ref, ngrams: ngrams_ref };
                let mut out = Vec::with_capacity(slice.len());
                for line in slice {
                    let bits = bits_per_char(&mut model, lex, line)?;
                    out.push((bits, line.chars().count()));
                }
                Ok(out)
            }));
        }
        for handle in handles {
            per_line.extend(handle.join().expect("evaluation worker panicked")?);
        }
        Ok(())
    })?;

    let total_chars: usize = per_line.iter().map(|(_, n)| n).sum();
    let total_bits: f64 = per_line.iter().map(|(b, n)| b * *n as f64).sum();
    println!("bits_per_char {:.12}", total_bits / total_chars as f64);
    finish_optional(manifest, args.manifest.as_deref())
}

pub fn bleu_cmd(args: &BleuArgs) -> Result<()> {
    let mut manifest = RunManifest::begin(0);
    manifest.hash_input(&args.hyp)?;
    manifest.hash_input(&args.reference)?;
    let hyp_text = read_utf8(&args.hyp)?;
    let ref_text = read_utf8(&args.reference)?;
    let hyps: Vec<String> = hyp_text.lines().map(str::to_string).collect();
    let refs: Vec<String> = ref_text.lines().map(str::to_string).collect();
    if hyps.len() != refs.len() {
        return Err(Error::parse(
            &args.hyp,
            format!(
                "{} hypothesis lines, but {} has {} reference lines",
                hyps.len(),
                args.reference.display(),
                refs.len()
            ),
        ));
    }
    let report = bleu(&hyps, &refs, args.max_n, args.smooth)?;
    println!("BLEU {:.6}", report.score);
    let ps: Vec<String> = report.precisions.iter().map(|p| format!("{:.6}", p)).collect();
    println!("precisions {}", ps.join(" "));
    println!("brevity_penalty {:.6}", report.brevity_penalty);
    println!("lengths hyp {} ref {}", report.hyp_len, report.ref_len);
    finish_optional(manifest, args.manifest.as_deref())
}

pub fn saliency_cmd(args: &SaliencyArgs) -> Result<()> {
    let mut bundle = load_bundle(&args.model, args.vocab.as_deref(), args.ngrams.as_deref())?;
    require_source(&bundle, true)?;
    let lex = Lexicon { vocab: &bundle.vocab, ngrams: bundle.ngrams.as_ref() };
    let analysis = saliency(&mut bundle.model, lex, &args.source, &args.target, args.quantum)?;

    println!("# source words (rows) against output words (columns)");
    print!("{}", analysis.source_words.to_csv());
    println!();
    println!("# preceding target words (rows) against output words (columns)");
    print!("{}", analysis.target_words.to_csv());

    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = RunManifest::begin(0);
        manifest.config = serde_json::json!({
            "source": args.source,
            "target": args.target,
            "quantum": args.quantum,
        });
        for (name, map) in [
            ("source_words.csv", &analysis.source_words),
            ("target_words.csv", &analysis.target_words),
            ("source_chars.csv", &analysis.source_chars),
            ("target_chars.csv", &analysis.target_chars),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, map.to_csv()).map_err(|e| Error::io(&path, e))?;
            manifest.artifact(&path);
        }
        manifest.finish(&dir.join("manifest.json"))?;
    }
    Ok(())
}

pub fn rf_cmd(args: &RfArgs) -> Result<()> {
    let settings = resolve(args.preset.as_deref(), args.config.as_deref())?;
    // The field formula only reads the layer schedule, so any vocabulary
    // size that validates will do for the analytic numbers.
    let config = settings.model_config(3, true, 1, Vec::new());
    config.validate()?;
    let target_rf = receptive_field(&config, true);
    let source_rf = receptive_field(&config, false);
    println!("target_receptive_field {} characters", target_rf);
    println!("source_receptive_field {} characters", source_rf);
    if args.preset.as_deref() == Some("paper-lm") {
        println!(
            "note: this configuration is usually quoted as a 315-character receptive field; \
             counting the taps (1 + sum over layers of (kernel-1)*dilation) gives {}",
            target_rf
        );
    }

    if args.empirical {
        let vocab = Vocabulary::from_text("abc");
        let probe_config = settings.model_config(vocab.size(), false, 1, Vec::new());
        let mut model = Model::<f32>::init(probe_config, args.seed)?;
        let lex = Lexicon { vocab: &vocab, ngrams: None };
        let width = args.width.unwrap_or(target_rf + 1);
        let probe = empirical_receptive_field(&mut model, lex, width)?;
        println!("empirical_positions {} span {}", probe.count, probe.span);
    }
    Ok(())
}
