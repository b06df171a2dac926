mod config;
mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{resolve, RunConfig, TrainOverrides};
use report::{render_table, write_csv};
use ttlm_core::corpus::{
    build_vocabulary, decode, encode, load_corpus, load_stream, save_stream, TokenStream,
    Vocabulary, EOS_TOKEN, THINKING_ID, THINKING_TOKEN,
};
use ttlm_core::eval::{masked_perplexity, rank_by_improvement, sentence_perplexities, word_probabilities};
use ttlm_core::inject::{inject, ThinkingTokenConfig};
use ttlm_core::model::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use ttlm_core::trainer::{train, EpochRecord};

/// Thinking-token language modeling: corpus preparation, LSTM training,
/// and masked-perplexity evaluation.
#[derive(Parser)]
#[command(name = "ttlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize text corpora, build a vocabulary, write encoded id streams
    Prepare(PrepareArgs),
    /// Show a text file after thinking-token injection
    Inject(InjectArgs),
    /// Train a model on prepared streams
    Train(TrainArgs),
    /// Masked perplexity of a checkpoint over an encoded stream
    Eval(EvalArgs),
    /// Rank sentences by perplexity improvement between two checkpoints
    Compare(CompareArgs),
    /// Per-word probabilities of one sentence under two checkpoints
    Probe(ProbeArgs),
    /// Train one model per thinking-token count and tabulate validation
    /// perplexity
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Training text, one sentence per line, whitespace-tokenized
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Cap on total vocabulary size, specials included
    #[arg(long)]
    max_size: Option<usize>,
    /// Minimum frequency for a token to enter the vocabulary
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

#[derive(Args)]
struct InjectArgs {
    /// Text file to transform
    #[arg(long)]
    file: PathBuf,
    /// Thinking tokens inserted after each token
    #[arg(short, long, default_value_t = 1)]
    n: usize,
    /// Write the transformed text here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_ids: Option<PathBuf>,
    #[arg(long)]
    valid_ids: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dataset label used in reports
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    bptt: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    asgd_nonmono: Option<usize>,
    /// Switch to averaging at a fixed epoch instead of the non-monotonic
    /// trigger
    #[arg(long)]
    asgd_start_epoch: Option<usize>,
    #[arg(long)]
    thinking_n: Option<usize>,
    /// Exclude `<T>`-target positions from the training loss too
    /// (evaluation always excludes them)
    #[arg(long)]
    train_mask_thinking: Option<bool>,
    #[arg(long)]
    tie_weights: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Encoded stream to score
    #[arg(long)]
    ids: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    /// Score `<T>` targets as well instead of masking them
    #[arg(long)]
    include_thinking: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline checkpoint
    #[arg(long)]
    base: PathBuf,
    /// Thinking-token checkpoint
    #[arg(long)]
    tt: PathBuf,
    /// Sentence file, one sentence per line
    #[arg(long)]
    sentences: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    tt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// The sentence to probe, whitespace-tokenized
    #[arg(long)]
    sentence: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Thinking-token counts to train, e.g. 0,1,2
    #[arg(long, value_delimiter = ',', required = true)]
    n_values: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let diverged = err.chain().any(|e| {
                matches!(
                    e.downcast_ref(),
                    Some(
                        ttlm_core::Error::Diverged { .. }
                            | ttlm_core::Error::NonFiniteGradient { .. }
                            | ttlm_core::Error::NonFiniteParam { .. }
                    )
                )
            });
            ExitCode::from(if diverged { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Inject(args) => cmd_inject(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;

    let train = load_corpus(&args.train, "train")?;
    let vocab = build_vocabulary(&train.tokens, args.max_size, args.min_count)?;
    let vocab_path = args.out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let hash = vocab.hash();
    println!("vocabulary: {} types (written to {})", vocab.len(), vocab_path.display());

    let mut splits = vec![(args.train.clone(), "train")];
    splits.push((args.valid.clone(), "valid"));
    if let Some(test) = &args.test {
        splits.push((test.clone(), "test"));
    }
    for (path, name) in splits {
        let raw = if name == "train" { train.clone() } else { load_corpus(&path, name)? };
        let stream = encode(&raw, &vocab);
        let out = args.out_dir.join(format!("{name}.ids"));
        save_stream(&stream, hash, &out)?;
        println!("{name}: {} tokens -> {}", stream.ids.len(), out.display());
    }
    Ok(())
}

fn cmd_inject(args: InjectArgs) -> Result<()> {
    let raw = load_corpus(&args.file, "inject")?;
    let vocab = build_vocabulary(&raw.tokens, None, 1)?;
    let stream = encode(&raw, &vocab);
    let injected = inject(&stream, ThinkingTokenConfig::new(args.n, THINKING_ID))?;
    let tokens = decode(&injected, &vocab);

    let mut out = String::new();
    let mut line: Vec<&str> = Vec::new();
    for group in tokens.chunks(1 + args.n) {
        for tok in group {
            line.push(tok);
        }
        if group[0] == EOS_TOKEN {
            out.push_str(&line.join(" "));
            out.push('\n');
            line.clear();
        }
    }
    if !line.is_empty() {
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn load_vocab_and_stream(
    vocab_path: &Path,
    ids_path: &Path,
) -> Result<(Vocabulary, u64, TokenStream)> {
    let vocab = Vocabulary::load(vocab_path)?;
    let hash = vocab.hash();
    let (stream, stream_hash) = load_stream(ids_path)?;
    if stream_hash != hash {
        bail!(ttlm_core::Error::StreamVocabMismatch { stream: stream_hash, vocab: hash });
    }
    Ok((vocab, hash, stream))
}

fn checkpoint_compatible(ckpt: &LoadedCheckpoint, vocab_hash: u64, path: &Path) -> Result<()> {
    if ckpt.vocab_hash != vocab_hash {
        bail!(
            "checkpoint {} was trained with a different vocabulary (hash {:#018x} vs {:#018x})",
            path.display(),
            ckpt.vocab_hash,
            vocab_hash
        );
    }
    Ok(())
}

/// Train one model and leave `model-n{N}.ckpt` plus `epochs-n{N}.csv` in
/// the output directory. Returns the best masked validation perplexity.
fn run_training(rc: &RunConfig) -> Result<f64> {
    fs::create_dir_all(&rc.out_dir)
        .with_context(|| format!("cannot create {}", rc.out_dir.display()))?;
    let (vocab, hash, train_stream) = load_vocab_and_stream(&rc.vocab, &rc.train_ids)?;
    let (valid_stream, valid_hash) = load_stream(&rc.valid_ids)?;
    if valid_hash != hash {
        bail!(ttlm_core::Error::StreamVocabMismatch { stream: valid_hash, vocab: hash });
    }

    let n = rc.train.thinking_n;
    let log_path = rc.out_dir.join(format!("epochs-n{n}.csv"));
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("cannot write {}", log_path.display()))?;
    writeln!(log, "epoch,train_nll,valid_ppl,lr,mode,seconds")?;

    let on_epoch = |rec: &EpochRecord| {
        let line = format!(
            "{},{},{},{},{},{:.3}",
            rec.epoch, rec.train_nll, rec.valid_ppl, rec.lr, rec.mode, rec.seconds
        );
        println!("epoch {:>3}  train_nll {:.4}  valid_ppl {:.4}  lr {}  {}", rec.epoch, rec.train_nll, rec.valid_ppl, rec.lr, rec.mode);
        let _ = writeln!(log, "{line}");
        let _ = log.flush();
    };

    let outcome = train(&rc.train, &train_stream, &valid_stream, vocab.len(), on_epoch)?;

    let ckpt_path = rc.out_dir.join(format!("model-n{n}.ckpt"));
    save_checkpoint(&outcome.best_params, n, hash, &ckpt_path)?;
    println!(
        "best validation perplexity {:.4} -> {}",
        outcome.best_valid_ppl,
        ckpt_path.display()
    );
    Ok(outcome.best_valid_ppl)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let rc = resolve(args.config.as_deref(), &overrides_of(&args))?;
    run_training(&rc)?;
    Ok(())
}

fn overrides_of(args: &TrainArgs) -> TrainOverrides {
    TrainOverrides {
        train_ids: args.train_ids.clone(),
        valid_ids: args.valid_ids.clone(),
        vocab: args.vocab.clone(),
        out_dir: args.out_dir.clone(),
        dataset: args.dataset.clone(),
        bptt: args.bptt,
        batch: args.batch,
        clip: args.clip,
        hidden: args.hidden,
        embed: args.embed,
        layers: args.layers,
        lr: args.lr,
        epochs: args.epochs,
        seed: args.seed,
        asgd_nonmono: args.asgd_nonmono,
        asgd_start_epoch: args.asgd_start_epoch,
        thinking_n: args.thinking_n,
        train_mask_thinking: args.train_mask_thinking,
        tie_weights: args.tie_weights,
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (_, hash, stream) = load_vocab_and_stream(&args.vocab, &args.ids)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    checkpoint_compatible(&ckpt, hash, &args.checkpoint)?;

    let injected = inject(&stream, ThinkingTokenConfig::new(ckpt.thinking_n, THINKING_ID))?;
    let exclude = if args.include_thinking { None } else { Some(THINKING_ID) };
    let model_name = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut rep = masked_perplexity(&ckpt.params, &injected, exclude, &model_name)?;
    if let Some(dataset) = args.dataset {
        rep.dataset_name = dataset;
    }

    let header = ["dataset", "model", "perplexity", "tokens_counted", "tokens_excluded"];
    let rows = vec![vec![
        rep.dataset_name.clone(),
        rep.model_name.clone(),
        format!("{}", rep.perplexity),
        rep.tokens_counted.to_string(),
        rep.tokens_excluded.to_string(),
    ]];
    fs::create_dir_all(&args.out_dir)?;
    write_csv(&args.out_dir.join("eval.csv"), &header, &rows)?;
    let table = render_table(&header, &rows);
    fs::write(args.out_dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read sentence file {}", path.display()))?;
    let mut sentences = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            eprintln!("warning: {}:{}: skipping empty sentence", path.display(), lineno + 1);
            continue;
        }
        sentences.push(words);
    }
    Ok(sentences)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let hash = vocab.hash();
    let base = load_checkpoint(&args.base)?;
    checkpoint_compatible(&base, hash, &args.base)?;
    let tt = load_checkpoint(&args.tt)?;
    checkpoint_compatible(&tt, hash, &args.tt)?;

    let sentences = read_sentences(&args.sentences)?;
    let cfg = ThinkingTokenConfig::new(tt.thinking_n, THINKING_ID);
    let scores = sentence_perplexities(&base.params, &tt.params, &sentences, &vocab, cfg)?;
    let top_k = args.top_k.unwrap_or(scores.len());
    let ranked = rank_by_improvement(&scores, top_k);

    let dataset = args.dataset.unwrap_or_else(|| {
        args.sentences
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sentences".into())
    });
    let header = ["dataset", "sentence", "ppl_orig", "ppl_tt", "delta"];
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .map(|s| {
            vec![
                dataset.clone(),
                s.text(),
                format!("{}", s.ppl_base),
                format!("{}", s.ppl_tt),
                format!("{}", s.delta),
            ]
        })
        .collect();
    fs::create_dir_all(&args.out_dir)?;
    write_csv(&args.out_dir.join("compare.csv"), &header, &rows)?;
    // the short fixed-precision view for humans
    let display_rows: Vec<Vec<String>> = ranked
        .iter()
        .map(|s| {
            vec![
                dataset.clone(),
                s.text(),
                format!("{:.4}", s.ppl_base),
                format!("{:.4}", s.ppl_tt),
                format!("{:.4}", s.delta),
            ]
        })
        .collect();
    let table = render_table(&header, &display_rows);
    fs::write(args.out_dir.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let hash = vocab.hash();
    let base = load_checkpoint(&args.base)?;
    checkpoint_compatible(&base, hash, &args.base)?;
    let tt = load_checkpoint(&args.tt)?;
    checkpoint_compatible(&tt, hash, &args.tt)?;

    let words: Vec<String> = args.sentence.split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        bail!("the sentence is empty");
    }
    let cfg = ThinkingTokenConfig::new(tt.thinking_n, THINKING_ID);
    let records = word_probabilities(&base.params, &tt.params, &words, &vocab, cfg)?;

    let mut block = format!("Sentence: {}\n", words.join(" "));
    for r in &records {
        let marker = if r.oov { " (scored as <unk>)" } else { "" };
        block.push_str(&format!("Word: {}{}\n", r.word, marker));
        block.push_str(&format!("LSTM: {}\n", r.p_base));
        block.push_str(&format!("LSTM+{}: {}\n", THINKING_TOKEN, r.p_tt));
    }
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("probe.txt"), &block)?;
    let header = ["word", "p_base", "p_tt", "oov"];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.word.clone(),
                format!("{}", r.p_base),
                format!("{}", r.p_tt),
                r.oov.to_string(),
            ]
        })
        .collect();
    write_csv(&args.out_dir.join("probe.csv"), &header, &rows)?;
    print!("{block}");
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let rc = resolve(args.train.config.as_deref(), &overrides_of(&args.train))?;
    let mut rows = Vec::new();
    for &n in &args.n_values {
        let mut run = rc.clone();
        run.train.thinking_n = n;
        println!("== training with {n} thinking token(s) ==");
        let best = run_training(&run)?;
        rows.push(vec![rc.dataset.clone(), n.to_string(), format!("{best}")]);
    }
    let header = ["dataset", "n", "valid_ppl"];
    write_csv(&rc.out_dir.join("sweep.csv"), &header, &rows)?;
    let display_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r[0].clone(), r[1].clone(), format!("{:.4}", r[2].parse::<f64>().unwrap())])
        .collect();
    let table = render_table(&header, &display_rows);
    fs::write(rc.out_dir.join("sweep.txt"), &table)?;
    print!("{table}");
    Ok(())
}
