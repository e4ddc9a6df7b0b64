use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use signspot_core::bags::{build_bags, dump_bags};
use signspot_core::corpus::filter_by_confidence;
use signspot_core::sampler::{build_batch_from, plan_epoch, training_pool};
use signspot_core::spotting::{cross_dictionary_neighbors, densify, embed_entry, embed_sequence, neighbors_csv, spot};
use signspot_core::synth::{write_synth, Transform};
use signspot_core::training::{format_log, single_positive_bags, train_with, Checkpoint};
use signspot_core::{
    evaluate, generate, load_manifest, read_model, rng, write_model, Corpus, DictVocab, Error,
    AnchorWeighting, EvalOptions, EvalSplit, FrameAnchor, LossMode, Result, SegBackMode, SynonymPolicy,
    SynthConfig, TrainConfig, MODEL_DIMS,
};

mod settings;
use settings::{List, Range, Settings};

#[derive(Parser, Debug)]
#[command(name = "signspot", version, about = "Sign spotting with multiple-instance contrastive embeddings")]
struct Cli {
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    Gen(GenArgs),
    /// Train the embedding head.
    Train(TrainArgs),
    /// Retrieval and localization metrics as JSON.
    Eval(EvalArgs),
    /// Spot one word in one sequence.
    Spot(SpotArgs),
    /// Spot every subtitle word of a sequence.
    Densify(DensifyArgs),
    /// Nearest neighbours between two dictionaries.
    Fauxamis(FauxAmisArgs),
    /// Print the bags of one training batch.
    BagsDump(BagsDumpArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    num_sequences: Option<usize>,
    #[arg(long)]
    seq_windows: Option<Range>,
    #[arg(long)]
    variants_per_word: Option<Range>,
    #[arg(long)]
    variant_similarity: Option<f64>,
    #[arg(long)]
    subtitle_words_per_seq: Option<usize>,
    #[arg(long)]
    signed_fraction: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    transform: Option<Transform>,
    #[arg(long)]
    domain_gap: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    coarticulation: Option<f64>,
    #[arg(long)]
    sign_duration: Option<Range>,
    #[arg(long)]
    filler_signs: Option<usize>,
    #[arg(long)]
    unseen_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

/// Training settings shared by `train` and `bags-dump`.
#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    mode: Option<LossMode>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated epochs after which the rate drops.
    #[arg(long)]
    lr_decay_epochs: Option<List>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    class_balanced: Option<bool>,
    #[arg(long)]
    dict_vocab: Option<DictVocab>,
    #[arg(long)]
    synonym_policy: Option<SynonymPolicy>,
    #[arg(long)]
    fg_negative_for_background: Option<bool>,
    #[arg(long)]
    seg_back: Option<SegBackMode>,
    /// equal | per-family
    #[arg(long)]
    anchor_weighting: Option<AnchorWeighting>,
    /// Drop annotations below this confidence before training.
    #[arg(long)]
    min_confidence: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Per-epoch CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<String>,
    /// Directory for checkpoints at each rate boundary.
    #[arg(long)]
    checkpoint_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    split: Option<EvalSplit>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    frame_anchor: Option<FrameAnchor>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<String>,
    /// Also write a one-row CSV summary.
    #[arg(long)]
    csv: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SpotArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    model: String,
    #[arg(long)]
    seq: String,
    #[arg(long)]
    word: String,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    trace: Option<String>,
}

#[derive(Args, Debug)]
struct DensifyArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    model: String,
    #[arg(long)]
    seq: String,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct FauxAmisArgs {
    /// Corpus whose dictionary supplies the queries.
    #[arg(long)]
    data: String,
    /// Corpus whose dictionary is searched.
    #[arg(long)]
    other: String,
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct BagsDumpArgs {
    #[arg(long)]
    data: Option<String>,
    /// Training step whose batch is dumped (epoch 1).
    #[arg(long)]
    step: Option<usize>,
    /// Keep only the first items of the batch.
    #[arg(long)]
    max_items: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

impl std::fmt::Display for SpotArgs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "data = {}\nmodel = {}\nseq = {}\nword = {}\nstride = {}", self.data, self.model, self.seq, self.word, self.stride)?;
        if let Some(t) = &self.trace {
            writeln!(f, "trace = {t}")?;
        }
        Ok(())
    }
}

impl std::fmt::Display for DensifyArgs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "data = {}\nmodel = {}\nseq = {}\nstride = {}", self.data, self.model, self.seq, self.stride)
    }
}

impl std::fmt::Display for FauxAmisArgs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "data = {}\nother = {}\nmodel = {}\nk = {}", self.data, self.other, self.model, self.k)
    }
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Spot(a) => cmd_spot(a),
        Command::Densify(a) => cmd_densify(a),
        Command::Fauxamis(a) => cmd_fauxamis(a),
        Command::BagsDump(a) => cmd_bags_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn announce(command: &str, s: &Settings) {
    eprint!("# effective {command} config\n{}", s.render());
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let d = SynthConfig::default();
    let out: String = s.require("out", a.out)?;
    let r = |x: (usize, usize)| Range(x.0, x.1);
    let cfg = SynthConfig {
        seed: s.pick("seed", a.seed, d.seed)?,
        vocab_size: s.pick("vocab_size", a.vocab_size, d.vocab_size)?,
        num_sequences: s.pick("num_sequences", a.num_sequences, d.num_sequences)?,
        seq_windows: {
            let v = s.pick("seq_windows", a.seq_windows, r(d.seq_windows))?;
            (v.0, v.1)
        },
        variants_per_word: {
            let v = s.pick("variants_per_word", a.variants_per_word, r(d.variants_per_word))?;
            (v.0, v.1)
        },
        variant_similarity: s.pick("variant_similarity", a.variant_similarity, d.variant_similarity)?,
        subtitle_words_per_seq: s.pick("subtitle_words_per_seq", a.subtitle_words_per_seq, d.subtitle_words_per_seq)?,
        signed_fraction: s.pick("signed_fraction", a.signed_fraction, d.signed_fraction)?,
        latent_dim: s.pick("latent_dim", a.latent_dim, d.latent_dim)?,
        transform: s.pick("transform", a.transform, d.transform)?,
        domain_gap: s.pick("domain_gap", a.domain_gap, d.domain_gap)?,
        noise_sigma: s.pick("noise_sigma", a.noise_sigma, d.noise_sigma)?,
        coarticulation: s.pick("coarticulation", a.coarticulation, d.coarticulation)?,
        sign_duration: {
            let v = s.pick("sign_duration", a.sign_duration, r(d.sign_duration))?;
            (v.0, v.1)
        },
        filler_signs: s.pick("filler_signs", a.filler_signs, d.filler_signs)?,
        unseen_fraction: s.pick("unseen_fraction", a.unseen_fraction, d.unseen_fraction)?,
        test_fraction: s.pick("test_fraction", a.test_fraction, d.test_fraction)?,
        ..d
    };
    s.finish()?;
    announce("gen", &s);
    cfg.validate()?;
    let synth = generate(&cfg)?;
    let dir = PathBuf::from(out);
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let manifest = write_synth(&synth, &dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_config(s: &mut Settings, f: TrainFlags) -> Result<(TrainConfig, f32)> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        mode: s.pick("mode", f.mode, d.mode)?,
        tau: s.pick("tau", f.tau, d.tau)?,
        batch_size: s.pick("batch_size", f.batch_size, d.batch_size)?,
        epochs: s.pick("epochs", f.epochs, d.epochs)?,
        lr: s.pick("lr", f.lr, d.lr)?,
        lr_decay_epochs: s.pick("lr_decay_epochs", f.lr_decay_epochs, List(d.lr_decay_epochs.clone()))?.0,
        lr_decay_factor: s.pick("lr_decay_factor", f.lr_decay_factor, d.lr_decay_factor)?,
        momentum: s.pick("momentum", f.momentum, d.momentum)?,
        class_balanced: s.pick("class_balanced", f.class_balanced, d.class_balanced)?,
        dict_vocab: s.pick("dict_vocab", f.dict_vocab, d.dict_vocab)?,
        synonym_policy: s.pick("synonym_policy", f.synonym_policy, d.synonym_policy)?,
        fg_negative_for_background: s.pick("fg_negative_for_background", f.fg_negative_for_background, d.fg_negative_for_background)?,
        seg_back: s.pick("seg_back", f.seg_back, d.seg_back)?,
        anchor_weighting: s.pick("anchor_weighting", f.anchor_weighting, d.anchor_weighting)?,
        seed: s.pick("seed", f.seed, d.seed)?,
    };
    // confidences lie in [0.5, 1], so the default keeps every annotation
    let min_conf = s.pick("min_confidence", f.min_confidence, 0.5f32)?;
    Ok((cfg, min_conf))
}

fn load_training_corpus(data: &str, min_conf: f32) -> Result<Corpus> {
    filter_by_confidence(load_manifest(Path::new(data))?, min_conf)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let data: String = s.require("data", a.data)?;
    let out: String = s.require("out", a.out)?;
    let (cfg, min_conf) = train_config(&mut s, a.flags)?;
    let log_path = s.pick("log", a.log, format!("{out}.log.csv"))?;
    let checkpoint_dir = Some(s.pick("checkpoint_dir", a.checkpoint_dir, String::new())?).filter(|d| !d.is_empty());
    s.finish()?;
    announce("train", &s);
    cfg.validate()?;
    let corpus = load_training_corpus(&data, min_conf)?;
    if let Some(dir) = &checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    let output = train_with(&corpus, &cfg, MODEL_DIMS, |c: Checkpoint| {
        eprintln!("checkpoint at epoch {}", c.epoch);
        match &checkpoint_dir {
            Some(dir) => write_model(&Path::new(dir).join(format!("epoch{:03}.bin", c.epoch)), c.params),
            None => Ok(()),
        }
    })?;
    write_model(Path::new(&out), &output.params)?;
    write_file(Path::new(&log_path), &format_log(&output.log))?;
    if let (Some(first), Some(last)) = (output.log.first(), output.log.last()) {
        eprintln!("mean loss: epoch 1 {:.6}, epoch {} {:.6}", first.mean_loss, last.epoch, last.mean_loss);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let data: String = s.require("data", a.data)?;
    let model: String = s.require("model", a.model)?;
    let d = EvalOptions::default();
    let opts = EvalOptions {
        split: s.pick("split", a.split, d.split)?,
        stride: s.pick("stride", a.stride, d.stride)?,
        k: s.pick("k", a.k, d.k)?,
        frame_anchor: s.pick("frame_anchor", a.frame_anchor, d.frame_anchor)?,
    };
    s.finish()?;
    announce("eval", &s);
    let corpus = load_manifest(Path::new(&data))?;
    let params = read_model(Path::new(&model))?;
    let report = evaluate(&corpus, &params, &opts)?;
    if !report.skipped_classes.is_empty() {
        eprintln!("skipped classes without clips or dictionary videos: {}", report.skipped_classes.join(" "));
    }
    match a.out {
        Some(p) => write_file(Path::new(&p), &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    if let Some(p) = a.csv {
        write_file(Path::new(&p), &report.csv_summary())?;
    }
    Ok(())
}

fn find_sequence<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a signspot_core::ContinuousSequence> {
    corpus
        .continuous()
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Contract(format!("no sequence `{id}`")))
}

fn cmd_spot(a: SpotArgs) -> CliResult {
    eprint!("# effective spot config\n{a}");
    let corpus = load_manifest(Path::new(&a.data))?;
    let params = read_model(Path::new(&a.model))?;
    let seq = find_sequence(&corpus, &a.seq)?;
    let word = corpus
        .vocabulary()
        .lookup(&a.word.to_lowercase())
        .ok_or_else(|| Error::Contract(format!("word `{}` is not in the vocabulary", a.word)))?;
    let entry = corpus
        .dictionary_entry(word)
        .ok_or_else(|| Error::Contract(format!("word `{}` has no dictionary entry", a.word)))?;
    let emb = embed_sequence(&params, seq, a.stride)?;
    let result = spot(&emb, embed_entry(&params, entry).view(), word);
    if let Some(p) = &a.trace {
        result.write_trace(Path::new(p))?;
    }
    let json = serde_json::json!({
        "seq": seq.id,
        "word": a.word.to_lowercase(),
        "best_frame": result.best_frame,
        "best_variant": result.best_variant,
        "score": result.score,
    });
    println!("{json}");
    Ok(())
}

fn cmd_densify(a: DensifyArgs) -> CliResult {
    eprint!("# effective densify config\n{a}");
    let corpus = load_manifest(Path::new(&a.data))?;
    let params = read_model(Path::new(&a.model))?;
    let seq = find_sequence(&corpus, &a.seq)?;
    let dense = densify(seq, &params, &corpus, a.stride)?;
    let vocab = corpus.vocabulary();
    for w in &dense.skipped {
        eprintln!("skipped `{}`: no dictionary entry", vocab.word(*w));
    }
    let rows: Vec<_> = dense
        .results
        .iter()
        .map(|r| {
            serde_json::json!({
                "word": vocab.word(r.word),
                "best_frame": r.best_frame,
                "best_variant": r.best_variant,
                "score": r.score,
            })
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows).expect("json"));
    Ok(())
}

fn cmd_fauxamis(a: FauxAmisArgs) -> CliResult {
    eprint!("# effective fauxamis config\n{a}");
    let ca = load_manifest(Path::new(&a.data))?;
    let cb = load_manifest(Path::new(&a.other))?;
    let params = read_model(Path::new(&a.model))?;
    let n = cross_dictionary_neighbors(ca.dictionary(), cb.dictionary(), &params, a.k);
    let csv = neighbors_csv(&n, ca.vocabulary(), cb.vocabulary());
    match a.out {
        Some(p) => write_file(Path::new(&p), &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bags_dump(a: BagsDumpArgs) -> CliResult {
    let mut s = Settings::load(a.config.as_deref())?;
    let data: String = s.require("data", a.data)?;
    let step = s.pick("step", a.step, 0usize)?;
    let max_items = s.pick("max_items", a.max_items, 0usize)?;
    let (cfg, min_conf) = train_config(&mut s, a.flags)?;
    s.finish()?;
    announce("bags-dump", &s);
    cfg.validate()?;
    let corpus = load_training_corpus(&data, min_conf)?;
    let pool = training_pool(&corpus);
    let mut epoch_rng = rng::indexed_stream(cfg.seed, "epoch", 1);
    let plan = plan_epoch(&corpus, &pool, cfg.batch_size, cfg.class_balanced, &mut epoch_rng);
    let seqs = plan
        .get(step)
        .ok_or_else(|| Error::Contract(format!("epoch 1 has {} steps, step {step} requested", plan.len())))?;
    let seqs = if max_items > 0 { &seqs[..max_items.min(seqs.len())] } else { &seqs[..] };
    let mut batch_rng = rng::indexed_stream(cfg.seed, "batch", step as u64);
    let batch = build_batch_from(&corpus, seqs, &cfg.batch_options(), &mut batch_rng)?;
    let mut bags = build_bags(&batch, cfg.mode, &cfg.bag_options(&corpus));
    if cfg.mode == LossMode::Infonce {
        let mut r = rng::indexed_stream(cfg.seed, "infonce", step as u64);
        bags.anchors = single_positive_bags(&batch, bags.anchors, &mut r);
    }
    for (i, item) in batch.items.iter().enumerate() {
        println!(
            "# item {i}: seq={} fg={} fg_window={} bg_windows={:?}",
            item.seq_id,
            corpus.vocabulary().word(item.fg_word),
            item.fg_window,
            item.bg_windows
        );
    }
    print!("{}", dump_bags(&bags, Some(corpus.vocabulary())));
    Ok(())
}
