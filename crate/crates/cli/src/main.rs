use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use depcause::checkpoint;
use depcause::corpus::{
    load_corpus, split_dataset, vitamin_d_fixture, write_jsonl, AnnotatedSentence, AnnotatedToken, Span, SplitRatios,
};
use depcause::embed::Vocabulary;
use depcause::eval::{predict_all, predict_unannotated, token_prf, SentenceResult};
use depcause::io::{create_dir_all, read_to_string, write_atomic};
use depcause::model::{Ablation, DepBert, ModelConfig};
use depcause::syngen::{self, validate_corpus};
use depcause::train::{history_csv, train, TrainConfig};

/// Failure of a check the user asked for, as opposed to a usage problem.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser)]
#[command(name = "depcause", version, about = "Dependency-aware cause/effect span tagger")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a templated synthetic corpus and split it into train/test/validation.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, history and resolved config.
    Train(Box<TrainArgs>),
    /// Score a checkpoint against annotated data.
    Eval(EvalArgs),
    /// Emit predicted cause/effect spans as JSON lines.
    Predict(PredictArgs),
    /// Compare autograd gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump the dependency tower's attention weights and adjacency mask as JSON.
    InspectAttention(InspectArgs),
    /// Check corpus files for tree, span and POS problems.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of distinct sentences.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Sampling and split seed [env: DEPCAUSE_SEED, default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Template JSON file (defaults to the bundled set of ten).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Lexicon JSON file (defaults to the bundled medical lexicon).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Output directory for train/test/validation JSONL and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// train:test:validation proportions.
    #[arg(long, default_value = "6:3:1")]
    split: SplitRatios,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (.jsonl or .conllu).
    #[arg(long)]
    train: PathBuf,
    /// Validation corpus; without it early stopping watches training loss.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Start from the full-scale settings (batch 128, 1000 epochs).
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    tolerance: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    left_layers: Option<usize>,
    #[arg(long)]
    right_layers: Option<usize>,
    #[arg(long)]
    left_heads: Option<usize>,
    #[arg(long)]
    right_heads: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// full, left-only or right-only.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Use the √(σ²+ε) normalisation with per-feature gain and bias.
    #[arg(long)]
    standard_layernorm: bool,
    /// Scale dependency-tower affinities by 1/√d.
    #[arg(long)]
    right_attention_scaling: bool,
    /// Leave padding positions out of the loss.
    #[arg(long)]
    exclude_pad_from_loss: bool,
    /// Restrict each token's neighbourhood to itself and its head.
    #[arg(long)]
    directed_adjacency: bool,
    /// Put a GELU hidden layer in front of the classifier.
    #[arg(long)]
    classifier_hidden: bool,
    /// Worker threads for validation scoring.
    #[arg(long)]
    threads: Option<usize>,
    /// Record wall-clock seconds in the history instead of zeros.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write per-sentence exact-match results and predicted spans as JSONL.
    #[arg(long)]
    per_sentence: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotated corpus (.jsonl or .conllu); gold spans are ignored.
    #[arg(long, conflicts_with = "text_with_annotations", required_unless_present = "text_with_annotations")]
    data: Option<PathBuf>,
    /// One sentence as space-separated FORM/UPOS/HEAD triples, HEAD 1-based with 0 for the root,
    /// e.g. "Smoking/NOUN/2 causes/VERB/0 cancer/NOUN/2".
    #[arg(long)]
    text_with_annotations: Option<String>,
    /// Write JSONL here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Training config whose model section is checked (default: d=16, one layer per tower).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initialisation seed [env: DEPCAUSE_SEED, default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Corpus to take the probe sentence from (default: the five-token vitamin D sentence).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentence to inspect; `vitamin-d` is always available without --data.
    #[arg(long)]
    sentence_id: String,
    /// Corpus containing the sentence.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dependency-tower layer (0-based); all layers when omitted.
    #[arg(long)]
    layer: Option<usize>,
    /// Output JSON file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Corpus files (.jsonl or .conllu).
    #[arg(required = true)]
    data: Vec<PathBuf>,
    /// Write the report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DEPCAUSE_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("DEPCAUSE_SEED={v} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let templates = match &args.templates {
        Some(p) => syngen::parse_templates(&read_to_string(p)?)?,
        None => syngen::default_templates(),
    };
    let lexicon = match &args.lexicon {
        Some(p) => syngen::parse_lexicon(&read_to_string(p)?)?,
        None => syngen::default_lexicon(),
    };
    let (corpus, stats) = syngen::generate(&templates, &lexicon, args.n, seed)?;
    let split = split_dataset(corpus, args.split, seed)?;
    create_dir_all(&args.out)?;
    let mut files = serde_json::Map::new();
    for (name, part) in [("train", &split.train), ("test", &split.test), ("validation", &split.validation)] {
        let path = args.out.join(format!("{name}.jsonl"));
        write_jsonl(&path, part)?;
        let bytes = std::fs::read(&path).with_context(|| format!("re-reading {}", path.display()))?;
        files.insert(
            name.into(),
            serde_json::json!({"sentences": part.len(), "sha256": syngen::sha256_hex(&bytes)}),
        );
    }
    let manifest = serde_json::json!({
        "generator": stats,
        "split": args.split.to_string(),
        "files": files,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&args.out.join("manifest.json"), text.as_bytes())?;
    println!(
        "wrote {} sentences to {} (train {}, test {}, validation {})",
        args.n,
        args.out.display(),
        split.train.len(),
        split.test.len(),
        split.validation.len()
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut base = if args.full_scale { TrainConfig::full_scale() } else { TrainConfig::default() };
    if let Some(seed) = env_seed()? {
        base.seed = seed;
    }
    let mut c = match &args.config {
        Some(p) => TrainConfig::load_over(&base, p)?,
        None => base,
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$flag { c.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed, lr => learning_rate, batch_size => batch_size, max_epochs => max_epochs,
        tolerance => tolerance, max_steps => max_steps, grad_clip => grad_clip, threads => threads,
        d_model => model.d_model, left_layers => model.left_layers, right_layers => model.right_layers,
        left_heads => model.left_heads, right_heads => model.right_heads, ffn_width => model.ffn_width,
        max_len => model.max_len, ablation => model.ablation,
    );
    let m: &mut ModelConfig = &mut c.model;
    m.standard_layernorm |= args.standard_layernorm;
    m.right_attention_scaling |= args.right_attention_scaling;
    m.classifier_hidden |= args.classifier_hidden;
    m.adjacency.directed |= args.directed_adjacency;
    if args.exclude_pad_from_loss {
        m.pad_in_loss = false;
    }
    if args.timings {
        c.deterministic = false;
    }
    c.validate()?;
    Ok(c)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = resolve_train_config(&args)?;
    let train_set = load_corpus(&args.train, true)?;
    let val_set = match &args.val {
        Some(p) => load_corpus(p, true)?,
        None => Vec::new(),
    };
    info!(
        "training on {} sentences, validating on {}; seed {}",
        train_set.len(),
        val_set.len(),
        config.seed
    );
    create_dir_all(&args.out_dir)?;
    write_atomic(&args.out_dir.join("config.toml"), config.to_toml().as_bytes())?;
    let outcome = train(&config, &train_set, &val_set)?;
    checkpoint::save(&args.out_dir.join("checkpoint"), &outcome.model, outcome.manifest_metadata(&config))?;
    write_atomic(&args.out_dir.join("history.csv"), history_csv(&outcome.history).as_bytes())?;

    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "epochs {} steps {} best epoch {}{}",
        outcome.history.len(),
        outcome.steps,
        outcome.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    println!("final train loss {:.6}", last.train_loss);
    let (label, data) = if val_set.is_empty() { ("train", &train_set) } else { ("validation", &val_set) };
    let (preds, loss) = predict_all(&outcome.model, data, config.batch_size, config.threads)?;
    let report = token_prf(&preds, data)?;
    println!("best checkpoint on {label}: loss {loss:.6}");
    println!("{report}");
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let data = load_corpus(&args.data, true)?;
    let (preds, loss) = predict_all(&model, &data, args.batch_size, args.threads)?;
    let report = token_prf(&preds, &data)?;
    println!("{report}");
    println!("loss {loss:.6}");
    if let Some(p) = &args.json {
        write_atomic(p, (report.to_json() + "\n").as_bytes())?;
    }
    if let Some(p) = &args.per_sentence {
        let mut out = String::new();
        for (pred, s) in preds.iter().zip(&data) {
            out.push_str(&serde_json::to_string(&SentenceResult::new(pred, s))?);
            out.push('\n');
        }
        write_atomic(p, out.as_bytes())?;
    }
    Ok(())
}

/// Parses `FORM/UPOS/HEAD` triples into a sentence with placeholder spans.
fn parse_annotated_text(text: &str) -> Result<AnnotatedSentence> {
    let mut tokens = Vec::new();
    for (i, item) in text.split_whitespace().enumerate() {
        let mut parts = item.rsplitn(3, '/');
        let (head, upos, form) = match (parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(u), Some(f)) if !f.is_empty() => (h, u, f),
            _ => bail!("token {} `{item}` is not FORM/UPOS/HEAD", i + 1),
        };
        let head: usize = head.parse().with_context(|| format!("token {} `{item}`: bad head", i + 1))?;
        tokens.push(AnnotatedToken::new(form, upos, head.checked_sub(1), "_"));
    }
    if tokens.is_empty() {
        bail!("no tokens in --text-with-annotations");
    }
    let s = AnnotatedSentence {
        id: "input".into(),
        tokens,
        cause: Span::new(0, 0),
        effect: Span::new(0, 0),
    };
    s.check_tree().map_err(|m| anyhow!("--text-with-annotations: {m}"))?;
    Ok(s)
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let sentences = match (&args.data, &args.text_with_annotations) {
        (Some(p), _) => load_corpus(p, false)?,
        (None, Some(t)) => vec![parse_annotated_text(t)?],
        (None, None) => unreachable!("clap requires one input"),
    };
    let mut out = String::new();
    for s in &sentences {
        s.check_tree().map_err(|m| anyhow!("sentence {}: {m}", s.id))?;
        let pred = predict_unannotated(&model, s)?;
        let r = SentenceResult::new(&pred, s);
        let line = serde_json::json!({
            "id": r.id,
            "tokens": s.forms().collect::<Vec<_>>(),
            "labels": pred.labels.iter().map(|l| l.id()).collect::<Vec<_>>(),
            "cause": r.cause,
            "effect": r.effect,
            "cause_text": r.cause_text,
            "effect_text": r.effect_text,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_output(args.out.as_deref(), &out)
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let config = match &args.config {
        Some(p) => TrainConfig::load_over(&TrainConfig::default(), p)?.model,
        None => ModelConfig {
            d_model: 16,
            left_layers: 1,
            right_layers: 1,
            max_len: 16,
            ..ModelConfig::default()
        },
    };
    let sentence = match &args.data {
        Some(p) => load_corpus(p, true)?
            .into_iter()
            .next()
            .ok_or_else(|| anyhow!("{} is empty", p.display()))?,
        None => vitamin_d_fixture(),
    };
    let vocab = Vocabulary::build(std::slice::from_ref(&sentence), 1, config.max_len)?;
    let model = DepBert::new(config, vocab, seed)?;
    info!(
        "checking {} tensors ({} scalars) on sentence {}",
        model.params().len(),
        model.params().num_scalars(),
        sentence.id
    );
    let report = model.gradient_check(&[&sentence], args.step, args.tolerance)?;
    println!("{report}");
    println!("max relative error {:.3e}", report.max_rel_error());
    if !report.passed() {
        return Err(VerificationFailed(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error(),
            args.tolerance
        ))
        .into());
    }
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let sentence = match &args.data {
        Some(p) => load_corpus(p, true)?
            .into_iter()
            .find(|s| s.id == args.sentence_id)
            .ok_or_else(|| anyhow!("no sentence `{}` in {}", args.sentence_id, p.display()))?,
        None if args.sentence_id == "vitamin-d" => vitamin_d_fixture(),
        None => bail!("--data is required for sentence `{}`", args.sentence_id),
    };
    if model.config().right_layers == 0 {
        bail!("checkpoint has no dependency-tower layers");
    }
    let (alpha, batch) = model.right_attention(&sentence)?;
    let layers: Vec<usize> = match args.layer {
        Some(l) if l < alpha.len() => vec![l],
        Some(l) => bail!("layer {l} out of range; checkpoint has {} dependency-tower layers", alpha.len()),
        None => (0..alpha.len()).collect(),
    };
    let m = batch.seq_len;
    let mut tokens = vec!["[START]".to_string()];
    tokens.extend(sentence.forms().map(str::to_string));
    tokens.push("[END]".into());
    let rows = |t: &depcause::tensor::Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    let adjacency: Vec<Vec<bool>> = (0..m).map(|i| batch.adjacency[i * m..(i + 1) * m].to_vec()).collect();
    let json = serde_json::json!({
        "id": sentence.id,
        "tokens": tokens,
        "adjacency": adjacency,
        "layers": layers.iter().map(|&l| serde_json::json!({
            "layer": l,
            "heads": alpha[l].iter().map(rows).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    write_output(args.out.as_deref(), &(serde_json::to_string_pretty(&json)? + "\n"))
}

fn run_validate(args: ValidateArgs) -> Result<()> {
    let mut all = Vec::new();
    for p in &args.data {
        all.extend(load_corpus(p, false)?);
    }
    let report = validate_corpus(&all);
    print!("{report}");
    if let Some(p) = &args.json {
        write_atomic(p, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    }
    if !report.is_clean() {
        return Err(VerificationFailed(format!("{} problems found", report.issues.len())).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(*a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::InspectAttention(a) => run_inspect(a),
        Command::Validate(a) => run_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
