//! Command-line front end. Single-stage subcommands expose each module;
//! `pipeline` chains augment -> downsample -> split -> train -> evaluate and
//! writes a manifest tying every artifact to its seeds and config.
//!
//! Conventions: human-readable text goes to standard error, JSON to files or
//! standard output. Every JSON report is wrapped in an envelope carrying the
//! config hash and the core fingerprint it was produced under. One global
//! seed fans out to per-stage derived seeds, so adding a stage never
//! perturbs earlier stages' randomness.

use clap::{Args, Parser, Subcommand};
use fairtune::biaseval::{
    example_nlls, perplexity, permutation_test, read_pairs, read_triples, stereotype_score_pairs,
    stereoset_report, BiasReport, ModelScorer, PairedExample, PermutationMode,
};
use fairtune::cda::{augment_corpus, AugmentOptions, AugmentedCorpus};
use fairtune::corpus::{read_lines, Corpus, CorpusMode, Tokenizer, BOS};
use fairtune::knowledgeeval::{fact_retrieval, read_cloze, read_coref, winobias_eval};
use fairtune::lexicon::BiasAttributeList;
use fairtune::model::{CoreModel, ModelConfig, Objective};
use fairtune::peft::{attach, count_tunable, MethodSpec, TuningOverlay};
use fairtune::rng::derive_seed;
use fairtune::sentdebias::{bias_subspace, difference_vectors, ModelEncoder};
use fairtune::synth;
use fairtune::trainer::{train, TrainConfig};
use fairtune::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "fairtune",
    version,
    about = "Counterfactual data augmentation and parameter-efficient debiasing for small language models"
)]
struct Cli {
    /// Cap the global worker-thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a sentence corpus with counterfactual substitutions.
    Augment(AugmentArgs),
    /// Fit a tuning overlay (or the full model) on a text corpus.
    Train(TrainArgs),
    /// Score paired or fill-the-blank bias benchmarks.
    EvalBias(EvalBiasArgs),
    /// Measure perplexity and per-example losses on a corpus.
    EvalLm(EvalLmArgs),
    /// Probe cloze-style fact retrieval.
    EvalFacts(EvalFactsArgs),
    /// Score pronoun coreference resolution by candidate preference.
    EvalCoref(EvalCorefArgs),
    /// Build a bias subspace from counterfactual embedding differences.
    DebiasSubspace(DebiasSubspaceArgs),
    /// Print tunable-parameter counts for a model configuration.
    Params(ParamsArgs),
    /// Run augment -> downsample -> split -> train -> evaluate end to end.
    Pipeline(PipelineArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(n) = cli.threads {
        // Ignore the error when a pool already exists (e.g. under a harness).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match cli.command {
        Command::Augment(args) => run_augment(args),
        Command::Train(args) => run_train(args),
        Command::EvalBias(args) => run_eval_bias(args),
        Command::EvalLm(args) => run_eval_lm(args),
        Command::EvalFacts(args) => run_eval_facts(args),
        Command::EvalCoref(args) => run_eval_coref(args),
        Command::DebiasSubspace(args) => run_debias_subspace(args),
        Command::Params(args) => run_params(args),
        Command::Pipeline(args) => run_pipeline(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::InvalidInput(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        });
    }
}

// ---------------------------------------------------------------- plumbing

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the resolved configuration, embedded in every JSON report so an
/// artifact can be traced back to the exact invocation that produced it.
fn config_hash<T: Serialize>(config: &T) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    hex(&Sha256::digest(canonical.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    core_fingerprint: Option<String>,
    seed: u64,
    report: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_value_vs_baseline: Option<f64>,
}

fn write_json<T: Serialize>(output: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("cli: serializing report: {e}")))?;
    text.push('\n');
    match output {
        Some(path) => {
            std::fs::write(path, text)
                .map_err(|e| Error::io(format!("cli: writing {}", path.display()), e))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn read_envelope<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("cli: reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("cli: parsing {}: {e}", path.display())))
}

/// Built-in list name, or a TSV path with `groups` columns.
fn load_list(list: &str, groups: usize) -> Result<BiasAttributeList> {
    match list {
        "gender" | "religion" | "race" => BiasAttributeList::builtin(list),
        path => BiasAttributeList::load(Path::new(path), groups),
    }
}

fn parse_method(method: &str, l: Option<usize>, r: Option<usize>) -> Result<MethodSpec> {
    match method {
        "full" => Ok(MethodSpec::Full),
        "prefix" => Ok(MethodSpec::Prefix {
            l: l.ok_or_else(|| Error::invalid("cli: --method prefix requires --l"))?,
        }),
        "prompt" => Ok(MethodSpec::Prompt {
            l: l.ok_or_else(|| Error::invalid("cli: --method prompt requires --l"))?,
        }),
        "adapter" => Ok(MethodSpec::Adapter {
            r: r.ok_or_else(|| Error::invalid("cli: --method adapter requires --r"))?,
        }),
        other => Err(Error::invalid(format!(
            "cli: unknown method \"{other}\" (expected full, prefix, prompt, or adapter)"
        ))),
    }
}

fn parse_objective(objective: &str) -> Result<Objective> {
    match objective {
        "causal" => Ok(Objective::Causal),
        "masked" => Ok(Objective::Masked),
        other => Err(Error::invalid(format!(
            "cli: unknown objective \"{other}\" (expected causal or masked)"
        ))),
    }
}

/// Model training/scoring examples. Causal models learn from a BOS prepend
/// so the first real token is predicted too, matching the scoring side.
fn scoring_examples(corpus: &Corpus, objective: Objective) -> Vec<Vec<usize>> {
    corpus
        .examples
        .iter()
        .map(|ids| match objective {
            Objective::Causal => {
                let mut v = Vec::with_capacity(ids.len() + 1);
                v.push(BOS);
                v.extend_from_slice(ids);
                v
            }
            Objective::Masked => ids.clone(),
        })
        .collect()
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("FAIRTUNE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("cli: creating {}", dir.display()), e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::data(format!(
            "cli: {what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Args)]
struct ModelArgs {
    /// Core checkpoint.
    #[arg(long)]
    core: PathBuf,
    /// Overlay checkpoint; omitted scores the bare core.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Tokenizer JSON.
    #[arg(long)]
    tokenizer: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(CoreModel, Option<TuningOverlay>, Tokenizer)> {
        require_file(&self.core, "core checkpoint")?;
        require_file(&self.tokenizer, "tokenizer")?;
        let core = CoreModel::load(&self.core)?;
        let overlay = match &self.overlay {
            Some(path) => {
                require_file(path, "overlay checkpoint")?;
                let (overlay, _) = TuningOverlay::load(path)?;
                overlay.bind_check(&core)?;
                Some(overlay)
            }
            None => None,
        };
        let tokenizer = Tokenizer::load(&self.tokenizer)?;
        Ok((core, overlay, tokenizer))
    }
}

// ---------------------------------------------------------------- augment

#[derive(Args, Serialize)]
struct AugmentArgs {
    /// Input text file, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Built-in list name (gender, religion, race) or a TSV path.
    #[arg(long, default_value = "gender")]
    list: String,
    /// Group count when --list is a file path.
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Counterfactual samples per sentence (at most N-1).
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Keep sentences that mention no attribute words.
    #[arg(long)]
    keep_neutral: bool,
    /// Also drop sampled selections that leave every occurred group fixed.
    #[arg(long)]
    exclude_fixed_identity: bool,
    /// Output JSONL path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    output: Option<PathBuf>,
}

fn run_augment(args: AugmentArgs) -> Result<()> {
    require_file(&args.input, "input corpus")?;
    let lines = read_lines(&args.input)?;
    let list = load_list(&args.list, args.groups)?;
    let opts = AugmentOptions {
        samples_per_sentence: args.samples,
        seed: args.seed,
        keep_neutral: args.keep_neutral,
        exclude_fixed_identity: args.exclude_fixed_identity,
    };
    let augmented = augment_corpus(&lines, &list, &opts)?;
    eprintln!(
        "augmented {} sentences into {} examples",
        lines.len(),
        augmented.examples.len()
    );
    match &args.output {
        Some(path) => augmented.write_jsonl(path)?,
        None => {
            for example in &augmented.examples {
                let line = serde_json::to_string(example)
                    .map_err(|e| Error::data(format!("cli: serializing example: {e}")))?;
                println!("{line}");
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Training corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Fraction of the corpus held out for validation.
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,
    /// Concatenate lines and cut length-T examples instead of per-sentence.
    #[arg(long)]
    chunk: Option<usize>,
    /// full | prefix | prompt | adapter
    #[arg(long)]
    method: String,
    /// Prefix/prompt length.
    #[arg(long)]
    l: Option<usize>,
    /// Adapter reduction factor (bottleneck width is d/r).
    #[arg(long)]
    r: Option<usize>,
    /// Existing core checkpoint; omitted trains from a fresh initialization.
    #[arg(long)]
    core: Option<PathBuf>,
    /// Tokenizer JSON; required with --core, built from the corpus otherwise.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Word list supplying tokenizer abbreviations for a fresh vocabulary.
    #[arg(long)]
    list: Option<String>,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    // fresh-model shape
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    t_max: usize,
    #[arg(long, default_value = "causal")]
    objective: String,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    // schedule
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    /// Select the learning rate by grid search instead of --lr.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for checkpoints (default $FAIRTUNE_OUT or ".").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report JSON path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainOutput {
    method: String,
    tunable_parameters: usize,
    selected_lr: f64,
    final_val_loss: f64,
    core_checkpoint: String,
    overlay_checkpoint: String,
    tokenizer: String,
    report: fairtune::trainer::TrainReport,
}

fn run_train(args: TrainArgs) -> Result<()> {
    require_file(&args.corpus, "training corpus")?;
    let hash = config_hash(&args);
    let out_dir = args.out.clone().unwrap_or_else(default_out_dir);
    ensure_dir(&out_dir)?;
    let objective = parse_objective(&args.objective)?;
    let spec = parse_method(&args.method, args.l, args.r)?;
    let lines = read_lines(&args.corpus)?;

    let (mut core, tokenizer, tokenizer_path) = match &args.core {
        Some(core_path) => {
            require_file(core_path, "core checkpoint")?;
            let tok_path = args.tokenizer.clone().ok_or_else(|| {
                Error::invalid("cli: --core requires --tokenizer (the vocabulary it was trained with)")
            })?;
            require_file(&tok_path, "tokenizer")?;
            (CoreModel::load(core_path)?, Tokenizer::load(&tok_path)?, tok_path)
        }
        None => {
            let abbreviations = match &args.list {
                Some(list) => load_list(list, args.groups)?.abbreviations(),
                None => Default::default(),
            };
            let tokenizer = Tokenizer::build_vocab(&lines, args.min_count, &abbreviations)?;
            let config = ModelConfig {
                n_layer: args.layers,
                d: args.d,
                n_head: args.heads,
                t_max: args.t_max,
                vocab_size: tokenizer.vocab_size(),
                objective,
            };
            let core = CoreModel::new(config, derive_seed(args.seed, "core-init"))?;
            let tok_path = out_dir.join("tokenizer.json");
            tokenizer.save(&tok_path)?;
            (core, tokenizer, tok_path)
        }
    };

    let mode = match args.chunk {
        Some(t) => CorpusMode::Chunk(t),
        None => CorpusMode::Sentence,
    };
    let corpus = Corpus::from_lines(&lines, mode, &tokenizer, &args.corpus.display().to_string())?;
    let (train_c, val_c) =
        fairtune::corpus::split(&corpus, args.val_fraction, derive_seed(args.seed, "split"))?;
    let train_set = scoring_examples(&train_c, core.config.objective);
    let val_set = scoring_examples(&val_c, core.config.objective);
    eprintln!(
        "training {} ({} tunable parameters) on {} examples, {} held out",
        spec.name(),
        count_tunable(spec, &core.config),
        train_set.len(),
        val_set.len()
    );

    let base = TrainConfig {
        initial_lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        weight_decay: args.weight_decay,
        seed: derive_seed(args.seed, "train"),
        grad_clip: args.grad_clip,
    };
    let (selected, mut overlay, mut report) = if args.grid {
        let grid: Vec<TrainConfig> = fairtune::trainer::DEFAULT_LR_GRID
            .iter()
            .map(|&lr| TrainConfig {
                initial_lr: lr,
                ..base.clone()
            })
            .collect();
        fairtune::trainer::grid_select(&core, spec, &grid, &train_set, &val_set)?
    } else {
        let mut overlay = attach(&core, spec, derive_seed(args.seed, "attach"))?;
        let report = train(&mut core, &mut overlay, &train_set, &val_set, &base)?;
        (base, overlay, report)
    };
    if args.grid {
        // grid_select trains against a frozen copy; replay the winner so a
        // Full run leaves this core in its trained state too.
        if overlay.is_full() {
            let mut replay = attach(&core, spec, derive_seed(args.seed, "attach"))?;
            report = train(&mut core, &mut replay, &train_set, &val_set, &selected)?;
            overlay = replay;
        }
        eprintln!("grid selected lr {}", selected.initial_lr);
    }

    let core_path = out_dir.join("core.bin");
    core.save(&core_path)?;
    let overlay_path = out_dir.join("overlay.bin");
    overlay.save(&core.config, &overlay_path)?;
    report.checkpoint = Some(overlay_path.display().to_string());

    let output = Envelope {
        config_hash: hash,
        core_fingerprint: Some(core.fingerprint()),
        seed: args.seed,
        report: TrainOutput {
            method: spec.name().to_string(),
            tunable_parameters: count_tunable(spec, &core.config),
            selected_lr: selected.initial_lr,
            final_val_loss: report.final_val_loss(),
            core_checkpoint: core_path.display().to_string(),
            overlay_checkpoint: overlay_path.display().to_string(),
            tokenizer: tokenizer_path.display().to_string(),
            report,
        },
        p_value_vs_baseline: None,
    };
    write_json(args.output.as_deref(), &output)
}

// -------------------------------------------------------------- eval-bias

#[derive(Args, Serialize)]
struct EvalBiasArgs {
    #[command(flatten)]
    #[serde(skip)]
    model: ModelArgs,
    /// Model paths, serialized for the config hash.
    #[arg(skip)]
    model_paths: (String, Option<String>, String),
    /// Paired-sentence JSONL with sent_more / sent_less fields.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Fill-the-blank triple JSONL (context, stereotype, anti_stereotype, unrelated).
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Also report perplexity on this corpus.
    #[arg(long)]
    ppl_corpus: Option<PathBuf>,
    /// Earlier report to test against with a paired permutation test.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Sign-flip resamples; sets of at most 16 run exhaustively instead.
    #[arg(long, default_value_t = 10000)]
    resamples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report JSON path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    output: Option<PathBuf>,
}

fn permutation_mode(n: usize, resamples: usize) -> PermutationMode {
    if n <= 16 {
        PermutationMode::Exhaustive
    } else {
        PermutationMode::MonteCarlo { resamples }
    }
}

fn run_eval_bias(mut args: EvalBiasArgs) -> Result<()> {
    args.model_paths = (
        args.model.core.display().to_string(),
        args.model.overlay.as_ref().map(|p| p.display().to_string()),
        args.model.tokenizer.display().to_string(),
    );
    let hash = config_hash(&args);
    if args.pairs.is_some() == args.triples.is_some() {
        return Err(Error::invalid(
            "cli: eval-bias needs exactly one of --pairs or --triples",
        ));
    }
    let (core, overlay, tokenizer) = args.model.load()?;
    let scorer = ModelScorer {
        core: &core,
        overlay: overlay.as_ref(),
        tokenizer: &tokenizer,
    };
    let mut report = match (&args.pairs, &args.triples) {
        (Some(pairs_path), None) => {
            require_file(pairs_path, "paired examples")?;
            stereotype_score_pairs(&scorer, &read_pairs(pairs_path)?)?
        }
        (None, Some(triples_path)) => {
            require_file(triples_path, "triples")?;
            stereoset_report(&scorer, &read_triples(triples_path)?)?
        }
        _ => unreachable!("validated above"),
    };
    if let Some(ppl_path) = &args.ppl_corpus {
        require_file(ppl_path, "perplexity corpus")?;
        let lines = read_lines(ppl_path)?;
        let encoded: Vec<Vec<usize>> = lines.iter().map(|l| tokenizer.encode(l)).collect();
        report.perplexity = Some(perplexity(&core, overlay.as_ref(), &encoded)?);
    }
    let p_value = match &args.baseline {
        Some(baseline_path) => {
            require_file(baseline_path, "baseline report")?;
            let baseline: Envelope<BiasReport> = read_envelope(baseline_path)?;
            let mode = permutation_mode(report.indicators.len(), args.resamples);
            Some(permutation_test(
                &baseline.report.indicators,
                &report.indicators,
                mode,
                derive_seed(args.seed, "permutation"),
            )?)
        }
        None => None,
    };
    if let Some(score) = report.stereotype_score {
        eprintln!("stereotype score {score:.2}");
    }
    write_json(
        args.output.as_deref(),
        &Envelope {
            config_hash: hash,
            core_fingerprint: Some(core.fingerprint()),
            seed: args.seed,
            report,
            p_value_vs_baseline: p_value,
        },
    )
}

// ---------------------------------------------------------------- eval-lm

#[derive(Args, Serialize)]
struct EvalLmArgs {
    #[command(flatten)]
    #[serde(skip)]
    model: ModelArgs,
    #[arg(skip)]
    model_paths: (String, Option<String>, String),
    /// Evaluation corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Concatenate lines and cut length-T examples instead of per-sentence.
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report JSON path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    output: Option<PathBuf>,
}

fn run_eval_lm(mut args: EvalLmArgs) -> Result<()> {
    args.model_paths = (
        args.model.core.display().to_string(),
        args.model.overlay.as_ref().map(|p| p.display().to_string()),
        args.model.tokenizer.display().to_string(),
    );
    let hash = config_hash(&args);
    require_file(&args.corpus, "evaluation corpus")?;
    let (core, overlay, tokenizer) = args.model.load()?;
    let mode = match args.chunk {
        Some(t) => CorpusMode::Chunk(t),
        None => CorpusMode::Sentence,
    };
    let lines = read_lines(&args.corpus)?;
    let corpus = Corpus::from_lines(&lines, mode, &tokenizer, &args.corpus.display().to_string())?;
    let ppl = perplexity(&core, overlay.as_ref(), &corpus.examples)?;
    let nlls = example_nlls(&core, overlay.as_ref(), &corpus.examples)?;
    eprintln!("perplexity {ppl:.4} over {} examples", corpus.len());
    write_json(
        args.output.as_deref(),
        &Envelope {
            config_hash: hash,
            core_fingerprint: Some(core.fingerprint()),
            seed: args.seed,
            report: BiasReport {
                stereotype_score: None,
                lm_score: None,
                perplexity: Some(ppl),
                icat: None,
                indicators: nlls,
            },
            p_value_vs_baseline: None,
        },
    )
}

// ------------------------------------------------------------- eval-facts

#[derive(Args, Serialize)]
struct EvalFactsArgs {
    #[command(flatten)]
    #[serde(skip)]
    model: ModelArgs,
    #[arg(skip)]
    model_paths: (String, Option<String>, String),
    /// Cloze queries JSONL with template / answer fields.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report JSON path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    output: Option<PathBuf>,
}

fn run_eval_facts(mut args: EvalFactsArgs) -> Result<()> {
    args.model_paths = (
        args.model.core.display().to_string(),
        args.model.overlay.as_ref().map(|p| p.display().to_string()),
        args.model.tokenizer.display().to_string(),
    );
    let hash = config_hash(&args);
    require_file(&args.queries, "cloze queries")?;
    let (core, overlay, tokenizer) = args.model.load()?;
    let queries = read_cloze(&args.queries)?;
    let report = fact_retrieval(&core, overlay.as_ref(), &tokenizer, &queries)?;
    eprintln!(
        "P@1 {:.4}  P@10 {:.4}  MRR {:.4}",
        report.p_at_1, report.p_at_10, report.mrr
    );
    write_json(
        args.output.as_deref(),
        &Envelope {
            config_hash: hash,
            core_fingerprint: Some(core.fingerprint()),
            seed: args.seed,
            report,
            p_value_vs_baseline: None,
        },
    )
}

// ------------------------------------------------------------- eval-coref

#[derive(Args, Serialize)]
struct EvalCorefArgs {
    #[command(flatten)]
    #[serde(skip)]
    model: ModelArgs,
    #[arg(skip)]
    model_paths: (String, Option<String>, String),
    /// Coreference JSONL (sentence, pronoun, candidates, correct, stereotypical).
    #[arg(long)]
    examples: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report JSON path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    output: Option<PathBuf>,
}

fn run_eval_coref(mut args: EvalCorefArgs) -> Result<()> {
    args.model_paths = (
        args.model.core.display().to_string(),
        args.model.overlay.as_ref().map(|p| p.display().to_string()),
        args.model.tokenizer.display().to_string(),
    );
    let hash = config_hash(&args);
    require_file(&args.examples, "coreference examples")?;
    let (core, overlay, tokenizer) = args.model.load()?;
    let examples = read_coref(&args.examples)?;
    let scorer = ModelScorer {
        core: &core,
        overlay: overlay.as_ref(),
        tokenizer: &tokenizer,
    };
    let report = winobias_eval(&scorer, &examples)?;
    eprintln!(
        "F1 pro {:.2}  F1 anti {:.2}  diff {:.2}",
        report.f1_pro, report.f1_anti, report.diff
    );
    write_json(
        args.output.as_deref(),
        &Envelope {
            config_hash: hash,
            core_fingerprint: Some(core.fingerprint()),
            seed: args.seed,
            report,
            p_value_vs_baseline: None,
        },
    )
}

// -------------------------------------------------------- debias-subspace

#[derive(Args, Serialize)]
struct DebiasSubspaceArgs {
    #[command(flatten)]
    #[serde(skip)]
    model: ModelArgs,
    #[arg(skip)]
    model_paths: (String, Option<String>, String),
    /// Sentence corpus whose counterfactual differences span the subspace.
    #[arg(long)]
    corpus: PathBuf,
    /// Built-in list name (gender, religion, race) or a TSV path.
    #[arg(long, default_value = "gender")]
    list: String,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Principal directions to keep.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Counterfactual samples per sentence.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Where to write the subspace JSON.
    #[arg(long)]
    output: PathBuf,
    /// Report JSON path; standard output when omitted.
    #[arg(long)]
    #[serde(skip)]
    report_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SubspaceOutput {
    subspace: String,
    difference_vectors: usize,
    k: usize,
    dim: usize,
}

fn run_debias_subspace(mut args: DebiasSubspaceArgs) -> Result<()> {
    args.model_paths = (
        args.model.core.display().to_string(),
        args.model.overlay.as_ref().map(|p| p.display().to_string()),
        args.model.tokenizer.display().to_string(),
    );
    let hash = config_hash(&args);
    require_file(&args.corpus, "corpus")?;
    let (core, overlay, tokenizer) = args.model.load()?;
    let lines = read_lines(&args.corpus)?;
    let list = load_list(&args.list, args.groups)?;
    let encoder = ModelEncoder {
        core: &core,
        overlay: overlay.as_ref(),
        tokenizer: &tokenizer,
    };
    let diffs = difference_vectors(
        &encoder,
        &lines,
        &list,
        args.samples,
        derive_seed(args.seed, "diffs"),
    )?;
    let subspace = bias_subspace(&diffs, args.k, derive_seed(args.seed, "subspace"))?;
    subspace.save(&args.output)?;
    eprintln!(
        "subspace of rank {} from {} difference vectors -> {}",
        args.k,
        diffs.len(),
        args.output.display()
    );
    write_json(
        args.report_out.as_deref(),
        &Envelope {
            config_hash: hash,
            core_fingerprint: Some(core.fingerprint()),
            seed: args.seed,
            report: SubspaceOutput {
                subspace: args.output.display().to_string(),
                difference_vectors: diffs.len(),
                k: args.k,
                dim: subspace.dim,
            },
            p_value_vs_baseline: None,
        },
    )
}

// ----------------------------------------------------------------- params

#[derive(Args)]
struct ParamsArgs {
    /// full | prefix | prompt | adapter; all four when omitted.
    #[arg(long)]
    method: Option<String>,
    /// Prefix/prompt length.
    #[arg(long, default_value_t = 16)]
    l: usize,
    /// Adapter reduction factor.
    #[arg(long, default_value_t = 48)]
    r: usize,
    #[arg(long, default_value_t = 768)]
    d: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    t_max: usize,
    #[arg(long, default_value_t = 50257)]
    vocab: usize,
}

fn run_params(args: ParamsArgs) -> Result<()> {
    let config = ModelConfig {
        n_layer: args.layers,
        d: args.d,
        n_head: args.heads,
        t_max: args.t_max,
        vocab_size: args.vocab,
        objective: Objective::Causal,
    };
    match &args.method {
        Some(method) => {
            let spec = parse_method(method, Some(args.l), Some(args.r))?;
            println!("{}", count_tunable(spec, &config));
        }
        None => {
            for spec in [
                MethodSpec::Full,
                MethodSpec::Prefix { l: args.l },
                MethodSpec::Prompt { l: args.l },
                MethodSpec::Adapter { r: args.r },
            ] {
                println!("{}\t{}", spec.name(), count_tunable(spec, &config));
            }
        }
    }
    Ok(())
}

// --------------------------------------------------------------- pipeline

/// Resolved pipeline configuration: the config file mirrors these fields and
/// command-line flags override it.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    /// Input corpus; omitted generates the bundled synthetic corpus.
    corpus: Option<PathBuf>,
    list: String,
    groups: usize,
    samples: usize,
    keep_neutral: bool,
    exclude_fixed_identity: bool,
    method: String,
    l: usize,
    r: usize,
    d: usize,
    layers: usize,
    heads: usize,
    t_max: usize,
    min_count: usize,
    objective: String,
    /// Pretrained core; omitted pretrains one on the raw corpus.
    core: Option<PathBuf>,
    tokenizer: Option<PathBuf>,
    pretrain_lr: f64,
    pretrain_epochs: usize,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    weight_decay: f64,
    grad_clip: Option<f64>,
    downsample: f64,
    val_fraction: f64,
    /// Paired bias examples; omitted uses the synthetic pairs when the
    /// corpus is bundled, otherwise the bias evaluation is skipped.
    pairs: Option<PathBuf>,
    resamples: usize,
    seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: None,
            list: "gender".into(),
            groups: 2,
            samples: 1,
            keep_neutral: false,
            exclude_fixed_identity: true,
            method: "adapter".into(),
            l: 2,
            r: 8,
            d: 32,
            layers: 2,
            heads: 4,
            t_max: 64,
            min_count: 1,
            objective: "causal".into(),
            core: None,
            tokenizer: None,
            pretrain_lr: 1e-2,
            pretrain_epochs: 20,
            lr: 1e-2,
            epochs: 2,
            batch_size: 8,
            weight_decay: 0.01,
            grad_clip: None,
            downsample: 0.2,
            val_fraction: 0.05,
            pairs: None,
            resamples: 2000,
            seed: 42,
        }
    }
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config mirroring the pipeline flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    list: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    keep_neutral: Option<bool>,
    #[arg(long)]
    exclude_fixed_identity: Option<bool>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    core: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    downsample: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default $FAIRTUNE_OUT or ".").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => {
                require_file(path, "pipeline config")?;
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("cli: reading {}", path.display()), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::data(format!("cli: parsing {}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { c.$field = Some(v.clone()); })*
            };
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        over!(corpus, core, tokenizer, pairs);
        set!(
            list, groups, samples, keep_neutral, exclude_fixed_identity, method, l, r, d, layers,
            heads, t_max, min_count, objective, pretrain_lr, pretrain_epochs, lr, epochs,
            batch_size, weight_decay, downsample, val_fraction, resamples, seed
        );
        if let Some(v) = self.grad_clip {
            c.grad_clip = Some(v);
        }
        Ok(c)
    }
}

#[derive(Serialize)]
struct Manifest {
    /// Wall-clock stamp of the run; the only field allowed to differ between
    /// replays with identical flags and seed.
    created_at_unix_seconds: u64,
    config: PipelineConfig,
    config_hash: String,
    seed: u64,
    core_fingerprint: String,
    /// File names relative to the output directory.
    artifacts: std::collections::BTreeMap<String, String>,
    stats: PipelineStats,
}

#[derive(Serialize)]
struct PipelineStats {
    raw_sentences: usize,
    augmented_examples: usize,
    downsampled_examples: usize,
    train_examples: usize,
    val_examples: usize,
    tunable_parameters: usize,
    final_val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_stereotype_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stereotype_score: Option<f64>,
    baseline_val_perplexity: f64,
    val_perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    permutation_p_value: Option<f64>,
}

fn run_pipeline(args: PipelineArgs) -> Result<()> {
    let out_dir = args.out.clone().unwrap_or_else(default_out_dir);
    let config = args.resolve()?;
    let hash = config_hash(&config);
    let seed = config.seed;
    ensure_dir(&out_dir)?;

    // Validate every referenced input before any long-running stage.
    for (path, what) in [
        (&config.corpus, "corpus"),
        (&config.core, "core checkpoint"),
        (&config.tokenizer, "tokenizer"),
        (&config.pairs, "paired examples"),
    ] {
        if let Some(p) = path {
            require_file(p, what)?;
        }
    }
    let objective = parse_objective(&config.objective)?;
    let spec = parse_method(&config.method, Some(config.l), Some(config.r))?;
    if config.core.is_some() != config.tokenizer.is_some() {
        return Err(Error::invalid(
            "cli: pipeline needs --core and --tokenizer together",
        ));
    }
    let list = load_list(&config.list, config.groups)?;

    let mut artifacts = std::collections::BTreeMap::new();

    // 1. corpus
    let bundled = config.corpus.is_none();
    let lines = match &config.corpus {
        Some(path) => read_lines(path)?,
        None => {
            let lines = synth::synthetic_corpus(
                synth::DEFAULT_SENTENCES,
                synth::DEFAULT_SKEW,
                derive_seed(seed, "synth"),
            )?;
            let path = out_dir.join("synthetic.txt");
            std::fs::write(&path, lines.join("\n") + "\n")
                .map_err(|e| Error::io(format!("cli: writing {}", path.display()), e))?;
            artifacts.insert("corpus".into(), "synthetic.txt".into());
            lines
        }
    };
    eprintln!("corpus: {} sentences", lines.len());

    // 2. augment
    let opts = AugmentOptions {
        samples_per_sentence: config.samples,
        seed: derive_seed(seed, "augment"),
        keep_neutral: config.keep_neutral,
        exclude_fixed_identity: config.exclude_fixed_identity,
    };
    let augmented: AugmentedCorpus = augment_corpus(&lines, &list, &opts)?;
    let augmented_path = out_dir.join("augmented.jsonl");
    augmented.write_jsonl(&augmented_path)?;
    artifacts.insert("augmented".into(), "augmented.jsonl".into());
    let texts = augmented.texts();
    eprintln!("augmented: {} examples", texts.len());

    // 3. tokenizer
    let (tokenizer, tokenizer_name) = match &config.tokenizer {
        Some(path) => (Tokenizer::load(path)?, path.display().to_string()),
        None => {
            let tokenizer =
                Tokenizer::build_vocab(&texts, config.min_count, &list.abbreviations())?;
            let path = out_dir.join("tokenizer.json");
            tokenizer.save(&path)?;
            artifacts.insert("tokenizer".into(), "tokenizer.json".into());
            (tokenizer, "tokenizer.json".into())
        }
    };
    let _ = tokenizer_name;

    // 4. downsample, then split off validation
    let aug_corpus = Corpus::from_lines(&texts, CorpusMode::Sentence, &tokenizer, "augmented")?;
    let down = fairtune::corpus::downsample(
        &aug_corpus,
        config.downsample,
        derive_seed(seed, "downsample"),
    )?;
    let (train_c, val_c) =
        fairtune::corpus::split(&down, config.val_fraction, derive_seed(seed, "split"))?;
    let train_set = scoring_examples(&train_c, objective);
    let val_set = scoring_examples(&val_c, objective);
    eprintln!(
        "downsampled to {} examples; {} train / {} validation",
        down.len(),
        train_set.len(),
        val_set.len()
    );

    // 5. core: load, or pretrain on the raw corpus
    let mut core = match &config.core {
        Some(path) => CoreModel::load(path)?,
        None => {
            let model_config = ModelConfig {
                n_layer: config.layers,
                d: config.d,
                n_head: config.heads,
                t_max: config.t_max,
                vocab_size: tokenizer.vocab_size(),
                objective,
            };
            let mut core = CoreModel::new(model_config, derive_seed(seed, "core-init"))?;
            let raw = Corpus::from_lines(&lines, CorpusMode::Sentence, &tokenizer, "raw")?;
            let (raw_train, raw_val) = fairtune::corpus::split(
                &raw,
                config.val_fraction,
                derive_seed(seed, "pretrain-split"),
            )?;
            let mut full = attach(&core, MethodSpec::Full, derive_seed(seed, "pretrain-attach"))?;
            let pretrain = TrainConfig {
                initial_lr: config.pretrain_lr,
                epochs: config.pretrain_epochs,
                batch_size: config.batch_size,
                weight_decay: config.weight_decay,
                seed: derive_seed(seed, "pretrain"),
                grad_clip: config.grad_clip,
            };
            let report = train(
                &mut core,
                &mut full,
                &scoring_examples(&raw_train, objective),
                &scoring_examples(&raw_val, objective),
                &pretrain,
            )?;
            eprintln!(
                "pretrained core on the raw corpus, val loss {:.4}",
                report.final_val_loss()
            );
            core
        }
    };
    let core_path = out_dir.join("core.bin");
    core.save(&core_path)?;
    artifacts.insert("core".into(), "core.bin".into());

    // 6. baseline bias evaluation
    let pairs: Option<Vec<PairedExample>> = match &config.pairs {
        Some(path) => Some(read_pairs(path)?),
        None if bundled => {
            let pairs = synth::synthetic_pairs();
            let path = out_dir.join("pairs.jsonl");
            let mut body = String::new();
            for pair in &pairs {
                body.push_str(&serde_json::to_string(pair).expect("pair serializes"));
                body.push('\n');
            }
            std::fs::write(&path, body)
                .map_err(|e| Error::io(format!("cli: writing {}", path.display()), e))?;
            artifacts.insert("pairs".into(), "pairs.jsonl".into());
            Some(pairs)
        }
        None => None,
    };
    let baseline_report = match &pairs {
        Some(pairs) => {
            let scorer = ModelScorer {
                core: &core,
                overlay: None,
                tokenizer: &tokenizer,
            };
            let report = stereotype_score_pairs(&scorer, pairs)?;
            let path = out_dir.join("bias_baseline.json");
            write_json(
                Some(&path),
                &Envelope {
                    config_hash: hash.clone(),
                    core_fingerprint: Some(core.fingerprint()),
                    seed,
                    report: report.clone(),
                    p_value_vs_baseline: None,
                },
            )?;
            artifacts.insert("baseline_bias_report".into(), "bias_baseline.json".into());
            eprintln!(
                "baseline stereotype score {:.2}",
                report.stereotype_score.unwrap_or(f64::NAN)
            );
            Some(report)
        }
        None => None,
    };
    let baseline_ppl = perplexity(&core, None, &val_c.examples)?;

    // 7. overlay training on the augmented corpus
    let mut overlay = attach(&core, spec, derive_seed(seed, "attach"))?;
    let train_config = TrainConfig {
        initial_lr: config.lr,
        epochs: config.epochs,
        batch_size: config.batch_size,
        weight_decay: config.weight_decay,
        seed: derive_seed(seed, "train"),
        grad_clip: config.grad_clip,
    };
    let report = train(&mut core, &mut overlay, &train_set, &val_set, &train_config)?;
    eprintln!(
        "trained {} overlay, val loss {:.4}",
        spec.name(),
        report.final_val_loss()
    );
    let overlay_path = out_dir.join("overlay.bin");
    overlay.save(&core.config, &overlay_path)?;
    artifacts.insert("overlay".into(), "overlay.bin".into());

    // 8. debiased evaluations
    let debiased_report = match &pairs {
        Some(pairs) => {
            let scorer = ModelScorer {
                core: &core,
                overlay: Some(&overlay),
                tokenizer: &tokenizer,
            };
            let report = stereotype_score_pairs(&scorer, pairs)?;
            let path = out_dir.join("bias_debiased.json");
            write_json(
                Some(&path),
                &Envelope {
                    config_hash: hash.clone(),
                    core_fingerprint: Some(core.fingerprint()),
                    seed,
                    report: report.clone(),
                    p_value_vs_baseline: None,
                },
            )?;
            artifacts.insert("bias_report".into(), "bias_debiased.json".into());
            eprintln!(
                "debiased stereotype score {:.2}",
                report.stereotype_score.unwrap_or(f64::NAN)
            );
            Some(report)
        }
        None => None,
    };
    let debiased_ppl = perplexity(&core, Some(&overlay), &val_c.examples)?;
    let p_value = match (&baseline_report, &debiased_report) {
        (Some(base), Some(debiased)) => Some(permutation_test(
            &base.indicators,
            &debiased.indicators,
            permutation_mode(base.indicators.len(), config.resamples),
            derive_seed(seed, "permutation"),
        )?),
        _ => None,
    };

    // 9. manifest
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = Manifest {
        created_at_unix_seconds: created,
        config: config.clone(),
        config_hash: hash,
        seed,
        core_fingerprint: core.fingerprint(),
        artifacts,
        stats: PipelineStats {
            raw_sentences: lines.len(),
            augmented_examples: texts.len(),
            downsampled_examples: down.len(),
            train_examples: train_set.len(),
            val_examples: val_set.len(),
            tunable_parameters: count_tunable(spec, &core.config),
            final_val_loss: report.final_val_loss(),
            baseline_stereotype_score: baseline_report.and_then(|r| r.stereotype_score),
            stereotype_score: debiased_report.and_then(|r| r.stereotype_score),
            baseline_val_perplexity: baseline_ppl,
            val_perplexity: debiased_ppl,
            permutation_p_value: p_value,
        },
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json(Some(&manifest_path), &manifest)?;
    write_json(None, &manifest)
}
