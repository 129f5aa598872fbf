//! Batch entry points wiring the pipeline end to end: corpus ingestion,
//! classifier and residualised training, lexicon extraction, informativeness
//! scoring, synthetic benchmark generation and lexicon comparison.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use deconflex_core::classifiers::{
    evaluate, train_on_examples, Arch, FeatureSpace, ModelSpec, TrainConfig, TrainedModel,
};
use deconflex_core::corpus::{
    derive_examples, parse_dataset, repair_and_clean, LabeledExample, Split, Submission, Task,
};
use deconflex_core::explanations::{
    lexicon_from_model, ExplMethod, Lexicon, LexiconOptions, SurrogateConfig,
};
use deconflex_core::informativeness::{
    ensure_comparable, informativeness, IlConfig, IlReport, IlSplit,
};
use deconflex_core::nn::write_atomic;
use deconflex_core::residualisation::{
    dr_train_on_examples, DrFeatures, DrSpec, DrTrainConfig, DrTrained, DrVariant,
};
use deconflex_core::synthbench::{
    generate, grade_lexicon, read_ground_truth, write_corpus, SynthConfig,
};
use deconflex_core::textrep::{
    build_vocab, embed_pooled, CacheDirProvider, CachingProvider, EmbeddingProvider, HashProvider,
};

#[derive(Parser)]
#[command(
    name = "deconflex",
    version,
    about = "Deconfounded lexicon extraction for text classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, repair and deduplicate a corpus; emit the cleaning report.
    Ingest(IngestArgs),
    /// Train a classifier (optionally residualised) and save a checkpoint.
    Train(TrainArgs),
    /// Extract a ranked lexicon from a checkpoint on the test split.
    Explain(ExplainArgs),
    /// Score one or more lexicons with the informativeness coefficient.
    Informativeness(InformativenessArgs),
    /// Generate a synthetic corpus with planted ground truth.
    Synth(SynthArgs),
    /// Compare two lexicons side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum TaskArg {
    Final,
    Meta,
    Individual,
}

impl From<TaskArg> for Task {
    fn from(value: TaskArg) -> Task {
        match value {
            TaskArg::Final => Task::FinalDecision,
            TaskArg::Meta => Task::MetaReview,
            TaskArg::Individual => Task::IndividualReview,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum ArchArg {
    PooledFfn,
    GruAttn,
    BowLinear,
    Fusion,
}

impl From<ArchArg> for Arch {
    fn from(value: ArchArg) -> Arch {
        match value {
            ArchArg::PooledFfn => Arch::PooledFfn,
            ArchArg::GruAttn => Arch::GruAttn,
            ArchArg::BowLinear => Arch::BowLinear,
            ArchArg::Fusion => Arch::FusionMultihead,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum ExplainerArg {
    Attention,
    Surrogate,
    Linear,
}

impl From<ExplainerArg> for ExplMethod {
    fn from(value: ExplainerArg) -> ExplMethod {
        match value {
            ExplainerArg::Attention => ExplMethod::Attention,
            ExplainerArg::Surrogate => ExplMethod::Surrogate,
            ExplainerArg::Linear => ExplMethod::LinearWeight,
        }
    }
}

#[derive(Args, Serialize)]
struct ProviderArgs {
    /// Embedding cache directory.
    #[arg(long, env = "DECONFLEX_CACHE", default_value = "cache")]
    cache: PathBuf,
    /// Encoder id: `hash-<dim>-<seed>` for the deterministic hashed encoder,
    /// anything else names a populated cache directory.
    #[arg(long, default_value = "hash-32-1234")]
    model_id: String,
}

impl ProviderArgs {
    fn open(&self) -> Result<Box<dyn EmbeddingProvider>> {
        if let Some(rest) = self.model_id.strip_prefix("hash-") {
            let mut parts = rest.splitn(2, '-');
            let dim: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| anyhow!("bad hash model id {}", self.model_id))?;
            let seed: u64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| anyhow!("bad hash model id {}", self.model_id))?;
            let inner = HashProvider::new(dim, seed);
            Ok(Box::new(CachingProvider::new(inner, &self.cache)?))
        } else {
            Ok(Box::new(CacheDirProvider::open(&self.cache, &self.model_id)?))
        }
    }
}

#[derive(Args, Serialize)]
struct TrainHyper {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 64)]
    attn_dim: usize,
    #[arg(long, default_value_t = 3)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 3)]
    min_freq: usize,
    #[arg(long, default_value_t = 1)]
    ngram_max: usize,
}

#[derive(Args, Serialize)]
struct IngestArgs {
    /// Dataset root in the canonical layout.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: TaskArg,
    #[arg(long)]
    arch: ArchArg,
    /// Train the deep-residualisation variant of the chosen architecture.
    #[arg(long)]
    dr: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative weight of the intermediate loss (residualised models).
    #[arg(long, default_value_t = 1.0)]
    intermediate_weight: f64,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    hyper: TrainHyper,
}

#[derive(Args, Serialize)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: TaskArg,
    #[arg(long)]
    explainer: Option<ExplainerArg>,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    min_count: usize,
    #[arg(long, default_value_t = 1000)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args, Serialize)]
struct InformativenessArgs {
    /// Lexicon files (JSON lines); several build a comparison table.
    #[arg(long, required = true)]
    lexicon: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: TaskArg,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    /// Occurrence counts instead of binary presence for lexicon features.
    #[arg(long)]
    count_features: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_docs: usize,
    #[arg(long, default_value_t = 40)]
    doc_length: usize,
    #[arg(long, default_value_t = 1.5)]
    confounder_effect: f64,
    #[arg(long, default_value_t = 1.5)]
    causal_effect: f64,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    lexicon_a: PathBuf,
    #[arg(long)]
    lexicon_b: PathBuf,
    /// ground_truth.json from a synthetic corpus; adds contamination rows.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Train(args) => cmd_train(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Informativeness(args) => cmd_informativeness(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Compare(args) => cmd_compare(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Guard against two runs writing the same output directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".deconflex.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn version_string() -> String {
    format!(
        "deconflex {} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("DECONFLEX_GIT_SHA").unwrap_or("untracked")
    )
}

/// Every command serializes its full invocation into the output directory.
fn write_run_config<A: Serialize>(dir: &Path, command: &str, args: &A) -> Result<()> {
    let payload = serde_json::json!({
        "command": command,
        "version": version_string(),
        "args": args,
    });
    write_atomic(&dir.join("run_config.json"), serde_json::to_string_pretty(&payload)?.as_bytes())?;
    Ok(())
}

fn load_corpus(data: &Path) -> Result<(Vec<Submission>, deconflex_core::corpus::CleaningReport, serde_json::Value)> {
    let outcome = parse_dataset(data)?;
    let parse_report = serde_json::json!({
        "split_counts": outcome.split_counts,
        "skipped": outcome.skipped,
    });
    for skip in &outcome.skipped {
        eprintln!("skipped {}: {}", skip.path.display(), skip.reason);
    }
    let (subs, cleaning) = repair_and_clean(outcome.submissions);
    Ok((subs, cleaning, parse_report))
}

fn split_examples(subs: &[Submission], task: Task) -> (Vec<LabeledExample>, Vec<LabeledExample>, Vec<LabeledExample>) {
    let of = |split: Split| {
        let subset: Vec<Submission> = subs.iter().filter(|s| s.split == split).cloned().collect();
        derive_examples(&subset, task).0
    };
    (of(Split::Train), of(Split::Validation), of(Split::Test))
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let (subs, cleaning, parse_report) = load_corpus(&args.data)?;
    write_run_config(&args.out, "ingest", &args)?;
    write_atomic(
        &args.out.join("cleaning_report.json"),
        serde_json::to_string_pretty(&cleaning)?.as_bytes(),
    )?;
    write_atomic(
        &args.out.join("parse_report.json"),
        serde_json::to_string_pretty(&parse_report)?.as_bytes(),
    )?;
    let per_split: Vec<String> = Split::all()
        .iter()
        .map(|s| format!("{s}: {}", subs.iter().filter(|x| x.split == *s).count()))
        .collect();
    println!(
        "ingested {} submissions ({}); removed {} empty, {} duplicate reviews; repaired {} meta-reviews",
        subs.len(),
        per_split.join(", "),
        cleaning.removed_empty,
        cleaning.removed_duplicates,
        cleaning.repaired_meta
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let task: Task = args.task.into();
    let arch: Arch = args.arch.into();
    let (subs, _, _) = load_corpus(&args.data)?;
    let (train_ex, val_ex, test_ex) = split_examples(&subs, task);
    if train_ex.is_empty() || val_ex.is_empty() {
        bail!("task {task} produced an empty train or validation split");
    }
    let provider = args.provider.open()?;
    let pdyn: &dyn EmbeddingProvider = provider.as_ref();

    let train_config = TrainConfig {
        lr: args.hyper.lr,
        epochs: args.hyper.epochs,
        batch: args.hyper.batch,
        patience: args.hyper.patience,
        seed: args.seed,
        weight_decay: args.hyper.weight_decay,
    };
    let vocab = if arch == Arch::BowLinear {
        Some(build_vocab(&train_ex, args.hyper.min_freq, args.hyper.ngram_max, "train")?)
    } else {
        None
    };

    write_run_config(&args.out, "train", &args)?;

    if args.dr {
        let variant = match arch {
            Arch::BowLinear => DrVariant::Bow,
            Arch::GruAttn => DrVariant::GruAttn,
            Arch::PooledFfn => DrVariant::BlackboxPooled,
            Arch::FusionMultihead => bail!("the fusion architecture has no residualised variant"),
        };
        let treatment = FeatureSpace::for_arch(arch, Some(pdyn), vocab.as_ref())?;
        let mut spec = DrSpec::new(variant, pdyn.dim(), treatment.input_dim());
        spec.confounder_hidden = args.hyper.hidden_dim.min(128);
        spec.hidden_dim = args.hyper.hidden_dim;
        spec.attn_dim = args.hyper.attn_dim;
        spec.dropout = args.hyper.dropout;
        spec.seed = args.seed;
        let features = DrFeatures {
            treatment,
            confounder_model_id: pdyn.model_id().to_string(),
            confounder_dim: pdyn.dim(),
        };
        let config = DrTrainConfig {
            base: train_config,
            intermediate_weight: args.intermediate_weight,
        };
        let model: DrTrained<f32> =
            dr_train_on_examples(&spec, &features, Some(pdyn), &train_ex, &val_ex, &config)?;
        model.save(&args.out)?;
        println!(
            "trained dr+{variant} on {} examples; checkpoint at {}",
            train_ex.len(),
            args.out.display()
        );
    } else {
        let features = FeatureSpace::for_arch(arch, Some(pdyn), vocab.as_ref())?;
        let mut spec = ModelSpec::new(arch, features.input_dim());
        spec.hidden_dim = args.hyper.hidden_dim;
        spec.attn_dim = args.hyper.attn_dim;
        spec.heads = args.hyper.heads;
        spec.head_dim = args.hyper.head_dim;
        spec.dropout = args.hyper.dropout;
        spec.seed = args.seed;
        let model: TrainedModel<f32> =
            train_on_examples(&spec, &features, Some(pdyn), &train_ex, &val_ex, &train_config)?;
        model.save(&args.out)?;
        if !test_ex.is_empty() {
            let metrics = evaluate(&model, Some(pdyn), &test_ex)?;
            write_atomic(
                &args.out.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)?.as_bytes(),
            )?;
            println!(
                "trained {arch:?} on {} examples; test accuracy {:.4}, macro-F1 {:.4}, weighted-F1 {:.4}",
                train_ex.len(),
                metrics.accuracy,
                metrics.macro_f1,
                metrics.weighted_f1
            );
        } else {
            println!("trained {arch:?} on {} examples (empty test split)", train_ex.len());
        }
    }
    Ok(())
}

/// A checkpoint is residualised when its spec carries a variant tag.
fn checkpoint_is_dr(dir: &Path) -> Result<bool> {
    let raw = fs::read_to_string(dir.join("spec.json"))
        .with_context(|| format!("reading {}/spec.json", dir.display()))?;
    let value: serde_json::Value = serde_json::from_str(&raw)?;
    Ok(value.get("variant").is_some())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let task: Task = args.task.into();
    let (subs, _, _) = load_corpus(&args.data)?;
    let (_, _, test_ex) = split_examples(&subs, task);
    if test_ex.is_empty() {
        bail!("task {task} produced an empty test split");
    }
    let provider = args.provider.open()?;
    let pdyn: &dyn EmbeddingProvider = provider.as_ref();
    let opts = LexiconOptions {
        k: args.k,
        min_count: args.min_count,
        surrogate: SurrogateConfig {
            n_samples: args.n_samples,
            seed: args.seed,
            ..SurrogateConfig::default()
        },
    };

    write_run_config(&args.out, "explain", &args)?;
    let lexicon = if checkpoint_is_dr(&args.checkpoint)? {
        let model: DrTrained<f32> = DrTrained::load(&args.checkpoint)?;
        if let Some(explainer) = args.explainer {
            let expected = match model.model.spec.variant {
                DrVariant::Bow => ExplainerArg::Linear,
                DrVariant::GruAttn => ExplainerArg::Attention,
                DrVariant::BlackboxPooled => ExplainerArg::Surrogate,
            };
            if explainer != expected {
                bail!(
                    "dr variant {} implies the {:?} explainer",
                    model.model.spec.variant,
                    expected
                );
            }
        }
        model.extract_lexicon(Some(pdyn), &test_ex, &opts)?
    } else {
        let model: TrainedModel<f32> = TrainedModel::load(&args.checkpoint)?;
        let method: ExplMethod = match args.explainer {
            Some(e) => e.into(),
            None => match model.classifier.spec.arch {
                Arch::BowLinear => ExplMethod::LinearWeight,
                Arch::GruAttn => ExplMethod::Attention,
                _ => ExplMethod::Surrogate,
            },
        };
        lexicon_from_model(&model, Some(pdyn), &test_ex, method, &opts)?
    };

    let path = args.out.join("lexicon.jsonl");
    lexicon.write_jsonl(&path)?;
    if lexicon.truncated {
        eprintln!(
            "warning: only {} candidate words were available for k = {}",
            lexicon.entries.len(),
            args.k
        );
    }
    println!(
        "extracted {} words ({}) to {}",
        lexicon.entries.len(),
        lexicon.method,
        path.display()
    );
    Ok(())
}

fn cmd_informativeness(args: InformativenessArgs) -> Result<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let task: Task = args.task.into();
    let (subs, _, _) = load_corpus(&args.data)?;
    let (train_ex, _, test_ex) = split_examples(&subs, task);
    if train_ex.is_empty() || test_ex.is_empty() {
        bail!("task {task} produced an empty fit or eval split");
    }
    let provider = args.provider.open()?;
    let pdyn: &dyn EmbeddingProvider = provider.as_ref();
    let conf_train: Vec<Vec<f64>> = train_ex
        .iter()
        .map(|e| embed_pooled(pdyn, &e.confounder_text))
        .collect::<deconflex_core::Result<_>>()?;
    let conf_test: Vec<Vec<f64>> = test_ex
        .iter()
        .map(|e| embed_pooled(pdyn, &e.confounder_text))
        .collect::<deconflex_core::Result<_>>()?;
    let fit = IlSplit {
        examples: &train_ex,
        confounders: &conf_train,
    };
    let eval = IlSplit {
        examples: &test_ex,
        confounders: &conf_test,
    };
    let config = IlConfig {
        l2: args.l2,
        count_features: args.count_features,
        ..IlConfig::default()
    };

    write_run_config(&args.out, "informativeness", &args)?;
    let mut reports: Vec<IlReport> = Vec::new();
    for path in &args.lexicon {
        let lexicon = Lexicon::read_jsonl(path)?;
        let report = informativeness(&lexicon, &task.to_string(), &fit, &eval, &config)?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        reports.push(report);
    }
    for pair in reports.windows(2) {
        ensure_comparable(&pair[0], &pair[1])?;
    }

    write_atomic(
        &args.out.join("il_report.json"),
        serde_json::to_string_pretty(&reports)?.as_bytes(),
    )?;
    let mut table = String::from("model                    I(L)      only-text  only-conf  text+conf\n");
    for r in &reports {
        table.push_str(&format!(
            "{:<24} {:+.4}   {:.2}       {:.2}       {:.2}\n",
            r.lexicon_ref, r.i_l, r.f1_text, r.f1_conf, r.f1_both
        ));
    }
    write_atomic(&args.out.join("il_table.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let config = SynthConfig {
        seed: args.seed,
        n_docs: args.n_docs,
        doc_length: args.doc_length,
        confounder_effect: args.confounder_effect,
        causal_effect: args.causal_effect,
        ..SynthConfig::default()
    };
    let docs = generate(&config)?;
    write_corpus(&args.out, &docs, &config)?;
    write_run_config(&args.out, "synth", &args)?;
    println!(
        "generated {} documents (seed {}) into {}",
        docs.len(),
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let a = Lexicon::read_jsonl(&args.lexicon_a)?;
    let b = Lexicon::read_jsonl(&args.lexicon_b)?;
    let mut table = format!("{:<30}   {:<30}\n", a.model_id, b.model_id);
    table.push_str(&format!("{:-<30}   {:-<30}\n", "", ""));
    let rows = a.entries.len().max(b.entries.len());
    for i in 0..rows {
        let left = a.entries.get(i).map(|e| e.token.as_str()).unwrap_or("");
        let right = b.entries.get(i).map(|e| e.token.as_str()).unwrap_or("");
        table.push_str(&format!("{left:<30}   {right:<30}\n"));
    }
    if let Some(gt_path) = &args.ground_truth {
        let dir = gt_path
            .parent()
            .ok_or_else(|| anyhow!("ground truth path has no parent directory"))?;
        let truth = if gt_path.file_name().map(|f| f == "ground_truth.json").unwrap_or(false) {
            read_ground_truth(dir)?
        } else {
            serde_json::from_slice(&fs::read(gt_path)?)?
        };
        let ga = grade_lexicon(&a, &truth);
        let gb = grade_lexicon(&b, &truth);
        table.push_str(&format!(
            "\ncontamination: {:.2} vs {:.2}\ncausal recall: {:.2} vs {:.2}\n",
            ga.contamination, gb.contamination, ga.causal_recall, gb.causal_recall
        ));
    }
    print!("{table}");
    if let Some(out) = &args.out {
        let _lock = DirLock::acquire(out)?;
        write_run_config(out, "compare", &args)?;
        write_atomic(&out.join("compare.txt"), table.as_bytes())?;
    }
    Ok(())
}
