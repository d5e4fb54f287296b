mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hopchain::beam::write_run;
use hopchain::corpus::{write_corpus, write_questions};
use hopchain::eval::export_embeddings;
use hopchain::{
    build_index, evaluate_run, generate, hop_report, infer_hop_order, load_corpus, load_questions, tfidf_run,
    train, EncoderParams, Error, QuestionRecord, RefreshMode, Retriever, ScoreMode, TfIdfModel, VectorIndex,
};
use serde_json::{json, Value};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "hopchain", version, about = "Multi-hop evidence chain retrieval")]
struct Cli {
    #[command(flatten)]
    over: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// JSON config file; relative paths inside it are taken from its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Beam size.
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    per_step_k: Option<usize>,
    #[arg(long, global = true)]
    chain_len: Option<usize>,
    /// Chains returned per question.
    #[arg(long, global = true)]
    top: Option<usize>,
    #[arg(long, global = true, value_parser = parse_score_mode)]
    score_mode: Option<ScoreMode>,
    /// Negative chains per training question; also NEG rows per question on export.
    #[arg(long, global = true)]
    negatives: Option<usize>,
    #[arg(long, global = true)]
    refresh_every: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<RefreshMode>,
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<RefreshMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Tfidf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train and dev questions.
    Synth,
    /// Check the corpus and question files against each other.
    Validate,
    /// Fit the tf-idf baseline on the corpus.
    FitTfidf,
    /// Train the dual encoder.
    Train,
    /// Encode the corpus into a search index.
    BuildIndex {
        /// Encoder checkpoint to use instead of the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieve top chains for each question.
    Retrieve {
        /// Question file; defaults to the dev questions.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use a sparse baseline instead of the dense encoder.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Run file to write instead of the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run file.
    Eval {
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Run file to read instead of the configured one.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Metrics file to write instead of the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write labeled query and passage vectors as TSV.
    ExportEmbeddings {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// An input named by the config or a flag does not exist.
#[derive(Debug)]
struct MissingInput(PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input file {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with ": ", skipping causes their parent already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.is::<MissingInput>()) {
        return 3;
    }
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Io { .. } => 3,
        Error::DimensionMismatch { .. } | Error::StaleIndex { .. } => 4,
        Error::Parse { .. }
        | Error::DuplicateId(_)
        | Error::UnknownPassage { .. }
        | Error::InvalidInput(_)
        | Error::Infeasible(_)
        | Error::Format { .. }
        | Error::EmptyIndex => 5,
        Error::Divergence { .. } => 6,
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.apply_seed();
        let b = &mut cfg.beam;
        if let Some(v) = self.beam {
            b.beam_size = v;
        }
        if self.per_step_k.is_some() {
            b.per_step_k = self.per_step_k;
        }
        if let Some(v) = self.chain_len {
            b.chain_len = v;
        }
        if let Some(v) = self.top {
            b.return_top = v;
        }
        if let Some(v) = self.score_mode {
            b.score_mode = v;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.negatives {
            t.negatives = v;
        }
        if let Some(v) = self.refresh_every {
            t.refresh_every = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.mode {
            t.mode = v;
        }
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(MissingInput(p.to_path_buf()).into());
        }
    }
    Ok(())
}

fn prepare_output(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    Ok(())
}

/// `<artifact>.meta.json`: the command, root seed and effective config.
fn write_meta(artifact: &Path, command: &str, cfg: &PipelineConfig, extra: Value) -> Result<()> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta.json");
    let path = PathBuf::from(name);
    let meta = json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg,
        "details": extra,
    });
    let body = serde_json::to_string_pretty(&meta)? + "\n";
    std::fs::write(&path, body).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &PipelineConfig) -> Result<EncoderParams> {
    let params = EncoderParams::load(path)?;
    let checks = [
        ("checkpoint hash_dim", cfg.encoder.hash_dim, params.hash_dim()),
        ("checkpoint emb_dim", cfg.encoder.emb_dim, params.emb_dim()),
    ];
    for (what, expected, found) in checks {
        if expected != found {
            return Err(Error::DimensionMismatch { what, expected, found })
                .with_context(|| format!("loading {}", path.display()));
        }
    }
    Ok(params)
}

fn run(cli: Cli) -> Result<Value> {
    let mut cfg = PipelineConfig::load(cli.over.config.as_deref())?;
    cli.over.apply(&mut cfg);
    cfg.beam.validate()?;
    let p = cfg.paths.clone();
    let seed = cfg.seed;

    match cli.command {
        Command::Synth => {
            let data = generate(&cfg.synth)?;
            for out in [&p.corpus, &p.train_questions, &p.dev_questions] {
                prepare_output(out)?;
            }
            write_corpus(&data.corpus, &p.corpus)?;
            write_questions(&data.train, &p.train_questions)?;
            write_questions(&data.dev, &p.dev_questions)?;
            let details = json!({"passages": data.corpus.len(), "train": data.train.len(), "dev": data.dev.len()});
            for out in [&p.corpus, &p.train_questions, &p.dev_questions] {
                write_meta(out, "synth", &cfg, details.clone())?;
            }
            Ok(json!({"command": "synth", "seed": seed, "passages": data.corpus.len(),
                "train": data.train.len(), "dev": data.dev.len(), "corpus": p.corpus}))
        }
        Command::Validate => {
            require(&[&p.corpus, &p.train_questions, &p.dev_questions])?;
            let corpus = load_corpus(&p.corpus)?;
            let mut counts = serde_json::Map::new();
            for (name, path) in [("train", &p.train_questions), ("dev", &p.dev_questions)] {
                let qs = load_questions(path)?;
                corpus
                    .validate_questions(&qs)
                    .with_context(|| format!("validating {}", path.display()))?;
                let mut flagged = 0;
                for q in qs.iter().filter(|q| q.is_supervised()) {
                    flagged += infer_hop_order(q, &corpus)?.flagged as usize;
                }
                let supervised = qs.iter().filter(|q| q.is_supervised()).count();
                counts.insert(
                    name.into(),
                    json!({"questions": qs.len(), "supervised": supervised, "flagged_order": flagged}),
                );
            }
            Ok(json!({"command": "validate", "seed": seed, "passages": corpus.len(), "splits": counts}))
        }
        Command::FitTfidf => {
            require(&[&p.corpus])?;
            let corpus = load_corpus(&p.corpus)?;
            let model = TfIdfModel::fit(&corpus)?;
            prepare_output(&p.tfidf)?;
            model.save(&p.tfidf)?;
            write_meta(&p.tfidf, "fit-tfidf", &cfg, json!({"docs": model.doc_count()}))?;
            Ok(json!({"command": "fit-tfidf", "seed": seed, "docs": model.doc_count(), "model": p.tfidf}))
        }
        Command::Train => {
            require(&[&p.corpus, &p.train_questions])?;
            let corpus = load_corpus(&p.corpus)?;
            let train_qs = load_questions(&p.train_questions)?;
            let dev_qs = if p.dev_questions.is_file() {
                Some(load_questions(&p.dev_questions)?)
            } else {
                None
            };
            if let Some(dir) = &p.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            }
            let out = train(&corpus, &train_qs, dev_qs.as_deref(), &cfg.encoder, &cfg.train, p.checkpoint_dir.as_deref())?;
            prepare_output(&p.checkpoint)?;
            out.params.save(&p.checkpoint)?;
            let last = out.epochs.last();
            let details = json!({
                "steps": out.steps.len(),
                "refreshes": out.refreshes,
                "final_loss": last.map(|e| e.mean_loss),
                "dev_p_em": last.and_then(|e| e.dev_p_em),
                "epochs": out.epochs,
            });
            write_meta(&p.checkpoint, "train", &cfg, details.clone())?;
            if let Some(w) = &out.warmup_params {
                prepare_output(&p.warmup_checkpoint)?;
                w.save(&p.warmup_checkpoint)?;
                write_meta(&p.warmup_checkpoint, "train", &cfg, json!({"snapshot": "warm-up"}))?;
            }
            prepare_output(&p.train_log)?;
            out.write_log(&p.train_log)?;
            Ok(json!({"command": "train", "seed": seed, "steps": out.steps.len(), "refreshes": out.refreshes,
                "final_loss": details["final_loss"], "dev_p_em": details["dev_p_em"], "checkpoint": p.checkpoint}))
        }
        Command::BuildIndex { checkpoint } => {
            let ckpt = checkpoint.unwrap_or(p.checkpoint.clone());
            require(&[&p.corpus, &ckpt])?;
            let corpus = load_corpus(&p.corpus)?;
            let params = load_checkpoint(&ckpt, &cfg)?;
            let index = build_index(&params, &corpus)?;
            prepare_output(&p.index)?;
            index.save(&p.index)?;
            let details = json!({"checkpoint": ckpt, "passages": index.len(), "model_version": index.model_version});
            write_meta(&p.index, "build-index", &cfg, details)?;
            Ok(json!({"command": "build-index", "seed": seed, "passages": index.len(),
                "model_version": index.model_version, "index": p.index}))
        }
        Command::Retrieve { questions, checkpoint, baseline, out } => {
            let qpath = questions.unwrap_or(p.dev_questions.clone());
            let out = out.unwrap_or(p.run.clone());
            let qs = match baseline {
                Some(Baseline::Tfidf) => {
                    require(&[&qpath, &p.tfidf])?;
                    load_questions(&qpath)?
                }
                None => {
                    let ckpt = checkpoint.clone().unwrap_or(p.checkpoint.clone());
                    require(&[&qpath, &p.corpus, &ckpt, &p.index])?;
                    load_questions(&qpath)?
                }
            };
            let run = match baseline {
                Some(Baseline::Tfidf) => {
                    let model = TfIdfModel::load(&p.tfidf)?;
                    tfidf_run(&model, &qs, cfg.beam.return_top)?
                }
                None => {
                    let ckpt = checkpoint.unwrap_or(p.checkpoint.clone());
                    let corpus = load_corpus(&p.corpus)?;
                    let params = load_checkpoint(&ckpt, &cfg)?;
                    let index = VectorIndex::load_for(&p.index, &params)?;
                    Retriever::new(&params, &index, &corpus)?.retrieve_all(&qs, &cfg.beam)?
                }
            };
            prepare_output(&out)?;
            write_run(&run, &out)?;
            let method = if baseline.is_some() { "tfidf" } else { "dense" };
            write_meta(&out, "retrieve", &cfg, json!({"method": method, "questions": qpath}))?;
            Ok(json!({"command": "retrieve", "seed": seed, "method": method, "questions": run.len(),
                "beam": cfg.beam.beam_size, "run": out}))
        }
        Command::Eval { questions, run, out } => {
            let qpath = questions.unwrap_or(p.dev_questions.clone());
            let run_path = run.unwrap_or(p.run.clone());
            let out = out.unwrap_or(p.metrics.clone());
            require(&[&qpath, &p.corpus, &run_path])?;
            let corpus = load_corpus(&p.corpus)?;
            let qs: Vec<QuestionRecord> = load_questions(&qpath)?;
            let run = hopchain::beam::load_run(&run_path)?;
            let metrics = evaluate_run(&run, &qs, &corpus, cfg.beam.return_top)?;
            let hops = hop_report(&run, &qs, &corpus, cfg.beam.return_top)?;
            prepare_output(&out)?;
            metrics.write_json(&out)?;
            if let Some(csv) = &p.metrics_csv {
                prepare_output(csv)?;
                metrics.write_csv(csv)?;
            }
            write_meta(&out, "eval", &cfg, json!({"run": run_path, "questions": qpath, "hops": hops}))?;
            let s = metrics.summary();
            Ok(json!({"command": "eval", "seed": seed, "ar": s.ar, "pr": s.pr, "p_em": s.p_em, "em": s.em,
                "n": s.n, "hop1_acc": hops.hop1_acc, "hop2_acc": hops.hop2_acc, "metrics": out}))
        }
        Command::ExportEmbeddings { questions, checkpoint } => {
            let qpath = questions.unwrap_or(p.dev_questions.clone());
            let ckpt = checkpoint.unwrap_or(p.checkpoint.clone());
            require(&[&qpath, &p.corpus, &ckpt])?;
            let corpus = load_corpus(&p.corpus)?;
            let qs = load_questions(&qpath)?;
            let params = load_checkpoint(&ckpt, &cfg)?;
            prepare_output(&p.embeddings)?;
            let rows = export_embeddings(&params, &corpus, &qs, cfg.train.negatives, &p.embeddings)?;
            write_meta(&p.embeddings, "export-embeddings", &cfg, json!({"rows": rows, "checkpoint": ckpt}))?;
            Ok(json!({"command": "export-embeddings", "seed": seed, "rows": rows, "dim": params.emb_dim(),
                "embeddings": p.embeddings}))
        }
    }
}
