mod config;
mod error;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use instrec_core::evaluation::{self, EvalSample};
use instrec_core::pipeline::{export_sft_dataset, SftSample};
use instrec_core::prompts;
use instrec_core::templates::{append_log_jsonl, distill_candidates, read_log_jsonl, Insertion, TemplateError, TemplateSpec};
use instrec_core::{build_trie, build_vocabulary, Trigger, Vocabulary};

use config::{BackendConfig, Config};
use error::CliError;

#[derive(Parser)]
#[command(name = "instrec", version, about = "Instruction recommendation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and prefix tree for an instruction file and write a debug dump.
    BuildTrie {
        #[arg(long)]
        instructions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use an existing vocabulary instead of deriving one.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
        /// Also write the derived vocabulary.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Recommend instructions for one trigger and print the result as JSON.
    Recommend {
        #[arg(long)]
        trigger: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
        k: u8,
    },
    /// Inspect or grow the template library.
    #[command(subcommand)]
    Template(TemplateCommand),
    /// Generate reasoning traces for (trigger, gold) pairs and write SFT JSONL.
    ConstructDataset {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// In-context examples (JSON array); the bundled ones by default.
        #[arg(long)]
        examples: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a test set; with --sweep-deltas print one CSV row per threshold.
    Eval {
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sweep_deltas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
        k: u8,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Subcommand)]
enum TemplateCommand {
    /// Insert a template if it is novel enough and save the library.
    Add {
        #[arg(long)]
        template: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    List {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cluster logged misses, summarize each cluster and gate the candidates.
    Distill {
        /// Distillation log (JSONL); defaults to the one named in the config.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        min_cluster: usize,
        /// Save accepted candidates to the template file.
        #[arg(long)]
        apply: bool,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<Config, CliError> {
        let mut cfg = Config::load(&self.config)?;
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        let script = self.mock_script.clone();
        let endpoint = self.endpoint.clone();
        let kind = self.backend.or(match (&script, &endpoint) {
            (Some(_), _) => Some(BackendKind::Mock),
            (None, Some(_)) => Some(BackendKind::Http),
            _ => None,
        });
        match kind {
            None => {}
            Some(BackendKind::Mock) => {
                let script = match (script, &cfg.backend) {
                    (Some(s), _) => s,
                    (None, BackendConfig::Mock { script }) => script.clone(),
                    _ => return Err(CliError::Usage("--backend mock needs --mock-script".into())),
                };
                cfg.backend = BackendConfig::Mock { script };
            }
            Some(BackendKind::Http) => {
                cfg.backend = match (endpoint, &cfg.backend) {
                    (Some(endpoint), BackendConfig::Http { timeout_secs, .. }) => BackendConfig::Http {
                        endpoint,
                        timeout_secs: *timeout_secs,
                    },
                    (Some(endpoint), _) => BackendConfig::Http {
                        endpoint,
                        timeout_secs: None,
                    },
                    (None, b @ BackendConfig::Http { .. }) => b.clone(),
                    _ => return Err(CliError::Usage("--backend http needs --endpoint".into())),
                };
            }
        }
        Ok(cfg)
    }
}

fn emit<T: serde::Serialize + ?Sized>(v: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json values serialize"))
        .map_err(|e| CliError::Io(e.to_string()))
}

fn template_error(e: TemplateError) -> CliError {
    match e {
        TemplateError::SummarizerFailure(b) => CliError::Backend(b.to_string()),
        TemplateError::Io(e) => CliError::Io(e.to_string()),
        TemplateError::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::Invariant(other.to_string()),
    }
}

fn build_trie_cmd(
    instructions: &Path,
    out: &Path,
    vocabulary: Option<&Path>,
    vocab_out: Option<&Path>,
) -> Result<(), CliError> {
    let library = config::load_instructions(instructions)?;
    let vocab = match vocabulary {
        Some(p) => Vocabulary::from_json(&config::read(p)?).map_err(|e| CliError::Invariant(e.to_string()))?,
        None => build_vocabulary(&library.surfaces()).map_err(|e| CliError::Invariant(e.to_string()))?,
    };
    let trie = build_trie(&library, &vocab).map_err(|e| CliError::Invariant(e.to_string()))?;
    let dump = trie.dump(&vocab);
    config::write(out, &serde_json::to_string_pretty(&dump).expect("dump serializes"))?;
    if let Some(p) = vocab_out {
        config::write(p, &vocab.to_json())?;
    }
    let root_children = dump["root"]["children"].as_object().map_or(0, |m| m.len());
    emit(&json!({
        "instructions": library.len(),
        "vocab_size": trie.vocab_size(),
        "nodes": trie.node_count(),
        "root_children": root_children,
        "out": out.display().to_string(),
    }))
}

fn recommend(trigger: &Path, run: &RunArgs, k: usize) -> Result<(), CliError> {
    let cfg = run.load()?;
    let trigger: Trigger = config::parse_json(trigger)?;
    let engine = cfg.engine()?;
    let result = engine.infer(&trigger, &cfg.retrieval()?, k)?;
    if let Some(log) = &cfg.distillation_log {
        let misses = engine.templates().take_distillation_log();
        if !misses.is_empty() {
            append_log_jsonl(log, &misses).map_err(template_error)?;
        }
    }
    emit(&result)
}

fn templates_path(cfg: &Config) -> Result<&Path, CliError> {
    cfg.templates
        .as_deref()
        .ok_or_else(|| CliError::Usage("config has no templates file".into()))
}

fn verdict_json(v: Insertion, max_prior: f64) -> Value {
    let max_prior = if max_prior.is_finite() { json!(max_prior) } else { Value::Null };
    match v {
        Insertion::Added => json!({"verdict": "Added", "max_prior_similarity": max_prior}),
        Insertion::Rejected(_) => json!({"verdict": "Rejected", "max_prior_similarity": max_prior}),
    }
}

fn template_cmd(cmd: &TemplateCommand) -> Result<(), CliError> {
    match cmd {
        TemplateCommand::List { run } => {
            let cfg = run.load()?;
            let lib = cfg.templates()?;
            let v: Value = serde_json::from_str(&lib.to_json()).expect("library json parses");
            emit(&v)
        }
        TemplateCommand::Add { template, run } => {
            let cfg = run.load()?;
            let path = templates_path(&cfg)?;
            let spec: TemplateSpec = config::parse_json(template)?;
            let mut lib = cfg.templates()?;
            let before = lib.len();
            let id = spec.id.clone();
            let verdict = lib.add_if_novel(spec, &cfg.retrieval()?).map_err(template_error)?;
            if verdict == Insertion::Added {
                config::write(path, &lib.to_json())?;
            }
            let audit = lib.audit_log().last().expect("insertion audited");
            let mut v = verdict_json(verdict, audit.max_prior_similarity);
            v["template"] = json!(id);
            v["before"] = json!(before);
            v["after"] = json!(lib.len());
            emit(&v)
        }
        TemplateCommand::Distill {
            log,
            min_cluster,
            apply,
            run,
        } => {
            let cfg = run.load()?;
            let log_path = log
                .clone()
                .or_else(|| cfg.distillation_log.clone())
                .ok_or_else(|| CliError::Usage("no distillation log given".into()))?;
            let entries = read_log_jsonl(&log_path).map_err(template_error)?;
            let engine = cfg.engine()?;
            let retrieval = cfg.retrieval()?;
            let mut lib = cfg.templates()?;
            let before = lib.len();
            let outcome = distill_candidates(&entries, engine_backend(&cfg, &engine)?.as_ref(), lib.embedder().as_ref(), *min_cluster)
                .map_err(template_error)?;
            let mut candidates = Vec::new();
            for spec in outcome.candidates {
                let id = spec.id.clone();
                let verdict = match lib.add_if_novel(spec.clone(), &retrieval) {
                    Ok(v) => v,
                    Err(TemplateError::DuplicateId(_)) => Insertion::Rejected(1.0),
                    Err(e) => return Err(template_error(e)),
                };
                let max_prior = lib
                    .audit_log()
                    .last()
                    .filter(|a| a.template_id == id)
                    .map_or(1.0, |a| a.max_prior_similarity);
                let mut v = verdict_json(verdict, max_prior);
                v["template"] = serde_json::to_value(&spec).expect("spec serializes");
                candidates.push(v);
            }
            if *apply && lib.len() != before {
                config::write(templates_path(&cfg)?, &lib.to_json())?;
            }
            let failures: Vec<Value> = outcome
                .failures
                .iter()
                .map(|f| json!({"cluster": f.cluster, "medoid_trigger": f.medoid_trigger, "error": f.error.to_string()}))
                .collect();
            emit(&json!({
                "log_entries": entries.len(),
                "before": before,
                "after": lib.len(),
                "applied": *apply,
                "candidates": candidates,
                "failures": failures,
            }))
        }
    }
}

fn engine_backend(
    cfg: &Config,
    engine: &instrec_core::Engine,
) -> Result<std::sync::Arc<dyn instrec_core::ModelBackend>, CliError> {
    cfg.backend(engine.trie().vocab_size())
}

fn construct_dataset(pairs: &Path, out: &Path, examples: Option<&Path>, run: &RunArgs) -> Result<(), CliError> {
    let cfg = run.load()?;
    let engine = cfg.engine()?;
    let trie = engine.trie();
    let samples: Vec<EvalSample> = evaluation::parse_testset(&config::read(pairs)?, trie.library())
        .map_err(|e| CliError::Invariant(format!("{}: {e}", pairs.display())))?;
    let examples = match examples {
        Some(p) => config::parse_json(p)?,
        None => prompts::default_examples(),
    };
    let base = prompts::construction(examples);
    let mut sft = Vec::new();
    let mut failed = Vec::new();
    for s in &samples {
        let gold = trie.library().get(&s.gold).expect("gold checked on load").clone();
        match engine.construct_reasoning_sample(&base, &s.trigger, &gold) {
            Ok(reasoning) => sft.push(SftSample {
                trigger: s.trigger.clone(),
                instruction: gold,
                reasoning,
            }),
            Err(e) if e.backend_error().is_some() => return Err(e.into()),
            Err(e) => {
                eprintln!("skipping {}: {e}", s.trigger.id());
                failed.push(json!({"trigger_id": s.trigger.id(), "error": e.to_string()}));
            }
        }
    }
    let report = export_sft_dataset(&sft, out)?;
    emit(&json!({
        "pairs": samples.len(),
        "written": report.written,
        "failed": failed,
        "skipped": report.skipped,
        "out": out.display().to_string(),
    }))
}

fn eval_cmd(testset: &Path, sweep: Option<&[f64]>, k: usize, run: &RunArgs) -> Result<(), CliError> {
    let cfg = run.load()?;
    let engine = cfg.engine()?;
    let samples = evaluation::load_testset(testset, engine.trie().library()).map_err(|e| match e {
        evaluation::EvalError::Io(e) => CliError::Io(format!("{}: {e}", testset.display())),
        other => CliError::Invariant(format!("{}: {other}", testset.display())),
    })?;
    let base = cfg.retrieval()?;
    let invariant = |e: evaluation::EvalError| CliError::Invariant(e.to_string());
    match sweep {
        None => {
            let row = evaluation::evaluate(&engine, &samples, &base, k).map_err(invariant)?;
            for f in &row.failures {
                eprintln!("sample {} failed: {}", f.sample_id, f.error);
            }
            emit(&row)
        }
        Some(deltas) => {
            if let Some(d) = deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
                return Err(CliError::Usage(format!("delta {d} outside [0, 1]")));
            }
            let table = evaluation::delta_sweep(&engine, &samples, deltas, k, &base).map_err(invariant)?;
            for r in &table.rows {
                for f in &r.failures {
                    eprintln!("delta {}: sample {} failed: {}", r.delta, f.sample_id, f.error);
                }
            }
            if table.is_partial() {
                eprintln!("warning: partial table, failed samples were scored as misses");
            }
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::BuildTrie {
            instructions,
            out,
            vocabulary,
            vocab_out,
        } => build_trie_cmd(instructions, out, vocabulary.as_deref(), vocab_out.as_deref()),
        Command::Recommend { trigger, run, k } => recommend(trigger, run, *k as usize),
        Command::Template(cmd) => template_cmd(cmd),
        Command::ConstructDataset {
            pairs,
            out,
            examples,
            run,
        } => construct_dataset(pairs, out, examples.as_deref(), run),
        Command::Eval {
            testset,
            sweep_deltas,
            k,
            run,
        } => eval_cmd(testset, sweep_deltas.as_deref(), *k as usize, run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
