//! `mmel`: prepare data, build entity representations, encode, train,
//! evaluate and link from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmel_core::attributes::{build_prompts, AttributeProvider, FixtureAttributeProvider, IDENTITY_THRESHOLD};
use mmel_core::datamodel;
use mmel_core::erpipeline::clients::{FixtureKbClient, FixtureLlmClient, HttpKbClient, HttpLlmClient, RetryPolicy, Retrying};
use mmel_core::erpipeline::{report_enhancement, ErCache, ErMode, ErPipeline, KbClient, LlmClient, RefusalDetector};
use mmel_core::harness::{self, RunConfig};
use mmel_core::synth::{self, SynthConfig, SynthKind};
use mmel_core::Exec;

#[derive(Parser)]
#[command(name = "mmel", version, about = "Multimodal entity linking toolkit")]
struct Cli {
    /// Run configuration (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset, drop unusable records and print corpus statistics.
    Prepare {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build static or dynamic entity representations.
    EnhanceEr(EnhanceArgs),
    /// Encode text inputs with the toy encoder into a feature store.
    Encode {
        /// Sample files; repeat for several splits.
        #[arg(long, required = true)]
        samples: Vec<PathBuf>,
        #[arg(long)]
        entities: PathBuf,
        /// Attribute provider fixture (JSONL) for face and identity prompts.
        #[arg(long)]
        attributes: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and keep the checkpoint with the best dev T@1.
    Train,
    /// Evaluate a checkpoint and print the metrics table.
    Eval {
        /// Defaults to the best checkpoint in the configured output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `dev`, `test`, or a path to a sample file.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "dataset")]
        dataset: String,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the candidates of one sample.
    Link {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Merge saved metric tables into one.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic benchmark and a matching run configuration.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Ranking)]
        kind: Kind,
        #[arg(long, default_value_t = 200)]
        entities: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ranking,
    SharedText,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Static,
    Dynamic,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    entities: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Recorded knowledge-base pages (JSON).
    #[arg(long, conflicts_with = "kb_url")]
    kb_fixture: Option<PathBuf>,
    /// Page-extract URL template containing `{title}`.
    #[arg(long)]
    kb_url: Option<String>,
    /// Recorded chat exchanges (JSONL).
    #[arg(long, conflicts_with = "llm_endpoint")]
    llm_fixture: Option<PathBuf>,
    /// Chat-completion endpoint; the key is read from MMEL_LLM_API_KEY.
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    llm_model: String,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Refusal patterns, one per line.
    #[arg(long)]
    refusal_patterns: Option<PathBuf>,
    #[arg(long, default_value_t = mmel_core::erpipeline::DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Minimum milliseconds between live requests per client.
    #[arg(long, default_value_t = 100)]
    min_interval_ms: u64,
    /// Where to write the run summary (JSON); printed to stdout otherwise.
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, given: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p);
    }
    let dir = harness::require_path(&cfg.output_dir, "output_dir").context("no --checkpoint given and no output_dir configured")?;
    Ok(dir.join(harness::CHECKPOINT_FILE))
}

fn enhance(args: EnhanceArgs) -> Result<()> {
    let entities = datamodel::load_entities(&args.entities)?;
    let policy = RetryPolicy::default();
    let interval = Duration::from_millis(args.min_interval_ms);
    let kb: Box<dyn KbClient> = match (&args.kb_fixture, &args.kb_url) {
        (Some(p), _) => Box::new(FixtureKbClient::load(p)?),
        (None, Some(url)) => Box::new(Retrying { inner: HttpKbClient::new(url.clone(), interval)?, policy }),
        (None, None) => bail!("a knowledge-base source is required (--kb-fixture or --kb-url)"),
    };
    let llm: Option<Box<dyn LlmClient>> = match (&args.llm_fixture, &args.llm_endpoint) {
        (Some(p), _) => Some(Box::new(FixtureLlmClient::load(p)?)),
        (None, Some(url)) => {
            let key = std::env::var("MMEL_LLM_API_KEY").ok();
            Some(Box::new(Retrying { inner: HttpLlmClient::new(url.clone(), args.llm_model.clone(), key, interval)?, policy }))
        }
        (None, None) => None,
    };
    let mode = match args.mode {
        Mode::Static => ErMode::Static,
        Mode::Dynamic => ErMode::Dynamic,
    };
    if mode == ErMode::Dynamic && llm.is_none() {
        bail!("dynamic mode needs a chat source (--llm-fixture or --llm-endpoint)");
    }
    let mut pipeline = ErPipeline::new(kb.as_ref());
    pipeline.llm = llm.as_deref();
    pipeline.max_tokens = args.max_tokens;
    pipeline.concurrency = args.concurrency;
    if let Some(p) = &args.refusal_patterns {
        pipeline.detector = RefusalDetector::load(p)?;
    }
    if let Some(dir) = &args.cache {
        pipeline.cache = Some(ErCache::new(dir)?);
    }
    let run = pipeline.run(&entities, mode, Exec::Parallel)?;
    datamodel::write_jsonl(&args.out, &run.apply(&entities))?;
    let summary = report_enhancement(&run);
    match &args.summary {
        Some(p) => harness::write_report(p, &summary)?,
        None => print_json(&summary)?,
    }
    Ok(())
}

fn resolve_split(cfg: &RunConfig, split: &str) -> Result<PathBuf> {
    let p = match split {
        "test" => harness::require_path(&cfg.test_samples, "test_samples")?.to_path_buf(),
        "dev" => harness::require_path(&cfg.dev_samples, "dev_samples")?.to_path_buf(),
        "train" => harness::require_path(&cfg.train_samples, "train_samples")?.to_path_buf(),
        other => PathBuf::from(other),
    };
    Ok(p)
}

fn split_name(split: &str) -> String {
    Path::new(split).file_stem().and_then(|s| s.to_str()).unwrap_or(split).to_string()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Prepare { samples, entities, out } => {
            let report = harness::run_prepare(&samples, &entities, &out)?;
            print_json(&report)?;
        }
        Command::EnhanceEr(args) => enhance(args)?,
        Command::Encode { samples, entities, attributes, dim, out } => {
            let mut all = Vec::new();
            for p in &samples {
                all.extend(datamodel::load_samples(p)?);
            }
            let entity_records = datamodel::load_entities(&entities)?;
            let mut prompts = Vec::new();
            if let Some(path) = &attributes {
                let provider = FixtureAttributeProvider::load(path)?;
                for s in &all {
                    let Some(image_ref) = &s.image_ref else { continue };
                    if let Some(record) = provider.fetch(image_ref)? {
                        prompts.push(build_prompts(&s.sample_id, &s.mention, &record, IDENTITY_THRESHOLD));
                    }
                }
            }
            let store = harness::encode_toy(&all, &entity_records, &prompts, cfg.seed, dim, Exec::Parallel)?;
            store.save(&out)?;
            print_json(&serde_json::json!({ "vectors": store.len(), "dim": store.dim(), "out": out }))?;
        }
        Command::Train => {
            if cli.config.is_none() {
                bail!("train needs --config");
            }
            let summary = harness::run_train(&cfg)?;
            print_json(&summary)?;
        }
        Command::Eval { checkpoint, split, dataset, out } => {
            let ckpt = default_checkpoint(&cfg, checkpoint)?;
            let samples = resolve_split(&cfg, &split)?;
            let table = harness::run_eval(&cfg, &ckpt, &samples, &dataset, &split_name(&split))?;
            if let Some(p) = &out {
                harness::write_report(p, &table)?;
            }
            print!("{}", harness::render_table(std::slice::from_ref(&table)));
            print_json(&table)?;
        }
        Command::Link { checkpoint, samples, sample_id, top } => {
            let ckpt = default_checkpoint(&cfg, checkpoint)?;
            let ranked = harness::run_link(&cfg, &ckpt, &samples, &sample_id)?;
            print!("{}", harness::format_ranking(&ranked, top));
        }
        Command::Report { inputs, out } => {
            let rows = harness::merge_reports(&inputs)?;
            if let Some(p) = &out {
                harness::write_report(p, &rows)?;
            }
            print!("{}", harness::render_table(&rows));
        }
        Command::Synth { out, kind, entities } => {
            let kind = match kind {
                Kind::Ranking => SynthKind::Ranking,
                Kind::SharedText => SynthKind::SharedText,
            };
            let synth_cfg = SynthConfig { entities, seed: cfg.seed, ..SynthConfig::default() };
            let bench = synth::generate(kind, &synth_cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let out = out.canonicalize()?;
            let base = if cli.config.is_some() { cfg.clone() } else { synth::desk_config(synth_cfg.dim, cfg.seed) };
            let run_cfg = bench.write(&out, &base)?;
            run_cfg.save(&out.join("config.toml"))?;
            print_json(&serde_json::json!({
                "entities": bench.entities.len(),
                "train": bench.train.len(),
                "dev": bench.dev.len(),
                "test": bench.test.len(),
                "config": out.join("config.toml"),
            }))?;
        }
    }
    Ok(())
}

fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<mmel_core::Error>().map(|e| e.code()))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<mmel_core::erpipeline::ClientError>().map(|_| "client")))
        .unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "code": error_code(&e), "message": format!("{e:#}") } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
