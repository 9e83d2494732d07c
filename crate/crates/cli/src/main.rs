//! `guard`: collect precedents, export fine-tuning data, judge images,
//! run evaluation protocols and serve the HTTP API.

use std::collections::BTreeSet;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use guard_core::collector::{export_finetune_dataset, Collector};
use guard_core::dataset::Dataset;
use guard_core::embedding::Embedders;
use guard_core::eval::Harness;
use guard_core::image::ImageRef;
use guard_core::judge::Judge;
use guard_core::policy::{seed_unsafebench_catalog, PolicyCatalog};
use guard_core::retrieval::{RetrievalConfig, RetrievalMode, RetrievalSubject};
use guard_core::service::{serve, BackendConfig, EmbedderConfig, ServiceConfig};
use guard_core::store::PrecedentDb;
use serde_json::json;

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "guard", version, about = "Precedent-conditioned image guardrail")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a labeled dataset into precedents.
    Collect(CollectArgs),
    /// Write stored precedents as chat fine-tuning records.
    ExportFt {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        policy_catalog: Option<PathBuf>,
    },
    /// Judge one image and print the verdict as JSON.
    Judge(JudgeArgs),
    /// Run an evaluation protocol and write its report.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Chat completions base URL, or `mock:<script.json>`.
    #[arg(long)]
    backend: String,
    #[arg(long, default_value = "default")]
    model_id: String,
    #[arg(long, env = "GUARD_BACKEND_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// `test` or an embedding service URL.
    #[arg(long, default_value = "test")]
    image_embedder: String,
    #[arg(long, default_value = "test")]
    text_embedder: String,
    #[arg(long, default_value_t = 512)]
    dims: usize,
}

impl ModelArgs {
    fn backend(&self) -> Result<guard_core::gateway::BackendHandle, Box<dyn Error>> {
        let mut cfg = match self.backend.strip_prefix("mock:") {
            Some(script) => BackendConfig::mock(script),
            None => BackendConfig {
                base_url: Some(self.backend.clone()),
                mock_script: None,
                ..BackendConfig::mock("")
            },
        };
        cfg.model_id = self.model_id.clone();
        cfg.api_key = self.api_key.clone();
        cfg.parallelism = self.parallelism.max(1);
        Ok(cfg.build()?)
    }

    fn embedders(&self) -> Result<Embedders, Box<dyn Error>> {
        let cfg = EmbedderConfig {
            image: self.image_embedder.clone(),
            text: self.text_embedder.clone(),
            dims: self.dims,
            ..EmbedderConfig::default()
        };
        Ok(cfg.build()?)
    }
}

#[derive(Args)]
struct RetrievalArgs {
    /// Minimum cosine similarity; `closest` always uses the nearest precedent.
    #[arg(long, default_value = "0.8")]
    threshold: String,
    #[arg(long, value_enum, default_value_t = Subject::Image)]
    subject: Subject,
    #[arg(long)]
    no_policy: bool,
    #[arg(long)]
    no_rationale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subject {
    Image,
    Text,
}

impl RetrievalArgs {
    fn config(&self) -> Result<RetrievalConfig, Box<dyn Error>> {
        let mode = if self.threshold == "closest" {
            RetrievalMode::Closest
        } else {
            let min_sim: f64 = self.threshold.parse().map_err(|_| format!("bad threshold {:?}", self.threshold))?;
            if !(-1.0..=1.0).contains(&min_sim) {
                return Err(format!("threshold {min_sim} outside [-1, 1]").into());
            }
            RetrievalMode::Threshold { min_sim }
        };
        Ok(RetrievalConfig {
            subject: match self.subject {
                Subject::Image => RetrievalSubject::Image,
                Subject::Text => RetrievalSubject::Text,
            },
            mode,
            include_policy: !self.no_policy,
            include_rationale: !self.no_rationale,
        })
    }
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    policy_catalog: Option<PathBuf>,
    #[arg(long)]
    db: PathBuf,
    /// Skip the critique and revision round.
    #[arg(long)]
    no_revise: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long)]
    image: String,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    policy_catalog: Option<PathBuf>,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Main,
    Loo,
    PolicyScaling,
    DataScaling,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    protocol: Protocol,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    policy_catalog: Option<PathBuf>,
    /// Policies in scope, comma separated; defaults to those in the dataset.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    #[arg(long, default_value_t = 16)]
    n_shots: usize,
    /// Shot counts for the data-scaling sweep.
    #[arg(long, value_delimiter = ',', default_value = "16,160,640")]
    shots: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    heldout_shots: usize,
    #[arg(long, default_value_t = 160)]
    abundant_shots: usize,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    model: ModelArgs,
}

fn catalog(path: &Option<PathBuf>) -> Result<PolicyCatalog, Box<dyn Error>> {
    Ok(match path {
        Some(p) => PolicyCatalog::load(p)?,
        None => seed_unsafebench_catalog(),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

async fn collect(args: CollectArgs) -> CliResult {
    let catalog = Arc::new(catalog(&args.policy_catalog)?);
    let dataset = Dataset::load(&args.dataset)?;
    dataset.validate(&catalog)?;
    let db = PrecedentDb::open(&args.db)?;
    let mut collector = Collector::new(args.model.backend()?, catalog).with_embedders(args.model.embedders()?);
    let mut cfg = collector.config().clone();
    cfg.model_id = args.model.model_id.clone();
    cfg.critique_revise = !args.no_revise;
    collector = collector.with_config(cfg);

    let result = collector.collect_batch(&dataset.examples, &db, args.model.parallelism.max(1)).await;
    for (example, outcome) in dataset.examples.iter().zip(&result.outcomes) {
        match outcome {
            Err(e) => eprintln!("error {}: {e}", example.image.locator),
            Ok(o) if o.flagged() => eprintln!(
                "flagged {}: {}",
                example.image.locator,
                serde_json::to_string(&o.discard_reason)?
            ),
            Ok(_) => {}
        }
    }
    println!("{}", serde_json::to_string_pretty(&json!({"utilization": result.stats, "db_size": db.len()}))?);
    Ok(())
}

async fn judge(args: JudgeArgs) -> CliResult {
    let catalog = Arc::new(catalog(&args.policy_catalog)?);
    let db = if args.db.exists() { PrecedentDb::load_read_only(&args.db)? } else { PrecedentDb::in_memory() };
    let judge = Judge::new(args.model.backend()?, args.model.embedders()?, catalog, args.retrieval.config()?)
        .with_model_id(args.model.model_id.clone());
    let verdict = judge.judge_ref(&ImageRef::new(args.image), &db).await?;
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    Ok(())
}

async fn eval(args: EvalArgs) -> CliResult {
    let dataset = Dataset::load(&args.dataset)?;
    let policies: Vec<String> = if args.policies.is_empty() {
        let present: BTreeSet<&str> = dataset.examples.iter().map(|e| e.policy_id.as_str()).collect();
        present.into_iter().map(String::from).collect()
    } else {
        args.policies.iter().map(|p| guard_core::policy::normalize_id(p)).collect()
    };
    let ids: Vec<&str> = policies.iter().map(String::as_str).collect();
    let full = catalog(&args.policy_catalog)?;
    if let Some(unknown) = ids.iter().find(|p| !full.contains(p)) {
        return Err(format!("unknown policy {unknown:?}").into());
    }
    let harness = Harness::new(
        args.model.backend()?,
        args.model.embedders()?,
        Arc::new(full.restrict(&ids)),
        args.retrieval.config()?,
    )
    .with_parallelism(args.model.parallelism.max(1))
    .with_seed(args.seed);

    match args.protocol {
        Protocol::Main => write_json(&args.out, &harness.run_main(&dataset, args.n_shots, &ids).await?),
        Protocol::PolicyScaling => {
            write_json(&args.out, &harness.run_policy_scaling(&dataset, args.n_shots, &ids).await?)
        }
        Protocol::Loo => write_json(
            &args.out,
            &harness.run_loo(&dataset, args.heldout_shots, args.abundant_shots).await?,
        ),
        Protocol::DataScaling => {
            write_json(&args.out, &harness.data_scaling_sweep(&dataset, &args.shots, &ids).await?)
        }
    }
}

async fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Collect(args) => collect(args).await,
        Command::ExportFt { db, out, policy_catalog } => {
            let db = PrecedentDb::load_read_only(&db)?;
            let n = export_finetune_dataset(&db, &catalog(&policy_catalog)?, &out)?;
            eprintln!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Command::Judge(args) => judge(args).await,
        Command::Eval(args) => eval(args).await,
        Command::Serve { config } => Ok(serve(&ServiceConfig::load(config)?).await?),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("guard: {e}");
            ExitCode::FAILURE
        }
    }
}
