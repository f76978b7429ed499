//! Command-line entry points.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use unlearn_core::backend::mock::MockBackend;
use unlearn_core::backend::openai::OpenAiBackend;
use unlearn_core::dataset::{self, BuildConfig, LeakageJudge};
use unlearn_core::evaluation::{self, ContinualReport, EvalReport};
use unlearn_core::exclusions::Generation;
use unlearn_core::gradcheck::{gradcheck_all, GradcheckConfig};
use unlearn_core::store::parse_drafts;
use unlearn_core::{
    Backend, Bm25Params, CorrectionPipeline, ExclusionSet, ExclusionStore, GenerationParams, Route,
};

use crate::budget::BudgetedBackend;
use crate::config::{GatewayConfig, Overrides};
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "unlearn",
    version,
    about = "Inference-time unlearning guardrail"
)]
pub struct Cli {
    /// Sectioned TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backend_url: Option<String>,
    /// Leakage threshold in (0, 1).
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Retrieved exclusions per request.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Judge votes per leakage label (odd).
    #[arg(long, global = true)]
    pub maj_k: Option<usize>,
    /// Use the in-process mock backend described by this JSON fixture.
    #[arg(long, global = true)]
    pub mock_backend: Option<PathBuf>,
    /// Exclusion store file; overrides `paths.store`.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Add exclusion records from a newline-delimited file.
    Ingest { file: PathBuf },
    /// Remove exclusion records listed one id per line.
    Remove { ids_file: PathBuf },
    /// Run one query through the pipeline and print the outcome.
    Correct { query: String },
    /// Build corrector training tuples from seed records.
    BuildData { seeds: PathBuf, out: PathBuf },
    /// Evaluate probe sets against the configured store.
    Eval {
        probes: PathBuf,
        /// Also write the report as one JSON record.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Apply an unlearning schedule step by step, evaluating after each.
    Continual {
        schedule: PathBuf,
        /// Retain probes evaluated at every step.
        #[arg(long)]
        retain: Option<PathBuf>,
        /// Per-step records, one JSON object per line.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check the training-objective gradients by finite differences.
    Gradcheck {
        #[arg(long, default_value_t = GradcheckConfig::default().tolerance)]
        tolerance: f64,
        #[arg(long, default_value_t = GradcheckConfig::default().instances)]
        instances: usize,
        #[arg(long, default_value_t = GradcheckConfig::default().seed)]
        seed: u64,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            backend_url: self.backend_url.clone(),
            tau: self.tau,
            k: self.k,
            maj_k: self.maj_k,
            mock_backend: self.mock_backend.clone(),
            store: self.store.clone(),
        }
    }

    fn command_name(&self) -> &'static str {
        match self.command {
            Command::Serve { .. } => "serve",
            Command::Ingest { .. } => "ingest",
            Command::Remove { .. } => "remove",
            Command::Correct { .. } => "correct",
            Command::BuildData { .. } => "build-data",
            Command::Eval { .. } => "eval",
            Command::Continual { .. } => "continual",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Parses `args` and runs the command. Usage errors exit 2, operational
/// failures exit 1 with a JSON error on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(cli.command_name(), &anyhow::Error::from(e)),
    };
    match runtime.block_on(execute(&cli)) {
        Ok(code) => code,
        Err(e) => fail(cli.command_name(), &e),
    }
}

fn fail(command: &str, e: &anyhow::Error) -> ExitCode {
    let body = json!({"error": {"command": command, "message": format!("{e:#}")}});
    eprintln!("{body}");
    ExitCode::from(1)
}

fn load_config(cli: &Cli) -> anyhow::Result<GatewayConfig> {
    Ok(GatewayConfig::load(
        cli.config.as_deref(),
        |k| std::env::var(k).ok(),
        &cli.overrides(),
    )?)
}

fn load_store(path: &Path) -> anyhow::Result<ExclusionStore> {
    if !path.exists() {
        return Ok(ExclusionStore::new());
    }
    let text =
        fs::read_to_string(path).with_context(|| format!("reading store {}", path.display()))?;
    if text.trim().is_empty() {
        return Ok(ExclusionStore::new());
    }
    ExclusionStore::from_snapshot_str(&text).with_context(|| format!("store {}", path.display()))
}

fn exclusion_set(cfg: &GatewayConfig) -> anyhow::Result<Arc<ExclusionSet>> {
    let params = Bm25Params {
        k1: cfg.retrieval.k1,
        b: cfg.retrieval.b,
    };
    let store = load_store(&cfg.paths.store)?;
    Ok(Arc::new(
        ExclusionSet::new(store, params).persist_to(&cfg.paths.store),
    ))
}

pub fn build_backend(cfg: &GatewayConfig) -> anyhow::Result<Arc<dyn Backend>> {
    cfg.validate_backend()?;
    let inner: Arc<dyn Backend> = match &cfg.backend.mock_fixture {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading mock fixture {}", path.display()))?;
            Arc::new(
                MockBackend::from_json(&text)
                    .with_context(|| format!("mock fixture {}", path.display()))?,
            )
        }
        None => Arc::new(OpenAiBackend::new(cfg.openai_config())?),
    };
    Ok(Arc::new(BudgetedBackend::new(
        inner,
        cfg.server.max_concurrent_backend_calls,
    )))
}

fn pipeline(cfg: &GatewayConfig, backend: Arc<dyn Backend>) -> anyhow::Result<CorrectionPipeline> {
    Ok(CorrectionPipeline::new(
        backend,
        exclusion_set(cfg)?,
        cfg.pipeline_config(),
    )?)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn judge_params() -> GenerationParams {
    GenerationParams {
        temperature: 1.0,
        ..GenerationParams::default()
    }
}

async fn execute(cli: &Cli) -> anyhow::Result<ExitCode> {
    if let Command::Gradcheck {
        tolerance,
        instances,
        seed,
    } = &cli.command
    {
        return gradcheck(*tolerance, *instances, *seed);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Serve { bind } => {
            let backend = build_backend(&cfg)?;
            let state = AppState {
                pipeline: Arc::new(pipeline(&cfg, backend)?),
                max_batch: cfg.server.max_batch,
            };
            let addr = bind.clone().unwrap_or_else(|| cfg.server.bind.clone());
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .with_context(|| format!("config key server.bind: cannot bind {addr}"))?;
            tracing::info!(addr = %listener.local_addr()?, "gateway listening");
            server::serve(listener, server::router(state, cfg.server.max_body_bytes)).await?;
        }
        Command::Ingest { file } => {
            let text =
                fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let drafts = parse_drafts(&text).with_context(|| format!("{}", file.display()))?;
            let set = exclusion_set(&cfg)?;
            let before = set.version().record_count;
            let v = set.add(&drafts)?;
            print_json(&json!({
                "store_version": v.version,
                "record_count": v.record_count,
                "added": v.record_count - before,
            }))?;
        }
        Command::Remove { ids_file } => {
            let text = fs::read_to_string(ids_file)
                .with_context(|| format!("reading {}", ids_file.display()))?;
            let ids: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect();
            let set = exclusion_set(&cfg)?;
            let v = set.remove(&ids)?;
            print_json(&json!({
                "store_version": v.version,
                "record_count": v.record_count,
                "removed": ids.len(),
            }))?;
        }
        Command::Correct { query } => {
            let p = pipeline(&cfg, build_backend(&cfg)?)?;
            print_json(&p.correct(query).await?)?;
        }
        Command::BuildData { seeds, out } => {
            let text = fs::read_to_string(seeds)
                .with_context(|| format!("reading {}", seeds.display()))?;
            let seeds =
                dataset::parse_seeds(&text).with_context(|| format!("{}", seeds.display()))?;
            let store = dataset::forget_store(&seeds)?;
            let generation = Generation {
                number: 0,
                index: unlearn_core::Bm25Index::build(
                    Bm25Params {
                        k1: cfg.retrieval.k1,
                        b: cfg.retrieval.b,
                    },
                    store.records(),
                ),
                store,
            };
            let backend = build_backend(&cfg)?;
            let build = BuildConfig {
                maj_k: cfg.evaluation.maj_k,
                judge_tokens: cfg.judge_tokens(),
                ..BuildConfig::default()
            };
            let (tuples, stats) = dataset::build_tuples(
                &seeds,
                &generation,
                backend.as_ref(),
                backend.as_ref(),
                &build,
            )
            .await?;
            let n = dataset::emit_training_file(&tuples, out)?;
            print_json(&json!({"written": n, "stats": stats}))?;
        }
        Command::Eval { probes, report } => {
            let text = fs::read_to_string(probes)
                .with_context(|| format!("reading {}", probes.display()))?;
            let probes =
                evaluation::parse_probes(&text).with_context(|| format!("{}", probes.display()))?;
            let backend = build_backend(&cfg)?;
            let p = pipeline(&cfg, backend.clone())?;
            let judge = LeakageJudge {
                backend: backend.as_ref(),
                route: Route::Base,
                params: judge_params(),
                k: cfg.evaluation.maj_k,
            };
            let r = evaluation::evaluate(&p, &probes, &judge, backend.as_ref(), &cfg.eval_config())
                .await?;
            if let Some(path) = report {
                fs::write(path, format!("{}\n", serde_json::to_string(&r)?))?;
            }
            print!("{}", eval_table(&r));
        }
        Command::Continual {
            schedule,
            retain,
            report,
        } => {
            let text = fs::read_to_string(schedule)
                .with_context(|| format!("reading {}", schedule.display()))?;
            let schedule = evaluation::parse_schedule(&text)
                .with_context(|| format!("{}", schedule.display()))?;
            let retain = match retain {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    evaluation::parse_probes(&text)
                        .with_context(|| format!("{}", path.display()))?
                }
                None => Vec::new(),
            };
            let backend = build_backend(&cfg)?;
            let p = pipeline(&cfg, backend.clone())?;
            let judge = LeakageJudge {
                backend: backend.as_ref(),
                route: Route::Base,
                params: judge_params(),
                k: cfg.evaluation.maj_k,
            };
            let r = evaluation::continual_run(
                &schedule,
                &retain,
                &p,
                &judge,
                backend.as_ref(),
                &cfg.eval_config(),
            )
            .await?;
            if let Some(path) = report {
                let mut f = fs::File::create(path)?;
                for s in &r.steps {
                    writeln!(f, "{}", serde_json::to_string(s)?)?;
                }
            }
            print!("{}", continual_table(&r));
            if let Some(reason) = &r.aborted {
                bail!("continual run aborted at {reason}");
            }
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(tolerance: f64, instances: usize, seed: u64) -> anyhow::Result<ExitCode> {
    let cfg = GradcheckConfig {
        tolerance,
        instances,
        seed,
        ..GradcheckConfig::default()
    };
    let reports = gradcheck_all(&cfg)?;
    println!(
        "{:<24} {:>9} {:>7} {:>12} {:>9}  result",
        "loss", "instances", "params", "max_rel_err", "failures"
    );
    for r in &reports {
        println!(
            "{:<24} {:>9} {:>7} {:>12.3e} {:>9}  {}",
            r.loss.name(),
            r.instances,
            r.params_per_instance,
            r.max_rel_error,
            r.failure_count,
            if r.passed { "PASS" } else { "FAIL" }
        );
        for f in &r.failures {
            println!(
                "    instance {} param {}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                f.instance, f.param_index, f.analytic, f.numeric, f.rel_error
            );
        }
    }
    Ok(if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let rows = [
        ("leakage_rate", format!("{:.4}", r.leakage.rate)),
        ("leakage_judged", r.leakage.judged.to_string()),
        ("leakage_excluded", r.leakage.excluded.to_string()),
        ("plausibility", opt(r.plausibility_mean)),
        ("utility_rouge_l", opt(r.utility_rouge_l)),
        ("em", opt(r.em)),
        ("validity", opt(r.validity)),
        (
            "mean_backend_calls",
            format!("{:.3}", r.overhead.mean_calls),
        ),
        (
            "passthrough_fraction",
            format!("{:.3}", r.overhead.passthrough_fraction),
        ),
    ];
    for (k, v) in rows {
        s.push_str(&format!("{k:<22} {v}\n"));
    }
    s
}

pub fn continual_table(r: &ContinualReport) -> String {
    let mut s = format!(
        "{:>4} {:>8} {:>10} {:>9} {:>8} {:>8} {:>8}\n",
        "step", "version", "generation", "unlearned", "leakage", "utility", "retain=0"
    );
    for st in &r.steps {
        s.push_str(&format!(
            "{:>4} {:>8} {:>10} {:>9} {:>8.4} {:>8} {:>8}\n",
            st.step,
            st.store_version,
            st.index_generation,
            st.unlearned,
            st.report.leakage.rate,
            opt(st.report.utility_rouge_l),
            st.retain_identical_to_first
        ));
    }
    s
}
