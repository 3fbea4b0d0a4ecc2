use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::Serialize;

use guideopt::adaptation::{
    confidence_indicator, plan_label_budget, select_probe, test_time_adapt, ConfidenceStats,
    DEFAULT_MIN_MARGINAL_GAIN, DEFAULT_PROBE_SIZE, DEFAULT_VAL_FRACTION,
};
use guideopt::agents::{AgentSettings, Agents, PromptTemplates};
use guideopt::gateway::{BackendPolicy, Gateway, HttpBackend, HttpBackendConfig};
use guideopt::metrics::evaluate_guideline;
use guideopt::optimizer::{run_training, FinalResult, TrainerOptions};
use guideopt::rng::{substream, Stream};
use guideopt::workbench::{
    self, load_annotations, load_dataset, load_guideline, read_json, write_json_atomic,
    write_jsonl, DatasetBundle, EmbeddingCache, RunLock, RunManifest, Split, Stage,
};
use guideopt::{AnswerSample, Guideline, LabeledSample, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "guideopt", version, about = "Optimize and apply short-answer grading guidelines")]
struct Cli {
    /// Model backend.
    #[arg(long, value_enum, default_value_t = BackendKind::Mock, global = true)]
    backend: BackendKind,
    /// JSON settings for the HTTP backend (base_url, model, embedding_model, ...).
    #[arg(long, global = true)]
    backend_config: Option<PathBuf>,
    /// Run configuration file; keys mirror the run config fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, default_value = "run", global = true)]
    run_dir: PathBuf,
    /// Directory holding grader.v1.txt, reflector.v1.txt and refiner.v1.txt.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize a guideline's adaptation rules on a labeled dataset.
    Train(TrainArgs),
    /// Score a guideline against labeled answers.
    Evaluate(EvaluateArgs),
    /// Grade answers and write predictions with reasoning.
    Grade(GradeArgs),
    /// Compare grader confidence on new answers with the training reference.
    OodCheck(OodArgs),
    /// Adapt an optimized guideline using annotated answers from a new population.
    Adapt(AdaptArgs),
    /// Choose an annotation budget from a schedule of sizes.
    PlanBudget(PlanArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    guideline: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Append per-iteration wall-clock times to this file.
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    guideline: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Restrict to one split; all samples by default.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Write the report here as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradeArgs {
    #[arg(long)]
    guideline: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions file; defaults to predictions.jsonl in the run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OodArgs {
    #[arg(long)]
    guideline: PathBuf,
    /// Unlabeled answers from the new population.
    #[arg(long)]
    dataset: PathBuf,
    /// Reference confidence; read from a training result when omitted.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    /// Training result holding the reference confidence.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PROBE_SIZE)]
    probe_size: usize,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    guideline: PathBuf,
    /// Answers from the new population.
    #[arg(long)]
    dataset: PathBuf,
    /// `{id, label}` lines for a subset of the dataset.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    guideline: PathBuf,
    /// Labeled answers from the new population.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "25,50,75,100")]
    schedule: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_MARGINAL_GAIN)]
    min_gain: f64,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
    /// Also measure the gain of the first size against the unadapted guideline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

struct Env {
    config: RunConfig,
    agents: Agents,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.rng_seed = seed;
    }
    config.check()?;
    Ok(config)
}

fn build_env(cli: &Cli) -> Result<Env> {
    let config = load_config(cli)?;
    let gateway = match cli.backend {
        BackendKind::Mock => Gateway::mock(),
        BackendKind::Http => {
            let mut hc = match &cli.backend_config {
                Some(p) => HttpBackendConfig::from_file(p)?,
                None => HttpBackendConfig::default(),
            }
            .apply_env();
            if hc.api_key.is_none() {
                log::warn!("no API key set; requests are sent without credentials");
            }
            std::fs::create_dir_all(&cli.run_dir)
                .with_context(|| format!("creating {}", cli.run_dir.display()))?;
            hc.log_path = Some(cli.run_dir.join("backend_log.jsonl"));
            Gateway::new(Arc::new(HttpBackend::new(hc)?), BackendPolicy::default())
        }
    };
    let templates = match &cli.templates {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    };
    let agents = Agents::new(
        Arc::new(gateway),
        templates,
        AgentSettings::from_config(&config),
    );
    Ok(Env { config, agents })
}

fn dataset_for(g: &Guideline, path: &Path, config: &RunConfig) -> Result<DatasetBundle> {
    load_dataset(path, &g.scale, config.rng_seed)
        .with_context(|| format!("loading {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Grade(a) => grade(cli, a),
        Command::OodCheck(a) => ood_check(cli, a),
        Command::Adapt(a) => adapt(cli, a),
        Command::PlanBudget(a) => plan_budget(cli, a),
    }
}

fn with_embeddings(env: &Env, path: &Path, bundle: &DatasetBundle, mut data: Vec<LabeledSample>) -> Result<(Vec<LabeledSample>, String)> {
    let mut cache = EmbeddingCache::beside(path, &bundle.content_hash)?;
    let mut answers: Vec<AnswerSample> = data.iter().map(|s| s.sample.clone()).collect();
    cache.attach(env.agents.gateway(), &mut answers)?;
    for (s, a) in data.iter_mut().zip(answers) {
        s.sample = a;
    }
    let name = cache
        .path()
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((data, name))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let env = build_env(cli)?;
    let g0 = load_guideline(&a.guideline)?;
    let bundle = dataset_for(&g0, &a.dataset, &env.config)?;
    let (train, cache_name) = with_embeddings(&env, &a.dataset, &bundle, bundle.labeled(Split::Train)?)?;
    let val = bundle.labeled(Split::Val)?;
    let manifest = RunManifest::new(
        Stage::Training,
        env.config.clone(),
        bundle.content_hash.clone(),
        g0.content_id(),
        env.agents.gateway().descriptor(),
    );
    {
        let _lock = RunLock::acquire(&cli.run_dir)?;
        manifest.establish(&cli.run_dir, a.resume)?;
    }
    let options = TrainerOptions {
        run_dir: Some(cli.run_dir.clone()),
        resume: a.resume,
        embedding_cache: Some(cache_name),
        timings_path: a.timings.clone(),
        ..TrainerOptions::default()
    };
    let outcome = run_training(&env.agents, &train, &val, &g0, &env.config, &options)?;
    let result = outcome.result.context("training halted before completion")?;
    println!(
        "iterations {}  validation accuracy {:.4}  kappa {:.4}  mu {:.5}",
        outcome.history.len(),
        result.validation.accuracy,
        result.validation.kappa,
        result.mu
    );
    let test = bundle.labeled(Split::Test)?;
    if !test.is_empty() {
        let (report, _) =
            evaluate_guideline(&env.agents, &result.guideline, &test, env.config.kappa_weighting)?;
        write_json_atomic(&cli.run_dir.join("test_report.json"), &report)?;
        println!("held-out test:\n{report}");
    }
    println!("wrote {}", cli.run_dir.join(workbench::FINAL_GUIDELINE_FILE).display());
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let env = build_env(cli)?;
    let g = load_guideline(&a.guideline)?;
    let bundle = dataset_for(&g, &a.dataset, &env.config)?;
    let data = match a.split {
        Some(s) => bundle.labeled(s.into())?,
        None => bundle.all_labeled()?,
    };
    if data.is_empty() {
        bail!("no samples to evaluate");
    }
    let (report, _) = evaluate_guideline(&env.agents, &g, &data, env.config.kappa_weighting)?;
    print!("{report}");
    if let Some(out) = &a.output {
        write_json_atomic(out, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    score: Option<i64>,
    reasoning: String,
}

fn grade(cli: &Cli, a: &GradeArgs) -> Result<()> {
    let env = build_env(cli)?;
    let g = load_guideline(&a.guideline)?;
    let bundle = dataset_for(&g, &a.dataset, &env.config)?;
    let refs: Vec<&AnswerSample> = bundle.samples.iter().collect();
    let outcomes = env.agents.grade_all(&refs, &g);
    let mut failed = 0;
    let predictions: Vec<Prediction> = bundle
        .samples
        .iter()
        .zip(outcomes)
        .map(|(s, o)| match o {
            Ok(out) => Prediction {
                id: &s.id,
                score: Some(out.predicted),
                reasoning: out.reasoning,
            },
            Err(e) => {
                failed += 1;
                log::warn!("grading {} failed: {e}", s.id);
                Prediction {
                    id: &s.id,
                    score: None,
                    reasoning: String::new(),
                }
            }
        })
        .collect();
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| cli.run_dir.join("predictions.jsonl"));
    write_jsonl(&out, &predictions)?;
    println!("graded {} answers ({failed} failed) -> {}", predictions.len(), out.display());
    Ok(())
}

fn reference_mu(a: &OodArgs) -> Result<f64> {
    if let Some(mu) = a.mu {
        return Ok(mu);
    }
    let path = a.reference.as_ref().unwrap_or(&a.guideline);
    let doc: serde_json::Value = read_json(path)?;
    doc.get("mu").and_then(|v| v.as_f64()).with_context(|| {
        format!(
            "{} has no `mu`; pass --mu or --reference <final_guideline.json>",
            path.display()
        )
    })
}

#[derive(Serialize)]
struct AnnotationRequest<'a> {
    id: &'a str,
    answer_text: &'a str,
}

fn ood_check(cli: &Cli, a: &OodArgs) -> Result<()> {
    let env = build_env(cli)?;
    let g = load_guideline(&a.guideline)?;
    let mu = reference_mu(a)?;
    let bundle = dataset_for(&g, &a.dataset, &env.config)?;
    let probe = select_probe(&bundle.samples, a.probe_size, env.config.rng_seed);
    let stats = ConfidenceStats::new(confidence_indicator(&env.agents, &g, &probe)?, mu);
    std::fs::create_dir_all(&cli.run_dir)?;
    write_json_atomic(&cli.run_dir.join("ood-report.json"), &stats)?;
    println!(
        "zeta {:.5}  mu {:.5}  probe {}  ood {}",
        stats.zeta, stats.mu, stats.probe_size, stats.ood
    );
    if stats.ood {
        let request: Vec<AnnotationRequest> = probe
            .iter()
            .map(|s| AnnotationRequest {
                id: &s.id,
                answer_text: &s.answer_text,
            })
            .collect();
        let path = cli.run_dir.join("annotation_request.jsonl");
        write_jsonl(&path, &request)?;
        println!("annotation request -> {}", path.display());
    }
    Ok(())
}

/// Annotated subset of `bundle`, in file order, after checking that every
/// annotation names a known answer.
fn annotated_subset(bundle: &DatasetBundle, path: &Path, g: &Guideline) -> Result<Vec<LabeledSample>> {
    let labels = load_annotations(path, &g.scale)?;
    let unknown: Vec<&String> = labels
        .keys()
        .filter(|id| !bundle.samples.iter().any(|s| &s.id == *id))
        .collect();
    if !unknown.is_empty() {
        bail!(
            "{} annotation(s) name ids missing from the dataset, e.g. `{}`",
            unknown.len(),
            unknown[0]
        );
    }
    let data: Vec<LabeledSample> = bundle
        .samples
        .iter()
        .filter_map(|s| labels.get(&s.id).map(|&l| LabeledSample::new(s.clone(), l)))
        .collect();
    if data.len() < 2 {
        bail!("adaptation needs at least two annotated answers, found {}", data.len());
    }
    Ok(data)
}

fn adapt(cli: &Cli, a: &AdaptArgs) -> Result<()> {
    let env = build_env(cli)?;
    let g = load_guideline(&a.guideline)?;
    let bundle = dataset_for(&g, &a.dataset, &env.config)?;
    let annotated = annotated_subset(&bundle, &a.annotations, &g)?;
    let (annotated, cache_name) = with_embeddings(&env, &a.dataset, &bundle, annotated)?;
    let manifest = RunManifest::new(
        Stage::Adaptation,
        env.config.clone(),
        bundle.content_hash.clone(),
        g.content_id(),
        env.agents.gateway().descriptor(),
    );
    {
        let _lock = RunLock::acquire(&cli.run_dir)?;
        manifest.establish(&cli.run_dir, false)?;
    }
    let options = TrainerOptions {
        run_dir: Some(cli.run_dir.clone()),
        embedding_cache: Some(cache_name),
        ..TrainerOptions::default()
    };
    let outcome = test_time_adapt(&env.agents, &g, &annotated, a.val_fraction, &env.config, &options)?;
    let result: FinalResult = outcome.result.context("adaptation halted before completion")?;
    println!(
        "adapted on {} annotations  validation kappa {:.4}  mu {:.5}",
        annotated.len(),
        result.validation.kappa,
        result.mu
    );
    println!("wrote {}", cli.run_dir.join(workbench::FINAL_GUIDELINE_FILE).display());
    Ok(())
}

fn plan_budget(cli: &Cli, a: &PlanArgs) -> Result<()> {
    let env = build_env(cli)?;
    let g = load_guideline(&a.guideline)?;
    let bundle = dataset_for(&g, &a.dataset, &env.config)?;
    let data = bundle.all_labeled()?;
    let largest = *a.schedule.iter().max().context("empty schedule")?;
    if data.len() <= largest {
        bail!(
            "plan-budget needs more than {largest} labeled answers (the largest size) to keep a held-out set; found {}",
            data.len()
        );
    }
    // Annotations are drawn from the front of a seeded ordering; the rest is held out.
    let mut shuffled = data;
    shuffled.shuffle(&mut substream(env.config.rng_seed, Stream::Adaptation));
    let (pool, held_out) = shuffled.split_at(largest);
    let (pool, _) = with_embeddings(&env, &a.dataset, &bundle, pool.to_vec())?;
    let weighting = env.config.kappa_weighting;
    let baseline = if a.baseline {
        Some(evaluate_guideline(&env.agents, &g, held_out, weighting)?.0.kappa)
    } else {
        None
    };
    let plan = plan_label_budget(
        &a.schedule,
        |size| {
            let outcome = test_time_adapt(
                &env.agents,
                &g,
                &pool[..size],
                a.val_fraction,
                &env.config,
                &TrainerOptions::default(),
            )?;
            let adapted = outcome.result.expect("in-memory runs always finish").guideline;
            Ok(evaluate_guideline(&env.agents, &adapted, held_out, weighting)?.0.kappa)
        },
        a.min_gain,
        baseline,
    )?;
    std::fs::create_dir_all(&cli.run_dir)?;
    write_json_atomic(&cli.run_dir.join("label_budget_plan.json"), &plan)?;
    for (size, kappa) in &plan.evaluated {
        println!("{size:>6} labels  kappa {kappa:.4}");
    }
    println!("chosen size {}", plan.chosen_size);
    Ok(())
}
