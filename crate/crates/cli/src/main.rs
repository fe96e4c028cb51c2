//! `knac` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid flags or inputs.

use std::fs;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use knac::contingency::ContingencyMatrix;
use knac::dataset::{load_dataset, load_truth, save_dataset, DatasetError};
use knac::metrics::{agreement, AgreementScores};
use knac::recommend::{analyze, render, render_compact, Analysis, LabelNames, Recommendation, RecommendError};
use knac::scenarios::{scenario, ScenarioKind};
use knac::session::{Decision, IterationReport, Pending, SessionError, DEFAULT_ITERATION_CAP};
use knac::store::{new_id, SessionStore, StoreError, DATA_DIR_ENV};
use knac::{kmeans, AxisMode, Dataset, InduceConfig, KMeansConfig, LinkageKind, RecommendParams, SearchStrategy, Session};
use knac_service::{AppState, Limits, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(name = "knac", version, about = "Knowledge-augmented clustering refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split and merge recommendations for an expert labeling.
    Recommend(RecommendArgs),
    /// Recommendations together with their explanation rules.
    Explain(ExplainArgs),
    /// Creates a stored session.
    Start(StartArgs),
    /// Applies accept/reject decisions to a stored session.
    Apply(ApplyArgs),
    /// Agreement scores of a labeling or a stored session.
    Eval(EvalArgs),
    /// Accepts every recommendation above a threshold until convergence.
    AutoExpert(AutoArgs),
    /// Runs the HTTP API.
    Serve(ServeArgs),
    /// Runs a synthetic scenario end to end.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Search {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Column,
    Row,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Feature CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Expert label CSV, one label per row.
    #[arg(long)]
    expert: PathBuf,
    /// Cluster label CSV; mutually exclusive with --kmeans.
    #[arg(long, conflicts_with = "kmeans")]
    clusters: Option<PathBuf>,
    /// Cluster with k-means instead of reading --clusters.
    #[arg(long, value_name = "K")]
    kmeans: Option<usize>,
    /// Ground-truth label CSV for evaluation.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamArgs {
    #[arg(long, default_value_t = 0.8)]
    epsilon_split: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_split: f64,
    #[arg(long, default_value_t = 0.8)]
    epsilon_merge: f64,
    #[arg(long, default_value_t = 0.2)]
    lambda_merge: f64,
    #[arg(long, default_value = "average", value_parser = parse_linkage)]
    linkage: LinkageKind,
    #[arg(long, value_enum, default_value_t = Axis::Column)]
    axis_mode: Axis,
    /// Seed for silhouette subsampling and k-means.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExplainConfigArgs {
    #[arg(long, default_value_t = 2)]
    max_conditions: usize,
    #[arg(long, default_value_t = 0.95)]
    precision_target: f64,
    #[arg(long, value_enum, default_value_t = Search::Exhaustive)]
    search: Search,
}

#[derive(Debug, Args)]
struct StoreArgs {
    /// Session store; defaults to $KNAC_DATA_DIR, then ./knac-data.
    #[arg(long, env = DATA_DIR_ENV, default_value = "knac-data")]
    data_dir: PathBuf,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    explain: ExplainConfigArgs,
    /// Only this recommendation id (e.g. r0-s0).
    #[arg(long)]
    recommendation: Option<String>,
    #[arg(short, long, default_value = "out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct StartArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    explain: ExplainConfigArgs,
    #[command(flatten)]
    store: StoreArgs,
    /// Session id; generated when absent.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    session: String,
    #[arg(long, value_name = "ID")]
    accept: Vec<String>,
    #[arg(long, value_name = "ID")]
    reject: Vec<String>,
    #[arg(long, default_value = "cli")]
    actor: String,
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Stored session whose metrics history to print.
    #[arg(long, conflicts_with_all = ["truth", "labels"])]
    session: Option<String>,
    #[arg(long, requires = "labels")]
    truth: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    labels: Option<PathBuf>,
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct AutoArgs {
    #[arg(long)]
    session: String,
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATION_CAP)]
    max_iterations: usize,
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Directory served at / (the review UI bundle).
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value = "split")]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(short, long, default_value = "demo-out")]
    output: PathBuf,
}

fn parse_linkage(s: &str) -> Result<LinkageKind, String> {
    s.parse()
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Self::runtime(e.to_string()),
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<RecommendError> for CliError {
    fn from(e: RecommendError) -> Self {
        Self::invalid(e.to_string())
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Dataset(e) => e.into(),
            SessionError::UnknownRecommendation(_)
            | SessionError::DuplicateDecision(_)
            | SessionError::BadThreshold(_)
            | SessionError::Recommend(_)
            | SessionError::Unclustered => Self::invalid(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Dataset(e) => e.into(),
            StoreError::Session(e) => e.into(),
            StoreError::NotFound(_) | StoreError::Exists(_) | StoreError::InvalidId(_) => Self::invalid(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

impl ParamArgs {
    fn params(&self) -> CliResult<RecommendParams> {
        let params = RecommendParams {
            epsilon_split: self.epsilon_split,
            lambda_split: self.lambda_split,
            epsilon_merge: self.epsilon_merge,
            lambda_merge: self.lambda_merge,
            linkage: self.linkage,
            axis_mode: match self.axis_mode {
                Axis::Column => AxisMode::Column,
                Axis::Row => AxisMode::Row,
            },
            seed: self.seed,
            ..RecommendParams::default()
        };
        params.validate()?;
        Ok(params)
    }
}

impl ExplainConfigArgs {
    fn config(&self) -> CliResult<InduceConfig> {
        if self.max_conditions == 0 {
            return Err(CliError::invalid("--max-conditions must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.precision_target) {
            return Err(CliError::invalid("--precision-target must lie in [0, 1]"));
        }
        Ok(InduceConfig {
            max_conditions: self.max_conditions,
            precision_target: self.precision_target,
            search: match self.search {
                Search::Exhaustive => SearchStrategy::Exhaustive,
                Search::Greedy => SearchStrategy::Greedy,
            },
            ..InduceConfig::default()
        })
    }
}

impl InputArgs {
    fn load(&self, seed: u64) -> CliResult<Dataset> {
        if self.clusters.is_none() && self.kmeans.is_none() {
            return Err(CliError::invalid("either --clusters or --kmeans is required"));
        }
        let mut ds = load_dataset::<f64>(&self.data, &self.expert, self.clusters.as_deref())?;
        if let Some(k) = self.kmeans {
            let labels = kmeans(ds.features(), &KMeansConfig::new(k, seed))
                .map_err(|e| CliError::invalid(e.to_string()))?
                .labels;
            ds = ds.with_cluster_ids(labels)?;
        }
        if let Some(truth) = &self.truth {
            ds = ds.with_ground_truth(load_truth(truth)?)?;
        }
        Ok(ds)
    }
}

impl StoreArgs {
    fn open(&self) -> CliResult<SessionStore> {
        Ok(SessionStore::open(&self.data_dir)?)
    }
}

#[derive(Debug, Serialize)]
struct RecommendationOut<'a> {
    id: String,
    #[serde(rename = "type")]
    kind: &'static str,
    labels: Vec<String>,
    confidence: f64,
    text: String,
    compact: String,
    recommendation: &'a Recommendation<f64>,
}

#[derive(Debug, Serialize)]
struct RecommendationsOut<'a> {
    params: &'a RecommendParams,
    recommendations: Vec<RecommendationOut<'a>>,
}

#[derive(Debug, Serialize)]
struct MatricesOut<'a> {
    expert_labels: &'a [String],
    cluster_labels: &'a [String],
    contingency: &'a ContingencyMatrix,
    h_split: Vec<Vec<f64>>,
    h_merge: Vec<Vec<f64>>,
    h_sim: Vec<Vec<f64>>,
}

fn recommendation_outs<'a>(ds: &Dataset, recs: &'a [Recommendation<f64>]) -> Vec<RecommendationOut<'a>> {
    let names = LabelNames::of(ds);
    let expert = &ds.expert().names;
    let (mut s, mut m) = (0, 0);
    recs.iter()
        .map(|rec| {
            let (id, kind, labels) = match rec {
                Recommendation::Split(r) => {
                    s += 1;
                    (format!("r0-s{}", s - 1), "split", vec![expert[r.expert_label].clone()])
                }
                Recommendation::Merge(r) => {
                    m += 1;
                    (format!("r0-m{}", m - 1), "merge", vec![expert[r.pair.0].clone(), expert[r.pair.1].clone()])
                }
            };
            RecommendationOut {
                id,
                kind,
                labels,
                confidence: rec.confidence(),
                text: render(rec, names),
                compact: render_compact(rec, names),
                recommendation: rec,
            }
        })
        .collect()
}

fn matrices_out<'a>(ds: &'a Dataset, a: &'a Analysis<f64>) -> MatricesOut<'a> {
    MatricesOut {
        expert_labels: &ds.expert().names,
        cluster_labels: ds.clusters().map_or(&[], |c| c.names.as_slice()),
        contingency: &a.contingency,
        h_split: a.split.values.to_rows(),
        h_merge: a.merge.values.to_rows(),
        h_sim: a.merge.sim.to_rows(),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn listing(texts: impl IntoIterator<Item = String>) -> String {
    let texts: Vec<String> = texts.into_iter().collect();
    if texts.is_empty() {
        return "No recommendations.\n".into();
    }
    texts.iter().map(|t| format!("{t}\n\n")).collect()
}

/// Writes recommendations.{json,txt} and matrices.json into `dir`.
fn write_recommendations(ds: &Dataset, params: &RecommendParams, dir: &Path) -> CliResult<String> {
    let analysis = analyze(ds, params)?;
    let recs = analysis.recommendations();
    let outs = recommendation_outs(ds, &recs);
    let text = listing(outs.iter().map(|r| r.text.clone()));
    fs::create_dir_all(dir)?;
    write_json(&dir.join("recommendations.json"), &RecommendationsOut { params, recommendations: outs })?;
    write_text(&dir.join("recommendations.txt"), &text)?;
    write_json(&dir.join("matrices.json"), &matrices_out(ds, &analysis))?;
    Ok(text)
}

fn print<T: Serialize + ?Sized>(format: Format, value: &T, text: &str) -> CliResult {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Text => print!("{text}"),
    }
    Ok(())
}

fn cmd_recommend(args: RecommendArgs) -> CliResult {
    let params = args.params.params()?;
    let ds = args.input.load(params.seed)?;
    let text = write_recommendations(&ds, &params, &args.output)?;
    let json = fs::read_to_string(args.output.join("recommendations.json"))?;
    match args.format {
        Format::Json => print!("{json}"),
        Format::Text => print!("{text}"),
    }
    Ok(())
}

fn explanation_text(p: &Pending<f64>) -> String {
    let mut out = format!("{} {}\n", p.id, p.compact);
    for rule in &p.explanations {
        out.push_str(&format!("    {rule}\n"));
    }
    out
}

fn cmd_explain(args: ExplainArgs) -> CliResult {
    let params = args.params.params()?;
    let config = args.explain.config()?;
    let ds = args.input.load(params.seed)?;
    let session = Session::start("explain", ds, params, config)?;
    let pending: Vec<&Pending<f64>> = match &args.recommendation {
        Some(id) => vec![session.pending(id).ok_or_else(|| CliError::invalid(format!("unknown recommendation {id:?}")))?],
        None => session.state.pending.iter().collect(),
    };
    let text = if pending.is_empty() {
        "No recommendations.\n".to_owned()
    } else {
        pending.iter().map(|p| explanation_text(p)).collect::<Vec<_>>().join("\n")
    };
    fs::create_dir_all(&args.output)?;
    write_json(&args.output.join("explanations.json"), &pending)?;
    write_text(&args.output.join("explanations.txt"), &text)?;
    print(args.format, &pending, &text)
}

fn pending_text(session: &Session) -> String {
    let s = &session.state;
    let mut out = format!(
        "session {} iteration {} (KB v{}, {} labels){}\n",
        s.id,
        s.iteration,
        s.kb.version,
        session.dataset.expert().n_labels(),
        if s.converged { " converged" } else { "" }
    );
    for p in &s.pending {
        out.push_str(&format!("  {}: {}\n", p.id, p.compact));
    }
    out
}

#[derive(Debug, Serialize)]
struct SessionSummary<'a> {
    id: &'a str,
    iteration: u64,
    kb_version: u64,
    converged: bool,
    pending: Vec<(&'a str, &'a str)>,
}

fn summary(session: &Session) -> SessionSummary<'_> {
    let s = &session.state;
    SessionSummary {
        id: &s.id,
        iteration: s.iteration,
        kb_version: s.kb.version,
        converged: s.converged,
        pending: s.pending.iter().map(|p| (p.id.as_str(), p.compact.as_str())).collect(),
    }
}

fn cmd_start(args: StartArgs) -> CliResult {
    let params = args.params.params()?;
    let config = args.explain.config()?;
    let store = args.store.open()?;
    let ds = args.input.load(params.seed)?;
    let session = Session::start(args.id.unwrap_or_else(new_id), ds, params, config)?;
    store.create(&session)?;
    print(args.format, &summary(&session), &pending_text(&session))
}

#[derive(Debug, Serialize)]
struct ApplyOut<'a> {
    report: &'a IterationReport<f64>,
    session: SessionSummary<'a>,
}

fn cmd_apply(args: ApplyArgs) -> CliResult {
    let store = args.store.open()?;
    let session = store.load::<f64>(&args.session)?;
    let decisions: Vec<Decision> = args
        .accept
        .iter()
        .map(Decision::accept)
        .chain(args.reject.iter().map(Decision::reject))
        .collect();
    let (next, report) = session.stage(&decisions)?.iterate_staged(&args.actor, Utc::now())?;
    store.save(&next, Some(&report))?;
    let mut text = String::new();
    for applied in &report.applied {
        text.push_str(&format!("applied {}\n", serde_json::to_string(applied)?));
    }
    for stale in &report.stale {
        text.push_str(&format!("skipped stale {stale}\n"));
    }
    text.push_str(&pending_text(&next));
    print(args.format, &ApplyOut { report: &report, session: summary(&next) }, &text)
}

fn scores_text(s: &AgreementScores) -> String {
    format!("homogeneity {:.4} completeness {:.4} v-measure {:.4}", s.homogeneity, s.completeness, s.v_measure)
}

fn read_labels(path: &Path) -> CliResult<Vec<usize>> {
    Ok(load_truth(path)?)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    if let Some(id) = &args.session {
        let session = args.store.open()?.load::<f64>(id)?;
        let history = &session.state.metrics_history;
        let text: String = history
            .iter()
            .map(|m| {
                let truth = m.vs_truth.as_ref().map(|t| format!("; truth: {}", scores_text(t))).unwrap_or_default();
                format!("iteration {} KB v{} {} labels; clusters: {}{truth}\n", m.iteration, m.kb_version, m.n_labels, scores_text(&m.vs_clusters))
            })
            .collect();
        return print(args.format, history, &text);
    }
    let (Some(truth), Some(labels)) = (&args.truth, &args.labels) else {
        return Err(CliError::invalid("either --session or both --truth and --labels are required"));
    };
    let scores = agreement(&read_labels(truth)?, &read_labels(labels)?).map_err(|e| CliError::invalid(e.to_string()))?;
    print(args.format, &scores, &format!("{}\n", scores_text(&scores)))
}

fn cmd_auto_expert(args: AutoArgs) -> CliResult {
    let store = args.store.open()?;
    let mut session = store.load::<f64>(&args.session)?;
    let mut iterations = 0;
    while iterations < args.max_iterations && !(iterations > 0 && session.state.converged) {
        let (next, report) = session.auto_step(args.threshold, Utc::now())?;
        store.save(&next, Some(&report))?;
        session = next;
        iterations += 1;
    }
    let text = format!(
        "{iterations} iterations, {}\n{}",
        if session.state.converged { "converged" } else { "iteration cap reached" },
        pending_text(&session)
    );
    print(args.format, &summary(&session), &text)
}

fn cmd_serve(args: ServeArgs) -> CliResult {
    let store = args.store.open()?;
    let state = AppState::new(store, Limits::default(), args.static_dir);
    let addr = SocketAddr::from((Ipv4Addr::UNSPECIFIED, args.port));
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{addr}");
    runtime.block_on(knac_service::serve(state, addr))?;
    Ok(())
}

/// Fixed clock so demo output does not depend on when it runs.
fn demo_time() -> DateTime<Utc> {
    DateTime::from_timestamp(0, 0).expect("epoch")
}

fn cmd_demo(args: DemoArgs) -> CliResult {
    let sc = scenario(args.scenario, args.seed).map_err(|e| CliError::runtime(e.to_string()))?;
    let out = &args.output;
    let params = RecommendParams { seed: args.seed, ..RecommendParams::default() };
    save_dataset(&sc.dataset, &out.join("dataset"))?;
    write_json(&out.join("corruption.json"), &sc.corruption)?;
    let mut text = write_recommendations(&sc.dataset, &params, out)?;

    let session = Session::start(format!("demo-{}", args.seed), sc.dataset, params, InduceConfig::default())?;
    write_json(&out.join("explanations.json"), &session.state.pending)?;
    let (done, outcome) = session.auto_expert(args.threshold, DEFAULT_ITERATION_CAP, demo_time())?;
    write_json(&out.join("metrics.json"), &done.state.metrics_history)?;
    write_json(&out.join("kb.json"), &done.state.kb)?;
    write_text(&out.join("kb.txt"), &done.state.kb.render_text())?;
    let final_labels: Vec<String> = done.dataset.expert_labels().iter().map(|&l| done.dataset.expert().names[l].clone()).collect();
    write_text(
        &out.join("final_labels.csv"),
        &std::iter::once("label".to_owned()).chain(final_labels).map(|l| l + "\n").collect::<String>(),
    )?;

    let first = done.state.metrics_history.first();
    let last = done.state.metrics_history.last();
    if let (Some(Some(before)), Some(Some(after))) = (first.map(|m| m.vs_truth), last.map(|m| m.vs_truth)) {
        text.push_str(&format!(
            "auto expert (threshold {}): {} iterations, v-measure vs truth {:.4} -> {:.4}\n",
            args.threshold, outcome.iterations, before.v_measure, after.v_measure
        ));
    }
    print!("{text}");
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Recommend(a) => cmd_recommend(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Start(a) => cmd_start(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AutoExpert(a) => cmd_auto_expert(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Demo(a) => cmd_demo(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
