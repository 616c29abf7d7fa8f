use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use abstain::dataset::{ingest_dataset, DatasetFormat, QuestionSet};
use abstain::decision::{
    bayes_threshold, simulate_frontier, write_frontier_csv, BeliefModel, Calibration,
};
use abstain::modelgw::{
    uniform_knowledge, AgentPolicy, GatewayError, ModelEndpointConfig, RetryPolicy,
    SyntheticAgentConfig,
};
use abstain::protocol::{RewardConfig, Scheme};
use abstain::riskctl::{
    cfar_curve, monte_carlo_validity, split_calibration, validate_threshold, write_curve_csv,
    Algorithm, PiecewiseRisk, RiskModel, ThresholdGrid, ValidityConfig,
};
use abstain::runner::{
    completer_for, read_records, report, run_experiment, score_run, ModelSource, ReportFormat,
    RunConfig, RunError, ScoredRun,
};

#[derive(Parser)]
#[command(
    name = "abstain",
    version,
    about = "Abstention-aware QA evaluation and threshold certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    PopqaTsv,
    Jsonl,
    Csv,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::PopqaTsv => DatasetFormat::PopqaTsv,
            FormatArg::Jsonl => DatasetFormat::Jsonl,
            FormatArg::Csv => DatasetFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Pure,
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bonferroni,
    Multistart,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Csv,
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and write it as normalized JSONL.
    Ingest {
        path: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query a model (or the synthetic agent) for every question.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the file extension: .tsv, .jsonl or .csv.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 1.0)]
        reward: f64,
        #[arg(long, default_value_t = 1.0)]
        penalty: f64,
        /// Abstention credit; required for scheme b (0 gives the B control).
        #[arg(long)]
        abstain: Option<f64>,
        #[arg(long)]
        norms: bool,
        /// Chat-completions base URL, e.g. https://api.example.com/v1
        #[arg(long, conflicts_with = "synthetic", requires = "model")]
        model_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Name of the environment variable holding the bearer token.
        #[arg(long)]
        auth_env: Option<String>,
        #[arg(long, default_value_t = 4)]
        max_parallel: usize,
        #[arg(long, default_value_t = 5)]
        max_attempts: u32,
        #[arg(long, default_value_t = 500)]
        backoff_ms: u64,
        #[arg(long)]
        no_logprobs: bool,
        /// Response cache (JSONL) for live runs.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Use the synthetic agent, optionally configured from a JSON file.
        #[arg(long, num_args = 0..=1, value_name = "CONFIG")]
        synthetic: Option<Option<PathBuf>>,
        /// Synthetic confidence noise when no config file is given.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Synthetic abstention threshold; defaults to the scheme's Bayes threshold.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        fail_fast: bool,
        /// Run record file (JSONL). Existing records are resumed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade a run against its dataset.
    Score {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify a confidence threshold on a calibration split.
    Calibrate {
        #[arg(long)]
        scored: PathBuf,
        #[arg(long)]
        target: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, value_enum, default_value = "bonferroni")]
        method: MethodArg,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 0.2)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        grid_steps: u32,
        /// Also write the calibration CFAR curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Coverage / false-answer frontier under the Bayes policy.
    Simulate {
        #[arg(long)]
        frontier: bool,
        /// uniform, or beta:A,B
        #[arg(long, default_value = "uniform")]
        belief: String,
        /// identity, power:K or shift:S
        #[arg(long, default_value = "identity")]
        calibration: String,
        /// JSON list of {"reward", "penalty", "abstain"} objects.
        #[arg(long)]
        configs: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo check of the certification guarantee.
    McValidity {
        #[arg(long, default_value_t = 2000)]
        trials: u64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        target: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate scored runs.
    Report {
        #[arg(long, value_enum, default_value = "table")]
        format: ReportArg,
        #[arg(required = true)]
        scored: Vec<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Exhausted(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Exhausted(_) => 3,
            Failure::Data(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Exhausted(m) | Failure::Data(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) | RunError::Protocol(_) => Failure::Config(e.to_string()),
            RunError::Gateway(ref g) => match g {
                GatewayError::Config(_) | GatewayError::Auth(_) => Failure::Config(e.to_string()),
                g if g.is_exhaustion() => Failure::Exhausted(e.to_string()),
                _ => Failure::Data(e.to_string()),
            },
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(data(e)),
        _ => Ok(()),
    }
}

fn infer_format(path: &Path, given: Option<FormatArg>) -> Result<DatasetFormat, Failure> {
    if let Some(f) = given {
        return Ok(f.into());
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => Ok(DatasetFormat::PopqaTsv),
        Some("jsonl") => Ok(DatasetFormat::Jsonl),
        Some("csv") => Ok(DatasetFormat::Csv),
        _ => Err(Failure::Config(format!(
            "cannot infer format of {}; pass --format",
            path.display()
        ))),
    }
}

fn load(path: &Path, format: Option<FormatArg>) -> Result<QuestionSet, Failure> {
    ingest_dataset(path, infer_format(path, format)?).map_err(data)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| data(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn meta_path(run: &Path) -> PathBuf {
    let mut s = run.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn scheme_config(
    scheme: SchemeArg,
    reward: f64,
    penalty: f64,
    abstain: Option<f64>,
    norms: bool,
) -> Result<RewardConfig, Failure> {
    let cfg = match scheme {
        SchemeArg::Pure => RewardConfig::pure_eval(),
        SchemeArg::A => RewardConfig::scheme_a(reward, penalty),
        SchemeArg::B => match abstain {
            Some(0.0) => RewardConfig::b_control(reward, penalty),
            Some(g) => RewardConfig::scheme_b(reward, penalty, g),
            None => return Err(Failure::Config("scheme b needs --abstain".into())),
        },
    }
    .with_norms(norms);
    cfg.validate().map_err(config)?;
    Ok(cfg)
}

fn cmd_ingest(path: PathBuf, format: FormatArg, out: Option<PathBuf>) -> Outcome {
    let set = ingest_dataset(&path, format.into()).map_err(data)?;
    set.write_jsonl(output(out.as_deref())?).map_err(data)?;
    eprintln!("{} questions from {}", set.len(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    dataset: PathBuf,
    format: Option<FormatArg>,
    scheme: RewardConfig,
    live: Option<ModelEndpointConfig>,
    cache: Option<PathBuf>,
    synthetic: Option<Option<PathBuf>>,
    noise: f64,
    tau: Option<f64>,
    seed: u64,
    limit: Option<usize>,
    fail_fast: bool,
    out: PathBuf,
) -> Outcome {
    let set = load(&dataset, format)?;
    let model = match (live, synthetic) {
        (Some(endpoint), None) => ModelSource::Live { endpoint, cache },
        (None, Some(Some(path))) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| config(format!("{}: {e}", path.display())))?;
            let mut agent: SyntheticAgentConfig = serde_json::from_str(&text).map_err(config)?;
            agent.seed = seed;
            ModelSource::Synthetic { agent }
        }
        (None, Some(None)) => {
            let policy = match (tau, scheme.scheme) {
                (Some(tau), _) => AgentPolicy::BayesThreshold { tau },
                (None, Scheme::PureEval) => AgentPolicy::AlwaysAnswer,
                (None, _) => AgentPolicy::BayesThreshold {
                    tau: bayes_threshold(&scheme).map_err(config)?,
                },
            };
            ModelSource::Synthetic {
                agent: SyntheticAgentConfig {
                    knowledge: uniform_knowledge(&set, seed),
                    default_q_true: None,
                    confidence_noise: noise,
                    policy,
                    seed,
                    emit_logprobs: true,
                },
            }
        }
        _ => {
            return Err(Failure::Config(
                "pass exactly one of --model-url or --synthetic".into(),
            ))
        }
    };
    let cfg = RunConfig {
        dataset: dataset.display().to_string(),
        scheme,
        model,
        output: out.clone(),
        seed,
        limit,
        fail_fast,
    };
    let completer = completer_for(&cfg)?;
    std::fs::write(
        meta_path(&out),
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )
    .map_err(data)?;

    let mut last_report = 0;
    let summary = run_experiment(&cfg, &set, completer.as_ref(), &mut |p| {
        if p.done == p.total || p.done >= last_report + 100 {
            last_report = p.done;
            eprintln!("{}/{} done, {} errors", p.done, p.total, p.errors);
        }
        ControlFlow::Continue(())
    })?;
    eprintln!(
        "{} completed, {} resumed, {} errors{}",
        summary.completed,
        summary.skipped,
        summary.errors,
        if summary.interrupted {
            " (stopped early)"
        } else {
            ""
        }
    );
    if summary.exhausted {
        return Err(Failure::Exhausted(
            "some questions failed after exhausting retries; rerun to resume".into(),
        ));
    }
    Ok(())
}

fn cmd_score(
    run: PathBuf,
    dataset: PathBuf,
    format: Option<FormatArg>,
    out: Option<PathBuf>,
) -> Outcome {
    let set = load(&dataset, format)?;
    let meta = std::fs::read_to_string(meta_path(&run))
        .map_err(|e| config(format!("{}: {e}", meta_path(&run).display())))?;
    let cfg: RunConfig = serde_json::from_str(&meta).map_err(config)?;
    let records = read_records(&run)?;
    let label = run
        .file_stem()
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    let scored = score_run(&records, &set, &cfg.scheme, label)?;
    if scored.incomplete {
        eprintln!(
            "warning: {} questions have no completed record",
            scored.n_missing
        );
    }
    let mut w = output(out.as_deref())?;
    writeln!(w, "{}", scored.to_json()).map_err(data)?;
    Ok(())
}

fn read_scored(path: &Path) -> Result<ScoredRun, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    scored: PathBuf,
    target: f64,
    delta: f64,
    method: MethodArg,
    starts: usize,
    split: f64,
    seed: u64,
    grid_steps: u32,
    curve: Option<PathBuf>,
) -> Outcome {
    let run = read_scored(&scored)?;
    let points = run.calibration_points();
    let (cal, val) = split_calibration(&points, split, seed).map_err(data)?;
    let grid = ThresholdGrid::uniform(grid_steps).map_err(config)?;
    let algorithm = match method {
        MethodArg::Bonferroni => Algorithm::Bonferroni,
        MethodArg::Multistart => Algorithm::Multistart { starts },
    };
    let threshold = algorithm
        .select(&cal, &grid, target, delta)
        .map_err(config)?;
    let validation = validate_threshold(&val, &threshold);
    if let Some(path) = curve {
        let rows = cfar_curve(&cal, &grid, delta).map_err(config)?;
        write_curve_csv(&rows, output(Some(&path))?).map_err(data)?;
    }
    let summary = json!({
        "n_calibration": cal.len(),
        "n_validation": val.len(),
        "u_hat": threshold.u_hat(),
        "confidence_threshold": threshold.confidence_threshold(),
        "validation": validation,
        "threshold": threshold,
    });
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(&summary).expect("json")
    ))
}

#[derive(Deserialize)]
struct PayoffRow {
    reward: f64,
    penalty: f64,
    #[serde(default)]
    abstain: f64,
}

fn parse_pair(text: &str, prefix: &str) -> Option<Vec<f64>> {
    text.strip_prefix(prefix)?
        .split(',')
        .map(|s| s.trim().parse().ok())
        .collect()
}

fn cmd_simulate(
    frontier: bool,
    belief: String,
    calibration: String,
    configs: Option<PathBuf>,
    samples: u64,
    seed: u64,
) -> Outcome {
    if !frontier {
        return Err(Failure::Config(
            "only --frontier simulation is available".into(),
        ));
    }
    let model = match belief.as_str() {
        "uniform" => BeliefModel::uniform(),
        s => match parse_pair(s, "beta:").as_deref() {
            Some(&[a, b]) => BeliefModel::beta(a, b),
            _ => return Err(Failure::Config(format!("unknown belief {s}"))),
        },
    };
    let calibration = match calibration.as_str() {
        "identity" => Calibration::Identity,
        s => match (
            parse_pair(s, "power:").as_deref(),
            parse_pair(s, "shift:").as_deref(),
        ) {
            (Some(&[k]), _) => Calibration::Power { exponent: k },
            (_, Some(&[d])) => Calibration::Shift { shift: d },
            _ => return Err(Failure::Config(format!("unknown calibration {s}"))),
        },
    };
    let rows: Vec<PayoffRow> = match configs {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(config)?
        }
        None => (0..=10)
            .map(|i| PayoffRow {
                reward: 1.0,
                penalty: 1.0,
                abstain: i as f64 / 10.0,
            })
            .collect(),
    };
    let configs: Vec<RewardConfig> = rows
        .iter()
        .map(|r| {
            if r.abstain == 0.0 {
                RewardConfig::scheme_a(r.reward, r.penalty)
            } else {
                RewardConfig::scheme_b(r.reward, r.penalty, r.abstain)
            }
        })
        .collect();
    let out = simulate_frontier(
        &model.with_calibration(calibration),
        &configs,
        samples,
        seed,
    )
    .map_err(config)?;
    let mut buf = Vec::new();
    write_frontier_csv(&out, &mut buf).map_err(data)?;
    emit(&String::from_utf8(buf).expect("csv is utf8"))
}

fn cmd_mc_validity(
    trials: u64,
    n: usize,
    target: f64,
    delta: f64,
    starts: usize,
    seed: u64,
) -> Outcome {
    let generators = [
        PiecewiseRisk::monotone(),
        PiecewiseRisk::flat(0.12),
        PiecewiseRisk::non_monotone(),
    ];
    let slack = delta + 3.0 * (delta * (1.0 - delta) / trials.max(1) as f64).sqrt();
    emit("generator,algorithm,trials,selections,violations,violation_rate,limit,pass\n")?;
    for g in &generators {
        for algorithm in [Algorithm::Bonferroni, Algorithm::Multistart { starts }] {
            let cfg = ValidityConfig {
                algorithm,
                grid: ThresholdGrid::default(),
                risk_target: target,
                delta,
                calibration_size: n,
                trials,
                seed,
            };
            let s = monte_carlo_validity(g, &cfg).map_err(config)?;
            let name = match algorithm {
                Algorithm::Bonferroni => "bonferroni".to_string(),
                Algorithm::Multistart { starts } => format!("multistart({starts})"),
            };
            emit(&format!(
                "{},{},{},{},{},{:.4},{:.4},{}\n",
                g.name(),
                name,
                s.trials,
                s.selections,
                s.violations,
                s.violation_rate,
                slack,
                s.violation_rate <= slack
            ))?;
        }
    }
    Ok(())
}

fn cmd_report(format: ReportArg, scored: Vec<PathBuf>) -> Outcome {
    let runs = scored
        .iter()
        .map(|p| read_scored(p))
        .collect::<Result<Vec<_>, _>>()?;
    let format = match format {
        ReportArg::Csv => ReportFormat::Csv,
        ReportArg::Json => ReportFormat::Json,
        ReportArg::Table => ReportFormat::Table,
    };
    emit(&report(&runs, format)?)
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ingest { path, format, out } => cmd_ingest(path, format, out),
        Command::Run {
            dataset,
            format,
            scheme,
            reward,
            penalty,
            abstain,
            norms,
            model_url,
            model,
            auth_env,
            max_parallel,
            max_attempts,
            backoff_ms,
            no_logprobs,
            cache,
            synthetic,
            noise,
            tau,
            seed,
            limit,
            fail_fast,
            out,
        } => {
            let scheme = scheme_config(scheme, reward, penalty, abstain, norms)?;
            let live = model_url.map(|url| ModelEndpointConfig {
                base_url: url,
                model_name: model.unwrap_or_default(),
                temperature: 0.0,
                request_logprobs: !no_logprobs,
                auth_token_env: auth_env,
                max_parallel,
                retry: RetryPolicy {
                    max_attempts,
                    base_backoff_ms: backoff_ms,
                },
                timeout_secs: 120,
            });
            cmd_run(
                dataset, format, scheme, live, cache, synthetic, noise, tau, seed, limit,
                fail_fast, out,
            )
        }
        Command::Score {
            run,
            dataset,
            format,
            out,
        } => cmd_score(run, dataset, format, out),
        Command::Calibrate {
            scored,
            target,
            delta,
            method,
            starts,
            split,
            seed,
            grid_steps,
            curve,
        } => cmd_calibrate(
            scored, target, delta, method, starts, split, seed, grid_steps, curve,
        ),
        Command::Simulate {
            frontier,
            belief,
            calibration,
            configs,
            samples,
            seed,
        } => cmd_simulate(frontier, belief, calibration, configs, samples, seed),
        Command::McValidity {
            trials,
            n,
            target,
            delta,
            starts,
            seed,
        } => cmd_mc_validity(trials, n, target, delta, starts, seed),
        Command::Report { format, scored } => cmd_report(format, scored),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
