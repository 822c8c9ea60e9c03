//! Command-line front end: `generate`, `train`, `evaluate` and `color`.
//!
//! Every command is a plain function over parsed arguments so experiments
//! can be scripted from Rust as well as from the shell. Reports go to
//! stdout as JSON; tables go to CSV files.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, FileSource, InMemorySource, MinibatchSource};
use crate::datagen::{forward_sample, mask, replicate, train_test_split};
use crate::error::{Error, Result};
use crate::formats::{load_cpts, load_network, save_cpts};
use crate::metrics::{avg_abs_error, kl_avg, predict_missing, roc_auc, throughput};
use crate::model::{CptSet, DirichletPrior};
use crate::network::{color_graph, moralize, Network};
use crate::rng::StreamKey;
use crate::sampler::{AccumulatorMode, MSchedule, MemoryReport, Sampler, SamplerConfig};

#[derive(Debug, Parser)]
#[command(name = "samegibbs", version, about = "SAME Gibbs parameter learning for discrete Bayesian networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward-sample a data set from a network with CPTs.
    Generate(GenerateArgs),
    /// Learn CPTs from a (partially observed) data file.
    Train(TrainArgs),
    /// Score learned CPTs or held-out predictions.
    Evaluate(EvaluateArgs),
    /// Report the chromatic partition of a network.
    Color(ColorArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Network file with a `cpts` section.
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub cases: usize,
    /// Probability of hiding each entry.
    #[arg(long, default_value_t = 0.0)]
    pub hide: f64,
    /// Tile the generated cases this many times.
    #[arg(long, default_value_t = 1)]
    pub replicate: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output data file (the training side when splitting).
    #[arg(long)]
    pub out: PathBuf,
    /// Split the known entries, keeping this fraction for training.
    #[arg(long, requires = "test_out")]
    pub train_fraction: Option<f64>,
    /// Where to write the held-out entries when splitting.
    #[arg(long, requires = "train_fraction")]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccumulatorArg {
    Moving,
    Exp,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Replay a run manifest; other experiment flags are ignored.
    #[arg(long, conflicts_with_all = ["network", "data"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub network: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["manifest", "generate_cases"])]
    pub data: Option<PathBuf>,
    /// Generate this many cases from the network's CPTs instead of reading data.
    #[arg(long, conflicts_with = "data")]
    pub generate_cases: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub generate_hide: f64,
    #[arg(long, default_value_t = 1)]
    pub generate_replicate: usize,
    #[arg(long, default_value_t = 0)]
    pub generate_seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Reference CPTs; enables KL tracing.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, conflicts_with = "same_schedule")]
    pub same_m: Option<usize>,
    /// Piecewise schedule such as `1x50,5x150`.
    #[arg(long)]
    pub same_schedule: Option<String>,
    #[arg(long, default_value_t = 12_500)]
    pub minibatch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub passes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = AccumulatorArg::Moving)]
    pub accumulator: AccumulatorArg,
    #[arg(long)]
    pub exp_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub sweeps_per_minibatch: usize,
    /// Update CPTs with posterior means instead of Dirichlet draws.
    #[arg(long)]
    pub map_estimate: bool,
    /// Write the current CPTs to `checkpoint.json` after every pass.
    #[arg(long)]
    pub checkpoint: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// KL_avg and mean absolute error against reference CPTs.
    Params,
    /// ROC curve and AUC of held-out predictions.
    Roc,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Learned CPT file.
    #[arg(long)]
    pub cpts: Option<PathBuf>,
    /// Reference CPT file (params mode).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Prediction dump with `score` and `label` columns (roc mode).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Observed training entries used as context (roc mode).
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Held-out entries to predict (roc mode).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the ROC CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the prediction dump (roc mode with --test).
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ColorArgs {
    #[arg(long)]
    pub network: PathBuf,
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    File(PathBuf),
    Generate { cases: usize, hide: f64, replicate: usize, seed: u64 },
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub network: PathBuf,
    pub data: DataSpec,
    pub sampler: SamplerConfig,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: bool,
}

impl ExperimentSpec {
    pub fn from_args(a: &TrainArgs) -> Result<Self> {
        if let Some(path) = &a.manifest {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: Some(path.clone()),
                line: Some(e.line()),
                msg: e.to_string(),
            })?;
            if a.out_dir != Path::new("out") {
                spec.out_dir = a.out_dir.clone();
            }
            return Ok(spec);
        }
        let same_m = match (&a.same_schedule, a.same_m) {
            (Some(s), _) => s.parse()?,
            (None, Some(m)) => MSchedule::piecewise(vec![(m, 1)])?,
            (None, None) => MSchedule::constant(1),
        };
        let data = match (&a.data, a.generate_cases) {
            (Some(p), _) => DataSpec::File(p.clone()),
            (None, Some(cases)) => DataSpec::Generate {
                cases,
                hide: a.generate_hide,
                replicate: a.generate_replicate,
                seed: a.generate_seed,
            },
            (None, None) => return Err(Error::InvalidConfig("either --data or --generate-cases is required".into())),
        };
        let spec = ExperimentSpec {
            network: a.network.clone().ok_or_else(|| Error::InvalidConfig("--network is required".into()))?,
            data,
            sampler: SamplerConfig {
                same_m,
                minibatch_size: a.minibatch_size,
                num_passes: a.passes,
                prior: DirichletPrior::symmetric(a.alpha),
                accumulator: match a.accumulator {
                    AccumulatorArg::Moving => AccumulatorMode::MovingSum,
                    AccumulatorArg::Exp => AccumulatorMode::Exponential,
                },
                exp_decay: a.exp_decay,
                sweeps_per_minibatch: a.sweeps_per_minibatch,
                map_estimate: a.map_estimate,
                seed: a.seed,
            },
            out_dir: a.out_dir.clone(),
            truth: a.truth.clone(),
            checkpoint: a.checkpoint,
        };
        spec.sampler.validate()?;
        Ok(spec)
    }
}

/// Runs `f` on a pool with `threads` workers (or the global pool).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidConfig("--threads must be at least 1".into())),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub vars: usize,
    pub cases: usize,
    pub nnz: usize,
    pub density: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_nnz: Option<usize>,
}

fn generated_data(
    net: &Network,
    cpts: &CptSet,
    cases: usize,
    hide: f64,
    times: usize,
    seed: u64,
) -> Result<DataMatrix> {
    let full = forward_sample(net, cpts, cases, StreamKey::named(seed, "forward"));
    let masked = mask(&full, hide, StreamKey::named(seed, "mask"))?;
    if times == 1 {
        Ok(masked)
    } else {
        replicate(&masked, times)
    }
}

fn network_with_cpts(path: &Path) -> Result<(Network, CptSet)> {
    let (net, cpts) = load_network(path)?;
    let cpts = cpts.ok_or_else(|| Error::Parse {
        path: Some(path.to_path_buf()),
        line: None,
        msg: "network file has no `cpts` section".into(),
    })?;
    Ok((net, cpts))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<GenerateReport> {
    let (net, cpts) = network_with_cpts(&a.network)?;
    let data = generated_data(&net, &cpts, a.cases, a.hide, a.replicate, a.seed)?;
    let (train, test) = match a.train_fraction {
        Some(f) => {
            let (tr, te) = train_test_split(&data, f, StreamKey::named(a.seed, "split"))?;
            (tr, Some(te))
        }
        None => (data, None),
    };
    train.write(&a.out)?;
    if let (Some(te), Some(path)) = (&test, &a.test_out) {
        te.write(path)?;
    }
    Ok(GenerateReport {
        vars: train.num_vars(),
        cases: train.num_cases(),
        nnz: train.nnz(),
        density: train.density(),
        test_nnz: test.map(|t| t.nnz()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub passes: usize,
    pub seconds: f64,
    pub vars_per_sec: Option<f64>,
    pub kl_avg: Option<f64>,
    pub avg_abs_error: Option<f64>,
    pub memory: MemoryReport,
    pub cpts: PathBuf,
    pub trace: PathBuf,
    pub manifest: PathBuf,
}

pub fn cmd_train(spec: &ExperimentSpec, threads: Option<usize>) -> Result<TrainReport> {
    let (net, generator_cpts) = load_network(&spec.network)?;
    let truth = match &spec.truth {
        Some(p) => {
            let (tnet, t) = load_cpts(p)?;
            if tnet != net {
                return Err(Error::ShapeMismatch(format!("{} does not match the network", p.display())));
            }
            Some(t)
        }
        None => None,
    };
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let manifest = spec.out_dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(spec).expect("serializable") + "\n")
        .map_err(|e| Error::io(&manifest, e))?;

    let sampler = Sampler::new(net.clone(), spec.sampler.clone())?;
    let checkpoint = spec.checkpoint.then(|| spec.out_dir.join("checkpoint.json"));
    let mut checkpoint_err = None;
    let observer = |st: &crate::sampler::SamplerState, _: &crate::sampler::TraceRecord| {
        if let Some(p) = &checkpoint {
            if let Err(e) = save_cpts(p, &net, &st.current_cpts) {
                checkpoint_err.get_or_insert(e);
            }
        }
    };
    let out = with_threads(threads, || match &spec.data {
        DataSpec::File(path) => {
            let mut src = FileSource::open(path)?;
            sampler.run_with(&mut src as &mut dyn MinibatchSource, truth.as_ref(), observer)
        }
        DataSpec::Generate { cases, hide, replicate, seed } => {
            let cpts = generator_cpts
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("generating data requires a network file with `cpts`".into()))?;
            let data = generated_data(&net, cpts, *cases, *hide, *replicate, *seed)?;
            sampler.run_with(&mut InMemorySource::new(&data), truth.as_ref(), observer)
        }
    })??;
    if let Some(e) = checkpoint_err {
        return Err(e);
    }

    let cpts_path = spec.out_dir.join("cpts.json");
    let trace_path = spec.out_dir.join("trace.csv");
    save_cpts(&cpts_path, &net, &out.cpts)?;
    out.trace.save_csv(&trace_path)?;
    let tp = throughput(&out.trace).ok();
    Ok(TrainReport {
        passes: out.trace.records.len(),
        seconds: out.trace.records.last().map_or(0.0, |r| r.seconds),
        vars_per_sec: tp.and_then(|t| t.overall),
        kl_avg: truth.as_ref().map(|t| kl_avg(t, &out.cpts)).transpose()?,
        avg_abs_error: truth.as_ref().map(|t| avg_abs_error(t, &out.cpts)).transpose()?,
        memory: out.memory,
        cpts: cpts_path,
        trace: trace_path,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvaluateReport {
    Params { kl_avg: f64, avg_abs_error: f64, rows: usize },
    Roc { auc: f64, examples: usize, positives: usize, skipped_non_binary: usize },
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::InvalidConfig(format!("{flag} is required for this mode")))
}

/// Reads a prediction dump: a CSV with (at least) `score` and `label` columns.
pub fn read_predictions(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse_at(Some(path), 1, "empty prediction file")),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::parse_at(Some(path), 1, format!("missing `{name}` column")))
    };
    let (si, li) = (col("score")?, col("label")?);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |j: usize| fields.get(j).copied().ok_or_else(|| Error::parse_at(Some(path), i + 1, "short row"));
        let score: f64 = get(si)?.parse().map_err(|e| Error::parse_at(Some(path), i + 1, format!("bad score: {e}")))?;
        let label = match get(li)? {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::parse_at(Some(path), i + 1, format!("bad label `{other}`"))),
        };
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}

/// `(var, case, score, label)` for one held-out entry.
pub type ScoredEntry = (usize, usize, f64, bool);

/// Scores held-out binary entries: the score is the sampled frequency of
/// state 1 (the second state) and the label is whether the held-out state
/// is 1. Returns `(var, case, score, label)` rows and the count of skipped
/// non-binary targets.
pub fn score_heldout(
    net: &Network,
    cpts: &CptSet,
    context: &DataMatrix,
    test: &DataMatrix,
    samples: usize,
    seed: u64,
) -> Result<(Vec<ScoredEntry>, usize)> {
    test.check_against(net)?;
    if (context.num_vars(), context.num_cases()) != (test.num_vars(), test.num_cases()) {
        return Err(Error::DimensionMismatch("context and test data differ in shape".into()));
    }
    let (binary, other): (Vec<_>, Vec<_>) = test.entries().partition(|&(v, _, _)| net.cardinality(v) == 2);
    let targets: Vec<(usize, usize)> = binary.iter().map(|&(v, c, _)| (v, c)).collect();
    let probs = predict_missing(net, cpts, context, &targets, samples, StreamKey::named(seed, "predict"))?;
    let rows = binary.iter().zip(probs).map(|(&(v, c, s), p)| (v, c, p[1], s == 1)).collect();
    Ok((rows, other.len()))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvaluateReport> {
    match a.mode {
        EvalMode::Params => {
            let (net, est) = load_cpts(required(&a.cpts, "--cpts")?)?;
            let (tnet, truth) = load_cpts(required(&a.truth, "--truth")?)?;
            if net != tnet {
                return Err(Error::ShapeMismatch("learned and reference CPTs describe different networks".into()));
            }
            Ok(EvaluateReport::Params {
                kl_avg: kl_avg(&truth, &est)?,
                avg_abs_error: avg_abs_error(&truth, &est)?,
                rows: truth.rows().count(),
            })
        }
        EvalMode::Roc => {
            let (scores, labels, skipped) = if let Some(p) = &a.predictions {
                let (s, l) = read_predictions(p)?;
                (s, l, 0)
            } else {
                let (net, cpts) = load_cpts(required(&a.cpts, "--cpts or --predictions")?)?;
                let context = DataMatrix::read(required(&a.context, "--context")?)?;
                let test = DataMatrix::read(required(&a.test, "--test")?)?;
                let (rows, skipped) =
                    with_threads(a.threads, || score_heldout(&net, &cpts, &context, &test, a.samples, a.seed))??;
                if let Some(out) = &a.predictions_out {
                    let mut text = String::from("var,case,score,label\n");
                    for (v, c, s, l) in &rows {
                        text.push_str(&format!("{},{},{},{}\n", v + 1, c + 1, s, u8::from(*l)));
                    }
                    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
                }
                let scores = rows.iter().map(|r| r.2).collect();
                let labels = rows.iter().map(|r| r.3).collect();
                (scores, labels, skipped)
            };
            let roc = roc_auc(&scores, &labels)?;
            if let Some(out) = &a.out {
                roc.save_csv(out)?;
            }
            Ok(EvaluateReport::Roc {
                auc: roc.auc,
                examples: labels.len(),
                positives: labels.iter().filter(|&&l| l).count(),
                skipped_non_binary: skipped,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorReport {
    pub k: usize,
    pub group_sizes: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub verified: bool,
}

pub fn cmd_color(a: &ColorArgs) -> Result<ColorReport> {
    let (net, _) = load_network(&a.network)?;
    let g = moralize(&net);
    let c = color_graph(&g);
    Ok(ColorReport {
        k: c.num_colors(),
        group_sizes: c.groups().iter().map(Vec::len).collect(),
        groups: c.groups().to_vec(),
        verified: c.is_proper(&g),
    })
}

/// Process exit code for an error: 2 for malformed input or settings, 3
/// for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

/// Parses nothing; dispatches an already parsed command and returns the
/// JSON report to print.
pub fn dispatch(cli: &Cli) -> Result<String> {
    let json = match &cli.command {
        Command::Generate(a) => serde_json::to_string(&cmd_generate(a)?),
        Command::Train(a) => serde_json::to_string(&cmd_train(&ExperimentSpec::from_args(a)?, a.threads)?),
        Command::Evaluate(a) => serde_json::to_string(&cmd_evaluate(a)?),
        Command::Color(a) => serde_json::to_string(&cmd_color(a)?),
    };
    Ok(json.expect("reports serialize"))
}
