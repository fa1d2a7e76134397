use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, ArrayView1, ArrayView2};

use scorefp::experiment::{evaluate_ll, run_experiment, ExperimentConfig, TestSet};
use scorefp::fields::{ExactScore, ScoreField};
use scorefp::io::write_atomic;
use scorefp::mc::{convolution_experiment, ConvolutionKind, McReference};
use scorefp::metrics::{emit_results, ErrorReport, Format};
use scorefp::objectives::TraceMode;
use scorefp::sde::stream_rng;
use scorefp::training::{train_ll, train_score, Method, ModelFile};
use scorefp::{Error, Result};

#[derive(Parser)]
#[command(name = "scorefp", version, about = "Score-based Fokker-Planck solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score model (stage one) and save it.
    TrainScore {
        #[command(flatten)]
        common: Common,
        /// Where to write the model; a training log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a log-likelihood model against a saved score (stage two).
    TrainLl {
        #[command(flatten)]
        common: Common,
        /// Saved score model; without it the analytic score is used.
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Both stages for every seed, evaluated on the test set.
    Run {
        #[command(flatten)]
        common: Common,
        /// Result table (.csv or .json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo reference log-densities for the configured test set.
    McReference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convolution benchmark for plain Monte Carlo.
    ConvolutionBench {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transport initial samples with the probability-flow ODE.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Saved score model; without it the analytic score is used.
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// CSV of the samples at time T.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved log-likelihood model on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ll: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use only this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    trace: Option<TraceArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sm,
    Ssm,
    ScorePinn,
    DirectLl,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceArg {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gaussian,
    Lognormal,
    Cauchy,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c: ExperimentConfig = match &self.config {
            Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.train.seeds = vec![seed];
        }
        if let Some(m) = self.method {
            c.method = match m {
                MethodArg::Sm => Method::Sm,
                MethodArg::Ssm => Method::Ssm,
                MethodArg::ScorePinn => Method::ScorePinn,
                MethodArg::DirectLl => Method::DirectLl,
            };
        }
        if let Some(d) = self.dim {
            c.problem.dim = d;
        }
        if let Some(t) = self.trace {
            c.train.trace = match (t, c.train.trace) {
                (TraceArg::Exact, _) => TraceMode::Exact,
                (TraceArg::Hutchinson, TraceMode::Hutchinson { probes }) => TraceMode::Hutchinson { probes },
                (TraceArg::Hutchinson, TraceMode::Exact) => TraceMode::hutchinson(),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn first_seed(c: &ExperimentConfig) -> u64 {
    c.train.seeds[0]
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn test_set(c: &ExperimentConfig) -> Result<TestSet> {
    TestSet::build(&c.problem, &c.test_times, c.test_size, c.test_seed, c.mc_samples, c.reference_cache.as_deref())
}

fn load_score(path: &Path, c: &ExperimentConfig) -> Result<Box<dyn ScoreField>> {
    let (problem, model) = ModelFile::load(path)?.into_score()?;
    if problem.dim() != c.problem.dim || problem.kind() != c.problem.kind {
        return Err(Error::Config(format!("{} was trained for a different problem", path.display())));
    }
    Ok(Box::new(model))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainScore { common, out } => {
            let c = common.load()?;
            let problem = c.problem.build()?;
            let fit = train_score(&problem, &c.train_config(), first_seed(&c))?;
            ModelFile::score(&c.problem, &fit.model).save(&out)?;
            fit.write_log(&log_path(&out))?;
            println!("saved {} ({} epochs, best epoch {:?})", out.display(), fit.history.len(), fit.best_epoch);
        }
        Command::TrainLl { common, score, out } => {
            let c = common.load()?;
            let problem = c.problem.build()?;
            let frozen: Box<dyn ScoreField + '_> = match &score {
                Some(path) => load_score(path, &c)?,
                None => Box::new(ExactScore::new(&problem)?),
            };
            let fit = train_ll(&problem, &c.train_config(), frozen.as_ref(), first_seed(&c))?;
            ModelFile::log_density(&c.problem, &fit.model).save(&out)?;
            fit.write_log(&log_path(&out))?;
            println!("saved {} ({} epochs, best epoch {:?})", out.display(), fit.history.len(), fit.best_epoch);
        }
        Command::Run { common, out } => {
            let mut c = common.load()?;
            if out.is_some() {
                c.out = out;
            }
            let rows = run_experiment(&c)?;
            print!("{}", scorefp::metrics::results_to_string(&rows, Format::Csv)?);
        }
        Command::McReference { common, samples, out } => {
            let c = common.load()?;
            let samples = samples.unwrap_or(c.mc_samples);
            let (t, x) = TestSet::points(&c.problem.build()?, &c.test_times, c.test_size, c.test_seed)?;
            let reference = McReference::compute(&c.problem, t.as_slice().expect("contiguous"), x.view(), samples, c.test_seed)?;
            reference.save(&out)?;
            println!("saved {} ({} points, {} samples each)", out.display(), reference.ll.len(), samples);
        }
        Command::ConvolutionBench { kind, dim, samples, seed, out } => {
            let kind = match kind {
                Kind::Gaussian => ConvolutionKind::Gaussian,
                Kind::Lognormal => ConvolutionKind::Lognormal,
                Kind::Cauchy => ConvolutionKind::Cauchy,
            };
            let report = convolution_experiment(kind, dim, samples, &mut stream_rng(seed, 0))?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => write_atomic(&path, json.as_bytes())?,
                None => println!("{json}"),
            }
        }
        Command::Sample { common, score, n, steps, out } => {
            let c = common.load()?;
            let problem = c.problem.build()?;
            let field: Box<dyn ScoreField + '_> = match &score {
                Some(path) => load_score(path, &c)?,
                None => Box::new(ExactScore::new(&problem)?),
            };
            let x0 = problem.initial().sample(n, &mut stream_rng(first_seed(&c), 0));
            let eval = |x: ArrayView2<f64>, t: f64| field.eval(x, Array1::from_elem(x.nrows(), t).view());
            let xt = problem.flow_ode_sample(eval, x0.view(), steps)?;
            write_points(&out, xt.view())?;
            println!("saved {} samples at t = {} to {}", n, problem.horizon(), out.display());
        }
        Command::Eval { common, ll, out } => {
            let c = common.load()?;
            let (problem, model) = ModelFile::load(&ll)?.into_log_density()?;
            if problem.dim() != c.problem.dim || problem.kind() != c.problem.kind {
                return Err(Error::Config(format!("{} was trained for a different problem", ll.display())));
            }
            let test = test_set(&c)?;
            let [ll_l2, ll_linf, pdf_l2, pdf_linf] = evaluate_ll(&model, &test)?;
            let report = ErrorReport {
                method: c.method.to_string(),
                d: problem.dim(),
                seed: Some(first_seed(&c)),
                ll_l2,
                ll_linf,
                pdf_l2,
                pdf_linf,
                rate: 0.0,
                epochs: 0,
            };
            if let Some(path) = &out {
                emit_results(std::slice::from_ref(&report), path, Format::for_path(path))?;
            }
            print!("{}", scorefp::metrics::results_to_string(&[report], Format::Csv)?);
        }
    }
    Ok(())
}

fn write_points(path: &Path, x: ArrayView2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..x.ncols()).map(|i| format!("x{i}")))?;
    for row in x.rows() {
        w.write_record(row_strings(row))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn row_strings(row: ArrayView1<f64>) -> Vec<String> {
    row.iter().map(|v| v.to_string()).collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => 3,
        Error::Shape(_) | Error::Contract(_) => 4,
        Error::Domain(_) => 5,
        Error::Capability(_) => 6,
        Error::NonFinite(_) => 7,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
