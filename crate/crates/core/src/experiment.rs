//! End-to-end runs: test sets with exact or Monte Carlo reference
//! log-densities, the two-stage pipeline per seed, and the result table.

use std::path::PathBuf;

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ExactScore, LogDensityField, ScoreField};
use crate::io::write_atomic;
use crate::mc::McReference;
use crate::metrics::{emit_results, pdf_errors_from_ll, relative_errors, ErrorReport, Format};
use crate::sde::{stream_rng, ProblemSpec, SdeProblem};
use crate::training::{train_direct_ll, train_ll, train_score, Method, ModelFile, TrainConfig};

const STREAM_TEST: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub method: Method,
    pub train: TrainConfig,
    pub test_size: usize,
    /// Evaluation times; empty means five evenly spaced times ending at `T`.
    pub test_times: Vec<f64>,
    pub test_seed: u64,
    /// Skip stage one and hand the analytic score to the LL stage.
    pub exact_score: bool,
    /// Monte Carlo samples per reference value when no closed form exists.
    pub mc_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_cache: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Trained models are written here as `<method>-seed<k>-{score,ll}.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Report wall-clock epochs per second; off gives byte-identical tables.
    pub record_rate: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec { kind: crate::sde::ProblemKind::Ou, dim: 10, seed: 0, horizon: None },
            method: Method::ScorePinn,
            train: TrainConfig::default(),
            test_size: 10_000,
            test_times: Vec::new(),
            test_seed: 12_345,
            exact_score: false,
            mc_samples: 1_000_000,
            reference_cache: None,
            out: None,
            checkpoint_dir: None,
            record_rate: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_size == 0 {
            return Err(Error::Config("test_size must be positive".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.exact_score && self.method == Method::DirectLl {
            return Err(Error::Config("the exact-score shortcut does not apply to direct-ll".into()));
        }
        self.train.validate()
    }

    /// The training settings with the experiment's method filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { method: self.method, ..self.train.clone() }
    }
}

/// Fixed evaluation points with reference log-densities.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub t: Array1<f64>,
    pub x: Array2<f64>,
    pub exact_ll: Array1<f64>,
    /// Whether `exact_ll` came from Monte Carlo.
    pub estimated: bool,
}

impl TestSet {
    /// `size` points split evenly over the test times (five evenly spaced
    /// times ending at `T` when `times` is empty), drawn from the marginal
    /// at each time.
    pub fn points(problem: &SdeProblem, times: &[f64], size: usize, seed: u64) -> Result<(Array1<f64>, Array2<f64>)> {
        let horizon = problem.horizon();
        let times: Vec<f64> = if times.is_empty() { (1..=5).map(|k| horizon * k as f64 / 5.0).collect() } else { times.to_vec() };
        if let Some(&t) = times.iter().find(|&&t| !(t > 0.0 && t <= horizon)) {
            return Err(Error::Domain(format!("test time {t} outside (0, {horizon}]")));
        }
        let per = size.div_ceil(times.len());
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for (j, &t) in times.iter().enumerate() {
            let n = per.min(size.saturating_sub(j * per));
            let mut rng = stream_rng(seed, STREAM_TEST + j as u64);
            xs.push(problem.sample_marginal(n, t, &mut rng)?);
            ts.push(Array1::from_elem(n, t));
        }
        let x = concatenate(Axis(0), &xs.iter().map(|a| a.view()).collect::<Vec<_>>()).map_err(|e| Error::Shape(e.to_string()))?;
        let t = concatenate(Axis(0), &ts.iter().map(|a| a.view()).collect::<Vec<_>>()).map_err(|e| Error::Shape(e.to_string()))?;
        Ok((t, x))
    }

    /// Test points with their reference log-densities: closed form where
    /// the marginal is known, Monte Carlo (optionally cached) otherwise.
    pub fn build(problem_spec: &ProblemSpec, times: &[f64], size: usize, seed: u64, mc_samples: usize, cache: Option<&std::path::Path>) -> Result<Self> {
        let problem = problem_spec.build()?;
        let (t, x) = Self::points(&problem, times, size, seed)?;
        let mut exact = Array1::zeros(x.nrows());
        let mut estimated = false;
        let mut start = 0;
        while start < t.len() {
            let tj = t[start];
            let n = t.iter().skip(start).take_while(|&&s| s == tj).count();
            let block = x.slice(ndarray::s![start..start + n, ..]);
            match problem.marginal(tj) {
                Some(m) => exact.slice_mut(ndarray::s![start..start + n]).assign(&m?.log_pdf_batch(block)?),
                None => estimated = true,
            }
            start += n;
        }
        if estimated {
            let reference = match cache {
                Some(path) => McReference::load_or_compute(path, problem_spec, t.as_slice().expect("contiguous"), x.view(), mc_samples, seed)?,
                None => McReference::compute(problem_spec, t.as_slice().expect("contiguous"), x.view(), mc_samples, seed)?,
            };
            exact = Array1::from(reference.ll);
        }
        Ok(Self { t, x, exact_ll: exact, estimated })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `(ll_l2, ll_linf, pdf_l2, pdf_linf)` of a log-density model on `test`.
pub fn evaluate_ll(model: &dyn LogDensityField, test: &TestSet) -> Result<[f64; 4]> {
    let pred = model.eval(test.x.view(), test.t.view())?;
    if let Some(k) = pred.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("predicted log-density at x = {}, t = {}", test.x.row(k), test.t[k])));
    }
    let (ll_l2, ll_linf) = relative_errors(pred.view(), test.exact_ll.view())?;
    let (pdf_l2, pdf_linf) = pdf_errors_from_ll(pred.view(), test.exact_ll.view())?;
    Ok([ll_l2, ll_linf, pdf_l2, pdf_linf])
}

/// Root-mean-square distance between a score field and the analytic score.
pub fn score_rmse(problem: &SdeProblem, model: &dyn ScoreField, x: &Array2<f64>, t: &Array1<f64>) -> Result<f64> {
    let exact = ExactScore::new(problem)?.eval(x.view(), t.view())?;
    let got = model.eval(x.view(), t.view())?;
    Ok(((got - exact).mapv(|v| v * v).sum() / x.nrows() as f64).sqrt())
}

fn run_seed(config: &ExperimentConfig, problem: &SdeProblem, test: &TestSet, seed: u64) -> Result<ErrorReport> {
    let train = config.train_config();
    let label = config.method.as_str();
    let save = |name: &str, file: ModelFile| -> Result<()> {
        match &config.checkpoint_dir {
            Some(dir) => file.save(&dir.join(format!("{label}-seed{seed}-{name}.json"))),
            None => Ok(()),
        }
    };
    let (ll_model, seconds, epochs) = if config.method == Method::DirectLl {
        let fit = train_direct_ll(problem, &train, seed)?;
        (fit.model, fit.seconds, fit.history.len())
    } else if config.exact_score {
        let score = ExactScore::new(problem)?;
        let fit = train_ll(problem, &train, &score, seed)?;
        (fit.model, fit.seconds, fit.history.len())
    } else {
        let score = train_score(problem, &train, seed)?;
        log::info!("{label} seed {seed}: score stage done, best epoch {:?}", score.best_epoch);
        save("score", ModelFile::score(&config.problem, &score.model))?;
        let fit = train_ll(problem, &train, &score.model, seed)?;
        (fit.model, score.seconds + fit.seconds, score.history.len())
    };
    save("ll", ModelFile::log_density(&config.problem, &ll_model))?;
    let [ll_l2, ll_linf, pdf_l2, pdf_linf] = evaluate_ll(&ll_model, test)?;
    let rate = if config.record_rate && seconds > 0.0 { epochs as f64 / seconds } else { 0.0 };
    Ok(ErrorReport { method: label.to_string(), d: problem.dim(), seed: Some(seed), ll_l2, ll_linf, pdf_l2, pdf_linf, rate, epochs })
}

/// Trains and evaluates every seed, appends the mean row and writes the
/// table to `config.out`. When a seed fails, the rows finished so far are
/// still written and an `<out>.error` file records the failure.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ErrorReport>> {
    config.validate()?;
    let problem = config.problem.build()?;
    let test = TestSet::build(&config.problem, &config.test_times, config.test_size, config.test_seed, config.mc_samples, config.reference_cache.as_deref())?;
    let mut rows = Vec::new();
    for &seed in &config.train.seeds {
        match run_seed(config, &problem, &test, seed) {
            Ok(r) => {
                log::info!("{} seed {seed}: LL L2 {:.3e}, PDF L2 {:.3e}", r.method, r.ll_l2, r.pdf_l2);
                rows.push(r);
            }
            Err(e) => {
                if let Some(out) = &config.out {
                    emit_results(&rows, out, Format::for_path(out))?;
                    let mut marker = out.clone().into_os_string();
                    marker.push(".error");
                    write_atomic(&PathBuf::from(marker), format!("seed {seed} failed ({}): {e}\n", e.category()).as_bytes())?;
                }
                return Err(e);
            }
        }
    }
    if let Some(mean) = ErrorReport::mean(&rows) {
        rows.push(mean);
    }
    if let Some(out) = &config.out {
        emit_results(&rows, out, Format::for_path(out))?;
    }
    Ok(rows)
}
