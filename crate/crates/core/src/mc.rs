//! Monte Carlo log-density references: log-mean-exp of sampled log-terms,
//! marginal log-likelihoods through the transition kernel, and the
//! convolution experiments that show where plain Monte Carlo breaks down.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{pdf_errors_from_ll, relative_errors};
use crate::sde::{ProblemSpec, SdeProblem};

/// Log-terms further than this below the maximum vanish when exponentiated.
pub const UNDERFLOW_NATS: f64 = 700.0;

/// Samples drawn per chunk in the streaming estimators.
const CHUNK: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSumEstimate {
    /// `log((1/M) Σ exp q_m)`.
    pub estimate: f64,
    pub samples: usize,
    pub max_term: f64,
    /// Share of terms within [`UNDERFLOW_NATS`] of the maximum.
    pub effective_fraction: f64,
    /// Delta-method standard error of `estimate`.
    pub std_error: f64,
    /// Set when every term is `−∞`.
    pub all_neg_inf: bool,
}

/// Compensated summation.
#[derive(Clone, Copy, Debug, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }

    fn scaled(&self, k: f64) -> Self {
        Self { sum: self.sum * k, comp: self.comp * k }
    }
}

fn check_term(q: f64) -> Result<()> {
    if q.is_nan() || q == f64::INFINITY {
        return Err(Error::Contract(format!("log-term {q} is neither finite nor −∞")));
    }
    Ok(())
}

fn finish(n: usize, max: f64, s1: f64, s2: f64, near: u64) -> LogSumEstimate {
    if max == f64::NEG_INFINITY {
        return LogSumEstimate {
            estimate: f64::NEG_INFINITY,
            samples: n,
            max_term: max,
            effective_fraction: 0.0,
            std_error: f64::NAN,
            all_neg_inf: true,
        };
    }
    let m = n as f64;
    let mean = s1 / m;
    let var = if n > 1 { ((s2 / m - mean * mean) * m / (m - 1.0)).max(0.0) } else { 0.0 };
    LogSumEstimate {
        estimate: max + mean.ln(),
        samples: n,
        max_term: max,
        effective_fraction: near as f64 / m,
        std_error: (var / m).sqrt() / mean,
        all_neg_inf: false,
    }
}

/// Exact log-mean-exp: subtract the largest term, average the exponentials
/// (each at most one), take the log and add the maximum back.
pub fn ll_normalize_and_sum(log_terms: &[f64]) -> Result<LogSumEstimate> {
    if log_terms.is_empty() {
        return Err(Error::Contract("normalize-and-sum needs at least one term".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &q in log_terms {
        check_term(q)?;
        max = max.max(q);
    }
    if max == f64::NEG_INFINITY {
        return Ok(finish(log_terms.len(), max, 0.0, 0.0, 0));
    }
    let (mut s1, mut s2) = (Neumaier::default(), Neumaier::default());
    let mut near = 0;
    for &q in log_terms {
        let w = (q - max).exp();
        s1.add(w);
        s2.add(w * w);
        if q >= max - UNDERFLOW_NATS {
            near += 1;
        }
    }
    Ok(finish(log_terms.len(), max, s1.value(), s2.value(), near))
}

/// Streaming version of [`ll_normalize_and_sum`]. Partial sums are kept
/// relative to the running maximum and rescaled when it grows. The
/// effective-sample count is resolved to whole nats.
#[derive(Clone, Debug, Default)]
pub struct LogSumAccumulator {
    n: usize,
    max: Option<f64>,
    s1: Neumaier,
    s2: Neumaier,
    bins: BTreeMap<i64, u64>,
    sum_q: f64,
    sum_q2: f64,
    finite: usize,
}

impl LogSumAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, q: f64) -> Result<()> {
        check_term(q)?;
        self.n += 1;
        if q == f64::NEG_INFINITY {
            return Ok(());
        }
        match self.max {
            Some(m) if q <= m => {
                let w = (q - m).exp();
                self.s1.add(w);
                self.s2.add(w * w);
            }
            Some(m) => {
                let k = (m - q).exp();
                self.s1 = self.s1.scaled(k);
                self.s2 = self.s2.scaled(k * k);
                self.s1.add(1.0);
                self.s2.add(1.0);
                self.max = Some(q);
            }
            None => {
                self.s1.add(1.0);
                self.s2.add(1.0);
                self.max = Some(q);
            }
        }
        *self.bins.entry(q.floor() as i64).or_default() += 1;
        self.sum_q += q;
        self.sum_q2 += q * q;
        self.finite += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &LogSumAccumulator) {
        self.n += other.n;
        let Some(om) = other.max else { return };
        match self.max {
            None => {
                self.max = Some(om);
                self.s1 = other.s1;
                self.s2 = other.s2;
            }
            Some(m) => {
                let top = m.max(om);
                let (ka, kb) = ((m - top).exp(), (om - top).exp());
                let mut s1 = self.s1.scaled(ka);
                let mut s2 = self.s2.scaled(ka * ka);
                s1.add(other.s1.value() * kb);
                s2.add(other.s2.value() * kb * kb);
                self.s1 = s1;
                self.s2 = s2;
                self.max = Some(top);
            }
        }
        for (&b, &c) in &other.bins {
            *self.bins.entry(b).or_default() += c;
        }
        self.sum_q += other.sum_q;
        self.sum_q2 += other.sum_q2;
        self.finite += other.finite;
    }

    /// Sample standard deviation of the finite log-terms.
    pub fn log_term_std(&self) -> f64 {
        if self.finite < 2 {
            return 0.0;
        }
        let m = self.finite as f64;
        let mean = self.sum_q / m;
        ((self.sum_q2 / m - mean * mean).max(0.0) * m / (m - 1.0)).sqrt()
    }

    pub fn finish(&self) -> Result<LogSumEstimate> {
        if self.n == 0 {
            return Err(Error::Contract("normalize-and-sum needs at least one term".into()));
        }
        let max = self.max.unwrap_or(f64::NEG_INFINITY);
        let floor = (max - UNDERFLOW_NATS).floor() as i64;
        let near = self.bins.range(floor..).map(|(_, c)| c).sum();
        Ok(finish(self.n, max, self.s1.value(), self.s2.value(), near))
    }
}

/// `log p_t(x) = log E_{x_0 ∼ p_0} p_{0t}(x | x_0)` for every row of `x`,
/// with the same `m` initial draws shared by all rows.
pub fn mc_marginal_ll<R: Rng + ?Sized>(problem: &SdeProblem, x: ArrayView2<f64>, t: f64, m: usize, rng: &mut R) -> Result<Vec<LogSumEstimate>> {
    mc_marginal_accumulators(problem, x, t, m, rng)?.iter().map(|a| a.finish()).collect::<Result<_>>()
}

fn mc_marginal_accumulators<R: Rng + ?Sized>(problem: &SdeProblem, x: ArrayView2<f64>, t: f64, m: usize, rng: &mut R) -> Result<Vec<LogSumAccumulator>> {
    if !problem.has_transition() {
        return Err(Error::Capability(format!("{:?} has no transition density", problem.kind())));
    }
    if !(t > 0.0 && t <= problem.horizon()) {
        return Err(Error::Domain(format!("t = {t} outside (0, {}]", problem.horizon())));
    }
    if m == 0 {
        return Err(Error::Contract("at least one Monte Carlo sample is required".into()));
    }
    if x.ncols() != problem.dim() {
        return Err(Error::Shape(format!("points have {} coordinates, problem has d = {}", x.ncols(), problem.dim())));
    }
    let mut accs = vec![LogSumAccumulator::new(); x.nrows()];
    let mut left = m;
    while left > 0 {
        let c = left.min(CHUNK);
        left -= c;
        let x0 = problem.initial().sample(c, rng);
        let ts = Array1::from_elem(c, t);
        for (k, acc) in accs.iter_mut().enumerate() {
            let xs = x.row(k).broadcast((c, x.ncols())).expect("row broadcast").to_owned();
            for q in problem.transition_log_pdf(xs.view(), x0.view(), ts.view())? {
                acc.push(q)?;
            }
        }
    }
    Ok(accs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvolutionKind {
    /// `N(0, I) * N(0, I) = N(0, 2I)`.
    Gaussian,
    /// Product of independent `LogNormal(0, 0.1 I)` and `LogNormal(0, I)`
    /// vectors: `LogNormal(0, 1.1 I)`.
    Lognormal,
    /// `C(1) * C(1) = C(2)`.
    Cauchy,
}

impl std::str::FromStr for ConvolutionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "lognormal" => Ok(Self::Lognormal),
            "cauchy" => Ok(Self::Cauchy),
            _ => Err(Error::Config(format!("unknown convolution {s:?}; expected gaussian, lognormal or cauchy"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionReport {
    pub kind: ConvolutionKind,
    pub d: usize,
    pub samples: usize,
    pub test_points: usize,
    pub ll_l2: f64,
    pub ll_linf: f64,
    pub pdf_l2: f64,
    pub pdf_linf: f64,
    /// Mean over test points of the standard deviation of the log-terms.
    pub log_term_std: f64,
    /// Smallest effective fraction over the test points.
    pub min_effective_fraction: f64,
}

pub const CONVOLUTION_TEST_POINTS: usize = 100;

fn cauchy_log_norm(d: f64, gamma: f64) -> f64 {
    ln_gamma((d + 1.0) / 2.0) - ln_gamma(0.5) - 0.5 * d * PI.ln() - d * gamma.ln()
}

fn sample_cauchy<R: Rng + ?Sized>(n: usize, d: usize, gamma: f64, rng: &mut R) -> Array2<f64> {
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    let mut out = Array2::<f64>::zeros((n, d));
    for mut row in out.rows_mut() {
        let w: f64 = chi.sample(rng);
        let s = gamma / w.sqrt();
        row.mapv_inplace(|_| s * rng.sample::<f64, _>(StandardNormal));
    }
    out
}

fn gaussian_rows<R: Rng + ?Sized>(n: usize, d: usize, sd: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || sd * rng.sample::<f64, _>(StandardNormal))
}

/// Runs one convolution benchmark: 100 test points from the known result,
/// `m` shared Monte Carlo samples, normalize-and-sum per point, and relative
/// errors of the estimated log-densities and densities.
pub fn convolution_experiment<R: Rng + ?Sized>(kind: ConvolutionKind, d: usize, m: usize, rng: &mut R) -> Result<ConvolutionReport> {
    if d == 0 || m == 0 {
        return Err(Error::Contract("dimension and sample count must be positive".into()));
    }
    let n = CONVOLUTION_TEST_POINTS;
    let df = d as f64;
    let log2pi = (2.0 * PI).ln();
    // Test points in the working coordinates (log-space for the lognormal
    // case) and their exact log-densities.
    let (points, exact): (Array2<f64>, Array1<f64>) = match kind {
        ConvolutionKind::Gaussian => {
            let x = gaussian_rows(n, d, 2f64.sqrt(), rng);
            let e = x.map_axis(Axis(1), |r| -0.25 * r.dot(&r) - 0.5 * df * (2.0 * 2.0 * PI).ln());
            (x, e)
        }
        ConvolutionKind::Lognormal => {
            let u = gaussian_rows(n, d, 1.1f64.sqrt(), rng);
            let e = u.map_axis(Axis(1), |r| -r.sum() - r.dot(&r) / 2.2 - 0.5 * df * (2.0 * 1.1 * PI).ln());
            (u, e)
        }
        ConvolutionKind::Cauchy => {
            let x = sample_cauchy(n, d, 2.0, rng);
            let c = cauchy_log_norm(df, 2.0);
            let e = x.map_axis(Axis(1), |r| c - 0.5 * (df + 1.0) * (1.0 + r.dot(&r) / 4.0).ln());
            (x, e)
        }
    };
    let norms: Array1<f64> = points.map_axis(Axis(1), |r| r.dot(&r));
    let mut accs = vec![LogSumAccumulator::new(); n];
    let cauchy_c = cauchy_log_norm(df, 1.0);
    let mut left = m;
    while left > 0 {
        let c = left.min(CHUNK);
        left -= c;
        let y = match kind {
            ConvolutionKind::Gaussian => gaussian_rows(c, d, 1.0, rng),
            ConvolutionKind::Lognormal => gaussian_rows(c, d, 0.1f64.sqrt(), rng),
            ConvolutionKind::Cauchy => sample_cauchy(c, d, 1.0, rng),
        };
        let ynorm: Array1<f64> = y.map_axis(Axis(1), |r| r.dot(&r));
        // ‖x − y‖² for every (sample, point) pair.
        let cross = y.dot(&points.t());
        for (k, acc) in accs.iter_mut().enumerate() {
            let col = cross.column(k);
            for j in 0..c {
                let r2 = (norms[k] + ynorm[j] - 2.0 * col[j]).max(0.0);
                let q = match kind {
                    ConvolutionKind::Gaussian => -0.5 * r2 - 0.5 * df * log2pi,
                    // p_LN(x / y; 0, I) · Π 1/y_i with u = log x, v = log y:
                    // the 1/y factors cancel against Π y_i / x_i.
                    ConvolutionKind::Lognormal => -points.row(k).sum() - 0.5 * r2 - 0.5 * df * log2pi,
                    ConvolutionKind::Cauchy => cauchy_c - 0.5 * (df + 1.0) * (1.0 + r2).ln(),
                };
                acc.push(q)?;
            }
        }
    }
    let estimates: Vec<LogSumEstimate> = accs.iter().map(|a| a.finish()).collect::<Result<_>>()?;
    let est = Array1::from_iter(estimates.iter().map(|e| e.estimate));
    let (ll_l2, ll_linf) = relative_errors(est.view(), exact.view())?;
    let (pdf_l2, pdf_linf) = pdf_errors_from_ll(est.view(), exact.view())?;
    Ok(ConvolutionReport {
        kind,
        d,
        samples: m,
        test_points: n,
        ll_l2,
        ll_linf,
        pdf_l2,
        pdf_linf,
        log_term_std: accs.iter().map(|a| a.log_term_std()).sum::<f64>() / n as f64,
        min_effective_fraction: estimates.iter().map(|e| e.effective_fraction).fold(1.0, f64::min),
    })
}

/// Cached Monte Carlo reference log-densities at fixed test points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReference {
    pub problem: ProblemSpec,
    pub seed: u64,
    pub samples: usize,
    pub t: Vec<f64>,
    /// Row-major test points, one per entry of `t`.
    pub points: Vec<Vec<f64>>,
    pub ll: Vec<f64>,
    pub std_errors: Vec<f64>,
}

impl McReference {
    /// Estimates `log p_t(x)` at each `(t_k, x_k)`; points sharing a time
    /// share their Monte Carlo draws.
    pub fn compute(problem_spec: &ProblemSpec, t: &[f64], points: ArrayView2<f64>, samples: usize, seed: u64) -> Result<Self> {
        if t.len() != points.nrows() {
            return Err(Error::Shape(format!("{} times for {} points", t.len(), points.nrows())));
        }
        let problem = problem_spec.build()?;
        let mut ll = vec![0.0; t.len()];
        let mut se = vec![0.0; t.len()];
        let mut times: Vec<f64> = t.to_vec();
        times.sort_by(f64::total_cmp);
        times.dedup();
        for (j, &tj) in times.iter().enumerate() {
            let idx: Vec<usize> = (0..t.len()).filter(|&k| t[k] == tj).collect();
            let mut rng = crate::sde::stream_rng(seed, j as u64);
            let est = mc_marginal_ll(&problem, points.select(Axis(0), &idx).view(), tj, samples, &mut rng)?;
            for (e, &k) in est.iter().zip(&idx) {
                ll[k] = e.estimate;
                se[k] = e.std_error;
            }
        }
        Ok(Self {
            problem: problem_spec.clone(),
            seed,
            samples,
            t: t.to_vec(),
            points: points.rows().into_iter().map(|r| r.to_vec()).collect(),
            ll,
            std_errors: se,
        })
    }

    pub fn points_array(&self) -> Result<Array2<f64>> {
        let d = self.points.first().map_or(0, Vec::len);
        Array2::from_shape_vec((self.points.len(), d), self.points.concat()).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Loads `path` if it exists (it is never rewritten), otherwise computes
    /// and stores the reference.
    pub fn load_or_compute(path: &Path, problem: &ProblemSpec, t: &[f64], points: ArrayView2<f64>, samples: usize, seed: u64) -> Result<Self> {
        if path.exists() {
            let r = Self::load(path)?;
            if &r.problem != problem || r.t != t || r.samples != samples || r.seed != seed {
                return Err(Error::Config(format!("cached reference {} was built for a different setup", path.display())));
            }
            return Ok(r);
        }
        let r = Self::compute(problem, t, points, samples, seed)?;
        r.save(path)?;
        Ok(r)
    }
}
