//! Model wrappers and every training objective: the operator `L`, the score
//! PDE residual, score matching (conditional and sliced), the LL-ODE loss
//! and the HJB residual of the direct log-likelihood baseline.
//!
//! With `D = G Gᵀ`, `c_j = Σ_i ∂_i D_ij` and `J = ∂s/∂x`,
//!
//! ```text
//! L[s] = ½ (cᵀs + tr(D J)) + ½ sᵀ D s − ⟨A, s⟩ − ∇·A
//! ```
//!
//! and the log-likelihood obeys `∂_t q = L[∇q]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffnet::{rademacher, DiffNet, NetVars};
use crate::distributions::Density;
use crate::error::{Error, Result};
use crate::fields::{BoundLogDensity, BoundScore, LogDensityField, ScoreField};
use crate::sde::{ProblemKind, ResidualBatch, SdeProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    /// `t · NN(x, t) + (initial value)`: exact at `t = 0`.
    Hard,
    /// The bare network; the initial condition goes into the loss.
    Plain,
}

/// How `tr(D J)` and divergences are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    /// `d` basis-vector JVPs.
    Exact,
    /// Rademacher probes `vᵀ(·)v`, averaged over `probes` draws per point.
    Hutchinson { probes: usize },
}

impl TraceMode {
    pub fn hutchinson() -> Self {
        TraceMode::Hutchinson { probes: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub initial: f64,
    pub residual: f64,
    /// `λ(t) = t^p` in conditional score matching.
    pub sm_time_exponent: f64,
}

impl LossWeights {
    /// Weights for hard-constrained models: no initial term.
    pub fn hard() -> Self {
        Self { initial: 0.0, residual: 1.0, sm_time_exponent: 0.5 }
    }

    /// Soft initial condition with weight 20.
    pub fn soft() -> Self {
        Self { initial: 20.0, residual: 1.0, sm_time_exponent: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial < 0.0 || self.residual < 0.0 || !(self.initial > 0.0 || self.residual > 0.0) {
            return Err(Error::Contract("loss weights must be nonnegative with at least one positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::hard()
    }
}

fn model_widths(d: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = vec![d + 1];
    w.extend_from_slice(hidden);
    w.push(out);
    w
}

/// `s_t(x; θ)`, an `ℝ^{d+1} → ℝ^d` network wrapped around the initial score.
#[derive(Clone, Debug)]
pub struct ScoreModel {
    pub net: DiffNet,
    pub mode: Constraint,
    initial: Density,
}

impl ScoreModel {
    pub fn new(problem: &SdeProblem, hidden: &[usize], mode: Constraint, seed: u64) -> Result<Self> {
        let d = problem.dim();
        Self::from_net(problem, DiffNet::new(&model_widths(d, hidden, d), seed)?, mode)
    }

    pub fn from_net(problem: &SdeProblem, net: DiffNet, mode: Constraint) -> Result<Self> {
        let d = problem.dim();
        if net.input_dim() != d || net.output_dim() != d {
            return Err(Error::Shape(format!("score network must map d + 1 -> d with d = {d}, got {:?}", net.widths())));
        }
        Ok(Self { net, mode, initial: problem.initial().clone() })
    }

    /// The wrapped output for an already recorded network.
    pub fn assemble<'t>(&self, vars: &NetVars<'t>, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        let nn = vars.apply(x, t);
        match self.mode {
            Constraint::Hard => t * nn + self.initial.score_graph(x.tape(), x),
            Constraint::Plain => nn,
        }
    }
}

struct BoundScoreModel<'a> {
    model: &'a ScoreModel,
    vars: NetVars<'a>,
}

impl<'t> BoundScore<'t> for BoundScoreModel<'t> {
    fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        self.model.assemble(&self.vars, x, t)
    }

    fn params(&self) -> Vec<Var<'t>> {
        self.vars.params()
    }
}

impl ScoreField for ScoreModel {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn bind<'a>(&'a self, tape: &'a Tape) -> Box<dyn BoundScore<'a> + 'a> {
        Box::new(BoundScoreModel { model: self, vars: self.net.record(tape) })
    }
}

/// `q_t(x; φ)`, an `ℝ^{d+1} → ℝ` network wrapped around `log p_0`.
#[derive(Clone, Debug)]
pub struct LLModel {
    pub net: DiffNet,
    pub mode: Constraint,
    initial: Density,
}

impl LLModel {
    pub fn new(problem: &SdeProblem, hidden: &[usize], mode: Constraint, seed: u64) -> Result<Self> {
        Self::from_net(problem, DiffNet::new(&model_widths(problem.dim(), hidden, 1), seed)?, mode)
    }

    pub fn from_net(problem: &SdeProblem, net: DiffNet, mode: Constraint) -> Result<Self> {
        let d = problem.dim();
        if net.input_dim() != d || net.output_dim() != 1 {
            return Err(Error::Shape(format!("LL network must map d + 1 -> 1 with d = {d}, got {:?}", net.widths())));
        }
        Ok(Self { net, mode, initial: problem.initial().clone() })
    }

    pub fn assemble<'t>(&self, vars: &NetVars<'t>, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        let nn = vars.apply(x, t);
        match self.mode {
            Constraint::Hard => t * nn + self.initial.log_pdf_graph(x.tape(), x),
            Constraint::Plain => nn,
        }
    }
}

struct BoundLLModel<'a> {
    model: &'a LLModel,
    vars: NetVars<'a>,
}

impl<'t> BoundLogDensity<'t> for BoundLLModel<'t> {
    fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        self.model.assemble(&self.vars, x, t)
    }

    fn params(&self) -> Vec<Var<'t>> {
        self.vars.params()
    }
}

impl LogDensityField for LLModel {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn bind<'a>(&'a self, tape: &'a Tape) -> Box<dyn BoundLogDensity<'a> + 'a> {
        Box::new(BoundLLModel { model: self, vars: self.net.record(tape) })
    }
}

/// Probe directions for one evaluation of a trace term.
#[derive(Clone, Debug)]
pub enum Probes {
    /// The `d` coordinate directions (exact trace).
    Basis,
    /// Rademacher draws, each `n × d`.
    Random(Vec<Array2<f64>>),
}

impl Probes {
    pub fn draw(trace: TraceMode, n: usize, d: usize, rng: Option<&mut dyn RngCore>) -> Result<Self> {
        match trace {
            TraceMode::Exact => Ok(Probes::Basis),
            TraceMode::Hutchinson { probes } => {
                if probes == 0 {
                    return Err(Error::Contract("at least one Hutchinson probe is required".into()));
                }
                let rng = rng.ok_or_else(|| Error::Contract("Hutchinson trace needs a random source".into()))?;
                Ok(Probes::Random((0..probes).map(|_| rademacher(n, d, rng)).collect()))
            }
        }
    }

    /// `mean_v Σ_rows f(v) ⊙ (J v)` for `J = ∂s/∂x`, as `n × 1`.
    fn contract<'t>(&self, x: Var<'t>, s: Var<'t>, weight: impl Fn(Var<'t>) -> Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let (n, d) = x.shape();
        let dirs: Vec<Var<'t>> = match self {
            Probes::Basis => (0..d)
                .map(|i| {
                    let mut e = Array2::zeros((n, d));
                    e.column_mut(i).fill(1.0);
                    tape.leaf(e)
                })
                .collect(),
            Probes::Random(vs) => vs.iter().map(|v| tape.leaf(v.clone())).collect(),
        };
        let scale = match self {
            Probes::Basis => 1.0,
            Probes::Random(vs) => 1.0 / vs.len() as f64,
        };
        let mut acc: Option<Var<'t>> = None;
        for v in dirs {
            let jv = tape.jvp(s, &[x], &[v]);
            let term = (weight(v) * jv).row_sums();
            acc = Some(match acc {
                Some(a) => a + term,
                None => term,
            });
        }
        acc.expect("at least one direction") * scale
    }
}

fn time_column<'t>(tape: &'t Tape, t: ArrayView1<f64>) -> Var<'t> {
    tape.leaf(t.to_owned().insert_axis(Axis(1)))
}

/// `∇·s` estimated with `probes`, as `n × 1`.
pub fn divergence_graph<'t>(x: Var<'t>, s: Var<'t>, probes: &Probes) -> Var<'t> {
    probes.contract(x, s, |v| v)
}

/// `L[s]` as `n × 1`; `s` must be a function of the leaf `x`.
pub fn operator_l_graph<'t>(problem: &SdeProblem, x: Var<'t>, t: Var<'t>, s: Var<'t>, probes: &Probes) -> Var<'t> {
    let tape = x.tape();
    let tr = probes.contract(x, s, |v| problem.apply_d_graph(tape, x, t, v));
    let mut first = tr;
    if let Some(c) = problem.div_d_graph(x, t) {
        first = first + (c * s).row_sums();
    }
    let ds = problem.apply_d_graph(tape, x, t, s);
    let a = problem.a_graph(tape, x, t);
    first * 0.5 + (s * ds).row_sums() * 0.5 - (a * s).row_sums() - problem.div_a_graph(tape, t)
}

fn check_batch(problem: &SdeProblem, x: &ArrayView2<f64>, t: &ArrayView1<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if x.ncols() != problem.dim() {
        return Err(Error::Shape(format!("points have {} coordinates, problem has d = {}", x.ncols(), problem.dim())));
    }
    if t.len() != x.nrows() {
        return Err(Error::Shape(format!("{} times for {} points", t.len(), x.nrows())));
    }
    Ok(())
}

fn ensure_finite(what: &str, values: &Array2<f64>, x: &ArrayView2<f64>, t: &ArrayView1<f64>) -> Result<()> {
    if let Some(k) = values.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("{what} at x = {}, t = {}", x.row(k), t[k])));
    }
    Ok(())
}

/// `L[s](x, t)` for each row.
pub fn operator_l(
    problem: &SdeProblem,
    field: &dyn ScoreField,
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    trace: TraceMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Array1<f64>> {
    check_batch(problem, &x, &t)?;
    let probes = Probes::draw(trace, x.nrows(), x.ncols(), rng)?;
    let tape = Tape::new();
    let bound = field.bind(&tape);
    let xv = tape.leaf(x.to_owned());
    let tv = time_column(&tape, t);
    let s = bound.value(xv, tv);
    Ok(operator_l_graph(problem, xv, tv, s, &probes).value().column(0).to_owned())
}

/// `∂_t s − ∇_x L[s]` as `n × d`. The probes are fixed inside the gradient.
pub fn score_pinn_residual_graph<'t>(problem: &SdeProblem, bound: &dyn BoundScore<'t>, x: Var<'t>, t: Var<'t>, probes: &Probes) -> Var<'t> {
    let s = bound.value(x, t);
    let ds = bound.time_derivative(x, t, s);
    let l = operator_l_graph(problem, x, t, s, probes);
    let gl = x.tape().grad(l, &[x])[0];
    ds - gl
}

pub fn score_pinn_residual(
    problem: &SdeProblem,
    field: &dyn ScoreField,
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    trace: TraceMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Array2<f64>> {
    check_batch(problem, &x, &t)?;
    let probes = Probes::draw(trace, x.nrows(), x.ncols(), rng)?;
    let tape = Tape::new();
    let bound = field.bind(&tape);
    let r = score_pinn_residual_graph(problem, bound.as_ref(), tape.leaf(x.to_owned()), time_column(&tape, t), &probes).value();
    ensure_finite("score PDE residual", &r, &x, &t)?;
    Ok(r)
}

/// `λ_init · mean ‖s(x_0, 0) − s_0(x_0)‖²`, or `None` when the weight is zero.
fn initial_score_term<'t>(problem: &SdeProblem, bound: &dyn BoundScore<'t>, tape: &'t Tape, batch: &ResidualBatch, weights: &LossWeights) -> Result<Option<Var<'t>>> {
    if weights.initial == 0.0 {
        return Ok(None);
    }
    let target = problem.initial().score_batch(batch.x0.view())?;
    let x0 = tape.leaf(batch.x0.clone());
    let s0 = bound.value(x0, tape.zeros((batch.len(), 1)));
    let diff = s0 - tape.leaf(target);
    Ok(Some(diff.square().row_sums().mean() * weights.initial))
}

fn check_residual_batch(problem: &SdeProblem, batch: &ResidualBatch) -> Result<()> {
    check_batch(problem, &batch.x.view(), &batch.t.view())
}

/// Score-PINN loss on a bound field.
pub fn score_pinn_loss_graph<'t>(
    problem: &SdeProblem,
    bound: &dyn BoundScore<'t>,
    tape: &'t Tape,
    batch: &ResidualBatch,
    weights: &LossWeights,
    probes: &Probes,
) -> Result<Var<'t>> {
    check_residual_batch(problem, batch)?;
    let x = tape.leaf(batch.x.clone());
    let t = time_column(tape, batch.t.view());
    let r = score_pinn_residual_graph(problem, bound, x, t, probes);
    let mut loss = r.square().row_sums().mean() * weights.residual;
    if let Some(init) = initial_score_term(problem, bound, tape, batch, weights)? {
        loss = loss + init;
    }
    Ok(loss)
}

pub fn loss_score_pinn(
    problem: &SdeProblem,
    field: &dyn ScoreField,
    batch: &ResidualBatch,
    weights: &LossWeights,
    trace: TraceMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    check_residual_batch(problem, batch)?;
    let probes = Probes::draw(trace, batch.len(), problem.dim(), rng)?;
    let tape = Tape::new();
    let bound = field.bind(&tape);
    Ok(score_pinn_loss_graph(problem, bound.as_ref(), &tape, batch, weights, &probes)?.item())
}

/// Conditional score matching with time weight `t^p`.
pub fn sm_loss_graph<'t>(problem: &SdeProblem, bound: &dyn BoundScore<'t>, tape: &'t Tape, batch: &ResidualBatch, weights: &LossWeights) -> Result<Var<'t>> {
    check_residual_batch(problem, batch)?;
    if !problem.has_transition() {
        return Err(Error::Capability(format!("score matching needs a transition kernel; {:?} has none", problem.kind())));
    }
    // λ(0) = 0: rows at t = 0 (where the target is singular) are dropped,
    // the mean still runs over the whole batch.
    let keep: Vec<usize> = (0..batch.len()).filter(|&k| batch.t[k] > 0.0).collect();
    if keep.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let xs = batch.x.select(Axis(0), &keep);
    let ts = batch.t.select(Axis(0), &keep);
    let target = problem.transition_score(xs.view(), batch.x0.select(Axis(0), &keep).view(), ts.view())?;
    let w = ts.mapv(|t| t.powf(weights.sm_time_exponent));
    let x = tape.leaf(xs);
    let t = time_column(tape, ts.view());
    let s = bound.value(x, t);
    let sq = (s - tape.leaf(target)).square().row_sums();
    Ok((sq * tape.leaf(w.insert_axis(Axis(1)))).sum() * (1.0 / batch.len() as f64))
}

pub fn loss_sm(problem: &SdeProblem, field: &dyn ScoreField, batch: &ResidualBatch, weights: &LossWeights) -> Result<f64> {
    let tape = Tape::new();
    let bound = field.bind(&tape);
    Ok(sm_loss_graph(problem, bound.as_ref(), &tape, batch, weights)?.item())
}

/// Sliced score matching: `mean(½‖s‖² + ∇·s)`.
pub fn ssm_loss_graph<'t>(problem: &SdeProblem, bound: &dyn BoundScore<'t>, tape: &'t Tape, batch: &ResidualBatch, probes: &Probes) -> Result<Var<'t>> {
    check_residual_batch(problem, batch)?;
    let x = tape.leaf(batch.x.clone());
    let t = time_column(tape, batch.t.view());
    let s = bound.value(x, t);
    let div = divergence_graph(x, s, probes);
    Ok((s.square().row_sums() * 0.5 + div).mean())
}

pub fn loss_ssm(problem: &SdeProblem, field: &dyn ScoreField, batch: &ResidualBatch, trace: TraceMode, rng: Option<&mut dyn RngCore>) -> Result<f64> {
    check_residual_batch(problem, batch)?;
    let probes = Probes::draw(trace, batch.len(), problem.dim(), rng)?;
    let tape = Tape::new();
    let bound = field.bind(&tape);
    Ok(ssm_loss_graph(problem, bound.as_ref(), &tape, batch, &probes)?.item())
}

/// `∂_t q − L[s]` with the score supplied separately.
pub fn ll_ode_residual(
    problem: &SdeProblem,
    ll: &dyn LogDensityField,
    score: &dyn ScoreField,
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    trace: TraceMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Array1<f64>> {
    let target = operator_l(problem, score, x, t, trace, rng)?;
    let tape = Tape::new();
    let bound = ll.bind(&tape);
    let xv = tape.leaf(x.to_owned());
    let tv = time_column(&tape, t);
    let q = bound.value(xv, tv);
    let dq = bound.time_derivative(xv, tv, q).value();
    Ok(dq.column(0).to_owned() - target)
}

/// LL-ODE loss given precomputed targets `L[s](x_k, t_k)` of the frozen score.
pub fn ll_ode_loss_graph<'t>(
    problem: &SdeProblem,
    bound: &dyn BoundLogDensity<'t>,
    tape: &'t Tape,
    batch: &ResidualBatch,
    targets: &Array1<f64>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    check_residual_batch(problem, batch)?;
    if targets.len() != batch.len() {
        return Err(Error::Shape(format!("{} targets for {} points", targets.len(), batch.len())));
    }
    let x = tape.leaf(batch.x.clone());
    let t = time_column(tape, batch.t.view());
    let q = bound.value(x, t);
    let dq = bound.time_derivative(x, t, q);
    let r = dq - tape.leaf(targets.clone().insert_axis(Axis(1)));
    let loss = r.square().mean() * weights.residual;
    add_initial_ll_term(problem, bound, tape, batch, weights, loss)
}

fn add_initial_ll_term<'t>(
    problem: &SdeProblem,
    bound: &dyn BoundLogDensity<'t>,
    tape: &'t Tape,
    batch: &ResidualBatch,
    weights: &LossWeights,
    loss: Var<'t>,
) -> Result<Var<'t>> {
    if weights.initial == 0.0 {
        return Ok(loss);
    }
    let want = problem.initial().log_pdf_batch(batch.x0.view())?;
    let q0 = bound.value(tape.leaf(batch.x0.clone()), tape.zeros((batch.len(), 1)));
    Ok(loss + (q0 - tape.leaf(want.insert_axis(Axis(1)))).square().mean() * weights.initial)
}

/// Stage-two loss. The score only supplies numbers: it is evaluated on its
/// own tape and never receives gradients.
pub fn loss_ll_ode(
    problem: &SdeProblem,
    ll: &dyn LogDensityField,
    frozen_score: &dyn ScoreField,
    batch: &ResidualBatch,
    weights: &LossWeights,
    trace: TraceMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    let targets = operator_l(problem, frozen_score, batch.x.view(), batch.t.view(), trace, rng)?;
    let tape = Tape::new();
    let bound = ll.bind(&tape);
    Ok(ll_ode_loss_graph(problem, bound.as_ref(), &tape, batch, &targets, weights)?.item())
}

/// `∂_t q − L[∇_x q]` as `n × 1`.
pub fn hjb_residual_graph<'t>(problem: &SdeProblem, bound: &dyn BoundLogDensity<'t>, x: Var<'t>, t: Var<'t>, probes: &Probes) -> Var<'t> {
    let q = bound.value(x, t);
    let dq = bound.time_derivative(x, t, q);
    let s = x.tape().grad(q, &[x])[0];
    dq - operator_l_graph(problem, x, t, s, probes)
}

/// Direct-LL loss: mean squared HJB residual on `batch`.
pub fn direct_ll_loss_graph<'t>(
    problem: &SdeProblem,
    bound: &dyn BoundLogDensity<'t>,
    tape: &'t Tape,
    batch: &ResidualBatch,
    weights: &LossWeights,
    probes: &Probes,
) -> Result<Var<'t>> {
    check_residual_batch(problem, batch)?;
    let r = hjb_residual_graph(problem, bound, tape.leaf(batch.x.clone()), time_column(tape, batch.t.view()), probes);
    let loss = r.square().mean() * weights.residual;
    add_initial_ll_term(problem, bound, tape, batch, weights, loss)
}

pub fn hjb_residual_direct_ll(
    problem: &SdeProblem,
    ll: &dyn LogDensityField,
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    trace: TraceMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Array1<f64>> {
    check_batch(problem, &x, &t)?;
    let probes = Probes::draw(trace, x.nrows(), x.ncols(), rng)?;
    let tape = Tape::new();
    let bound = ll.bind(&tape);
    let r = hjb_residual_graph(problem, bound.as_ref(), tape.leaf(x.to_owned()), time_column(&tape, t), &probes).value();
    ensure_finite("HJB residual", &r, &x, &t)?;
    Ok(r.column(0).to_owned())
}

/// Settings of the adversarial point update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub epochs: usize,
    /// Largest Euclidean move of a point per iteration.
    pub step: f64,
    pub inner_lr: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self { epochs: 5, step: 0.2, inner_lr: 1e-3 }
    }
}

/// Moves `x` uphill on the squared HJB residual with a few Adam ascent
/// steps. Times are left unchanged; a point whose update turns non-finite or
/// leaves the support goes back to its previous position.
pub fn adversarial_perturb(
    problem: &SdeProblem,
    ll: &dyn LogDensityField,
    x: ArrayView2<f64>,
    t: ArrayView1<f64>,
    config: &AdversarialConfig,
    trace: TraceMode,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Array2<f64>> {
    check_batch(problem, &x, &t)?;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut pts = x.to_owned();
    let mut m = Array2::<f64>::zeros(pts.raw_dim());
    let mut v = Array2::<f64>::zeros(pts.raw_dim());
    for step in 1..=config.epochs {
        let probes = Probes::draw(trace, pts.nrows(), pts.ncols(), match rng { Some(ref mut r) => Some(&mut **r as &mut dyn RngCore), None => None })?;
        let tape = Tape::new();
        let bound = ll.bind(&tape);
        let xv = tape.leaf(pts.clone());
        let r = hjb_residual_graph(problem, bound.as_ref(), xv, time_column(&tape, t), &probes);
        let g = tape.grad(r.square(), &[xv])[0].value();
        m = &m * b1 + &(&g * (1.0 - b1));
        v = &v * b2 + &(&g * &g * (1.0 - b2));
        let mh = &m / (1.0 - b1.powi(step as i32));
        let vh = &v / (1.0 - b2.powi(step as i32));
        let mut upd = mh / &(vh.mapv(f64::sqrt) + eps) * config.inner_lr;
        for (k, mut row) in upd.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm > config.step {
                row *= config.step / norm;
            }
            let cand = &pts.row(k) + &row;
            let ok = cand.iter().all(|c| c.is_finite()) && (problem.kind() != ProblemKind::Gbm || cand.iter().all(|&c| c > 0.0));
            if ok {
                pts.row_mut(k).assign(&cand);
            }
        }
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ExactLogDensity, ExactScore, LinearScore};
    use crate::sde::NonGaussian;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn max_abs<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn random_points(p: &SdeProblem, n: usize, r: &mut ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
        let t = Array1::from_shape_simple_fn(n, || r.random_range(0.05..p.horizon()));
        let b = p.residual_batch_at(t, r).unwrap();
        (b.x, b.t)
    }

    #[test]
    fn operator_l_matches_analytic_ou_time_derivative() {
        let p = SdeProblem::make_ou(5, 2).unwrap();
        let mut r = rng(1);
        let (x, t) = random_points(&p, 50, &mut r);
        let l = operator_l(&p, &ExactScore::new(&p).unwrap(), x.view(), t.view(), TraceMode::Exact, None).unwrap();
        let sigma = p.sigma();
        for k in 0..50 {
            let (ct, _) = p.marginal_cov(t[k]).unwrap();
            let pinv = crate::linalg::to_ndarray(&crate::linalg::SpdMatrix::new(crate::linalg::to_nalgebra(&ct)).unwrap().inverse);
            let xr = x.row(k);
            let px = pinv.dot(&xr);
            let want = -0.5 * sigma.dot(&pinv).diag().sum() + 0.5 * px.dot(&(sigma - &ct).dot(&px)) + 2.5;
            assert!((l[k] - want).abs() < 1e-8, "{} vs {want}", l[k]);
        }
    }

    #[test]
    fn operator_l_vanishes_for_zero_score_and_pure_noise() {
        let p = SdeProblem::make_varying_eigenspace(3, 0).unwrap();
        let zero = LinearScore { m: Array2::zeros((3, 3)) };
        let x = array![[0.2, 0.4, -1.0]];
        assert_eq!(operator_l(&p, &zero, x.view(), array![0.5].view(), TraceMode::Exact, None).unwrap()[0], 0.0);
    }

    #[test]
    fn operator_l_gbm_matches_finite_difference_in_time() {
        let p = SdeProblem::make_gbm(4, 5).unwrap();
        let mut r = rng(2);
        let (x, t) = random_points(&p, 30, &mut r);
        let l = operator_l(&p, &ExactScore::new(&p).unwrap(), x.view(), t.view(), TraceMode::Exact, None).unwrap();
        let q = ExactLogDensity::new(&p).unwrap();
        let h = 1e-5;
        let fd = (q.eval(x.view(), (&t + h).view()).unwrap() - q.eval(x.view(), (&t - h).view()).unwrap()) / (2.0 * h);
        assert!(max_abs(&(l - fd)) < 1e-5);
    }

    #[test]
    fn hutchinson_without_rng_is_contract_error() {
        let p = SdeProblem::make_ou(2, 0).unwrap();
        let x = array![[0.0, 1.0]];
        let err = operator_l(&p, &ExactScore::new(&p).unwrap(), x.view(), array![0.3].view(), TraceMode::hutchinson(), None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn oracle_residuals_vanish() {
        for (p, seed) in [
            (SdeProblem::make_ou(5, 1).unwrap(), 10),
            (SdeProblem::make_varying_eigenspace(5, 2).unwrap(), 11),
            (SdeProblem::make_gbm(5, 3).unwrap(), 12),
        ] {
            let mut r = rng(seed);
            let (x, t) = random_points(&p, 100, &mut r);
            let s = ExactScore::new(&p).unwrap();
            let q = ExactLogDensity::new(&p).unwrap();
            let res = score_pinn_residual(&p, &s, x.view(), t.view(), TraceMode::Exact, None).unwrap();
            assert!(max_abs(&res) < 1e-6, "{:?}: {}", p.kind(), max_abs(&res));
            let ll = ll_ode_residual(&p, &q, &s, x.view(), t.view(), TraceMode::Exact, None).unwrap();
            assert!(max_abs(&ll) < 1e-6, "{:?}: {}", p.kind(), max_abs(&ll));
            let hjb = hjb_residual_direct_ll(&p, &q, x.view(), t.view(), TraceMode::Exact, None).unwrap();
            assert!(max_abs(&hjb) < 1e-6, "{:?}: {}", p.kind(), max_abs(&hjb));
        }
    }

    #[test]
    fn hutchinson_residual_is_unbiased() {
        let p = SdeProblem::make_ou(3, 4).unwrap();
        let model = ScoreModel::new(&p, &[8, 8], Constraint::Hard, 3).unwrap();
        let x = array![[0.3, -0.2, 0.8]];
        let t = array![0.6];
        let exact = score_pinn_residual(&p, &model, x.view(), t.view(), TraceMode::Exact, None).unwrap();
        let n = 10_000;
        let xs = x.broadcast((n, 3)).unwrap().to_owned();
        let ts = Array1::from_elem(n, 0.6);
        let mut r = rng(5);
        let est = score_pinn_residual(&p, &model, xs.view(), ts.view(), TraceMode::hutchinson(), Some(&mut r)).unwrap();
        let mean = est.mean_axis(Axis(0)).unwrap();
        let sd = est.std_axis(Axis(0), 1.0);
        for i in 0..3 {
            let se = sd[i] / (n as f64).sqrt();
            assert!((mean[i] - exact[[0, i]]).abs() <= 3.0 * se.max(1e-12), "{i}: {} vs {}", mean[i], exact[[0, i]]);
        }
    }

    #[test]
    fn hard_constraints_are_exact_at_time_zero() {
        let mut r = rng(6);
        for p in [
            SdeProblem::make_ou(4, 1).unwrap(),
            SdeProblem::make_ou_nongaussian(4, NonGaussian::Cauchy, 2).unwrap(),
            SdeProblem::make_gbm(4, 3).unwrap(),
        ] {
            let x = p.initial().sample(100, &mut r);
            let t0 = Array1::zeros(100);
            let sm = ScoreModel::new(&p, &[16, 16], Constraint::Hard, 9).unwrap();
            let lm = LLModel::new(&p, &[16, 16], Constraint::Hard, 9).unwrap();
            let s = sm.eval(x.view(), t0.view()).unwrap();
            assert!(max_abs(&(s - p.initial().score_batch(x.view()).unwrap())) < 1e-12);
            let q = lm.eval(x.view(), t0.view()).unwrap();
            assert!(max_abs(&(q - p.initial().log_pdf_batch(x.view()).unwrap())) < 1e-12);
        }
    }

    fn batch_at(p: &SdeProblem, t: Array1<f64>, seed: u64) -> ResidualBatch {
        p.residual_batch_at(t, &mut rng(seed)).unwrap()
    }

    #[test]
    fn score_pinn_loss_of_exact_score_is_zero() {
        let p = SdeProblem::make_ou(4, 2).unwrap();
        let b = p.sample_residual_batch(64, &mut rng(1)).unwrap();
        let l = loss_score_pinn(&p, &ExactScore::new(&p).unwrap(), &b, &LossWeights::hard(), TraceMode::Exact, None).unwrap();
        assert!(l < 1e-10);
        let empty = ResidualBatch { t: Array1::zeros(0), x: Array2::zeros((0, 4)), x0: Array2::zeros((0, 4)), simulated: false };
        assert!(loss_score_pinn(&p, &ExactScore::new(&p).unwrap(), &empty, &LossWeights::hard(), TraceMode::Exact, None).is_err());
    }

    #[test]
    fn initial_term_is_zero_for_hard_models() {
        let p = SdeProblem::make_ou(3, 2).unwrap();
        let b = p.sample_residual_batch(16, &mut rng(2)).unwrap();
        let m = ScoreModel::new(&p, &[8], Constraint::Hard, 1).unwrap();
        let with = loss_score_pinn(&p, &m, &b, &LossWeights { initial: 20.0, ..LossWeights::hard() }, TraceMode::Exact, None).unwrap();
        let without = loss_score_pinn(&p, &m, &b, &LossWeights::hard(), TraceMode::Exact, None).unwrap();
        assert!((with - without).abs() < 1e-15);
    }

    /// Score-PINN residual of a one-hidden-layer hard-constrained model on
    /// the OU problem, with every derivative written out by hand.
    fn straight_line_pinn_residual(p: &SdeProblem, net: &DiffNet, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        let d = x.len();
        let pv = net.params();
        let pv = pv.as_slice();
        let hdim = net.widths()[1];
        let w1 = |m: usize, j: usize| pv[m * (d + 1) + j];
        let b1 = |m: usize| pv[hdim * (d + 1) + m];
        let off = hdim * (d + 1) + hdim;
        let w2 = |i: usize, m: usize| pv[off + i * hdim + m];
        let b2 = |i: usize| pv[off + d * hdim + i];
        let sig = p.sigma();
        let pre: Vec<f64> = (0..hdim).map(|m| (0..d).map(|j| w1(m, j) * x[j]).sum::<f64>() + w1(m, d) * t + b1(m)).collect();
        let h: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
        let dh: Vec<f64> = h.iter().map(|h| 1.0 - h * h).collect();
        let ddh: Vec<f64> = h.iter().zip(&dh).map(|(h, dh)| -2.0 * h * dh).collect();
        let nn: Vec<f64> = (0..d).map(|i| (0..hdim).map(|m| w2(i, m) * h[m]).sum::<f64>() + b2(i)).collect();
        let s: Vec<f64> = (0..d).map(|i| t * nn[i] - x[i]).collect();
        // J = t W2 diag(h') W1x − I
        let jac = |i: usize, j: usize| t * (0..hdim).map(|m| w2(i, m) * dh[m] * w1(m, j)).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
        let ds: Vec<f64> = (0..d).map(|i| nn[i] + t * (0..hdim).map(|m| w2(i, m) * dh[m] * w1(m, d)).sum::<f64>()).collect();
        // ∇_x of ½ (Σv)ᵀ J v: only the network part depends on x.
        let sv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| sig[[i, j]] * v[j]).sum()).collect();
        let u: Vec<f64> = (0..hdim).map(|m| (0..d).map(|i| w2(i, m) * sv[i]).sum()).collect();
        let g: Vec<f64> = (0..hdim).map(|m| (0..d).map(|j| w1(m, j) * v[j]).sum()).collect();
        let sigma_s: Vec<f64> = (0..d).map(|i| (0..d).map(|j| sig[[i, j]] * s[j]).sum()).collect();
        (0..d)
            .map(|k| {
                let trace_grad = 0.5 * t * (0..hdim).map(|m| u[m] * g[m] * ddh[m] * w1(m, k)).sum::<f64>();
                // ∇(½ sᵀΣs) = JᵀΣs and ∇(½ xᵀs) = ½(s + Jᵀx).
                let quad_grad: f64 = (0..d).map(|i| jac(i, k) * sigma_s[i]).sum();
                let drift_grad = 0.5 * (s[k] + (0..d).map(|i| jac(i, k) * x[i]).sum::<f64>());
                ds[k] - (trace_grad + quad_grad + drift_grad)
            })
            .collect()
    }

    #[test]
    fn score_pinn_loss_matches_straight_line_reimplementation() {
        let p = SdeProblem::make_ou(3, 7).unwrap();
        let mut model = ScoreModel::new(&p, &[5], Constraint::Hard, 4).unwrap();
        let mut pr = model.net.params();
        pr.0.mapv_inplace(|v| v + 0.05);
        model.net.set_params(&pr).unwrap();
        let b = batch_at(&p, array![0.1, 0.4, 0.7, 0.95], 3);
        let v = rademacher(4, 3, &mut rng(8));
        let probes = Probes::Random(vec![v.clone()]);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let got = score_pinn_loss_graph(&p, bound.as_ref(), &tape, &b, &LossWeights::hard(), &probes).unwrap().item();
        let mut want = 0.0;
        for k in 0..4 {
            let r = straight_line_pinn_residual(&p, &model.net, b.x.row(k).as_slice().unwrap(), b.t[k], v.row(k).as_slice().unwrap());
            want += r.iter().map(|e| e * e).sum::<f64>() / 4.0;
        }
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
    }

    struct ConditionalScore<'p> {
        p: &'p SdeProblem,
        x0: Array2<f64>,
    }

    struct BoundConditional<'a> {
        inner: &'a ConditionalScore<'a>,
    }

    impl<'t> BoundScore<'t> for BoundConditional<'_> {
        fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
            let tv = t.value().column(0).to_owned();
            let x0 = self.inner.x0.broadcast(x.shape()).unwrap().to_owned();
            let s = self.inner.p.transition_score(x.value().view(), x0.view(), tv.view()).unwrap();
            x.tape().leaf(s)
        }
    }

    impl ScoreField for ConditionalScore<'_> {
        fn dim(&self) -> usize {
            self.p.dim()
        }

        fn bind<'a>(&'a self, _tape: &'a Tape) -> Box<dyn BoundScore<'a> + 'a> {
            Box::new(BoundConditional { inner: self })
        }
    }

    #[test]
    fn sm_loss_zero_for_conditional_score_and_ignores_t0() {
        let p = SdeProblem::make_ou(3, 1).unwrap();
        let x0 = array![[0.5, -0.3, 1.2]];
        let n = 20;
        let starts = x0.broadcast((n, 3)).unwrap().to_owned();
        let mut t = Array1::linspace(0.05, 1.0, n);
        t[0] = 0.0;
        let mut r = rng(3);
        let x = p.transition_sample(starts.view(), t.view(), &mut r).unwrap();
        let b = ResidualBatch { t, x, x0: starts, simulated: false };
        let f = ConditionalScore { p: &p, x0: x0.clone() };
        assert_eq!(loss_sm(&p, &f, &b, &LossWeights::hard()).unwrap(), 0.0);
        let m = ScoreModel::new(&p, &[8], Constraint::Hard, 0).unwrap();
        assert!(loss_sm(&p, &m, &b, &LossWeights::hard()).unwrap() > 0.0);
    }

    #[test]
    fn sm_loss_matches_independent_reimplementation() {
        let p = SdeProblem::make_ou(2, 5).unwrap();
        let model = ScoreModel::new(&p, &[6, 6], Constraint::Hard, 2).unwrap();
        let b = p.sample_residual_batch(10, &mut rng(4)).unwrap();
        let got = loss_sm(&p, &model, &b, &LossWeights::hard()).unwrap();
        let nn = model.net.forward_batch(b.x.view(), b.t.view()).unwrap();
        let prec = crate::linalg::to_ndarray(&p.covariance().sigma.inverse);
        let mut want = 0.0;
        for k in 0..10 {
            let t = b.t[k];
            let s: Vec<f64> = (0..2).map(|i| t * nn[[k, i]] - b.x[[k, i]]).collect();
            let var = 1.0 - (-t).exp();
            let u: Vec<f64> = (0..2).map(|i| b.x[[k, i]] - (-t / 2.0).exp() * b.x0[[k, i]]).collect();
            let mut sq = 0.0;
            for i in 0..2 {
                let target = -(prec[[i, 0]] * u[0] + prec[[i, 1]] * u[1]) / var;
                sq += (s[i] - target).powi(2);
            }
            want += t.sqrt() * sq / 10.0;
        }
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn sm_needs_a_transition_kernel() {
        let p = SdeProblem::make_varying_eigenspace(3, 1).unwrap();
        let b = p.sample_residual_batch(4, &mut rng(0)).unwrap();
        let m = ScoreModel::new(&p, &[4], Constraint::Hard, 0).unwrap();
        assert!(matches!(loss_sm(&p, &m, &b, &LossWeights::hard()), Err(Error::Capability(_))));
    }

    #[test]
    fn ssm_of_linear_and_zero_fields() {
        let p = SdeProblem::make_ou(3, 0).unwrap();
        let m = array![[1.0, 2.0, 0.0], [0.5, -1.0, 0.3], [0.0, 0.2, 3.0]];
        let x = array![[0.4, -0.7, 1.1]];
        let b = ResidualBatch { t: array![0.5], x: x.clone(), x0: x.clone(), simulated: false };
        let got = loss_ssm(&p, &LinearScore { m: m.clone() }, &b, TraceMode::Exact, None).unwrap();
        let mx = m.dot(&x.row(0));
        assert!((got - (0.5 * mx.dot(&mx) + 3.0)).abs() < 1e-14);
        let zero = LinearScore { m: Array2::zeros((3, 3)) };
        assert_eq!(loss_ssm(&p, &zero, &b, TraceMode::hutchinson(), Some(&mut rng(0))).unwrap(), 0.0);
    }

    #[test]
    fn ll_ode_loss_of_exact_pair_is_zero() {
        let p = SdeProblem::make_ou(4, 3).unwrap();
        let b = p.sample_residual_batch(64, &mut rng(9)).unwrap();
        let l = loss_ll_ode(&p, &ExactLogDensity::new(&p).unwrap(), &ExactScore::new(&p).unwrap(), &b, &LossWeights::hard(), TraceMode::Exact, None).unwrap();
        assert!(l < 1e-10);
    }

    #[test]
    fn ll_ode_loss_matches_independent_reimplementation() {
        // Hard LL model against the frozen linear score s = M x on OU.
        let p = SdeProblem::make_ou(2, 6).unwrap();
        let model = LLModel::new(&p, &[5], Constraint::Hard, 1).unwrap();
        let m = array![[-1.2, 0.3], [0.1, -0.8]];
        let b = p.sample_residual_batch(6, &mut rng(2)).unwrap();
        let got = loss_ll_ode(&p, &model, &LinearScore { m: m.clone() }, &b, &LossWeights::hard(), TraceMode::Exact, None).unwrap();
        let sig = p.sigma();
        let h = 1e-6;
        let mut want = 0.0;
        for k in 0..6 {
            let x = b.x.row(k).to_owned();
            let t = b.t[k];
            let s = m.dot(&x);
            let target = 0.5 * sig.dot(&m).diag().sum() + 0.5 * s.dot(&sig.dot(&s)) + 0.5 * x.dot(&s) + 1.0;
            // ∂_t (t NN) = NN + t ∂_t NN; the network time derivative by a
            // plain evaluation of the only hidden layer.
            let nn = model.net.forward(x.as_slice().unwrap(), t).unwrap()[0];
            let dnn = (model.net.forward(x.as_slice().unwrap(), t + h).unwrap()[0] - model.net.forward(x.as_slice().unwrap(), t - h).unwrap()[0]) / (2.0 * h);
            let exact_dnn = {
                let (_, dt) = model.net.grad_input(x.as_slice().unwrap(), t).unwrap();
                dt[0]
            };
            assert!((dnn - exact_dnn).abs() < 1e-7);
            want += (nn + t * exact_dnn - target).powi(2) / 6.0;
        }
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn ll_initial_term_only_in_plain_mode() {
        let p = SdeProblem::make_ou_nongaussian(3, NonGaussian::Laplace, 0).unwrap();
        let b = p.sample_residual_batch(8, &mut rng(1)).unwrap();
        let targets = Array1::zeros(8);
        let plain = LLModel::new(&p, &[4], Constraint::Plain, 0).unwrap();
        let tape = Tape::new();
        let bound = plain.bind(&tape);
        let soft = ll_ode_loss_graph(&p, bound.as_ref(), &tape, &b, &targets, &LossWeights::soft()).unwrap().item();
        let hard = ll_ode_loss_graph(&p, bound.as_ref(), &tape, &b, &targets, &LossWeights::hard()).unwrap().item();
        assert!(soft > hard);
    }

    #[test]
    fn hjb_residual_is_nonzero_for_frozen_in_time_model() {
        let p = SdeProblem::make_ou(3, 0).unwrap();
        let model = LLModel::new(&p, &[6], Constraint::Plain, 0).unwrap();
        let net = model.net.clone();
        // Remove the time column so ∂_t q = 0 while L[∇q] is not zero.
        let mut layers = Vec::new();
        let pv = net.params();
        let w = Array2::from_shape_vec((6, 4), pv.as_slice()[..24].to_vec()).unwrap();
        let mut w0 = w.clone();
        w0.column_mut(3).fill(0.0);
        layers.push((w0, Array1::zeros(6)));
        layers.push((Array2::from_shape_vec((1, 6), pv.as_slice()[30..36].to_vec()).unwrap(), Array1::zeros(1)));
        let frozen = LLModel::from_net(&p, DiffNet::from_layers(layers).unwrap(), Constraint::Plain).unwrap();
        let x = array![[0.3, 0.1, -0.5]];
        let r = hjb_residual_direct_ll(&p, &frozen, x.view(), array![0.4].view(), TraceMode::Exact, None).unwrap();
        assert!(r[0].abs() > 1e-3);
    }

    #[test]
    fn adversarial_leaves_exact_solution_in_place() {
        let p = SdeProblem::make_ou(3, 1).unwrap();
        let q = ExactLogDensity::new(&p).unwrap();
        let (x, t) = random_points(&p, 16, &mut rng(2));
        let out = adversarial_perturb(&p, &q, x.view(), t.view(), &AdversarialConfig::default(), TraceMode::Exact, None).unwrap();
        assert_eq!(out.dim(), x.dim());
        assert!(max_abs(&(out - &x)) < 1e-8);
    }

    #[test]
    fn adversarial_moves_towards_larger_residual() {
        // q = w·x: the residual is −(½wᵀΣw + d/2 + ½ x·w), so |r| grows along +w.
        let p = SdeProblem::make_ou(2, 3).unwrap();
        let w = array![[0.8, 0.0, 0.0]];
        let net = DiffNet::from_layers(vec![(w, array![0.0])]).unwrap();
        let q = LLModel::from_net(&p, net, Constraint::Plain).unwrap();
        let x = array![[0.1, 0.2]];
        let cfg = AdversarialConfig::default();
        let out = adversarial_perturb(&p, &q, x.view(), array![0.5].view(), &cfg, TraceMode::Exact, None).unwrap();
        let mv = &out - &x;
        assert!(mv[[0, 0]] > 0.0);
        assert!(mv[[0, 1]].abs() < 1e-12);
        // Five Adam steps of size ≈ lr each.
        assert!((mv[[0, 0]] - 5.0 * cfg.inner_lr).abs() < 1e-6);
    }
}
