//! Adam, the learning-rate schedule and the trainers: score (SM, SSM,
//! Score-PINN), LL-ODE against a frozen score, and the direct-LL baseline.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffnet::{Checkpoint, DiffNet, NetVars, ParamVector};
use crate::error::{Error, Result};
use crate::fields::{BoundLogDensity, BoundScore, LogDensityField, ScoreField};
use crate::io::write_atomic;
use crate::objectives::{
    adversarial_perturb, direct_ll_loss_graph, ll_ode_loss_graph, operator_l, score_pinn_loss_graph, sm_loss_graph, ssm_loss_graph,
    AdversarialConfig, Constraint, LLModel, LossWeights, Probes, ScoreModel, TraceMode,
};
use crate::sde::{stream_rng, ProblemSpec, ResidualBatch, SdeProblem};

const STREAM_BATCH: u64 = 1;
const STREAM_VALID: u64 = 2;
const STREAM_VALID_PROBES: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sm,
    Ssm,
    ScorePinn,
    DirectLl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sm, Method::Ssm, Method::ScorePinn, Method::DirectLl];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sm => "sm",
            Method::Ssm => "ssm",
            Method::ScorePinn => "score-pinn",
            Method::DirectLl => "direct-ll",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected sm, ssm, score-pinn or direct-ll")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Residual points per epoch.
    pub batch_size: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub seeds: Vec<u64>,
    pub method: Method,
    /// Trace estimator for SSM, Score-PINN and the direct-LL residual.
    pub trace: TraceMode,
    /// Trace estimator for the LL-ODE targets `L[s]`.
    pub ll_trace: TraceMode,
    pub weights: LossWeights,
    pub constraint: Constraint,
    /// Hidden layer widths of both networks.
    pub hidden: Vec<usize>,
    pub validate_every: usize,
    pub validation_size: usize,
    pub adversarial: AdversarialConfig,
    /// Where the last finite parameters go when training diverges.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100_000,
            batch_size: 1000,
            lr: 1e-3,
            decay_rate: 0.9,
            decay_every: 10_000,
            seeds: vec![0, 1, 2, 3, 4],
            method: Method::ScorePinn,
            trace: TraceMode::hutchinson(),
            ll_trace: TraceMode::Exact,
            weights: LossWeights::hard(),
            constraint: Constraint::Hard,
            hidden: vec![128, 128, 128],
            validate_every: 1000,
            validation_size: 1000,
            adversarial: AdversarialConfig::default(),
            abort_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.validate_every == 0 {
            return bad("decay_every and validate_every must be positive");
        }
        if self.batch_size == 0 || self.validation_size == 0 {
            return bad("batch and validation sizes must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive");
        }
        if let TraceMode::Hutchinson { probes: 0 } = self.trace {
            return bad("probe count must be positive");
        }
        if let TraceMode::Hutchinson { probes: 0 } = self.ll_trace {
            return bad("probe count must be positive");
        }
        self.weights.validate()
    }

    /// `lr0 · rate^⌊epoch / every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_rate.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam moments with the usual defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Array1<f64>,
    pub v: Array1<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: Array1::zeros(len), v: Array1::zeros(len), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!("Adam state has {} entries, params {}, grad {}", self.m.len(), params.len(), grad.len())));
        }
        if !grad.is_finite() {
            let k = grad.0.iter().position(|g| !g.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite(format!("gradient entry {k} is {} at Adam step {}", grad.0[k], self.step + 1)));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        ndarray::Zip::from(&mut params.0).and(&mut self.m).and(&mut self.v).and(&grad.0).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        });
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(mut state: AdamState, mut params: ParamVector, grad: &ParamVector, lr: f64) -> Result<(AdamState, ParamVector)> {
    state.step(&mut params, grad, lr)?;
    Ok((state, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub validation: Option<f64>,
}

/// A trained model with its history. The model carries the parameters of
/// the best validation point.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

impl<M> Trained<M> {
    /// Epochs per second of wall time.
    pub fn rate(&self) -> f64 {
        if self.seconds > 0.0 {
            self.history.len() as f64 / self.seconds
        } else {
            0.0
        }
    }

    /// Training log as CSV: epoch, loss, lr, validation.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "lr", "validation"])?;
        for e in &self.history {
            w.write_record([e.epoch.to_string(), e.loss.to_string(), e.lr.to_string(), e.validation.map(|v| v.to_string()).unwrap_or_default()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(path, &bytes)
    }
}

trait HasNet: Clone {
    fn net(&self) -> &DiffNet;
    fn net_mut(&mut self) -> &mut DiffNet;
}

impl HasNet for ScoreModel {
    fn net(&self) -> &DiffNet {
        &self.net
    }
    fn net_mut(&mut self) -> &mut DiffNet {
        &mut self.net
    }
}

impl HasNet for LLModel {
    fn net(&self) -> &DiffNet {
        &self.net
    }
    fn net_mut(&mut self) -> &mut DiffNet {
        &mut self.net
    }
}

fn param_grad<'t>(tape: &'t Tape, loss: Var<'t>, params: &[Var<'t>]) -> ParamVector {
    NetVars::flatten(&tape.grad(loss, params))
}

fn score_value_and_grad(bound: &dyn BoundScore<'_>, tape: &Tape, loss: Var<'_>) -> (f64, ParamVector) {
    (loss.item(), param_grad(tape, loss, &bound.params()))
}

fn ll_value_and_grad(bound: &dyn BoundLogDensity<'_>, tape: &Tape, loss: Var<'_>) -> (f64, ParamVector) {
    (loss.item(), param_grad(tape, loss, &bound.params()))
}

/// The generic loop: Adam on `epoch_loss`, validation every
/// `validate_every` epochs and at the end, best-validation parameters kept.
fn fit<M: HasNet>(
    mut model: M,
    config: &TrainConfig,
    seed: u64,
    mut epoch_loss: impl FnMut(&M, &mut ChaCha8Rng) -> Result<(f64, ParamVector)>,
    mut validate: impl FnMut(&M) -> Result<f64>,
) -> Result<Trained<M>> {
    let mut rng = stream_rng(seed, STREAM_BATCH);
    let mut adam = AdamState::new(model.net().num_params());
    let mut best: Option<(f64, usize, ParamVector)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let (loss, grad) = epoch_loss(&model, &mut rng)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(abort(&model, config, epoch, loss));
        }
        let mut params = model.net().params();
        adam.step(&mut params, &grad, lr)?;
        if !params.is_finite() {
            return Err(abort(&model, config, epoch, loss));
        }
        model.net_mut().set_params(&params)?;
        let done = epoch + 1;
        let validation = if done % config.validate_every == 0 || done == config.epochs {
            let v = validate(&model)?;
            log::debug!("epoch {done}: loss {loss:.4e}, validation {v:.4e}");
            if v.is_finite() && best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, params));
            }
            Some(v)
        } else {
            None
        };
        history.push(EpochLog { epoch, loss, lr, validation });
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        model.net_mut().set_params(&p)?;
    }
    Ok(Trained { model, history, best_epoch, seconds: start.elapsed().as_secs_f64() })
}

fn abort<M: HasNet>(model: &M, config: &TrainConfig, epoch: usize, loss: f64) -> Error {
    let mut msg = format!("training diverged at epoch {epoch} (loss {loss})");
    if let Some(path) = &config.abort_checkpoint {
        match model.net().save(path) {
            Ok(()) => msg.push_str(&format!("; last finite parameters saved to {}", path.display())),
            Err(e) => msg.push_str(&format!("; saving last parameters failed: {e}")),
        }
    }
    Error::NonFinite(msg)
}

fn validation_batch(problem: &SdeProblem, config: &TrainConfig, seed: u64) -> Result<ResidualBatch> {
    problem.sample_residual_batch(config.validation_size, &mut stream_rng(seed, STREAM_VALID))
}

/// Stage one: fits a [`ScoreModel`] with SM, SSM or Score-PINN.
pub fn train_score(problem: &SdeProblem, config: &TrainConfig, seed: u64) -> Result<Trained<ScoreModel>> {
    config.validate()?;
    let method = config.method;
    if method == Method::DirectLl {
        return Err(Error::Config("direct-ll trains a log-likelihood model, not a score".into()));
    }
    if method == Method::Sm && !problem.has_transition() {
        return Err(Error::Capability(format!("score matching needs a transition kernel; {:?} has none", problem.kind())));
    }
    let model = ScoreModel::new(problem, &config.hidden, config.constraint, seed)?;
    let d = problem.dim();
    let loss_on = |model: &ScoreModel, batch: &ResidualBatch, probes: &Probes| -> Result<(f64, ParamVector)> {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let loss = match method {
            Method::Sm => sm_loss_graph(problem, bound.as_ref(), &tape, batch, &config.weights)?,
            Method::Ssm => ssm_loss_graph(problem, bound.as_ref(), &tape, batch, probes)?,
            _ => score_pinn_loss_graph(problem, bound.as_ref(), &tape, batch, &config.weights, probes)?,
        };
        Ok(score_value_and_grad(bound.as_ref(), &tape, loss))
    };
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Probes> {
        match method {
            Method::Sm => Ok(Probes::Basis),
            _ => Probes::draw(config.trace, n, d, Some(rng)),
        }
    };
    let valid = validation_batch(problem, config, seed)?;
    fit(
        model,
        config,
        seed,
        |m, rng| {
            let batch = problem.sample_residual_batch(config.batch_size, rng)?;
            let probes = draw(batch.len(), rng)?;
            loss_on(m, &batch, &probes)
        },
        |m| {
            let probes = draw(valid.len(), &mut stream_rng(seed, STREAM_VALID_PROBES))?;
            let tape = Tape::new();
            let bound = m.bind(&tape);
            Ok(match method {
                Method::Sm => sm_loss_graph(problem, bound.as_ref(), &tape, &valid, &config.weights)?,
                Method::Ssm => ssm_loss_graph(problem, bound.as_ref(), &tape, &valid, &probes)?,
                _ => score_pinn_loss_graph(problem, bound.as_ref(), &tape, &valid, &config.weights, &probes)?,
            }
            .item())
        },
    )
}

/// Stage two: fits an [`LLModel`] to the LL-ODE of a frozen score. The
/// score is only ever evaluated, never differentiated with respect to its
/// parameters.
pub fn train_ll(problem: &SdeProblem, config: &TrainConfig, frozen_score: &dyn ScoreField, seed: u64) -> Result<Trained<LLModel>> {
    config.validate()?;
    if frozen_score.dim() != problem.dim() {
        return Err(Error::Shape(format!("score of dimension {} for a d = {} problem", frozen_score.dim(), problem.dim())));
    }
    let model = LLModel::new(problem, &config.hidden, config.constraint, seed)?;
    let valid = validation_batch(problem, config, seed)?;
    let valid_targets = operator_l(
        problem,
        frozen_score,
        valid.x.view(),
        valid.t.view(),
        config.ll_trace,
        Some(&mut stream_rng(seed, STREAM_VALID_PROBES)),
    )?;
    let loss_on = |model: &LLModel, batch: &ResidualBatch, targets: &Array1<f64>| -> Result<(f64, ParamVector)> {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let loss = ll_ode_loss_graph(problem, bound.as_ref(), &tape, batch, targets, &config.weights)?;
        Ok(ll_value_and_grad(bound.as_ref(), &tape, loss))
    };
    fit(
        model,
        config,
        seed,
        |m, rng| {
            let batch = problem.sample_residual_batch(config.batch_size, rng)?;
            let targets = operator_l(problem, frozen_score, batch.x.view(), batch.t.view(), config.ll_trace, Some(rng))?;
            loss_on(m, &batch, &targets)
        },
        |m| Ok(loss_on(m, &valid, &valid_targets)?.0),
    )
}

/// The direct-LL baseline: the HJB residual of `q` itself, on residual
/// points moved adversarially every epoch.
pub fn train_direct_ll(problem: &SdeProblem, config: &TrainConfig, seed: u64) -> Result<Trained<LLModel>> {
    config.validate()?;
    if config.method != Method::DirectLl {
        return Err(Error::Config(format!("train_direct_ll called with method {}", config.method)));
    }
    let model = LLModel::new(problem, &config.hidden, config.constraint, seed)?;
    let d = problem.dim();
    let valid = validation_batch(problem, config, seed)?;
    let loss_on = |model: &LLModel, batch: &ResidualBatch, probes: &Probes| -> Result<(f64, ParamVector)> {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let loss = direct_ll_loss_graph(problem, bound.as_ref(), &tape, batch, &config.weights, probes)?;
        Ok(ll_value_and_grad(bound.as_ref(), &tape, loss))
    };
    fit(
        model,
        config,
        seed,
        |m, rng| {
            let mut batch = problem.sample_residual_batch(config.batch_size, rng)?;
            batch.x = adversarial_perturb(problem, m, batch.x.view(), batch.t.view(), &config.adversarial, config.trace, Some(rng))?;
            let probes = Probes::draw(config.trace, batch.len(), d, Some(rng))?;
            loss_on(m, &batch, &probes)
        },
        |m| {
            let probes = Probes::draw(config.trace, valid.len(), d, Some(&mut stream_rng(seed, STREAM_VALID_PROBES)))?;
            Ok(loss_on(m, &valid, &probes)?.0)
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRole {
    Score,
    LogDensity,
}

/// A network checkpoint plus what is needed to rebuild the model around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub role: ModelRole,
    pub constraint: Constraint,
    pub problem: ProblemSpec,
    pub network: Checkpoint,
}

impl ModelFile {
    const FORMAT: &'static str = "scorefp-model";

    pub fn score(problem: &ProblemSpec, model: &ScoreModel) -> Self {
        Self::new(ModelRole::Score, model.mode, problem, &model.net)
    }

    pub fn log_density(problem: &ProblemSpec, model: &LLModel) -> Self {
        Self::new(ModelRole::LogDensity, model.mode, problem, &model.net)
    }

    fn new(role: ModelRole, constraint: Constraint, problem: &ProblemSpec, net: &DiffNet) -> Self {
        Self { format: Self::FORMAT.into(), version: 1, role, constraint, problem: problem.clone(), network: net.to_checkpoint() }
    }

    fn expect(&self, role: ModelRole) -> Result<(SdeProblem, DiffNet)> {
        if self.format != Self::FORMAT || self.version != 1 {
            return Err(Error::Config(format!("unsupported model file {} v{}", self.format, self.version)));
        }
        if self.role != role {
            return Err(Error::Config(format!("expected a {role:?} model, found {:?}", self.role)));
        }
        Ok((self.problem.build()?, DiffNet::from_checkpoint(&self.network)?))
    }

    pub fn into_score(self) -> Result<(SdeProblem, ScoreModel)> {
        let (p, net) = self.expect(ModelRole::Score)?;
        let m = ScoreModel::from_net(&p, net, self.constraint)?;
        Ok((p, m))
    }

    pub fn into_log_density(self) -> Result<(SdeProblem, LLModel)> {
        let (p, net) = self.expect(ModelRole::LogDensity)?;
        let m = LLModel::from_net(&p, net, self.constraint)?;
        Ok((p, m))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ExactScore;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny(method: Method, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            method,
            hidden: vec![8, 8],
            validate_every: 5,
            validation_size: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(10_000) - 9e-4).abs() < 1e-18);
        assert!((c.lr_at(99_999) - 1e-3 * 0.9f64.powi(9)).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn lr_is_non_increasing(a in 0usize..1_000_000, b in 0usize..1_000_000, rate in 0.01f64..=1.0) {
            let c = TrainConfig { decay_rate: rate, ..TrainConfig::default() };
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(c.lr_at(hi) <= c.lr_at(lo));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay_rate: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { trace: TraceMode::Hutchinson { probes: 0 }, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 7, "method": "ssm", "trace": {"hutchinson": {"probes": 2}}}"#).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.method, Method::Ssm);
        assert_eq!(c.trace, TraceMode::Hutchinson { probes: 2 });
        assert_eq!(c.batch_size, 1000);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn method_tags_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("pinn".parse::<Method>().is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut s = AdamState::new(3);
        s.m = array![0.5, -0.2, 0.1];
        s.v = array![0.3, 0.2, 0.1];
        let mut p = ParamVector(array![1.0, 2.0, 3.0]);
        s.step(&mut p, &ParamVector::zeros(3), 0.1).unwrap();
        assert_eq!(s.m, array![0.45, -0.18000000000000002, 0.09000000000000001]);
        assert!((s.v[0] - 0.2997).abs() < 1e-15);
        // Moments were nonzero, so the parameters do move; with fresh moments
        // they do not.
        let mut fresh = AdamState::new(3);
        let mut q = ParamVector(array![1.0, 2.0, 3.0]);
        fresh.step(&mut q, &ParamVector::zeros(3), 0.1).unwrap();
        assert_eq!(q.0, array![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let (_, p) = adam_step(AdamState::new(3), ParamVector::zeros(3), &ParamVector(array![2.0, -0.5, 1e-3]), 0.01).unwrap();
        for (got, want) in p.0.iter().zip([-0.01, 0.01, -0.01]) {
            assert!((got - want).abs() < 1e-7, "{got}");
        }
    }

    #[test]
    fn adam_matches_hand_rolled_trace() {
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (k, g) in [1.0f64, 0.5, -0.2].into_iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(k as i32 + 1));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let mut s = AdamState::new(1);
        let mut p = ParamVector::zeros(1);
        for g in [1.0, 0.5, -0.2] {
            s.step(&mut p, &ParamVector(array![g]), 0.1).unwrap();
        }
        assert!((p.0[0] - x).abs() < 1e-12);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut s = AdamState::new(2);
        let mut p = ParamVector::zeros(2);
        assert!(matches!(s.step(&mut p, &ParamVector(array![1.0, f64::NAN]), 0.1), Err(Error::NonFinite(_))));
        assert!(matches!(s.step(&mut p, &ParamVector::zeros(3), 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_epochs_return_initialized_models() {
        let p = SdeProblem::make_ou(3, 0).unwrap();
        for method in [Method::Sm, Method::Ssm, Method::ScorePinn] {
            let c = tiny(method, 0);
            let t = train_score(&p, &c, 4).unwrap();
            assert!(t.history.is_empty());
            assert_eq!(t.model.net.params(), ScoreModel::new(&p, &c.hidden, c.constraint, 4).unwrap().net.params());
        }
        let c = tiny(Method::DirectLl, 0);
        let ll = train_ll(&p, &c, &ExactScore::new(&p).unwrap(), 4).unwrap();
        assert!(ll.history.is_empty());
        let dl = train_direct_ll(&p, &c, 4).unwrap();
        assert_eq!(dl.model.net.params(), ll.model.net.params());
    }

    #[test]
    fn sm_needs_transition_kernel() {
        let p = SdeProblem::make_varying_eigenspace(3, 0).unwrap();
        assert!(matches!(train_score(&p, &tiny(Method::Sm, 3), 0), Err(Error::Capability(_))));
        assert!(matches!(train_score(&p, &tiny(Method::DirectLl, 3), 0), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let p = SdeProblem::make_ou(3, 1).unwrap();
        for method in [Method::Sm, Method::Ssm, Method::ScorePinn] {
            let c = TrainConfig { lr: 1e-2, batch_size: 256, validation_size: 512, validate_every: 10, constraint: Constraint::Plain, weights: LossWeights::soft(), ..tiny(method, 120) };
            let a = train_score(&p, &c, 7).unwrap();
            let b = train_score(&p, &c, 7).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.model.net.params(), b.model.net.params());
            assert_eq!(a.history.len(), 120);
            assert!(a.best_epoch.is_some());
            let vals: Vec<f64> = a.history.iter().filter_map(|e| e.validation).collect();
            assert_eq!(vals.len(), 12);
            let (first, last) = (vals[0], vals[11]);
            assert!(last < first, "{method}: {first} -> {last}");
        }
    }

    #[test]
    fn ll_training_leaves_score_untouched() {
        let p = SdeProblem::make_ou(3, 2).unwrap();
        let score = train_score(&p, &tiny(Method::Sm, 5), 1).unwrap().model;
        let before = score.net.params();
        let c = TrainConfig { lr: 1e-2, ..tiny(Method::Sm, 40) };
        let ll = train_ll(&p, &c, &score, 1).unwrap();
        assert_eq!(score.net.params(), before);
        let again = train_ll(&p, &c, &score, 1).unwrap();
        assert_eq!(ll.model.net.params(), again.model.net.params());
        // Hard constraint: exact initial LL whatever the parameters.
        let x = p.initial().sample(10, &mut stream_rng(0, 0));
        let q0 = ll.model.eval(x.view(), Array1::zeros(10).view()).unwrap();
        let want = p.initial().log_pdf_batch(x.view()).unwrap();
        assert!((q0 - want).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn direct_ll_is_deterministic() {
        let p = SdeProblem::make_varying_eigenspace(3, 2).unwrap();
        let c = TrainConfig { lr: 1e-2, ..tiny(Method::DirectLl, 10) };
        let a = train_direct_ll(&p, &c, 3).unwrap();
        let b = train_direct_ll(&p, &c, 3).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.net.params(), b.model.net.params());
    }

    struct Poisoned;

    impl ScoreField for Poisoned {
        fn dim(&self) -> usize {
            2
        }

        fn bind<'a>(&'a self, _tape: &'a Tape) -> Box<dyn BoundScore<'a> + 'a> {
            Box::new(PoisonedBound)
        }
    }

    struct PoisonedBound;

    impl<'t> BoundScore<'t> for PoisonedBound {
        fn value(&self, x: Var<'t>, _t: Var<'t>) -> Var<'t> {
            x * f64::NAN
        }
    }

    #[test]
    fn divergence_aborts_and_saves_last_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.json");
        let p = SdeProblem::make_ou(2, 0).unwrap();
        let c = TrainConfig { abort_checkpoint: Some(path.clone()), validate_every: 1000, ..tiny(Method::Sm, 5) };
        let err = train_ll(&p, &c, &Poisoned, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(path.exists());
        let net = DiffNet::load(&path).unwrap();
        assert_eq!(net.params(), LLModel::new(&p, &c.hidden, c.constraint, 0).unwrap().net.params());
    }

    #[test]
    fn model_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ProblemSpec { kind: crate::sde::ProblemKind::OuLaplace, dim: 3, seed: 4, horizon: None };
        let p = spec.build().unwrap();
        let m = ScoreModel::new(&p, &[5], Constraint::Plain, 2).unwrap();
        let path = dir.path().join("m.json");
        ModelFile::score(&spec, &m).save(&path).unwrap();
        let (p2, m2) = ModelFile::load(&path).unwrap().into_score().unwrap();
        assert_eq!(p2.kind(), p.kind());
        assert_eq!(m2.net.params(), m.net.params());
        assert_eq!(m2.mode, Constraint::Plain);
        assert!(ModelFile::load(&path).unwrap().into_log_density().is_err());
    }

    #[test]
    fn training_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = SdeProblem::make_ou(2, 0).unwrap();
        let t = train_score(&p, &tiny(Method::Sm, 6), 0).unwrap();
        let path = dir.path().join("log.csv");
        t.write_log(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss,lr,validation");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].ends_with(','));
        assert!(!lines[5].ends_with(','));
    }
}
