//! Benchmark SDEs `dx = f dt + G dw`, their analytic marginals and
//! transition kernels, and path simulation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{CovarianceSpec, Density, Gaussian};
use crate::error::{Error, Result};
use crate::linalg::to_ndarray;

/// Euler-Maruyama steps used when a residual point has to be simulated.
pub const RESIDUAL_EM_STEPS: usize = 100;
/// Positivity floor for direct-space GBM simulation.
pub const GBM_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    /// Anisotropic Ornstein-Uhlenbeck from a unit Gaussian.
    Ou,
    /// Brownian motion with diffusion `B + tI`.
    VaryingEigenspace,
    OuCauchy,
    OuLaplace,
    /// Geometric Brownian motion from a log-normal.
    Gbm,
}

impl ProblemKind {
    pub fn default_horizon(self) -> f64 {
        match self {
            ProblemKind::Gbm => 0.3,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonGaussian {
    Cauchy,
    Laplace,
}

/// Serializable problem description; [`ProblemSpec::build`] is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<SdeProblem> {
        let p = match self.kind {
            ProblemKind::Ou => SdeProblem::make_ou(self.dim, self.seed)?,
            ProblemKind::VaryingEigenspace => SdeProblem::make_varying_eigenspace(self.dim, self.seed)?,
            ProblemKind::OuCauchy => SdeProblem::make_ou_nongaussian(self.dim, NonGaussian::Cauchy, self.seed)?,
            ProblemKind::OuLaplace => SdeProblem::make_ou_nongaussian(self.dim, NonGaussian::Laplace, self.seed)?,
            ProblemKind::Gbm => SdeProblem::make_gbm(self.dim, self.seed)?,
        };
        match self.horizon {
            Some(t) => p.with_horizon(t),
            None => Ok(p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdeProblem {
    kind: ProblemKind,
    dim: usize,
    horizon: f64,
    cov: CovarianceSpec,
    sigma: Array2<f64>,
    /// Lower Cholesky factor of `Σ`: the OU diffusion `Σ^{1/2}`.
    sigma_sqrt: Array2<f64>,
    /// `B` for the varying-eigenspace problem.
    b: Option<Array2<f64>>,
    initial: Density,
}

/// Residual points `x_k ~ p_{t_k}` together with their starting points.
#[derive(Clone, Debug)]
pub struct ResidualBatch {
    pub t: Array1<f64>,
    pub x: Array2<f64>,
    pub x0: Array2<f64>,
    /// Set when points came from Euler-Maruyama rather than an exact kernel.
    pub simulated: bool,
}

impl ResidualBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn exp_neg(t: &ArrayView1<f64>) -> Array1<f64> {
    t.mapv(|s| (-s).exp())
}

fn col<'a>(t: &ArrayView1<'a, f64>) -> ArrayView2<'a, f64> {
    (*t).insert_axis(Axis(1))
}

impl SdeProblem {
    fn check_dim(d: usize) -> Result<()> {
        if d < 2 {
            return Err(Error::Contract(format!("benchmark problems need d >= 2, got {d}")));
        }
        Ok(())
    }

    fn base(kind: ProblemKind, cov: CovarianceSpec, initial: Density) -> Self {
        let sigma = cov.matrix();
        let sigma_sqrt = to_ndarray(&cov.sigma.chol);
        Self { kind, dim: cov.dim(), horizon: kind.default_horizon(), cov, sigma, sigma_sqrt, b: None, initial }
    }

    /// `dx = −½x dt + Σ^{1/2} dw`, `x_0 ~ N(0, I)`.
    pub fn make_ou(d: usize, seed: u64) -> Result<Self> {
        Self::check_dim(d)?;
        Ok(Self::ou_with_covariance(CovarianceSpec::generate(d, seed)?))
    }

    pub fn ou_with_covariance(cov: CovarianceSpec) -> Self {
        let d = cov.dim();
        Self::base(ProblemKind::Ou, cov, Density::standard_gaussian(d))
    }

    /// `dx = (B + tI) dw`, `x_0 ~ N(0, I)`, with `B = Q diag(Γ)`.
    pub fn make_varying_eigenspace(d: usize, seed: u64) -> Result<Self> {
        Self::check_dim(d)?;
        let cov = CovarianceSpec::generate(d, seed)?;
        let q = to_ndarray(&cov.q);
        let b = &q * &Array1::from(cov.eigenvalues.clone());
        let asym = (&b - &b.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let orth = (b.t().dot(&b) - Array2::<f64>::eye(d)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if asym < 1e-8 || orth < 1e-8 {
            return Err(Error::Contract("B must be neither symmetric nor orthogonal".into()));
        }
        let mut p = Self::base(ProblemKind::VaryingEigenspace, cov, Density::standard_gaussian(d));
        p.b = Some(b);
        Ok(p)
    }

    /// OU dynamics started from a heavy-tailed law.
    pub fn make_ou_nongaussian(d: usize, family: NonGaussian, seed: u64) -> Result<Self> {
        Self::check_dim(d)?;
        let cov = CovarianceSpec::generate(d, seed)?;
        let (kind, initial) = match family {
            NonGaussian::Cauchy => (ProblemKind::OuCauchy, Density::Cauchy { dim: d, gamma: 1.0 }),
            NonGaussian::Laplace => (ProblemKind::OuLaplace, Density::Laplace { loc: Array1::zeros(d), scale: 1.0 }),
        };
        Ok(Self::base(kind, cov, initial))
    }

    /// `dx = ½e^{−t}x dt + e^{−t/2} diag(x) dw`, `log x_0 ~ N(0, Σ)`.
    pub fn make_gbm(d: usize, seed: u64) -> Result<Self> {
        Self::check_dim(d)?;
        let cov = CovarianceSpec::generate(d, seed)?;
        let initial = Density::LogNormal(Gaussian::from_spd(Array1::zeros(d), &cov.sigma));
        Ok(Self::base(ProblemKind::Gbm, cov, initial))
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Contract(format!("terminal time must be positive, got {horizon}")));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn covariance(&self) -> &CovarianceSpec {
        &self.cov
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    pub fn initial(&self) -> &Density {
        &self.initial
    }

    pub fn b_matrix(&self) -> Option<&Array2<f64>> {
        self.b.as_ref()
    }

    fn check_points(&self, x: &ArrayView2<f64>, t: &ArrayView1<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::Shape(format!("points have {} coordinates, problem has d = {}", x.ncols(), self.dim)));
        }
        if t.len() != x.nrows() {
            return Err(Error::Shape(format!("{} times for {} points", t.len(), x.nrows())));
        }
        Ok(())
    }

    /// Drift `f(x, t)`, one row per point.
    pub fn drift(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Array2<f64> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => &x * -0.5,
            ProblemKind::VaryingEigenspace => Array2::zeros(x.raw_dim()),
            ProblemKind::Gbm => &x * &(exp_neg(&t) * 0.5).insert_axis(Axis(1)),
        }
    }

    /// Diffusion matrix `G(x, t)` at a single point.
    pub fn diffusion(&self, x: ArrayView1<f64>, t: f64) -> Array2<f64> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => self.sigma_sqrt.clone(),
            ProblemKind::VaryingEigenspace => self.b.as_ref().expect("B") + &(Array2::<f64>::eye(self.dim) * t),
            ProblemKind::Gbm => Array2::from_diag(&(&x * (-t / 2.0).exp())),
        }
    }

    /// Rows of `G(x_k, t_k) ξ_k`.
    pub fn apply_g(&self, x: ArrayView2<f64>, t: ArrayView1<f64>, xi: ArrayView2<f64>) -> Array2<f64> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => xi.dot(&self.sigma_sqrt.t()),
            ProblemKind::VaryingEigenspace => xi.dot(&self.b.as_ref().expect("B").t()) + &xi * &col(&t),
            ProblemKind::Gbm => &xi * &x * &exp_neg(&t).mapv(f64::sqrt).insert_axis(Axis(1)),
        }
    }

    /// Rows of `D(x_k, t_k) v_k` with `D = G Gᵀ`.
    pub fn apply_d(&self, x: ArrayView2<f64>, t: ArrayView1<f64>, v: ArrayView2<f64>) -> Array2<f64> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => v.dot(&self.sigma),
            ProblemKind::VaryingEigenspace => {
                let b = self.b.as_ref().expect("B");
                let tc = col(&t);
                let vb = v.dot(b);
                vb.dot(&b.t()) + &(&vb + &v.dot(&b.t())) * &tc + &v * &(&tc * &tc)
            }
            ProblemKind::Gbm => &v * &x * x * &exp_neg(&t).insert_axis(Axis(1)),
        }
    }

    /// `A = f − ½∇·(G Gᵀ)`.
    pub fn a_field(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Array2<f64> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => &x * -0.5,
            ProblemKind::VaryingEigenspace => Array2::zeros(x.raw_dim()),
            ProblemKind::Gbm => &x * &(exp_neg(&t) * -0.5).insert_axis(Axis(1)),
        }
    }

    /// `∇·A`.
    pub fn div_a(&self, t: ArrayView1<f64>) -> Array1<f64> {
        let d = self.dim as f64;
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => Array1::from_elem(t.len(), -d / 2.0),
            ProblemKind::VaryingEigenspace => Array1::zeros(t.len()),
            ProblemKind::Gbm => exp_neg(&t) * (-d / 2.0),
        }
    }

    /// `c_j = Σ_i ∂_i D_ij`, or `None` when `D` does not depend on `x`.
    pub fn div_d(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Option<Array2<f64>> {
        match self.kind {
            ProblemKind::Gbm => Some(&x * &(exp_neg(&t) * 2.0).insert_axis(Axis(1))),
            _ => None,
        }
    }

    /// Graph form of [`SdeProblem::apply_d`]; `t` is `n × 1`.
    pub fn apply_d_graph<'t>(&self, tape: &'t Tape, x: Var<'t>, t: Var<'t>, v: Var<'t>) -> Var<'t> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => v.matmul(tape.leaf(self.sigma.clone())),
            ProblemKind::VaryingEigenspace => {
                let b = self.b.as_ref().expect("B");
                let bl = tape.leaf(b.clone());
                let vb = v.matmul(bl);
                vb.matmul_t(bl) + (vb + v.matmul_t(bl)) * t + v * (t * t)
            }
            ProblemKind::Gbm => v * x * x * (-t).exp(),
        }
    }

    pub fn a_graph<'t>(&self, tape: &'t Tape, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => x * -0.5,
            ProblemKind::VaryingEigenspace => tape.zeros(x.shape()),
            ProblemKind::Gbm => x * (-t).exp() * -0.5,
        }
    }

    /// `∇·A` as an `n × 1` value.
    pub fn div_a_graph<'t>(&self, tape: &'t Tape, t: Var<'t>) -> Var<'t> {
        let d = self.dim as f64;
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => tape.full(t.shape(), -d / 2.0),
            ProblemKind::VaryingEigenspace => tape.zeros(t.shape()),
            ProblemKind::Gbm => (-t).exp() * (-d / 2.0),
        }
    }

    pub fn div_d_graph<'t>(&self, x: Var<'t>, t: Var<'t>) -> Option<Var<'t>> {
        match self.kind {
            ProblemKind::Gbm => Some(x * (-t).exp() * 2.0),
            _ => None,
        }
    }

    pub fn has_transition(&self) -> bool {
        self.kind != ProblemKind::VaryingEigenspace
    }

    fn no_transition(&self) -> Error {
        Error::Capability(format!("{:?} exposes no transition kernel", self.kind))
    }

    /// Draws `x ~ p_{0t}(· | x_0)` row by row.
    pub fn transition_sample<R: Rng + ?Sized>(&self, x0: ArrayView2<f64>, t: ArrayView1<f64>, rng: &mut R) -> Result<Array2<f64>> {
        self.check_points(&x0, &t)?;
        let z = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
        let var = t.mapv(|s| -(-s).exp_m1());
        let sd = var.mapv(f64::sqrt).insert_axis(Axis(1));
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => {
                let mean = &x0 * &t.mapv(|s| (-s / 2.0).exp()).insert_axis(Axis(1));
                Ok(mean + &(z.dot(&self.sigma_sqrt.t()) * &sd))
            }
            ProblemKind::Gbm => Ok((x0.mapv(f64::ln) + &(z * &sd)).mapv(f64::exp)),
            ProblemKind::VaryingEigenspace => Err(self.no_transition()),
        }
    }

    /// `log p_{0t}(x | x_0)` per row; needs `t > 0`.
    pub fn transition_log_pdf(&self, x: ArrayView2<f64>, x0: ArrayView2<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_points(&x, &t)?;
        let d = self.dim as f64;
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => {
                let prec = to_ndarray(&self.cov.sigma.inverse);
                let ld = self.cov.sigma.log_det;
                let mut out = Array1::zeros(x.nrows());
                for (k, o) in out.iter_mut().enumerate() {
                    let v = -(-t[k]).exp_m1();
                    let u = &x.row(k) - &(&x0.row(k) * (-t[k] / 2.0).exp());
                    let quad = u.dot(&prec.dot(&u)) / v;
                    *o = -0.5 * (d * (std::f64::consts::TAU.ln() + v.ln()) + ld + quad);
                }
                Ok(out)
            }
            ProblemKind::Gbm => {
                if x.iter().any(|&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain("GBM states must be positive".into()));
                }
                let y = x.mapv(f64::ln);
                let u = &y - &x0.mapv(f64::ln);
                let mut out = Array1::zeros(x.nrows());
                for (k, o) in out.iter_mut().enumerate() {
                    let v = -(-t[k]).exp_m1();
                    let r = u.row(k);
                    *o = -0.5 * (d * (std::f64::consts::TAU.ln() + v.ln()) + r.dot(&r) / v) - y.row(k).sum();
                }
                Ok(out)
            }
            ProblemKind::VaryingEigenspace => Err(self.no_transition()),
        }
    }

    /// `∇_x log p_{0t}(x | x_0)` per row; needs `t > 0`.
    pub fn transition_score(&self, x: ArrayView2<f64>, x0: ArrayView2<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_points(&x, &t)?;
        let var = t.mapv(|s| -(-s).exp_m1()).insert_axis(Axis(1));
        match self.kind {
            ProblemKind::Ou | ProblemKind::OuCauchy | ProblemKind::OuLaplace => {
                let prec = to_ndarray(&self.cov.sigma.inverse);
                let mean = &x0 * &t.mapv(|s| (-s / 2.0).exp()).insert_axis(Axis(1));
                Ok(-(&x - &mean).dot(&prec) / &var)
            }
            ProblemKind::Gbm => {
                let u = x.mapv(f64::ln) - x0.mapv(f64::ln);
                Ok((-(u / &var) - 1.0) / x)
            }
            ProblemKind::VaryingEigenspace => Err(self.no_transition()),
        }
    }

    /// Marginal covariance path: `Σ_t` (of `x`, or of `log x` for GBM) and
    /// its time derivative.
    pub fn marginal_cov(&self, t: f64) -> Option<(Array2<f64>, Array2<f64>)> {
        let d = self.dim;
        let eye = Array2::<f64>::eye(d);
        match self.kind {
            ProblemKind::Ou => {
                let e = (-t).exp();
                Some((&eye * e + &self.sigma * (1.0 - e), (&self.sigma - &eye) * e))
            }
            ProblemKind::VaryingEigenspace => {
                let b = self.b.as_ref().expect("B");
                let cov = &eye * (1.0 + t.powi(3) / 3.0) + b.dot(&b.t()) * t + (b + &b.t()) * (t * t / 2.0);
                let g = b + &(&eye * t);
                Some((cov, g.dot(&g.t())))
            }
            ProblemKind::Gbm => {
                let e = (-t).exp();
                Some((&self.sigma + &(&eye * (1.0 - e)), &eye * e))
            }
            ProblemKind::OuCauchy | ProblemKind::OuLaplace => None,
        }
    }

    /// Analytic law of `x_t`, when known.
    pub fn marginal(&self, t: f64) -> Option<Result<Density>> {
        let (cov, _) = self.marginal_cov(t)?;
        let g = Gaussian::new(Array1::zeros(self.dim), &cov);
        Some(g.map(|g| if self.kind == ProblemKind::Gbm { Density::LogNormal(g) } else { Density::Gaussian(g) }))
    }

    /// Euler-Maruyama from `x0` to `t_target` (all rows). GBM is integrated in
    /// log space, which is exact in law and never leaves the support.
    pub fn euler_maruyama<R: Rng + ?Sized>(&self, x0: ArrayView2<f64>, t_target: f64, steps: usize, rng: &mut R) -> Result<Array2<f64>> {
        if !(t_target > 0.0 && t_target <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::Contract(format!("target time {t_target} outside (0, {}]", self.horizon)));
        }
        let t = Array1::from_elem(x0.nrows(), t_target);
        self.euler_maruyama_to(x0, t.view(), steps, rng)
    }

    /// Euler-Maruyama with a separate target time per row.
    pub fn euler_maruyama_to<R: Rng + ?Sized>(&self, x0: ArrayView2<f64>, t_target: ArrayView1<f64>, steps: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.check_points(&x0, &t_target)?;
        if steps == 0 {
            return Err(Error::Contract("at least one step is required".into()));
        }
        if self.kind == ProblemKind::Gbm {
            // d(log x) = e^{−t/2} dw: the drift cancels exactly.
            let y = integrate_em(
                x0.mapv(f64::ln),
                t_target,
                steps,
                rng,
                |_, _| None,
                |_, t, xi| Some(xi * &t.mapv(|s| (-s / 2.0).exp()).insert_axis(Axis(1))),
            );
            return Ok(y.mapv(f64::exp));
        }
        Ok(integrate_em(
            x0.to_owned(),
            t_target,
            steps,
            rng,
            |x, t| Some(self.drift(x, t)),
            |x, t, xi| Some(self.apply_g(x, t, xi.view())),
        ))
    }

    /// Direct-space GBM Euler-Maruyama; coordinates pushed below zero are
    /// clamped to [`GBM_CLAMP`] and counted.
    pub fn euler_maruyama_direct<R: Rng + ?Sized>(&self, x0: ArrayView2<f64>, t_target: f64, steps: usize, rng: &mut R) -> Result<(Array2<f64>, usize)> {
        if steps == 0 {
            return Err(Error::Contract("at least one step is required".into()));
        }
        let n = x0.nrows();
        let dt = t_target / steps as f64;
        let mut x = x0.to_owned();
        let mut clamped = 0;
        for k in 0..steps {
            let t = Array1::from_elem(n, k as f64 * dt);
            let xi = Array2::from_shape_simple_fn(x.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
            let next = &x + &(self.drift(x.view(), t.view()) * dt) + &(self.apply_g(x.view(), t.view(), xi.view()) * dt.sqrt());
            x = next;
            if self.kind == ProblemKind::Gbm {
                x.mapv_inplace(|v| {
                    if v < GBM_CLAMP {
                        clamped += 1;
                        GBM_CLAMP
                    } else {
                        v
                    }
                });
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} GBM coordinates clamped to {GBM_CLAMP}");
        }
        Ok((x, clamped))
    }

    /// Residual points at the given times: exact transition draws when a
    /// kernel is available, Euler-Maruyama otherwise.
    pub fn residual_batch_at<R: Rng + ?Sized>(&self, t: Array1<f64>, rng: &mut R) -> Result<ResidualBatch> {
        let x0 = self.initial.sample(t.len(), rng);
        let (x, simulated) = if self.has_transition() {
            (self.transition_sample(x0.view(), t.view(), rng)?, false)
        } else {
            (self.euler_maruyama_to(x0.view(), t.view(), RESIDUAL_EM_STEPS, rng)?, true)
        };
        Ok(ResidualBatch { t, x, x0, simulated })
    }

    /// `n` residual points with `t ~ Unif[0, T]`.
    pub fn sample_residual_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ResidualBatch> {
        if n == 0 {
            return Err(Error::Contract("residual batch must be nonempty".into()));
        }
        let t = Array1::from_shape_simple_fn(n, || rng.random_range(0.0..=self.horizon));
        self.residual_batch_at(t, rng)
    }

    /// `n` draws of `x_t` at a single time, exact whenever possible.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, n: usize, t: f64, rng: &mut R) -> Result<Array2<f64>> {
        if let Some(m) = self.marginal(t) {
            return Ok(m?.sample(n, rng));
        }
        Ok(self.residual_batch_at(Array1::from_elem(n, t), rng)?.x)
    }

    /// Probability-flow ODE `dx = (A − ½ G Gᵀ s) dt` from 0 to `T` with
    /// classical RK4.
    pub fn flow_ode_sample<F>(&self, score: F, x0: ArrayView2<f64>, steps: usize) -> Result<Array2<f64>>
    where
        F: Fn(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
    {
        if steps == 0 {
            return Err(Error::Contract("at least one step is required".into()));
        }
        let n = x0.nrows();
        let velocity = |x: &Array2<f64>, t: f64| -> Result<Array2<f64>> {
            let tv = Array1::from_elem(n, t);
            let s = score(x.view(), t)?;
            Ok(self.a_field(x.view(), tv.view()) - &(self.apply_d(x.view(), tv.view(), s.view()) * 0.5))
        };
        let h = self.horizon / steps as f64;
        let mut x = x0.to_owned();
        for k in 0..steps {
            let t = k as f64 * h;
            let k1 = velocity(&x, t)?;
            let k2 = velocity(&(&x + &(&k1 * (h / 2.0))), t + h / 2.0)?;
            let k3 = velocity(&(&x + &(&k2 * (h / 2.0))), t + h / 2.0)?;
            let k4 = velocity(&(&x + &(&k3 * h)), t + h)?;
            Zip::from(&mut x).and(&k1).and(&k2).and(&k3).and(&k4).for_each(|x, a, b, c, d| {
                *x += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
            });
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("flow ODE state at step {} (t = {})", k + 1, t + h)));
            }
        }
        Ok(x)
    }
}

/// Generic Euler-Maruyama loop with a per-row step `Δt_k = t_k / steps`.
/// `None` from either closure means that term vanishes.
fn integrate_em<R, F, G>(mut x: Array2<f64>, t_target: ArrayView1<f64>, steps: usize, rng: &mut R, drift: F, noise: G) -> Array2<f64>
where
    R: Rng + ?Sized,
    F: Fn(ArrayView2<f64>, ArrayView1<f64>) -> Option<Array2<f64>>,
    G: Fn(ArrayView2<f64>, ArrayView1<f64>, Array2<f64>) -> Option<Array2<f64>>,
{
    let dt = t_target.mapv(|t| t / steps as f64);
    let dt_col = dt.view().insert_axis(Axis(1)).to_owned();
    let sqrt_dt = dt_col.mapv(f64::sqrt);
    for k in 0..steps {
        let t = &dt * k as f64;
        let xi = Array2::from_shape_simple_fn(x.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
        let mut next = x.clone();
        if let Some(f) = drift(x.view(), t.view()) {
            next += &(f * &dt_col);
        }
        if let Some(g) = noise(x.view(), t.view(), xi) {
            next += &(g * &sqrt_dt);
        }
        x = next;
    }
    x
}

/// Deterministic per-purpose RNG derived from a base seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
