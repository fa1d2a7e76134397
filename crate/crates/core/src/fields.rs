//! Score and log-density fields that can be evaluated on a tape.
//!
//! A field is bound to a [`Tape`] once (recording any parameters), after
//! which it maps `x` (`n × d`) and `t` (`n × 1`) to tape values. The losses in
//! [`crate::objectives`] only see bound fields, so trained models and the
//! analytic solutions are interchangeable.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{to_nalgebra, to_ndarray, SpdMatrix};
use crate::sde::{ProblemKind, SdeProblem};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub trait BoundScore<'t> {
    /// `s_t(x)` as `n × d`.
    fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t>;

    /// `∂_t s_t(x)`; `value` is the result of [`BoundScore::value`].
    fn time_derivative(&self, _x: Var<'t>, t: Var<'t>, value: Var<'t>) -> Var<'t> {
        let tape = t.tape();
        tape.jvp(value, &[t], &[tape.full(t.shape(), 1.0)])
    }

    /// Trainable leaves, empty for fixed fields.
    fn params(&self) -> Vec<Var<'t>> {
        Vec::new()
    }
}

pub trait BoundLogDensity<'t> {
    /// `q_t(x)` as `n × 1`.
    fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t>;

    fn time_derivative(&self, _x: Var<'t>, t: Var<'t>, value: Var<'t>) -> Var<'t> {
        let tape = t.tape();
        tape.jvp(value, &[t], &[tape.full(t.shape(), 1.0)])
    }

    fn params(&self) -> Vec<Var<'t>> {
        Vec::new()
    }
}

pub trait ScoreField {
    fn dim(&self) -> usize;
    fn bind<'a>(&'a self, tape: &'a Tape) -> Box<dyn BoundScore<'a> + 'a>;

    /// Plain evaluation at a batch of points.
    fn eval(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        check_eval(self.dim(), &x, &t)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = bound.value(tape.leaf(x.to_owned()), tape.leaf(t.to_owned().insert_axis(Axis(1))));
        Ok(out.value())
    }
}

pub trait LogDensityField {
    fn dim(&self) -> usize;
    fn bind<'a>(&'a self, tape: &'a Tape) -> Box<dyn BoundLogDensity<'a> + 'a>;

    fn eval(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_eval(self.dim(), &x, &t)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = bound.value(tape.leaf(x.to_owned()), tape.leaf(t.to_owned().insert_axis(Axis(1))));
        Ok(out.value().column(0).to_owned())
    }
}

fn check_eval(d: usize, x: &ArrayView2<f64>, t: &ArrayView1<f64>) -> Result<()> {
    if x.ncols() != d {
        return Err(Error::Shape(format!("points have {} coordinates, field has d = {d}", x.ncols())));
    }
    if t.len() != x.nrows() {
        return Err(Error::Shape(format!("{} times for {} points", t.len(), x.nrows())));
    }
    Ok(())
}

/// Per-row quantities of a Gaussian marginal path `N(0, Σ_t)`.
struct GaussianPath {
    /// `Σ_t^{-1}`
    precision: Rc<Vec<Array2<f64>>>,
    /// `Σ_t^{-1} Σ̇_t Σ_t^{-1}`
    sandwich: Rc<Vec<Array2<f64>>>,
    log_det: Array1<f64>,
    /// `tr(Σ_t^{-1} Σ̇_t)`
    trace: Array1<f64>,
}

impl GaussianPath {
    fn new(problem: &SdeProblem, t: &Array2<f64>) -> Self {
        let n = t.nrows();
        let mut precision = Vec::with_capacity(n);
        let mut sandwich = Vec::with_capacity(n);
        let mut log_det = Array1::zeros(n);
        let mut trace = Array1::zeros(n);
        for k in 0..n {
            let (cov, dot) = problem.marginal_cov(t[[k, 0]]).expect("analytic marginal");
            let spd = SpdMatrix::new(to_nalgebra(&cov)).expect("marginal covariance is SPD");
            let p = to_ndarray(&spd.inverse);
            let pd = p.dot(&dot);
            trace[k] = pd.diag().sum();
            sandwich.push(pd.dot(&p));
            precision.push(p);
            log_det[k] = spd.log_det;
        }
        Self { precision: Rc::new(precision), sandwich: Rc::new(sandwich), log_det, trace }
    }
}

fn check_analytic(problem: &SdeProblem) -> Result<()> {
    if problem.marginal_cov(0.0).is_none() {
        return Err(Error::Capability(format!("{:?} has no analytic marginal", problem.kind())));
    }
    Ok(())
}

/// The analytic marginal score of a problem with a closed-form solution.
pub struct ExactScore<'p> {
    problem: &'p SdeProblem,
}

impl<'p> ExactScore<'p> {
    pub fn new(problem: &'p SdeProblem) -> Result<Self> {
        check_analytic(problem)?;
        Ok(Self { problem })
    }
}

struct BoundExactScore<'a> {
    problem: &'a SdeProblem,
}

impl<'t> BoundScore<'t> for BoundExactScore<'_> {
    fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let path = GaussianPath::new(self.problem, &t.value());
        if self.problem.kind() == ProblemKind::Gbm {
            let u = x.ln();
            (-tape.row_mat_vec(u, path.precision, false) - 1.0) * x.recip()
        } else {
            -tape.row_mat_vec(x, path.precision, false)
        }
    }

    fn time_derivative(&self, x: Var<'t>, t: Var<'t>, _value: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let path = GaussianPath::new(self.problem, &t.value());
        if self.problem.kind() == ProblemKind::Gbm {
            tape.row_mat_vec(x.ln(), path.sandwich, false) * x.recip()
        } else {
            tape.row_mat_vec(x, path.sandwich, false)
        }
    }
}

impl ScoreField for ExactScore<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn bind<'a>(&'a self, _tape: &'a Tape) -> Box<dyn BoundScore<'a> + 'a> {
        Box::new(BoundExactScore { problem: self.problem })
    }
}

/// The analytic marginal log-density.
pub struct ExactLogDensity<'p> {
    problem: &'p SdeProblem,
}

impl<'p> ExactLogDensity<'p> {
    pub fn new(problem: &'p SdeProblem) -> Result<Self> {
        check_analytic(problem)?;
        Ok(Self { problem })
    }
}

struct BoundExactLogDensity<'a> {
    problem: &'a SdeProblem,
}

impl<'t> BoundLogDensity<'t> for BoundExactLogDensity<'_> {
    fn value(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let path = GaussianPath::new(self.problem, &t.value());
        let d = self.problem.dim() as f64;
        let c = path.log_det.mapv(|ld| -0.5 * (d * LN_2PI + ld)).insert_axis(Axis(1));
        let gbm = self.problem.kind() == ProblemKind::Gbm;
        let u = if gbm { x.ln() } else { x };
        let quad = (u * tape.row_mat_vec(u, path.precision, false)).row_sums();
        let q = tape.leaf(c) + quad * -0.5;
        if gbm {
            q - u.row_sums()
        } else {
            q
        }
    }

    fn time_derivative(&self, x: Var<'t>, t: Var<'t>, _value: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let path = GaussianPath::new(self.problem, &t.value());
        let u = if self.problem.kind() == ProblemKind::Gbm { x.ln() } else { x };
        let quad = (u * tape.row_mat_vec(u, path.sandwich, false)).row_sums();
        tape.leaf((path.trace * -0.5).insert_axis(Axis(1))) + quad * 0.5
    }
}

impl LogDensityField for ExactLogDensity<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn bind<'a>(&'a self, _tape: &'a Tape) -> Box<dyn BoundLogDensity<'a> + 'a> {
        Box::new(BoundExactLogDensity { problem: self.problem })
    }
}

/// Time-independent linear field `s(x) = M x`.
pub struct LinearScore {
    pub m: Array2<f64>,
}

struct BoundLinear<'t> {
    mt: Var<'t>,
}

impl<'t> BoundScore<'t> for BoundLinear<'t> {
    fn value(&self, x: Var<'t>, _t: Var<'t>) -> Var<'t> {
        x.matmul(self.mt)
    }

    fn time_derivative(&self, x: Var<'t>, _t: Var<'t>, _value: Var<'t>) -> Var<'t> {
        x.tape().zeros(x.shape())
    }
}

impl ScoreField for LinearScore {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn bind<'a>(&'a self, tape: &'a Tape) -> Box<dyn BoundScore<'a> + 'a> {
        Box::new(BoundLinear { mt: tape.leaf(self.m.t().to_owned()) })
    }
}
