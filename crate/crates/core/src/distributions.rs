//! Closed-form densities, scores and samplers for the initial and marginal
//! laws used by the benchmark problems.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{to_nalgebra, to_ndarray, SpdMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Anisotropic covariance `Σ = Qᵀ Γ Q` with `Q` orthogonal and the eigenvalues
/// in reciprocal pairs `(λ, 1/λ)`, `λ ∈ [1, 1.1]`.
#[derive(Clone, Debug)]
pub struct CovarianceSpec {
    pub seed: u64,
    pub q: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub sigma: SpdMatrix,
}

#[derive(Serialize, Deserialize)]
struct CovarianceFile {
    seed: u64,
    dim: usize,
    /// Row-major `Q`.
    q: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl CovarianceSpec {
    /// Draws `Q` from the QR factorization of a Gaussian matrix. With odd `d`
    /// the unpaired eigenvalue is 1.
    pub fn generate(d: usize, seed: u64) -> Result<Self> {
        if d < 2 {
            return Err(Error::Contract(format!("covariance needs d >= 2, got {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let (mut q, r) = (qr.q(), qr.r());
        // Sign fix makes the factor unique (Haar-distributed).
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let mut eigenvalues = Vec::with_capacity(d);
        for _ in 0..d / 2 {
            let lam = rng.random_range(1.0..=1.1);
            eigenvalues.push(lam);
            eigenvalues.push(1.0 / lam);
        }
        if d % 2 == 1 {
            eigenvalues.push(1.0);
        }
        Self::from_parts(seed, q, eigenvalues)
    }

    pub fn from_parts(seed: u64, q: DMatrix<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        let d = q.nrows();
        if q.ncols() != d || eigenvalues.len() != d {
            return Err(Error::Shape("Q must be square with one eigenvalue per row".into()));
        }
        if eigenvalues.iter().any(|&l| l <= 0.0 || l.is_nan()) {
            return Err(Error::Contract("eigenvalues must be positive".into()));
        }
        let gamma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigenvalues.clone()));
        let sigma = SpdMatrix::new(q.transpose() * gamma * &q)?;
        Ok(Self { seed, q, eigenvalues, sigma })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `Σ` as an `ndarray` matrix.
    pub fn matrix(&self) -> Array2<f64> {
        to_ndarray(&self.sigma.matrix)
    }

    pub fn to_json(&self) -> Result<String> {
        let d = self.dim();
        let file = CovarianceFile {
            seed: self.seed,
            dim: d,
            q: (0..d * d).map(|k| self.q[(k / d, k % d)]).collect(),
            eigenvalues: self.eigenvalues.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CovarianceFile = serde_json::from_str(s)?;
        if f.q.len() != f.dim * f.dim {
            return Err(Error::Shape("Q entry count does not match dim".into()));
        }
        let q = DMatrix::from_row_slice(f.dim, f.dim, &f.q);
        Self::from_parts(f.seed, q, f.eigenvalues)
    }
}

/// Multivariate normal with cached precision and Cholesky factor.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub precision: Array2<f64>,
    /// Lower Cholesky factor of `cov`.
    pub chol: Array2<f64>,
    pub log_det: f64,
}

impl Gaussian {
    pub fn new(mean: Array1<f64>, cov: &Array2<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape("covariance must be d × d".into()));
        }
        let spd = SpdMatrix::new(to_nalgebra(cov))?;
        Ok(Self::from_spd(mean, &spd))
    }

    pub fn from_spd(mean: Array1<f64>, spd: &SpdMatrix) -> Self {
        Self {
            mean,
            cov: to_ndarray(&spd.matrix),
            precision: to_ndarray(&spd.inverse),
            chol: to_ndarray(&spd.chol),
            log_det: spd.log_det,
        }
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: Array1::zeros(d),
            cov: Array2::eye(d),
            precision: Array2::eye(d),
            chol: Array2::eye(d),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_pdf_rows(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let u = &x - &self.mean;
        let pu = u.dot(&self.precision);
        let quad = (&u * &pu).sum_axis(Axis(1));
        let c = -0.5 * (self.dim() as f64 * LN_2PI + self.log_det);
        quad.mapv(|q| c - 0.5 * q)
    }

    fn score_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        -(&x - &self.mean).dot(&self.precision)
    }

    fn sample_rows<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let z = Array2::from_shape_simple_fn((n, self.dim()), || rng.sample::<f64, _>(StandardNormal));
        z.dot(&self.chol.t()) + &self.mean
    }

    fn log_pdf_graph<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let u = x - tape.leaf(self.mean.clone().insert_axis(Axis(0)));
        let pu = u.matmul(tape.leaf(self.precision.clone()));
        (u * pu).row_sums() * -0.5 + -0.5 * (self.dim() as f64 * LN_2PI + self.log_det)
    }

    fn score_graph<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let u = x - tape.leaf(self.mean.clone().insert_axis(Axis(0)));
        -u.matmul(tape.leaf(self.precision.clone()))
    }
}

/// The initial and reference distribution families.
#[derive(Clone, Debug)]
pub enum Density {
    Gaussian(Gaussian),
    /// `log x ~ N(mean, Σ)` coordinatewise.
    LogNormal(Gaussian),
    /// Isotropic multivariate Cauchy with scale `gamma`.
    Cauchy { dim: usize, gamma: f64 },
    /// Product of independent Laplace factors with common scale.
    Laplace { loc: Array1<f64>, scale: f64 },
}

impl Density {
    pub fn standard_gaussian(d: usize) -> Self {
        Density::Gaussian(Gaussian::standard(d))
    }

    pub fn dim(&self) -> usize {
        match self {
            Density::Gaussian(g) | Density::LogNormal(g) => g.dim(),
            Density::Cauchy { dim, .. } => *dim,
            Density::Laplace { loc, .. } => loc.len(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Density::Gaussian(_) => "gaussian",
            Density::LogNormal(_) => "lognormal",
            Density::Cauchy { .. } => "cauchy",
            Density::Laplace { .. } => "laplace",
        }
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!("points have {} coordinates, density has d = {}", x.ncols(), self.dim())));
        }
        if let Density::LogNormal(_) = self {
            if x.iter().any(|&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain("log-normal density needs strictly positive coordinates".into()));
            }
        }
        Ok(())
    }

    /// Log density for each row of `x`.
    pub fn log_pdf_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check(&x)?;
        Ok(match self {
            Density::Gaussian(g) => g.log_pdf_rows(x),
            Density::LogNormal(g) => {
                let y = x.mapv(f64::ln);
                g.log_pdf_rows(y.view()) - y.sum_axis(Axis(1))
            }
            Density::Cauchy { dim, gamma } => {
                let c = cauchy_log_norm(*dim, *gamma);
                let half = (*dim as f64 + 1.0) / 2.0;
                x.rows().into_iter().map(|r| c - half * (r.dot(&r) / (gamma * gamma)).ln_1p()).collect()
            }
            Density::Laplace { loc, scale } => {
                let c = -(loc.len() as f64) * (2.0 * scale).ln();
                (&x - loc).mapv(f64::abs).sum_axis(Axis(1)).mapv(|s| c - s / scale)
            }
        })
    }

    pub fn log_pdf(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.log_pdf_batch(x.insert_axis(Axis(0)))?[0])
    }

    /// `∇_x log p` for each row of `x`.
    pub fn score_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        Ok(match self {
            Density::Gaussian(g) => g.score_rows(x),
            Density::LogNormal(g) => {
                let y = x.mapv(f64::ln);
                (g.score_rows(y.view()) - 1.0) / x
            }
            Density::Cauchy { dim, gamma } => {
                let mut out = x.to_owned();
                for mut r in out.rows_mut() {
                    let k = -(*dim as f64 + 1.0) / (gamma * gamma + r.dot(&r));
                    r *= k;
                }
                out
            }
            // sign(0) = 0 picks the symmetric subgradient at the kink.
            Density::Laplace { loc, scale } => (&x - loc).mapv(|u| -laplace_sign(u) / scale),
        })
    }

    pub fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.score_batch(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// `n` independent draws, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        match self {
            Density::Gaussian(g) => g.sample_rows(n, rng),
            Density::LogNormal(g) => g.sample_rows(n, rng).mapv(f64::exp),
            Density::Cauchy { dim, gamma } => {
                let chi = ChiSquared::new(1.0).expect("one degree of freedom");
                let mut out = Array2::from_shape_simple_fn((n, *dim), || rng.sample::<f64, _>(StandardNormal));
                for mut r in out.rows_mut() {
                    let w: f64 = chi.sample(rng);
                    r *= gamma / w.sqrt();
                }
                out
            }
            Density::Laplace { loc, scale } => {
                let mut out = Array2::from_shape_simple_fn((n, loc.len()), || {
                    let u: f64 = rng.random_range(-0.5..0.5);
                    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                });
                out += loc;
                out
            }
        }
    }

    /// Log density as a differentiable `n × 1` tape value.
    pub fn log_pdf_graph<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        match self {
            Density::Gaussian(g) => g.log_pdf_graph(tape, x),
            Density::LogNormal(g) => {
                let y = x.ln();
                g.log_pdf_graph(tape, y) - y.row_sums()
            }
            Density::Cauchy { dim, gamma } => {
                let r2 = x.square().row_sums() * (1.0 / (gamma * gamma)) + 1.0;
                r2.ln() * (-(*dim as f64 + 1.0) / 2.0) + cauchy_log_norm(*dim, *gamma)
            }
            Density::Laplace { loc, scale } => {
                let u = x - tape.leaf(loc.clone().insert_axis(Axis(0)));
                // |u| = u · sign(u), with the sign held constant.
                let sgn = tape.leaf(u.value().mapv(laplace_sign));
                (u * sgn).row_sums() * (-1.0 / scale) + -(loc.len() as f64) * (2.0 * scale).ln()
            }
        }
    }

    /// Score as a differentiable `n × d` tape value.
    pub fn score_graph<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        match self {
            Density::Gaussian(g) => g.score_graph(tape, x),
            Density::LogNormal(g) => (g.score_graph(tape, x.ln()) - 1.0) * x.recip(),
            Density::Cauchy { dim, gamma } => {
                let r = (x.square().row_sums() + gamma * gamma).recip();
                x * r * -(*dim as f64 + 1.0)
            }
            Density::Laplace { loc, scale } => {
                let u = x.value() - loc;
                tape.leaf(u.mapv(|v| -laplace_sign(v) / scale))
            }
        }
    }
}

fn laplace_sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cauchy_log_norm(d: usize, gamma: f64) -> f64 {
    let d = d as f64;
    ln_gamma((d + 1.0) / 2.0) - ln_gamma(0.5) - 0.5 * d * PI.ln() - d * gamma.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn anisotropic(d: usize, seed: u64) -> Density {
        let cov = CovarianceSpec::generate(d, seed).unwrap();
        let mean = Array1::from_shape_fn(d, |i| 0.1 * i as f64 - 0.2);
        Density::Gaussian(Gaussian::from_spd(mean, &cov.sigma))
    }

    fn lognormal(d: usize, seed: u64) -> Density {
        let cov = CovarianceSpec::generate(d, seed).unwrap();
        Density::LogNormal(Gaussian::from_spd(Array1::zeros(d), &cov.sigma))
    }

    #[test]
    fn covariance_d2_is_unimodular_pair() {
        for seed in 0..5 {
            let c = CovarianceSpec::generate(2, seed).unwrap();
            let (a, b) = (c.eigenvalues[0], c.eigenvalues[1]);
            assert!((1.0..=1.1).contains(&a));
            assert!((a * b - 1.0).abs() < 1e-15);
            assert!((c.sigma.log_det).abs() < 1e-10);
        }
    }

    #[test]
    fn covariance_d4_has_unit_determinant() {
        let c = CovarianceSpec::generate(4, 3).unwrap();
        assert!((c.sigma.matrix.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn covariance_invariants() {
        let c = CovarianceSpec::generate(10, 17).unwrap();
        let qtq = c.q.transpose() * &c.q;
        assert!((qtq - DMatrix::identity(10, 10)).amax() < 1e-10);
        for p in c.eigenvalues.chunks(2) {
            assert!((1.0..=1.1).contains(&p[0]));
            assert_eq!(p[1], 1.0 / p[0]);
        }
        let l = &c.sigma.chol;
        assert!((l * l.transpose() - &c.sigma.matrix).amax() < 1e-10);
        let rebuilt = c.q.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(c.eigenvalues.clone())) * &c.q;
        assert!((rebuilt - &c.sigma.matrix).amax() < 1e-12);
    }

    #[test]
    fn covariance_rejects_d1_and_round_trips() {
        assert!(matches!(CovarianceSpec::generate(1, 0), Err(Error::Contract(_))));
        let c = CovarianceSpec::generate(7, 5).unwrap();
        let back = CovarianceSpec::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.q, c.q);
        assert_eq!(back.eigenvalues, c.eigenvalues);
        assert_eq!(back.sigma.matrix, c.sigma.matrix);
        assert_eq!(c.eigenvalues[6], 1.0);
        let again = CovarianceSpec::generate(7, 5).unwrap();
        assert_eq!(again.sigma.matrix, c.sigma.matrix);
    }

    #[test]
    fn log_pdf_reference_values() {
        let g = Density::standard_gaussian(10);
        let v = g.log_pdf(Array1::zeros(10).view()).unwrap();
        assert!((v + 5.0 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 9.189_385_332_046_727).abs() < 1e-12);

        let lap = Density::Laplace { loc: array![0.0], scale: 1.0 };
        assert!((lap.log_pdf(array![0.0].view()).unwrap() + 2f64.ln()).abs() < 1e-15);

        let c = Density::Cauchy { dim: 3, gamma: 1.0 };
        assert!((c.log_pdf(Array1::zeros(3).view()).unwrap() + (PI * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn lognormal_outside_support_is_domain_error() {
        let d = lognormal(3, 0);
        assert!(matches!(d.log_pdf(array![1.0, 0.0, 2.0].view()), Err(Error::Domain(_))));
        assert!(matches!(d.score(array![1.0, -1.0, 2.0].view()), Err(Error::Domain(_))));
    }

    #[test]
    fn score_reference_values() {
        let g = Density::standard_gaussian(3);
        let x = array![0.5, -1.0, 2.0];
        assert_eq!(g.score(x.view()).unwrap(), -&x);
        let c = Density::Cauchy { dim: 1, gamma: 1.0 };
        assert_eq!(c.score(array![1.0].view()).unwrap(), array![-1.0]);
        let lap = Density::Laplace { loc: array![0.0, 0.0], scale: 2.0 };
        assert_eq!(lap.score(array![0.0, -3.0].view()).unwrap(), array![0.0, 0.5]);
    }

    fn fd_score(d: &Density, x: &Array1<f64>) -> Array1<f64> {
        let h = 1e-5;
        Array1::from_shape_fn(x.len(), |i| {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            (d.log_pdf(p.view()).unwrap() - d.log_pdf(m.view()).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn anisotropic_gaussian_score_matches_finite_differences() {
        let d = anisotropic(6, 2);
        let x = array![0.3, -0.8, 1.1, 0.0, 0.4, -0.5];
        let diff = d.score(x.view()).unwrap() - fd_score(&d, &x);
        assert!(diff.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn every_family_score_matches_log_pdf() {
        let dim = 5;
        let families = [
            anisotropic(dim, 1),
            lognormal(dim, 2),
            Density::Cauchy { dim, gamma: 1.0 },
            Density::Cauchy { dim, gamma: 2.5 },
            Density::Laplace { loc: Array1::from_elem(dim, 0.3), scale: 1.5 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for fam in &families {
            let pts = fam.sample(100, &mut rng);
            for x in pts.rows() {
                let x = x.to_owned();
                let diff = fam.score(x.view()).unwrap() - fd_score(fam, &x);
                let err = diff.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err < 1e-5, "{}: {err}", fam.family());
            }
        }
    }

    #[test]
    fn graph_builders_match_numeric_paths() {
        let dim = 4;
        let families = [
            anisotropic(dim, 1),
            lognormal(dim, 2),
            Density::Cauchy { dim, gamma: 1.3 },
            Density::Laplace { loc: Array1::from_elem(dim, -0.2), scale: 0.7 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for fam in &families {
            let x = fam.sample(8, &mut rng);
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let lp = fam.log_pdf_graph(&tape, xv);
            let sc = fam.score_graph(&tape, xv);
            let want_lp = fam.log_pdf_batch(x.view()).unwrap();
            let want_sc = fam.score_batch(x.view()).unwrap();
            assert!((lp.value().column(0).to_owned() - want_lp).iter().all(|v| v.abs() < 1e-12));
            assert!((sc.value() - &want_sc).iter().all(|v| v.abs() < 1e-12));
            // The graph score is the derivative of the graph log density.
            let g = tape.grad(lp, &[xv])[0].value();
            assert!((g - want_sc).iter().all(|v| v.abs() < 1e-10), "{}", fam.family());
        }
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let sigma = 1.7;
        let d = Density::Gaussian(Gaussian::new(array![0.4], &array![[sigma * sigma]]).unwrap());
        // Composite Simpson on [μ − 10σ, μ + 10σ].
        let n = 20_000;
        let (a, b) = (0.4 - 10.0 * sigma, 0.4 + 10.0 * sigma);
        let h = (b - a) / n as f64;
        let xs = Array2::from_shape_fn((n + 1, 1), |(i, _)| a + i as f64 * h);
        let p = d.log_pdf_batch(xs.view()).unwrap().mapv(f64::exp);
        let mut s = p[0] + p[n];
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * p[i];
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn gaussian_sample_moments() {
        let d = Density::standard_gaussian(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = d.sample(100_000, &mut rng);
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 0.02));
        let c = &x - &mean;
        let cov = c.t().dot(&c) / (x.nrows() - 1) as f64;
        assert!((cov - Array2::<f64>::eye(5)).iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn laplace_sample_variance_and_lognormal_support() {
        let lap = Density::Laplace { loc: Array1::zeros(3), scale: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = lap.sample(100_000, &mut rng);
        for v in x.var_axis(Axis(0), 1.0) {
            assert!((v - 2.0).abs() < 0.1, "{v}");
        }
        let ln = lognormal(4, 3);
        assert!(ln.sample(10_000, &mut rng).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cauchy_sampler_is_elliptical() {
        // Radial law: ‖x‖² / d ~ F(d, 1), so P(‖x‖² ≤ d) is the F(d,1) CDF at 1.
        // For d = 2: F(2,1) CDF(1) = 1 − (1 + 2)^(-1/2).
        let c = Density::Cauchy { dim: 2, gamma: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = c.sample(200_000, &mut rng);
        let frac = x.rows().into_iter().filter(|r| r.dot(r) <= 2.0).count() as f64 / 200_000.0;
        let want = 1.0 - 3f64.powf(-0.5);
        assert!((frac - want).abs() < 0.005, "{frac} vs {want}");
    }

    proptest! {
        #[test]
        fn cauchy_score_is_gradient(x in prop::collection::vec(-5.0f64..5.0, 3), gamma in 0.5f64..3.0) {
            let c = Density::Cauchy { dim: 3, gamma };
            let x = Array1::from(x);
            let diff = c.score(x.view()).unwrap() - fd_score(&c, &x);
            prop_assert!(diff.iter().all(|v| v.abs() < 1e-6));
        }
    }
}
