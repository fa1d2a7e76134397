//! Fully-connected `tanh` network taking `(x, t)` as input.
//!
//! A [`DiffNet`] owns plain `ndarray` weights. For derivative queries it is
//! recorded on a [`Tape`] with [`DiffNet::record`], after which the usual
//! gradient, JVP and divergence queries are ordinary tape operations.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

const CHECKPOINT_FORMAT: &str = "scorefp-diffnet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    /// `out × in`
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Multilayer perceptron: `tanh` on hidden layers, identity on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffNet {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
}

/// All parameters of a network flattened in canonical order: for each layer,
/// the weight matrix row-major, then the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Array1<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(Array1::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous parameters")
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Shape("a network needs at least an input and an output width".into()));
    }
    if widths.contains(&0) {
        return Err(Error::Shape(format!("layer widths must be positive, got {widths:?}")));
    }
    if widths[0] < 2 {
        return Err(Error::Shape("input width is d + 1 and must be at least 2".into()));
    }
    Ok(())
}

impl DiffNet {
    /// Glorot-uniform weights and zero biases, drawn from a ChaCha stream
    /// seeded with `seed`.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(widths, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..=limit));
                Layer { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { widths: widths.to_vec(), layers, activation: Activation::Tanh })
    }

    /// Network with every parameter equal to zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::from_params(widths, &ParamVector::zeros(param_count(widths)))
    }

    pub fn from_params(widths: &[usize], params: &ParamVector) -> Result<Self> {
        check_widths(widths)?;
        let mut net = Self {
            widths: widths.to_vec(),
            layers: widths
                .windows(2)
                .map(|w| Layer { w: Array2::zeros((w[1], w[0])), b: Array1::zeros(w[1]) })
                .collect(),
            activation: Activation::Tanh,
        };
        net.set_params(params)?;
        Ok(net)
    }

    /// Builds a network from explicit `(W, b)` pairs, `W` being `out × in`.
    pub fn from_layers(layers: Vec<(Array2<f64>, Array1<f64>)>) -> Result<Self> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        for (k, (w, b)) in layers.iter().enumerate() {
            if k == 0 {
                widths.push(w.ncols());
            } else if w.ncols() != widths[k] {
                return Err(Error::Shape(format!("layer {k} expects {} inputs, previous layer gives {}", w.ncols(), widths[k])));
            }
            if b.len() != w.nrows() {
                return Err(Error::Shape(format!("layer {k}: bias length {} vs {} outputs", b.len(), w.nrows())));
            }
            widths.push(w.nrows());
        }
        check_widths(&widths)?;
        let layers = layers.into_iter().map(|(w, b)| Layer { w, b }).collect();
        Ok(Self { widths, layers, activation: Activation::Tanh })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Spatial dimension `d` (the input width is `d + 1`).
    pub fn input_dim(&self) -> usize {
        self.widths[0] - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.widths)
    }

    pub fn params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        ParamVector(Array1::from(out))
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.num_params(), params.len())));
        }
        let src = params.as_slice();
        let mut at = 0;
        for layer in &mut self.layers {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = src[at];
                at += 1;
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &ArrayView2<f64>, t: &ArrayView1<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, network expects d = {}", x.ncols(), self.input_dim())));
        }
        if t.len() != x.nrows() {
            return Err(Error::Shape(format!("{} times for {} points", t.len(), x.nrows())));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("time input".into()));
        }
        Ok(())
    }

    /// Output for a batch of points (one per row of `x`), without a tape.
    pub fn forward_batch(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x, &t)?;
        let mut h = ndarray::concatenate(Axis(1), &[x, t.insert_axis(Axis(1))]).expect("equal rows");
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            if k < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Array1<f64>> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let tb = [t];
        Ok(self.forward_batch(xb, ArrayView1::from(&tb))?.row(0).to_owned())
    }

    /// Records every parameter as a tape leaf.
    pub fn record<'t>(&self, tape: &'t Tape) -> NetVars<'t> {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone().insert_axis(Axis(0)))))
            .collect();
        NetVars { layers, input_dim: self.input_dim() }
    }

    /// `∂⟨cotangent, forward(x, t)⟩ / ∂params`.
    pub fn grad_params(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Result<ParamVector> {
        self.check_point(x, t)?;
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!("cotangent length {} vs output {}", cotangent.len(), self.output_dim())));
        }
        let tape = Tape::new();
        let vars = self.record(&tape);
        let (xv, tv) = point_leaves(&tape, x, t);
        let out = vars.apply(xv, tv);
        let ct = tape.leaf(Array2::from_shape_vec((1, cotangent.len()), cotangent.to_vec()).expect("row"));
        let grads = tape.grad(out * ct, &vars.params());
        Ok(NetVars::flatten(&grads))
    }

    /// Input Jacobian (`out × d`) and time derivative (`out`).
    pub fn grad_input(&self, x: &[f64], t: f64) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_point(x, t)?;
        let d = self.input_dim();
        let tape = Tape::new();
        let vars = self.record(&tape);
        let (xv, tv) = point_leaves(&tape, x, t);
        let out = vars.apply(xv, tv);
        let mut jac = Array2::zeros((self.output_dim(), d));
        for j in 0..d {
            let mut e = Array2::zeros((1, d));
            e[[0, j]] = 1.0;
            let col = tape.jvp(out, &[xv, tv], &[tape.leaf(e), tape.scalar(0.0)]);
            jac.column_mut(j).assign(&col.value().row(0));
        }
        let dt = tape.jvp(out, &[xv, tv], &[tape.zeros((1, d)), tape.scalar(1.0)]);
        Ok((jac, dt.value().row(0).to_owned()))
    }

    /// `(∂output/∂x) · v` via forward mode.
    pub fn jvp_input(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Array1<f64>> {
        self.check_point(x, t)?;
        if v.len() != x.len() {
            return Err(Error::Shape(format!("tangent length {} vs d = {}", v.len(), x.len())));
        }
        let tape = Tape::new();
        let vars = self.record(&tape);
        let (xv, _) = point_leaves(&tape, x, t);
        let tv = tape.scalar(t);
        let out = vars.apply(xv, tv);
        let dir = tape.leaf(Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
        Ok(tape.jvp(out, &[xv], &[dir]).value().row(0).to_owned())
    }

    fn check_square(&self) -> Result<()> {
        if self.output_dim() != self.input_dim() {
            return Err(Error::Contract(format!(
                "divergence needs output dim = d, got {} vs {}",
                self.output_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Trace of the input Jacobian from `d` basis JVPs.
    pub fn divergence_exact(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x, t)?;
        self.check_square()?;
        let d = x.len();
        // All d basis directions are pushed through one batched pass.
        let tape = Tape::new();
        let vars = self.record(&tape);
        let xs = tape.leaf(Array2::from_shape_fn((d, d), |(_, j)| x[j]));
        let ts = tape.full((d, 1), t);
        let out = vars.apply(xs, ts);
        let jv = tape.jvp(out, &[xs], &[tape.leaf(Array2::eye(d))]);
        Ok(jv.value().diag().sum())
    }

    /// Hutchinson estimate `mean_k v_kᵀ J v_k` with Rademacher probes.
    pub fn divergence_hutchinson<R: Rng + ?Sized>(&self, x: &[f64], t: f64, probes: usize, rng: &mut R) -> Result<f64> {
        self.check_point(x, t)?;
        self.check_square()?;
        if probes == 0 {
            return Err(Error::Contract("at least one probe is required".into()));
        }
        let d = x.len();
        let v = rademacher(probes, d, rng);
        let tape = Tape::new();
        let vars = self.record(&tape);
        let xs = tape.leaf(Array2::from_shape_fn((probes, d), |(_, j)| x[j]));
        let ts = tape.full((probes, 1), t);
        let out = vars.apply(xs, ts);
        let jv = tape.jvp(out, &[xs], &[tape.leaf(v.clone())]).value();
        Ok((&jv * &v).sum() / probes as f64)
    }

    fn check_point(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("point has {} coordinates, network expects d = {}", x.len(), self.input_dim())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("time input".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            activation: self.activation,
            params: self.params().0.to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a network checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        let params = ParamVector(Array1::from(ck.params.clone()));
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Self::from_params(&ck.widths, &params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string(&self.to_checkpoint())?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ck)
    }
}

/// On-disk network container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

fn point_leaves<'t>(tape: &'t Tape, x: &[f64], t: f64) -> (Var<'t>, Var<'t>) {
    let xv = tape.leaf(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    (xv, tape.scalar(t))
}

/// `n × d` matrix of independent ±1 entries.
pub fn rademacher<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// A network recorded on a tape.
#[derive(Clone, Debug)]
pub struct NetVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    input_dim: usize,
}

impl<'t> NetVars<'t> {
    /// Output for `x` (`n × d`) and `t` (`n × 1` or `1 × 1`).
    pub fn apply(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let (n, d) = x.shape();
        assert_eq!(d, self.input_dim, "input width");
        let t = if t.shape() == (n, 1) { t } else { t.broadcast_to((n, 1)) };
        let mut h = tape.concat(x, t);
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let z = h.matmul_t(w) + b;
            h = if k < last { z.tanh() } else { z };
        }
        h
    }

    /// Parameter leaves in canonical order.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Flattens gradients returned for [`NetVars::params`].
    pub fn flatten(grads: &[Var<'t>]) -> ParamVector {
        let mut out = Vec::new();
        for g in grads {
            g.with_value(|v| out.extend(v.iter()));
        }
        ParamVector(Array1::from(out))
    }
}
