//! Dense multilayer perceptron with hand-written reverse mode.
//!
//! Rows of a batch matrix are samples. Layer `l` computes
//! `z_l = h_{l-1} W_lᵀ + b_l`, `h_l = σ_l(z_l)` with `W_l` stored `out × in`.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// σ'(z), given both the pre-activation `z` and the output `h = σ(z)`.
    #[inline]
    pub fn deriv(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }

    /// σ''(z); zero almost everywhere for relu.
    #[inline]
    pub fn second_deriv(self, _z: f64, h: f64) -> f64 {
        match self {
            Activation::Identity | Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * h * (1.0 - h * h),
        }
    }

    /// True when σ'' vanishes almost everywhere.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Identity | Activation::Relu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
            hidden_activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Contract("mlp needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Contract("all layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(out, in)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer == self.hidden_dims.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

/// Intermediates recorded by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    fingerprint: u64,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("tape has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_vec().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MlpParams {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let bound = 1.0 / (inp as f64).sqrt();
                let weight = Array2::from_shape_fn((out, inp), |_| rng.uniform(-bound, bound));
                Layer {
                    weight,
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| Layer::zeros(out, inp))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Builds parameters from explicit layers, checking shapes against `spec`.
    pub fn from_layers(spec: &MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((out, inp), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.dim() != (*out, *inp) || l.bias.len() != *out {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {out}x{inp}, got {:?} / bias {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
        }
        let p = Self {
            spec: spec.clone(),
            layers,
        };
        if !p.is_finite() {
            return Err(Error::Contract("parameters must be finite".into()));
        }
        Ok(p)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flat view in layer order: weights row-major, then bias.
    pub fn to_vec(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_from_vec(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Cheap content hash used to detect a tape recorded against other weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0x243F_6A88_85A3_08D3;
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01B3).rotate_left(7);
            }
        }
        h
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass without recording intermediates.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.as_standard_layout().into_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.spec.activation(i);
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(x)?;
        let x = x.as_standard_layout().into_owned();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.spec.activation(i);
            let prev = if i == 0 { &x } else { &post[i - 1] };
            let mut z = prev.dot(&layer.weight.t());
            z += &layer.bias;
            let h = z.mapv(|v| act.apply(v));
            pre.push(z);
            post.push(h);
        }
        let tape = Tape {
            input: x,
            pre,
            post,
            fingerprint: self.fingerprint(),
        };
        Ok((tape.output().clone(), tape))
    }

    fn check_tape(&self, tape: &Tape, output_grads: &Array2<f64>) -> Result<()> {
        if tape.pre.len() != self.layers.len() || tape.fingerprint != self.fingerprint() {
            return Err(Error::Contract(
                "tape was recorded against different parameters".into(),
            ));
        }
        if output_grads.dim() != tape.output().dim() {
            return Err(Error::Shape(format!(
                "output grads {:?} vs outputs {:?}",
                output_grads.dim(),
                tape.output().dim()
            )));
        }
        Ok(())
    }

    /// Vector-Jacobian product: returns ∂(Σ outputs·output_grads)/∂θ and the
    /// matching gradient with respect to the input rows.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grads: &Array2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        self.check_tape(tape, output_grads)?;
        let n = self.layers.len();
        let mut grads = ParamGrads::zeros_like(self);
        let mut delta = output_grads.clone();
        for l in (0..n).rev() {
            let act = self.spec.activation(l);
            Zip::from(&mut delta)
                .and(&tape.pre[l])
                .and(&tape.post[l])
                .for_each(|d, &z, &h| *d *= act.deriv(z, h));
            let prev = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            grads.layers[l].weight = delta.t().dot(prev);
            grads.layers[l].bias = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[l].weight);
        }
        Ok((grads, delta))
    }

    pub fn backward_params(&self, tape: &Tape, output_grads: &Array2<f64>) -> Result<ParamGrads> {
        Ok(self.backward(tape, output_grads)?.0)
    }

    /// Row-wise gradient of a scalar-output network with respect to its input.
    pub fn input_gradient(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if self.spec.output_dim != 1 {
            return Err(Error::Contract(format!(
                "input_gradient needs a scalar network, output_dim = {}",
                self.spec.output_dim
            )));
        }
        let (_, tape) = self.forward(x)?;
        let ones = Array2::ones((x.nrows(), 1));
        Ok(self.backward(&tape, &ones)?.1)
    }
}

/// `target ← (1 − tau)·target + tau·online`.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Contract(format!("tau must be in (0, 1], got {tau}")));
    }
    if target.spec != online.spec {
        return Err(Error::Shape("polyak update between different architectures".into()));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        if tau == 1.0 {
            t.weight.assign(&o.weight);
            t.bias.assign(&o.bias);
        } else {
            Zip::from(&mut t.weight)
                .and(&o.weight)
                .for_each(|a, &b| *a += tau * (b - *a));
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|a, &b| *a += tau * (b - *a));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(i: usize, h: &[usize], o: usize, ha: Activation, oa: Activation) -> MlpSpec {
        MlpSpec::new(i, h.to_vec(), o, ha, oa).unwrap()
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let s = spec(2, &[4], 1, Activation::Relu, Activation::Identity);
        let p = MlpParams::init(&s, &mut Rng::new(7)).unwrap();
        let b = 1.0 / 2f64.sqrt();
        assert_eq!(p.layers()[0].weight.dim(), (4, 2));
        assert!(p.layers()[0].weight.iter().all(|w| w.abs() <= b));
        assert!(p.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let q = MlpParams::init(&s, &mut Rng::new(7)).unwrap();
        assert_eq!(p.to_vec(), q.to_vec());
    }

    #[test]
    fn layer_shapes() {
        let s = spec(3, &[8, 8], 1, Activation::Relu, Activation::Identity);
        assert_eq!(s.layer_shapes(), vec![(8, 3), (8, 8), (1, 8)]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(2, vec![], 1, Activation::Relu, Activation::Identity).is_err());
        assert!(MlpSpec::new(0, vec![3], 1, Activation::Relu, Activation::Identity).is_err());
        assert!(MlpSpec::new(2, vec![3, 0], 1, Activation::Relu, Activation::Identity).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let s = spec(3, &[5], 2, Activation::Tanh, Activation::Identity);
        let p = MlpParams::zeros(&s).unwrap();
        let out = p.predict(&array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_give_activation() {
        let s = spec(2, &[2], 2, Activation::Tanh, Activation::Identity);
        let eye = Array2::eye(2);
        let p = MlpParams::from_layers(
            &s,
            vec![
                Layer { weight: eye.clone(), bias: Array1::zeros(2) },
                Layer { weight: eye, bias: Array1::zeros(2) },
            ],
        )
        .unwrap();
        let x = array![[0.3, -1.2]];
        let y = p.predict(&x).unwrap();
        assert!((y[[0, 0]] - 0.3f64.tanh()).abs() < 1e-15);
        assert!((y[[0, 1]] - (-1.2f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let s = spec(3, &[4], 1, Activation::Relu, Activation::Identity);
        let p = MlpParams::init(&s, &mut Rng::new(1)).unwrap();
        assert!(matches!(p.predict(&Array2::zeros((2, 2))), Err(Error::Shape(_))));
        let s2 = spec(3, &[4], 2, Activation::Relu, Activation::Identity);
        let p2 = MlpParams::init(&s2, &mut Rng::new(1)).unwrap();
        assert!(matches!(p2.input_gradient(&Array2::zeros((2, 3))), Err(Error::Contract(_))));
    }

    #[test]
    fn stale_tape_rejected() {
        let s = spec(2, &[3], 1, Activation::Tanh, Activation::Identity);
        let mut p = MlpParams::init(&s, &mut Rng::new(2)).unwrap();
        let (_, tape) = p.forward(&array![[0.1, 0.2]]).unwrap();
        p.layers_mut()[0].weight[[0, 0]] += 1.0;
        let g = Array2::ones((1, 1));
        assert!(matches!(p.backward_params(&tape, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_output_grads_zero_param_grads() {
        let s = spec(2, &[3], 1, Activation::Tanh, Activation::Identity);
        let p = MlpParams::init(&s, &mut Rng::new(3)).unwrap();
        let (_, tape) = p.forward(&array![[0.1, 0.2], [0.4, -0.3]]).unwrap();
        let g = p.backward_params(&tape, &Array2::zeros((2, 1))).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_linear_neuron_closed_form() {
        // y = w·x through one identity hidden unit with unit output weight.
        let s = spec(3, &[1], 1, Activation::Identity, Activation::Identity);
        let w = array![[0.5, -1.0, 2.0]];
        let p = MlpParams::from_layers(
            &s,
            vec![
                Layer { weight: w.clone(), bias: Array1::zeros(1) },
                Layer { weight: array![[1.0]], bias: Array1::zeros(1) },
            ],
        )
        .unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        let (_, tape) = p.forward(&x).unwrap();
        let g = p.backward_params(&tape, &array![[0.7]]).unwrap();
        for j in 0..3 {
            assert!((g.layers[0].weight[[0, j]] - 0.7 * x[[0, j]]).abs() < 1e-15);
        }
        let ig = p.input_gradient(&array![[4.0, 5.0, 6.0], [0.0, 0.0, 0.0]]).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                assert_eq!(ig[[r, j]], w[[0, j]]);
            }
        }
    }

    #[test]
    fn polyak_cases() {
        let s = spec(1, &[1], 1, Activation::Identity, Activation::Identity);
        let mut t = MlpParams::zeros(&s).unwrap();
        let mut o = MlpParams::zeros(&s).unwrap();
        o.set_from_vec(&[2.0, 2.0, 2.0, 2.0]).unwrap();
        polyak_update(&mut t, &o, 0.5).unwrap();
        assert_eq!(t.to_vec(), vec![1.0; 4]);
        polyak_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t.to_vec(), o.to_vec());
        let before = t.clone();
        polyak_update(&mut t, &o, 0.3).unwrap();
        assert_eq!(t, before);
        assert!(polyak_update(&mut t, &o, 0.0).is_err());
        assert!(polyak_update(&mut t, &o, 1.5).is_err());
    }
}
