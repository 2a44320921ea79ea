//! Dense multilayer perceptron over a flat parameter vector.
//!
//! Parameters live in one `Vec<f64>` with a fixed layout: for each layer in
//! order, the weight matrix `(out x in)` row-major followed by its bias
//! vector. Hidden layers apply the spec's activation; the output layer is
//! linear.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm_ab, gemm_abt, gemm_atb, Matrix};
use super::rng::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Flat parameter store in the canonical layer layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// Network shape: layer widths from input to output plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerOffsets>,
    param_count: usize,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "an MLP needs at least 2 widths, got {}",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidInput(format!("width {pos} is zero")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = offset;
            let bias = weights + fan_in * fan_out;
            offset = bias + fan_out;
            layers.push(LayerOffsets {
                fan_in,
                fan_out,
                weights,
                bias,
            });
        }
        Ok(MlpSpec {
            widths,
            activation,
            layers,
            param_count: offset,
        })
    }

    /// `input -> hidden x depth -> output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpSpec::new(widths, activation)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Index range of layer `l`'s weight matrix inside the flat vector.
    pub fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let o = self.layers[l];
        o.weights..o.bias
    }

    pub fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let o = self.layers[l];
        o.bias..o.bias + o.fan_out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut p = ParamVector::zeros(self.param_count);
        for o in &self.layers {
            let limit = (6.0 / (o.fan_in + o.fan_out) as f64).sqrt();
            for w in &mut p[o.weights..o.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        p
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::shape("mlp params", self.param_count, params.len()));
        }
        Ok(())
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), input.len()));
        }
        self.check_params(params)?;
        let mut cur = input.to_vec();
        let last = self.layers.len() - 1;
        for (l, o) in self.layers.iter().enumerate() {
            let w = &params[o.weights..o.bias];
            let b = &params[o.bias..o.bias + o.fan_out];
            let mut next = b.to_vec();
            for (j, nj) in next.iter_mut().enumerate() {
                let row = &w[j * o.fan_in..(j + 1) * o.fan_in];
                *nj += row.iter().zip(&cur).map(|(a, x)| a * x).sum::<f64>();
                if l != last {
                    *nj = self.activation.apply(*nj);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    fn layer_forward(&self, l: usize, params: &[f64], x: &Matrix) -> Matrix {
        let o = self.layers[l];
        let n = x.rows();
        let mut out = Matrix::zeros(n, o.fan_out);
        let bias = &params[o.bias..o.bias + o.fan_out];
        for i in 0..n {
            out.row_mut(i).copy_from_slice(bias);
        }
        gemm_abt(
            n,
            o.fan_in,
            o.fan_out,
            x.data(),
            &params[o.weights..o.bias],
            out.data_mut(),
            true,
        );
        if l + 1 != self.layers.len() {
            let act = self.activation;
            out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        out
    }

    /// Forward pass for a batch of row inputs.
    pub fn forward_batch(&self, params: &[f64], x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp batch input", self.input_dim(), x.cols()));
        }
        self.check_params(params)?;
        let mut cur = self.layer_forward(0, params, x);
        for l in 1..self.layers.len() {
            cur = self.layer_forward(l, params, &cur);
        }
        Ok(cur)
    }

    /// Forward pass that records layer outputs for a later [`MlpSpec::backward`].
    pub fn forward_tape(&self, params: &[f64], x: &Matrix) -> Result<Tape> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp batch input", self.input_dim(), x.cols()));
        }
        self.check_params(params)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in 0..self.layers.len() {
            let next = self.layer_forward(l, params, &acts[l]);
            if !next.all_finite() {
                return Err(Error::non_finite("mlp forward", l));
            }
            acts.push(next);
        }
        Ok(Tape { acts })
    }

    /// Reverse pass of `sum_rows <upstream_row, output_row>`.
    ///
    /// Parameter gradients are accumulated into `param_grads` when given; the
    /// input gradient is returned.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        upstream: &Matrix,
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Matrix> {
        self.check_params(params)?;
        let out = tape.output();
        if upstream.cols() != out.cols() || upstream.rows() != out.rows() {
            return Err(Error::shape(
                "mlp upstream",
                out.rows() * out.cols(),
                upstream.rows() * upstream.cols(),
            ));
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.param_count {
                return Err(Error::shape("mlp grad buffer", self.param_count, g.len()));
            }
        }
        let n = upstream.rows();
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let o = self.layers[l];
            if l + 1 != self.layers.len() {
                let act = self.activation;
                let y = tape.acts[l + 1].data();
                for (d, &yv) in delta.data_mut().iter_mut().zip(y) {
                    *d *= act.derivative_from_output(yv);
                }
            }
            if !delta.all_finite() {
                return Err(Error::non_finite("mlp backward", l));
            }
            let input = &tape.acts[l];
            if let Some(g) = param_grads.as_deref_mut() {
                gemm_atb(
                    o.fan_out,
                    n,
                    o.fan_in,
                    delta.data(),
                    input.data(),
                    &mut g[o.weights..o.bias],
                    true,
                );
                let gb = &mut g[o.bias..o.bias + o.fan_out];
                for i in 0..n {
                    for (b, d) in gb.iter_mut().zip(delta.row(i)) {
                        *b += d;
                    }
                }
            }
            let mut prev = Matrix::zeros(n, o.fan_in);
            gemm_ab(
                n,
                o.fan_out,
                o.fan_in,
                delta.data(),
                &params[o.weights..o.bias],
                prev.data_mut(),
                false,
            );
            delta = prev;
        }
        Ok(delta)
    }
}

/// Layer outputs recorded by [`MlpSpec::forward_tape`]; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("tape holds the input at least")
    }

    pub fn input(&self) -> &Matrix {
        &self.acts[0]
    }
}

/// Single-input forward pass.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.forward(params, input)
}

/// Gradient of `<upstream, f(input)>` with respect to parameters and input.
pub fn mlp_gradient(
    spec: &MlpSpec,
    params: &[f64],
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    if input.len() != spec.input_dim() {
        return Err(Error::shape("mlp input", spec.input_dim(), input.len()));
    }
    if upstream.len() != spec.output_dim() {
        return Err(Error::shape("mlp upstream", spec.output_dim(), upstream.len()));
    }
    let tape = spec.forward_tape(params, &Matrix::row_vector(input))?;
    let mut grads = ParamVector::zeros(spec.param_count());
    let dx = spec.backward(params, &tape, &Matrix::row_vector(upstream), Some(&mut grads))?;
    Ok((grads, dx.into_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_setup(widths: Vec<usize>, act: Activation, seed: u64) -> (MlpSpec, ParamVector) {
        let spec = MlpSpec::new(widths, act).unwrap();
        let mut rng = RngStream::new(seed, 0);
        let mut p = spec.init_params(&mut rng);
        // non-zero biases so the bias path is exercised
        for l in 0..spec.num_layers() {
            for b in &mut p[spec.bias_range(l)] {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        (spec, p)
    }

    #[test]
    fn rejects_bad_specs_and_inputs() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
        let spec = MlpSpec::new(vec![2, 1], Activation::Relu).unwrap();
        let p = ParamVector::zeros(spec.param_count());
        assert!(matches!(
            spec.forward(&p, &[1.0, 2.0, 3.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Tanh).unwrap();
        let p = ParamVector::zeros(spec.param_count());
        assert_eq!(spec.forward(&p, &[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut p = ParamVector::zeros(spec.param_count());
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 7.0];
        assert_eq!(spec.forward(&p, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn tanh_2_3_1_matches_hand_recomputation() {
        let (spec, p) = random_setup(vec![2, 3, 1], Activation::Tanh, 11);
        let x = [0.5, -0.5];
        // explicit scalar recomputation from the documented layout
        let mut h = [0.0; 3];
        for (j, hj) in h.iter_mut().enumerate() {
            let z = p[j * 2] * x[0] + p[j * 2 + 1] * x[1] + p[6 + j];
            *hj = z.tanh();
        }
        let y = p[9] * h[0] + p[10] * h[1] + p[11] * h[2] + p[12];
        let got = spec.forward(&p, &x).unwrap();
        assert_eq!(spec.param_count(), 13);
        assert!((got[0] - y).abs() < 1e-15);
    }

    #[test]
    fn batch_forward_matches_single() {
        let (spec, p) = random_setup(vec![3, 5, 4, 2], Activation::Relu, 3);
        let rows = [[0.1, 0.2, -0.3], [1.0, -1.0, 0.5]];
        let batch = spec.forward_batch(&p, &Matrix::from_rows(&rows, 3)).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = spec.forward(&p, r).unwrap();
            for (a, b) in single.iter().zip(batch.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (spec, p) = random_setup(vec![3, 4, 2], Activation::Tanh, 5);
        let (g, dx) = mlp_gradient(&spec, &p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let (spec, p) = random_setup(vec![3, 2], Activation::Relu, 9);
        let x = [1.0, -2.0, 0.5];
        let g_up = [0.7, -1.3];
        let (g, dx) = mlp_gradient(&spec, &p, &x, &g_up).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - g_up[i] * x[j]).abs() < 1e-15);
            }
            assert!((g[6 + i] - g_up[i]).abs() < 1e-15);
        }
        for j in 0..3 {
            let want = g_up[0] * p[j] + g_up[1] * p[3 + j];
            assert!((dx[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_intermediate_reports_layer() {
        let spec = MlpSpec::new(vec![1, 2, 1], Activation::Relu).unwrap();
        let mut p = ParamVector::zeros(spec.param_count());
        p[4] = 1.0; // second layer weight
        p[0] = f64::INFINITY;
        let err = mlp_gradient(&spec, &p, &[1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 0, .. }), "{err}");
    }
}
