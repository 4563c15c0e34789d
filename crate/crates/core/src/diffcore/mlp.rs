use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;

use super::gemm::gemm;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::math;
use crate::Rng;

/// Floor added to softplus standard deviations.
pub const STD_FLOOR: f64 = 1e-4;

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    /// Single-row matrix.
    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Rows selected (and possibly repeated) by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(index.len(), self.cols);
        for (dst, &src) in index.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Horizontal concatenation.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.row_mut(r)[self.cols..].copy_from_slice(other.row(r));
        }
        out
    }

    /// Columns `range` of every row.
    pub fn columns(&self, range: Range<usize>) -> Matrix {
        let cols = range.len();
        let mut out = Matrix::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[range.clone()]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputTransform {
    Identity,
    /// `softplus(x) + STD_FLOOR`, for standard deviations.
    SoftplusStd,
    /// Row-wise softmax.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Offsets relative to the network's own slice.
    weight: usize,
    bias: usize,
}

/// Fully connected network stored in a slice of a [`ParamSet`].
///
/// Per layer the slice holds the `out x in` row-major weight followed by the
/// bias. Hidden layers use `activation`; the last layer is affine followed by
/// `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    output: OutputTransform,
    layers: Vec<Layer>,
    range: Range<usize>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    detached: bool,
    batch: usize,
    /// Input to every layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activation of every layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl Tape {
    pub fn is_detached(&self) -> bool {
        self.detached
    }

    /// Stop-gradient marker: the tape keeps its shape but contributes nothing
    /// on the backward pass.
    pub fn detach(mut self) -> Self {
        self.detached = true;
        self.inputs.clear();
        self.pre.clear();
        self
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    /// Number of parameters needed for `widths`.
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Allocates a new slice named `name` in `params` and lays the network
    /// out over it (all zeros).
    pub fn allocate(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        activation: Activation,
        output: OutputTransform,
    ) -> Result<Self> {
        let count = Self::param_count(widths);
        let range = params.add_slice(name, count);
        Self::at(range, widths, activation, output)
    }

    /// Lays the network out over an existing range.
    pub fn at(range: Range<usize>, widths: &[usize], activation: Activation, output: OutputTransform) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("an MLP needs at least two positive widths".into()));
        }
        if range.len() != Self::param_count(widths) {
            return Err(Error::DimensionMismatch { expected: Self::param_count(widths), got: range.len() });
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for w in widths.windows(2) {
            layers.push(Layer { fan_in: w[0], fan_out: w[1], weight: off, bias: off + w[0] * w[1] });
            off += w[0] * w[1] + w[1];
        }
        Ok(Self { widths: widths.to_vec(), activation, output, layers, range })
    }

    /// The same architecture placed at another range (e.g. a target copy).
    pub fn relocated(&self, range: Range<usize>) -> Result<Self> {
        Self::at(range, &self.widths, self.activation, self.output)
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// He-uniform weights for ReLU, Glorot-uniform for tanh; zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let range = self.range.clone();
        let data = &mut params.as_mut_slice()[range];
        for layer in &self.layers {
            let bound = match self.activation {
                Activation::Relu => math::sqrt(6.0 / layer.fan_in as f64),
                Activation::Tanh => math::sqrt(6.0 / (layer.fan_in + layer.fan_out) as f64),
            };
            for w in &mut data[layer.weight..layer.bias] {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut data[layer.bias..layer.bias + layer.fan_out] {
                *b = 0.0;
            }
        }
    }

    /// Scales the final layer's weights (e.g. 0 for a constant head).
    pub fn scale_last_layer(&self, params: &mut ParamSet, factor: f64) {
        let layer = self.layers.last().expect("at least one layer");
        let start = self.range.start;
        for w in &mut params.as_mut_slice()[start + layer.weight..start + layer.bias] {
            *w *= factor;
        }
    }

    /// Sets every weight to the identity where square and every bias to zero.
    pub fn init_identity(&self, params: &mut ParamSet) {
        let data = &mut params.as_mut_slice()[self.range.clone()];
        data.iter_mut().for_each(|v| *v = 0.0);
        for layer in &self.layers {
            for i in 0..layer.fan_out.min(layer.fan_in) {
                data[layer.weight + i * layer.fan_in + i] = 1.0;
            }
        }
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols != self.input_width() {
            return Err(Error::DimensionMismatch { expected: self.input_width(), got: input.cols });
        }
        Ok(())
    }

    fn run(&self, weights: &[f64], input: &Matrix, record: bool) -> (Matrix, Vec<Matrix>, Vec<Matrix>) {
        let batch = input.rows;
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut y = Matrix::zeros(batch, layer.fan_out);
            let bias = &weights[layer.bias..layer.bias + layer.fan_out];
            for r in 0..batch {
                y.row_mut(r).copy_from_slice(bias);
            }
            let w = &weights[layer.weight..layer.bias];
            gemm(batch, layer.fan_in, layer.fan_out, 1.0, &x.data, false, w, true, 1.0, &mut y.data);
            let out = if li < last {
                let mut h = y.clone();
                match self.activation {
                    Activation::Relu => h.data.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Tanh => h.data.iter_mut().for_each(|v| *v = math::tanh(*v)),
                }
                h
            } else {
                apply_output(self.output, &y)
            };
            if record {
                inputs.push(x);
                pres.push(y);
            }
            x = out;
        }
        (x, inputs, pres)
    }

    /// Forward pass recording a tape for [`Mlp::backward`].
    pub fn forward(&self, params: &ParamSet, input: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(input)?;
        let weights = &params.as_slice()[self.range.clone()];
        let (out, inputs, pre) = self.run(weights, input, true);
        let tape = Tape { version: params.version(), detached: false, batch: input.rows, inputs, pre, output: out.clone() };
        Ok((out, tape))
    }

    /// Forward pass whose result is a constant for differentiation.
    pub fn forward_detached(&self, params: &ParamSet, input: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(input)?;
        let out = self.infer_slice(&params.as_slice()[self.range.clone()], input);
        let tape = Tape {
            version: params.version(),
            detached: true,
            batch: input.rows,
            inputs: Vec::new(),
            pre: Vec::new(),
            output: out.clone(),
        };
        Ok((out, tape))
    }

    /// Output only, from this network's own weight slice.
    pub fn infer_slice(&self, weights: &[f64], input: &Matrix) -> Matrix {
        self.run(weights, input, false).0
    }

    /// Output only, no tape.
    pub fn infer(&self, params: &ParamSet, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        Ok(self.infer_slice(&params.as_slice()[self.range.clone()], input))
    }

    /// Reverse pass: accumulates `d loss / d params` into `grad` (indexed like
    /// the full parameter vector) and returns `d loss / d input`.
    ///
    /// A detached tape contributes nothing and yields a zero input gradient.
    pub fn backward(&self, params: &ParamSet, tape: &Tape, out_grad: &Matrix, grad: &mut [f64]) -> Result<Matrix> {
        if tape.version != params.version() {
            return Err(Error::StaleTape { recorded: tape.version, current: params.version() });
        }
        if out_grad.rows != tape.batch || out_grad.cols != self.output_width() {
            return Err(Error::DimensionMismatch { expected: tape.batch * self.output_width(), got: out_grad.data.len() });
        }
        if grad.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), got: grad.len() });
        }
        if tape.detached {
            return Ok(Matrix::zeros(tape.batch, self.input_width()));
        }
        let weights = &params.as_slice()[self.range.clone()];
        let grad = &mut grad[self.range.clone()];
        let batch = tape.batch;
        let last = self.layers.len() - 1;

        let mut g = output_backward(self.output, &tape.pre[last], &tape.output, out_grad);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if li < last {
                let pre = &tape.pre[li];
                match self.activation {
                    Activation::Relu => {
                        for (gv, &p) in g.data.iter_mut().zip(&pre.data) {
                            if p <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for (gv, &p) in g.data.iter_mut().zip(&pre.data) {
                            let t = math::tanh(p);
                            *gv *= 1.0 - t * t;
                        }
                    }
                }
            }
            let x = &tape.inputs[li];
            gemm(layer.fan_out, batch, layer.fan_in, 1.0, &g.data, true, &x.data, false, 1.0, &mut grad[layer.weight..layer.bias]);
            let gb = &mut grad[layer.bias..layer.bias + layer.fan_out];
            for r in 0..batch {
                for (b, v) in gb.iter_mut().zip(g.row(r)) {
                    *b += v;
                }
            }
            let mut gx = Matrix::zeros(batch, layer.fan_in);
            gemm(batch, layer.fan_out, layer.fan_in, 1.0, &g.data, false, &weights[layer.weight..layer.bias], false, 0.0, &mut gx.data);
            g = gx;
        }
        Ok(g)
    }
}

fn apply_output(transform: OutputTransform, y: &Matrix) -> Matrix {
    match transform {
        OutputTransform::Identity => y.clone(),
        OutputTransform::SoftplusStd => {
            let mut out = y.clone();
            out.data.iter_mut().for_each(|v| *v = math::softplus(*v) + STD_FLOOR);
            out
        }
        OutputTransform::Softmax => {
            let mut out = y.clone();
            for r in 0..out.rows {
                let row = out.row_mut(r);
                let lse = math::log_sum_exp(row);
                row.iter_mut().for_each(|v| *v = math::exp(*v - lse));
            }
            out
        }
    }
}

fn output_backward(transform: OutputTransform, pre: &Matrix, out: &Matrix, g: &Matrix) -> Matrix {
    match transform {
        OutputTransform::Identity => g.clone(),
        OutputTransform::SoftplusStd => {
            let mut gx = g.clone();
            for (v, &p) in gx.data.iter_mut().zip(&pre.data) {
                *v *= math::sigmoid(p);
            }
            gx
        }
        OutputTransform::Softmax => {
            let mut gx = g.clone();
            for r in 0..g.rows {
                let y = out.row(r);
                let dot: f64 = y.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                for (c, v) in gx.row_mut(r).iter_mut().enumerate() {
                    *v = y[c] * (g.get(r, c) - dot);
                }
            }
            gx
        }
    }
}
