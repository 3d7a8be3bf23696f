use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{gelu, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn apply_var(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Gelu => v.gelu(),
            Activation::Relu => v.relu(),
        }
    }
}

/// Fully connected stack applied row-wise. Hidden layers with equal input and
/// output width get a skip connection when `residual` is set; the last layer
/// is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DMatrix<f64>>,
    activation: Activation,
    residual: bool,
}

impl MlpParams {
    /// All-zero parameters. `widths` includes input and output sizes.
    pub fn zeros(widths: &[usize], activation: Activation, residual: bool) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| DMatrix::zeros(w[0], w[1])).collect();
        let biases = widths[1..].iter().map(|&w| DMatrix::zeros(1, w)).collect();
        Ok(MlpParams {
            widths: widths.to_vec(),
            weights,
            biases,
            activation,
            residual,
        })
    }

    /// Weights ~ Normal(0, std²), biases zero.
    pub fn normal<R: Rng>(
        widths: &[usize],
        activation: Activation,
        residual: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(widths, activation, residual)?;
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for w in &mut p.weights {
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Ok(p)
    }

    /// Weights ~ Normal(0, 1/fan_in); the last layer starts at zero when
    /// `zero_last` is set.
    pub fn lecun<R: Rng>(
        widths: &[usize],
        activation: Activation,
        residual: bool,
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(widths, activation, residual)?;
        let last = p.weights.len() - 1;
        for (l, w) in p.weights.iter_mut().enumerate() {
            if zero_last && l == last {
                continue;
            }
            let dist = Normal::new(0.0, 1.0 / (w.nrows() as f64).sqrt()).unwrap();
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Ok(p)
    }

    /// Rebuilds parameters from tensors in [`MlpParams::tensors`] order.
    pub fn from_tensors(
        widths: &[usize],
        activation: Activation,
        residual: bool,
        tensors: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let mut p = Self::zeros(widths, activation, residual)?;
        if tensors.len() != 2 * p.weights.len() {
            return Err(Error::shape("parameter tensor count"));
        }
        for (slot, t) in p.tensors_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &DMatrix<f64> {
        &self.biases[layer]
    }

    /// `[w0, b0, w1, b1, ...]`
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn skip(&self, layer: usize) -> bool {
        self.residual && layer + 1 < self.weights.len() && self.widths[layer] == self.widths[layer + 1]
    }

    /// Plain forward pass without recording.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.widths[0] {
            return Err(Error::shape(format!(
                "mlp input has {} columns, expected {}",
                x.ncols(),
                self.widths[0]
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for l in 0..=last {
            let mut z = &h * &self.weights[l];
            for mut r in z.row_iter_mut() {
                r += &self.biases[l];
            }
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
                if self.skip(l) {
                    z += &h;
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Registers every tensor as a parameter leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'_, 't> {
        let vars = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        BoundMlp { params: self, vars }
    }
}

/// Parameters of an [`MlpParams`] placed on a tape.
pub struct BoundMlp<'p, 't> {
    params: &'p MlpParams,
    vars: Vec<Var<'t>>,
}

impl<'p, 't> BoundMlp<'p, 't> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let p = self.params;
        if x.shape().1 != p.widths[0] {
            return Err(Error::shape("mlp input width"));
        }
        let last = p.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let z = h.matmul(self.vars[2 * l])?.add_row(self.vars[2 * l + 1])?;
            h = if l < last {
                let a = p.activation.apply_var(z);
                if p.skip(l) {
                    a.add(h)?
                } else {
                    a
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Gradients in [`MlpParams::tensors`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<DMatrix<f64>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}
