use crate::autodiff::tape::{Gradients, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::linalg::{matmul_t_into, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One affine layer: `y = W x + b` with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Fully connected network: tanh on hidden layers, identity on the output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Tape handles for the parameters of one [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpParams {
    /// `sizes = [in, hidden.., out]`; weights uniform in `±1/√fan_in`, biases likewise.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let weight = Matrix::from_vec(fan_out, fan_in, draw(fan_in * fan_out))?;
                let bias = Matrix::from_vec(1, fan_out, draw(fan_out))?;
                Ok(Layer { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        let mut p = Self::init(sizes, 0)?;
        for m in p.params_mut() {
            m.as_mut_slice().fill(0.0);
        }
        Ok(p)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(shape_err(
                    format!("layer {k} bias 1x{}", l.out_dim()),
                    format!("{:?}", l.bias.shape()),
                ));
            }
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(shape_err(
                    format!("layer {} input {}", k + 1, w[0].out_dim()),
                    w[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in, hidden.., out]`
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Weight, bias, weight, bias, ... in layer order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Matrix::row_vector(input))?.into_vec())
    }

    /// Forward pass for a batch with one input per row.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return Err(shape_err(format!("input dim {}", self.in_dim()), input.cols()));
        }
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = Matrix::zeros(h.rows(), layer.out_dim());
            let b = layer.bias.as_slice();
            for r in 0..next.rows() {
                next.row_mut(r).copy_from_slice(b);
            }
            matmul_t_into(&h, &layer.weight, &mut next);
            if k != last {
                next.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());
            }
            h = next;
        }
        Ok(h)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul_t(h, w)?;
            h = tape.add_row(lin, b)?;
            if k != last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Gradients in the same order as [`MlpParams::params`].
    pub fn grads(&self, grads: &Gradients) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)])
            .collect()
    }
}
