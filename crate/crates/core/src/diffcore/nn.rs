//! Dense feed-forward stacks shared by the rater, generator and discriminator.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffError, Graph, NodeId, Tensor};
use crate::seed;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

/// Serialized layer: shape `[in, out]`, row-major weights and the bias row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Leaky-ReLU MLP. The last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Graph handles for one registration of an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct MlpHandles {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpHandles {
    /// Weight/bias handles interleaved in [`Mlp::params`] order.
    pub fn params(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

impl Mlp {
    /// He-initialized stack over `widths = [in, hidden.., out]`. With
    /// `zero_output` the last layer starts at zero, so the untrained network
    /// is constant.
    pub fn new(widths: &[usize], seed: u64, zero_output: bool) -> Result<Self, DiffError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(DiffError::InvalidArgument(format!(
                "mlp widths {widths:?} need >= 2 positive entries"
            )));
        }
        let mut rng = seed::rng(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        if zero_output && i == last {
                            0.0
                        } else {
                            std * rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, DiffError> {
        if layers.is_empty() {
            return Err(DiffError::InvalidArgument("mlp without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(DiffError::ShapeMismatch {
                    op: "mlp_layers",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        for l in &layers {
            if l.bias.shape() != [1, l.weight.cols()] {
                return Err(DiffError::ShapeMismatch {
                    op: "mlp_bias",
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), DiffError> {
        if params.len() != 2 * self.layers.len() {
            return Err(DiffError::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        let mut it = params.into_iter();
        for l in &mut self.layers {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "set_params",
                    left: l.weight.shape().to_vec(),
                    right: w.shape().to_vec(),
                });
            }
            l.weight = w;
            l.bias = b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Adds the parameters to `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<MlpHandles, DiffError> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if trainable {
                weights.push(g.param(l.weight.clone())?);
                biases.push(g.param(l.bias.clone())?);
            } else {
                weights.push(g.input(l.weight.clone())?);
                biases.push(g.input(l.bias.clone())?);
            }
        }
        Ok(MlpHandles { weights, biases })
    }

    /// Forward pass. When `dropout` is `Some((rate, seed))` each hidden
    /// activation gets an independent mask derived from `seed`.
    pub fn forward(
        &self,
        g: &mut Graph,
        handles: &MlpHandles,
        x: NodeId,
        dropout: Option<(f64, u64)>,
    ) -> Result<NodeId, DiffError> {
        let width = g.value(x).cols();
        if width != self.input_width() {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_input",
                left: vec![g.value(x).rows(), width],
                right: vec![self.input_width(), self.layers[0].weight.cols()],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in handles.weights.iter().zip(&handles.biases).enumerate() {
            let z = g.matmul(h, *w)?;
            h = g.add_row(z, *b)?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
                if let Some((rate, s)) = dropout {
                    h = g.dropout(h, rate, seed::derive(s, i as u64))?;
                }
            }
        }
        Ok(h)
    }

    /// Convenience evaluation outside of training.
    pub fn eval(&self, x: &Tensor, dropout: Option<(f64, u64)>) -> Result<Tensor, DiffError> {
        let mut g = Graph::new();
        let h = self.register(&mut g, false)?;
        let xi = g.input(x.clone())?;
        let out = self.forward(&mut g, &h, xi, dropout)?;
        Ok(g.value(out).clone())
    }

    pub fn to_records(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .map(|l| LayerRecord {
                shape: [l.weight.rows(), l.weight.cols()],
                weights: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: &[LayerRecord]) -> Result<Self, DiffError> {
        let layers = records
            .iter()
            .map(|r| {
                Ok(Dense {
                    weight: Tensor::matrix(r.shape[0], r.shape[1], r.weights.clone())?,
                    bias: Tensor::matrix(1, r.shape[1], r.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>, DiffError>>()?;
        let mlp = Self::from_layers(layers)?;
        if !mlp.is_finite() {
            return Err(DiffError::NonFinite { op: "from_records" });
        }
        Ok(mlp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_gives_constant_network() {
        let mlp = Mlp::new(&[3, 8, 2], 1, true).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let y = mlp.eval(&x, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn records_round_trip() {
        let mlp = Mlp::new(&[2, 5, 3, 1], 9, false).unwrap();
        let back = Mlp::from_records(&mlp.to_records()).unwrap();
        assert_eq!(mlp, back);
        assert_eq!(back.widths(), vec![2, 5, 3, 1]);
    }

    #[test]
    fn input_width_is_checked() {
        let mlp = Mlp::new(&[2, 4, 1], 0, false).unwrap();
        assert!(mlp.eval(&Tensor::zeros(1, 3), None).is_err());
    }
}
