use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::mat::Mat;
use super::tape::{BatchStats, Tape, Var};

/// Running statistics decay: `running = 0.9 * running + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Batch normalization uses batch statistics in `Train` and running
/// statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Mat,
    pub beta: Mat,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    pub fn new(dim: usize) -> Self {
        BatchNormParams {
            gamma: Mat::filled(1, dim, 1.0),
            beta: Mat::zeros(1, dim),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    /// Folds one batch into the running statistics (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.rows as f64;
        let correction = if stats.rows > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] =
                BN_MOMENTUM * self.running_mean[j] + (1.0 - BN_MOMENTUM) * stats.mean[j];
            self.running_var[j] =
                BN_MOMENTUM * self.running_var[j] + (1.0 - BN_MOMENTUM) * stats.var[j] * correction;
        }
    }
}

/// `activation(batchnorm(W x + b))`, batch norm optional.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    /// `out_dim x in_dim`
    pub weight: Mat,
    /// `1 x out_dim`
    pub bias: Mat,
    pub norm: Option<BatchNormParams>,
    pub activation: Activation,
}

impl DenseLayerParams {
    /// Uniform init with bound `sqrt(6 / in)` for ReLU layers and
    /// `1 / sqrt(in)` otherwise; biases start at zero.
    pub fn init<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        norm: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = match activation {
            Activation::Relu => (6.0 / in_dim as f64).sqrt(),
            Activation::Identity => 1.0 / (in_dim as f64).sqrt(),
        };
        let weight = Mat {
            rows: out_dim,
            cols: in_dim,
            data: (0..out_dim * in_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        };
        DenseLayerParams {
            weight,
            bias: Mat::zeros(1, out_dim),
            norm: norm.then(|| BatchNormParams::new(out_dim)),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite()
            && self.bias.is_finite()
            && self.norm.as_ref().is_none_or(|n| {
                n.gamma.is_finite()
                    && n.beta.is_finite()
                    && n.running_mean.iter().all(|v| v.is_finite())
                    && n.running_var.iter().all(|v| v.is_finite() && *v >= 0.0)
            })
    }
}

/// Tape handles for one layer's trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayerParams>,
}

impl Mlp {
    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayerParams::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayerParams::out_dim)
    }

    pub fn check_chain(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::config(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundLayer> {
        let leaf = |tape: &mut Tape, m: &Mat| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.input(m.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| BoundLayer {
                weight: leaf(tape, &l.weight),
                bias: leaf(tape, &l.bias),
                gamma: l.norm.as_ref().map(|n| leaf(tape, &n.gamma)),
                beta: l.norm.as_ref().map(|n| leaf(tape, &n.beta)),
            })
            .collect()
    }

    /// Runs the layers on the tape. Training mode also returns each
    /// normalized layer's batch statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[BoundLayer],
        mut x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Option<BatchStats>>)> {
        let mut stats = Vec::with_capacity(self.layers.len());
        for (layer, b) in self.layers.iter().zip(bound) {
            x = tape.linear(x, b.weight, b.bias)?;
            let mut s = None;
            if let (Some(norm), Some(g), Some(bt)) = (&layer.norm, b.gamma, b.beta) {
                x = match mode {
                    Mode::Train => {
                        let (y, st) = tape.batch_norm(x, g, bt)?;
                        s = Some(st);
                        y
                    }
                    Mode::Eval => {
                        tape.batch_norm_fixed(x, g, bt, &norm.running_mean, &norm.running_var)?
                    }
                };
            }
            if layer.activation == Activation::Relu {
                x = tape.relu(x);
            }
            stats.push(s);
        }
        Ok((x, stats))
    }

    pub fn update_running(&mut self, stats: &[Option<BatchStats>]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            if let (Some(norm), Some(s)) = (&mut layer.norm, s) {
                norm.update_running(s);
            }
        }
    }

    /// `(name suffix, tensor)` for every trainable tensor, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.weight"), &l.weight));
            out.push((format!("{i}.bias"), &l.bias));
            if let Some(n) = &l.norm {
                out.push((format!("{i}.gamma"), &n.gamma));
                out.push((format!("{i}.beta"), &n.beta));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }
}

impl BoundLayer {
    /// Vars in the same order as [`Mlp::trainable`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.weight, self.bias];
        v.extend(self.gamma);
        v.extend(self.beta);
        v
    }
}

/// Plain forward pass over a layer sequence.
pub fn mlp_forward(params: &[DenseLayerParams], input: &Mat, mode: Mode) -> Result<Mat> {
    let mlp = Mlp {
        layers: params.to_vec(),
    };
    mlp.check_chain()?;
    if input.cols != mlp.in_dim() {
        return Err(Error::config(format!(
            "input width {} but first layer expects {}",
            input.cols,
            mlp.in_dim()
        )));
    }
    let mut tape = Tape::new(Exec::default());
    let bound = mlp.bind(&mut tape, false);
    let x = tape.input(input.clone());
    let (y, _) = mlp.forward(&mut tape, &bound, x, mode)?;
    Ok(tape.value(y).clone())
}
