use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Graph, NetError, ParamId, ParamStore, Result, Tensor, Var};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// Fully connected layer, weights stored as `[fan_in, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, fan_in, fan_out),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.dense(x, w, b)
    }
}

/// `x + fc2(relu(fc1(x)))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ResidualBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            fc1: Dense::new(store, &format!("{name}.fc1"), width, width, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), width, width, rng),
        }
    }

    /// Builds a block from existing layers, checking that it maps a width to itself.
    pub fn from_layers(fc1: Dense, fc2: Dense) -> Result<Self> {
        if fc1.fan_in != fc2.fan_out || fc1.fan_out != fc2.fan_in {
            return Err(NetError::WidthMismatch {
                input: fc1.fan_in,
                output: fc2.fan_out,
            });
        }
        Ok(Self { fc1, fc2 })
    }

    pub fn width(&self) -> usize {
        self.fc1.fan_in
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = g.shape(x).last().copied().unwrap_or(0);
        if width != self.width() {
            return Err(NetError::WidthMismatch {
                input: width,
                output: self.width(),
            });
        }
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}
