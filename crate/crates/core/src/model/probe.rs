use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub d_in: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
}

/// Single gated-MLP layer mapping `d_in` features to vocabulary logits:
/// `W_down(silu(W_gate x + b_gate) ⊙ (W_up x + b_up)) + b_down`.
#[derive(Debug, Clone)]
pub struct GatedProbe<T: Scalar = f32> {
    pub config: ProbeConfig,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_gate: Tensor<T>,
    pub b_up: Tensor<T>,
    pub b_down: Tensor<T>,
}

impl<T: Scalar> GatedProbe<T> {
    /// Random input projections; the output projection and its bias start
    /// at zero so the probe initially predicts no change.
    pub fn new(config: ProbeConfig, seed: u64) -> Result<Self> {
        let ProbeConfig {
            d_in,
            d_ff,
            vocab_size,
        } = config;
        if d_in == 0 || d_ff == 0 || vocab_size == 0 {
            return Err(Error::Config("probe dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_in as f64).sqrt();
        let p = |t: Tensor<T>| t.with_requires_grad(true);
        Ok(GatedProbe {
            config,
            w_gate: p(Tensor::randn(&[d_in, d_ff], std, &mut rng)),
            w_up: p(Tensor::randn(&[d_in, d_ff], std, &mut rng)),
            w_down: p(Tensor::zeros(&[d_ff, vocab_size])),
            b_gate: p(Tensor::zeros(&[d_ff])),
            b_up: p(Tensor::zeros(&[d_ff])),
            b_down: p(Tensor::zeros(&[vocab_size])),
        })
    }

    /// Builds a probe from explicit weights after checking their shapes.
    pub fn from_weights(
        w_gate: Tensor<T>,
        w_up: Tensor<T>,
        w_down: Tensor<T>,
        b_gate: Tensor<T>,
        b_up: Tensor<T>,
        b_down: Tensor<T>,
    ) -> Result<Self> {
        let (d_in, d_ff) = match w_gate.shape() {
            [a, b] => (*a, *b),
            s => return Err(Error::shape("probe", s, &[0, 0])),
        };
        let vocab_size = w_down.last_dim();
        let config = ProbeConfig {
            d_in,
            d_ff,
            vocab_size,
        };
        let probe = GatedProbe {
            config,
            w_gate,
            w_up,
            w_down,
            b_gate,
            b_up,
            b_down,
        };
        probe.check_shapes()?;
        Ok(probe)
    }

    fn check_shapes(&self) -> Result<()> {
        let ProbeConfig {
            d_in,
            d_ff,
            vocab_size,
        } = self.config;
        for (name, t, want) in [
            ("w_gate", &self.w_gate, vec![d_in, d_ff]),
            ("w_up", &self.w_up, vec![d_in, d_ff]),
            ("w_down", &self.w_down, vec![d_ff, vocab_size]),
            ("b_gate", &self.b_gate, vec![d_ff]),
            ("b_up", &self.b_up, vec![d_ff]),
            ("b_down", &self.b_down, vec![vocab_size]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::IncompatibleShapes(format!(
                    "{name}: expected {want:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_gate".into(), &self.w_gate),
            ("w_up".into(), &self.w_up),
            ("w_down".into(), &self.w_down),
            ("b_gate".into(), &self.b_gate),
            ("b_up".into(), &self.b_up),
            ("b_down".into(), &self.b_down),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_gate".into(), &mut self.w_gate),
            ("w_up".into(), &mut self.w_up),
            ("w_down".into(), &mut self.w_down),
            ("b_gate".into(), &mut self.b_gate),
            ("b_up".into(), &mut self.b_up),
            ("b_down".into(), &mut self.b_down),
        ]
    }

    /// Applies the probe to each row of `x: [T×d_in]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.last_dim() != self.config.d_in {
            return Err(Error::shape("forward_probe", x.shape(), self.w_gate.shape()));
        }
        let gate = x.matmul(&self.w_gate)?.add_row(&self.b_gate)?.silu();
        let up = x.matmul(&self.w_up)?.add_row(&self.b_up)?;
        gate.mul(&up)?.matmul(&self.w_down)?.add_row(&self.b_down)
    }
}
