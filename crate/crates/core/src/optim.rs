//! SGD with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// v ← momentum·v + grad; param ← param − lr·v. Grads are zeroed after
/// each step.
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<SgdMomentum> {
        if lr < 0.0 {
            return Err(Error::invalid("lr", format!("must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must be in [0, 1), got {momentum}"),
            ));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} params, step got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!("missing gradient for param of shape {:?}", p.shape()))
            })?;
            let mut values = p.to_vec();
            for i in 0..values.len() {
                v[i] = self.momentum * v[i] + grad[i];
                values[i] -= self.lr * v[i];
            }
            p.set_values(&values);
            p.zero_grad();
        }
        Ok(())
    }
}
