use crate::error::Result;
use crate::model::ModelParams;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + g + weight_decay * theta`, `theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(layout: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: layout.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }

    /// Replace the momentum buffer, e.g. when resuming.
    pub fn set_velocity(&mut self, velocity: ModelParams) -> Result<()> {
        self.velocity.check_layout(&velocity)?;
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) -> Result<()> {
        params.check_layout(grad)?;
        params.check_layout(&self.velocity)?;
        let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grad.tensors())
            .zip(self.velocity.tensors_mut())
        {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
