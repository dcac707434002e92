use crate::error::{ensure, Result};
use crate::tensor::DenseTensor;

/// Heavy-ball SGD with a linearly decaying learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_min: f64,
    /// Amount subtracted from the learning rate after every step.
    pub decay: f64,
    /// Largest global gradient norm applied per step; longer gradients are
    /// rescaled to this length. Zero disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            lr_min: 1e-6,
            decay: 0.0,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    /// Decay chosen so the rate reaches `lr_min` after `total_steps` steps.
    pub fn with_linear_schedule(mut self, total_steps: usize) -> Self {
        self.decay = if total_steps == 0 {
            0.0
        } else {
            (self.lr - self.lr_min).max(0.0) / total_steps as f64
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub velocity: Vec<DenseTensor>,
    pub steps: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[DenseTensor]) -> Self {
        Self {
            config,
            lr: config.lr,
            velocity: params
                .iter()
                .map(|p| DenseTensor::zeros(p.shape().to_vec()))
                .collect(),
            steps: 0,
        }
    }
}

/// `v ← μ v − η g; θ ← θ + v; η ← max(η − decay, η_min)`, with `g` first
/// rescaled to at most `clip_norm` in global norm when clipping is on.
pub fn sgd_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    state: &mut OptimizerState,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.velocity.len(),
        Shape,
        "{} parameters, {} gradients, {} velocities",
        params.len(),
        grads.len(),
        state.velocity.len()
    );
    let mu = state.config.momentum;
    let mut lr = state.lr;
    if state.config.clip_norm > 0.0 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > state.config.clip_norm {
            lr *= state.config.clip_norm / norm;
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        ensure!(
            p.shape() == g.shape() && p.shape() == v.shape(),
            Shape,
            "gradient shape {:?} does not match parameter {:?}",
            g.shape(),
            p.shape()
        );
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi - lr * gi;
            *x += *vi;
        }
    }
    state.lr = (state.lr - state.config.decay).max(state.config.lr_min);
    state.steps += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![DenseTensor::vector(vec![1.0])];
        let g = vec![DenseTensor::vector(vec![1.0])];
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.5,
            lr_min: 0.0,
            decay: 0.0,
            clip_norm: 0.0,
        };
        let mut s = OptimizerState::new(cfg, &p);
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut s).unwrap();
        // v = 0.5·(−0.1) − 0.1 = −0.15
        assert!((p[0].item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn schedule_reaches_the_floor() {
        let cfg = OptimizerConfig::default().with_linear_schedule(10);
        let mut p = vec![DenseTensor::vector(vec![0.0])];
        let g = vec![DenseTensor::vector(vec![0.0])];
        let mut s = OptimizerState::new(cfg, &p);
        for _ in 0..10 {
            sgd_step(&mut p, &g, &mut s).unwrap();
        }
        assert!((s.lr - 1e-6).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(s.lr, 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![DenseTensor::vector(vec![0.0, 1.0])];
        let mut s = OptimizerState::new(OptimizerConfig::default(), &p);
        assert!(sgd_step(&mut p, &[DenseTensor::vector(vec![0.0])], &mut s).is_err());
    }

    #[test]
    fn long_gradients_are_shortened() {
        let mut p = vec![DenseTensor::vector(vec![0.0, 0.0])];
        let g = vec![DenseTensor::vector(vec![30.0, 40.0])];
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.0,
            lr_min: 0.0,
            decay: 0.0,
            clip_norm: 5.0,
        };
        let mut s = OptimizerState::new(cfg, &p);
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert!((p[0].data()[0] + 0.3).abs() < 1e-15);
        assert!((p[0].data()[1] + 0.4).abs() < 1e-15);
        assert_eq!(s.lr, 0.1);
        let short = vec![DenseTensor::vector(vec![3.0, 0.0])];
        sgd_step(&mut p, &short, &mut s).unwrap();
        assert!((p[0].data()[0] + 0.6).abs() < 1e-15);
    }
}
