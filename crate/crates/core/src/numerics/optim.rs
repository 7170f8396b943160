use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Parameter update rule.
pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()>;
    fn learning_rate(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd { momentum: f64 },
}

fn check_shapes<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::config(format!(
            "optimizer got {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::config(format!(
                "gradient {i} shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

/// Bias-corrected Adam. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl<T: Real> Optimizer<T> for Adam {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::config("optimizer state does not match parameter list"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv.as_f64();
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = T::from_f64(pv.as_f64() - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), u) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *u = self.momentum * *u + gv.as_f64();
                *pv = T::from_f64(pv.as_f64() - self.lr * *u);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Boxed optimizer of the requested kind.
pub fn make_optimizer<T: Real>(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer<T> + Send> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::Sgd { momentum } => Box::new(Sgd::new(lr, momentum)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::<f64>::new(vec![3], vec![0.3, -7.0, 1e-3]).unwrap()];
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &g).unwrap();
        let want = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (got, want) in p[0].data().iter().zip(want) {
            // eps perturbs the step by at most lr * eps / |g|.
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f32>::new(vec![2], vec![0.25, -4.0]).unwrap()];
        let g = vec![Tensor::<f32>::zeros(vec![2]).unwrap()];
        let mut opt = Adam::new(0.1);
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p[0].data(), &[0.25, -4.0]);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut x = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = Adam::new(0.1);
        for _ in 0..50 {
            let g = vec![Tensor::scalar(2.0 * x[0].data()[0])];
            opt.step(&mut x, &g).unwrap();
        }
        assert!(x[0].data()[0].abs() < 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(vec![2]).unwrap()];
        let g = vec![Tensor::<f32>::zeros(vec![3]).unwrap()];
        assert!(Optimizer::<f32>::step(&mut Adam::new(0.1), &mut p, &g).is_err());
        assert!(Optimizer::<f32>::step(&mut Sgd::new(0.1, 0.0), &mut p, &g).is_err());
    }

    #[test]
    fn sgd_step_is_lr_times_grad() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let g = vec![Tensor::<f64>::new(vec![2], vec![0.5, -1.0]).unwrap()];
        Sgd::new(0.1, 0.0).step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.95, 1.1]);
    }
}
