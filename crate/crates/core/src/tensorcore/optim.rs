use serde::{Deserialize, Serialize};

use super::network::ParamTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl SgdConfig {
    /// Pretraining settings: Nesterov, momentum 0.8, weight decay 1e-4.
    pub fn pretrain() -> Self {
        SgdConfig {
            momentum: 0.8,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }

    /// Fine-tuning settings: Nesterov, momentum 0.9, weight decay 1e-4.
    pub fn finetune() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }
}

/// SGD with (optionally Nesterov) momentum. Momentum buffers are matched to
/// parameters by position, so callers must pass parameters in the same
/// order on every step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            buffers: Vec::new(),
        }
    }

    /// Applies one update and clears all gradients. Weight decay is added to
    /// the gradient (`g += wd·w`) of decaying parameters before the momentum
    /// update. Frozen parameters are left untouched. A non-finite gradient
    /// aborts the whole step before any parameter changes.
    pub fn step(&mut self, params: &mut [&mut ParamTensor], lr: f64) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if !p.frozen {
                if let Some(j) = p.grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter tensor {i} at element {j} is {}",
                        p.grad[j]
                    )));
                }
            }
        }
        if self.buffers.len() != params.len()
            || self.buffers.iter().zip(params.iter()).any(|(b, p)| b.len() != p.len())
        {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let SgdConfig {
            momentum,
            weight_decay,
            nesterov,
        } = self.config;
        for (p, buf) in params.iter_mut().zip(self.buffers.iter_mut()) {
            if p.frozen {
                p.zero_grad();
                continue;
            }
            let wd = if p.decay { weight_decay } else { 0.0 };
            let ParamTensor { values, grad, .. } = &mut **p;
            for ((w, g), b) in values.iter_mut().zip(grad.iter_mut()).zip(buf.iter_mut()) {
                let mut d = *g + wd * *w;
                if momentum != 0.0 {
                    *b = momentum * *b + d;
                    d = if nesterov { d + momentum * *b } else { *b };
                }
                *w -= lr * d;
                *g = 0.0;
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.buffers.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, g: f64) -> ParamTensor {
        let mut p = ParamTensor::new(vec![w], (1, 1), true);
        p.grad[0] = g;
        p
    }

    #[test]
    fn zero_grad_zero_momentum_is_noop() {
        let mut p = scalar(1.5, 0.0);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: true,
        });
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.values[0], 1.5);
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(5.0, 2.0);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: false,
        });
        opt.step(&mut [&mut p], 1.0).unwrap();
        assert_eq!(p.values[0], 3.0);
        assert_eq!(p.grad[0], 0.0);
    }

    #[test]
    fn frozen_is_bit_identical() {
        let mut p = scalar(0.123456789, 10.0);
        p.frozen = true;
        let mut opt = Sgd::new(SgdConfig::finetune());
        opt.step(&mut [&mut p], 0.5).unwrap();
        assert_eq!(p.values[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn nonfinite_gradient_aborts() {
        let mut a = scalar(1.0, 1.0);
        let mut b = scalar(1.0, f64::NAN);
        let mut opt = Sgd::new(SgdConfig::finetune());
        assert!(matches!(
            opt.step(&mut [&mut a, &mut b], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(a.values[0], 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = ½ Σ c_i (w_i − t_i)², minimizer w = t.
        let c = [1.0, 2.0, 0.5];
        let t = [3.0, -1.0, 0.25];
        let mut p = ParamTensor::new(vec![0.0; 3], (1, 3), false);
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            nesterov: true,
        });
        for _ in 0..100 {
            for i in 0..3 {
                p.grad[i] = c[i] * (p.values[i] - t[i]);
            }
            opt.step(&mut [&mut p], 0.3).unwrap();
        }
        for i in 0..3 {
            assert!((p.values[i] - t[i]).abs() < 1e-6, "{:?}", p.values);
        }
    }
}
