//! SGD with momentum and weight decay, plus the polynomial LR decay and
//! the Gaussian ramp-up used for the unsupervised loss weight.

use crate::error::{Error, Result};

use super::Tensor;

/// Per-parameter momentum state for one network.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub buffers: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor], base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            base_lr,
            buffers: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        }
    }

    /// One descent step: g <- grad + wd * theta; buf <- m * buf + g;
    /// theta <- theta - lr * buf.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.buffers.len() || grads.len() != params.len() {
            return Err(Error::BadArgument {
                op: "sgd_step",
                msg: format!(
                    "{} params, {} buffers, {} grads",
                    params.len(),
                    self.buffers.len(),
                    grads.len()
                ),
            });
        }
        for ((p, buf), g) in params.iter_mut().zip(&mut self.buffers).zip(grads) {
            debug_assert_eq!(p.numel(), buf.numel());
            debug_assert_eq!(p.numel(), g.len());
            for i in 0..p.values.len() {
                let gd = g[i] + self.weight_decay * p.values[i];
                buf.values[i] = self.momentum * buf.values[i] + gd;
                p.values[i] -= lr * buf.values[i];
            }
        }
        Ok(())
    }
}

/// lr(iter) = base_lr * (1 - iter/max_iter)^0.9
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::BadArgument {
            op: "poly_lr",
            msg: "max_iter must be positive".into(),
        });
    }
    let t = (iter.min(max_iter)) as f64 / max_iter as f64;
    Ok(base_lr * (1.0 - t).powf(0.9))
}

/// target * exp(-5 * (1 - min(iter, ramp_len)/ramp_len)^2); saturates at
/// `target` once `iter >= ramp_len`.
pub fn ramp_up(iter: usize, ramp_len: usize, target: f64) -> f64 {
    if ramp_len == 0 {
        return target;
    }
    let t = (iter.min(ramp_len)) as f64 / ramp_len as f64;
    target * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 20_000, 0.1).unwrap(), 0.1);
        assert_eq!(poly_lr(20_000, 20_000, 0.1).unwrap(), 0.0);
        let mid = poly_lr(10_000, 20_000, 0.1).unwrap();
        // 0.1 * 0.5^0.9
        assert!((mid - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.053_588_673_126_814_66).abs() < 1e-12);
    }

    #[test]
    fn poly_lr_rejects_zero_horizon() {
        assert!(poly_lr(0, 0, 0.1).is_err());
    }

    #[test]
    fn poly_lr_strictly_decreasing() {
        let mut prev = poly_lr(0, 1000, 0.1).unwrap();
        for it in 1..=1000 {
            let lr = poly_lr(it, 1000, 0.1).unwrap();
            assert!(lr < prev, "lr must strictly decrease at {it}");
            prev = lr;
        }
    }

    #[test]
    fn ramp_up_values() {
        let start = ramp_up(0, 8000, 0.1);
        assert!((start - 0.1 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((start - 6.737_946_999_085_467e-4).abs() < 1e-12);
        assert_eq!(ramp_up(8000, 8000, 0.1), 0.1);
        assert_eq!(ramp_up(12_000, 8000, 0.1), 0.1);
    }

    #[test]
    fn ramp_up_non_decreasing() {
        let mut prev = ramp_up(0, 500, 0.1);
        for it in 1..700 {
            let v = ramp_up(it, 500, 0.1);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn sgd_matches_hand_rolled_update() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let mut st = SgdState::new(&params, 0.1, 0.9, 0.0001);
        let grads = vec![0.5, -0.25];
        // two steps with constant gradient
        let mut theta = [1.0, -2.0];
        let mut buf = [0.0, 0.0];
        for _ in 0..2 {
            st.step(&mut params, &[&grads], 0.1).unwrap();
            for i in 0..2 {
                let g = grads[i] + 0.0001 * theta[i];
                buf[i] = 0.9 * buf[i] + g;
                theta[i] -= 0.1 * buf[i];
            }
        }
        assert_eq!(params[0].values.as_slice(), &theta);
    }
}
