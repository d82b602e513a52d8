//! SGD with momentum and decoupled-into-gradient weight decay, plus the
//! linear learning-rate and alignment-weight schedules.

use crate::models::Mlp;
use crate::tensor::Tensor;

/// Linear ramp of the learning-rate factor from 1 at `start` to `final_factor`
/// at `end`, flat outside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: usize,
    pub end: usize,
    pub final_factor: f64,
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        if step >= self.end {
            return self.final_factor;
        }
        if step <= self.start {
            return 1.0;
        }
        let t = (step - self.start) as f64 / (self.end - self.start) as f64;
        1.0 + t * (self.final_factor - 1.0)
    }
}

/// `min(1, step / warmup)`, with `warmup = 0` meaning no ramp.
pub fn warmup_factor(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    }
}

/// Rescales the gradient groups in place so their joint Euclidean norm is
/// at most `max_norm` (`0` disables). Returns the norm before clipping.
pub fn clip_joint_norm(groups: &mut [&mut [Tensor]], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            for t in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Mlp, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// `v ← μ v + (g + λ θ)`, `θ ← θ − lr·v`.
    pub fn step(&mut self, model: &mut Mlp, grads: &[Tensor], lr: f64) {
        for ((param, grad), vel) in model.params_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            start: 10,
            end: 20,
            final_factor: 0.1,
        };
        assert_eq!(s.factor(0), 1.0);
        assert_eq!(s.factor(10), 1.0);
        assert!((s.factor(15) - 0.55).abs() < 1e-15);
        assert_eq!(s.factor(20), 0.1);
        assert_eq!(s.factor(99), 0.1);
    }

    #[test]
    fn warmup_is_exact() {
        assert_eq!(warmup_factor(0, 100), 0.0);
        assert_eq!(warmup_factor(25, 100), 0.25);
        assert_eq!(warmup_factor(250, 100), 1.0);
        assert_eq!(warmup_factor(0, 0), 1.0);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut a = vec![Tensor::scalar(3.0)];
        let mut b = vec![Tensor::scalar(4.0)];
        let n = clip_joint_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0].item() - 0.6).abs() < 1e-15 && (b[0].item() - 0.8).abs() < 1e-15);
        let mut c = vec![Tensor::scalar(3.0)];
        clip_joint_norm(&mut [&mut c], 0.0);
        assert_eq!(c[0].item(), 3.0);
        clip_joint_norm(&mut [&mut c], 10.0);
        assert_eq!(c[0].item(), 3.0);
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut m = Mlp::zeros(&[1, 1], 0.1);
        m.layers[0].weight = Tensor::scalar(1.0);
        let mut opt = Sgd::new(&m, 0.5, 0.1);
        let grads = [Tensor::scalar(2.0), Tensor::scalar(0.0)];
        opt.step(&mut m, &grads, 0.1);
        // v = 2 + 0.1 = 2.1, w = 1 - 0.21
        assert!((m.layers[0].weight.item() - 0.79).abs() < 1e-15);
        opt.step(&mut m, &grads, 0.1);
        // v = 1.05 + 2 + 0.079 = 3.129
        assert!((m.layers[0].weight.item() - (0.79 - 0.3129)).abs() < 1e-15);
    }
}
