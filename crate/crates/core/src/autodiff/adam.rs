use super::params::ParamSet;
use super::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam optimizer state, one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &super::params::Param| vec![0.0; p.value.len()];
        Adam {
            lr,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[k]` belongs to the k-th parameter; frozen
    /// parameters are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (k, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if !param.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, g), mk), vk) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mk = BETA1 * *mk + (1.0 - BETA1) * g;
                *vk = BETA2 * *vk + (1.0 - BETA2) * g * g;
                let mhat = *mk / bias1;
                let vhat = *vk / bias2;
                *w -= self.lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(w), true);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = single(1.25);
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..10 {
            opt.step(&mut p, &[Tensor::scalar(0.0)]);
        }
        assert_eq!(p.get(0).value.item(), 1.25);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = single(0.0);
        let mut opt = Adam::new(&p, 0.01);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            opt.step(&mut p, &[Tensor::scalar(-3.0)]);
            let w = p.get(0).value.item();
            last_step = w - prev;
            prev = w;
        }
        assert!((last_step - 0.01).abs() < 1e-6, "{last_step}");
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = single(0.0);
        let mut opt = Adam::new(&p, 0.05);
        let mut converged_at = None;
        for step in 0..2000 {
            let w = p.get(0).value.item();
            if (w - 3.0).abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
            opt.step(&mut p, &[Tensor::scalar(2.0 * (w - 3.0))]);
        }
        assert!((p.get(0).value.item() - 3.0).abs() < 1e-3);
        assert!(converged_at.is_some());
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut p = ParamSet::new();
        p.push("frozen", Tensor::scalar(2.0), false);
        let mut opt = Adam::new(&p, 0.5);
        opt.step(&mut p, &[Tensor::scalar(1.0)]);
        assert_eq!(p.get(0).value.item(), 2.0);
    }
}
