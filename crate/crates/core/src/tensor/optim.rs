//! AdamW with decoupled weight decay, and cosine annealing with warm restarts.

use super::Tensor;

/// AdamW optimizer state over a fixed-size parameter list.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(param_shapes: &[&[usize]], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay is decoupled: applied directly to the
    /// parameter, not folded into the gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            for i in 0..p.numel() {
                let pd = &mut p.data_mut()[i];
                *pd -= self.lr * self.weight_decay * *pd;
            }
            for i in 0..p.numel() {
                let gi = g.data()[i];
                m.data_mut()[i] = b1 * m.data()[i] + (1.0 - b1) * gi;
                v.data_mut()[i] = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing schedule with warm restarts (period T_0, growth T_mult).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub t_0: u64,
    pub t_mult: u64,
    pub eta_min: f64,
}

impl CosineRestarts {
    pub fn new(base_lr: f64, t_0: u64, t_mult: u64, eta_min: f64) -> Self {
        assert!(t_0 >= 1 && t_mult >= 1 && base_lr > 0.0 && eta_min >= 0.0);
        CosineRestarts {
            base_lr,
            t_0,
            t_mult,
            eta_min,
        }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        let mut t = epoch;
        let mut period = self.t_0;
        while t >= period {
            t -= period;
            period = period.saturating_mul(self.t_mult).max(period);
        }
        self.eta_min
            + 0.5
                * (self.base_lr - self.eta_min)
                * (1.0 + (std::f64::consts::PI * t as f64 / period as f64).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_only_step() {
        // param 1.0, grad 0, wd=0.1, lr=0.1 -> 0.99 after one step
        let mut opt = AdamW::new(&[&[1]], 0.1, 0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(0.0)];
        opt.step(&mut p, &g);
        assert!((p[0].item() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn constant_grad_decreases_param() {
        let mut opt = AdamW::new(&[&[1]], 0.01, 0.0);
        let mut p = vec![Tensor::scalar(0.5)];
        let g = vec![Tensor::scalar(1.0)];
        let mut prev = p[0].item();
        for _ in 0..20 {
            opt.step(&mut p, &g);
            assert!(p[0].item() < prev);
            prev = p[0].item();
        }
    }

    #[test]
    fn quadratic_descent() {
        // 10 steps on f(x)=x^2 from x=1 reduces f by >50% with lr=0.1
        let mut opt = AdamW::new(&[&[1]], 0.1, 0.0);
        let mut p = vec![Tensor::scalar(1.0)];
        for _ in 0..10 {
            let g = vec![Tensor::scalar(2.0 * p[0].item())];
            opt.step(&mut p, &g);
        }
        let f = p[0].item() * p[0].item();
        assert!(f < 0.5, "f={f}");
    }

    #[test]
    fn step_count_increases() {
        let mut opt = AdamW::new(&[&[1]], 0.1, 0.0);
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(0.1)];
        for i in 1..=5 {
            opt.step(&mut p, &g);
            assert_eq!(opt.step_count(), i);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineRestarts::new(0.001, 10, 2, 0.0);
        assert!((s.lr_at(0) - 0.001).abs() < 1e-15);
        // restart at T_0
        assert!((s.lr_at(10) - 0.001).abs() < 1e-15);
        // halfway through the first period
        assert!((s.lr_at(5) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_bounds() {
        let s = CosineRestarts::new(0.01, 7, 3, 0.001);
        for e in 0..70 {
            let lr = s.lr_at(e);
            assert!(lr >= s.eta_min - 1e-15 && lr <= s.base_lr + 1e-15, "epoch {e}: {lr}");
        }
    }
}
