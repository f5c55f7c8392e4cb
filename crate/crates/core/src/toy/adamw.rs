use serde::{Deserialize, Serialize};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamW {
    /// One update of `params` in place. `step` counts from 1.
    ///
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(
        &self,
        params: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        step: u64,
        lr: f64,
    ) {
        debug_assert!(step >= 1);
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Linear decay from `base` at step 0 to zero at `total_steps`.
pub fn linear_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_textbook_adam_without_decay() {
        // scalar Adam on f(x) = (x - 3)^2, stepped by hand
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 0.1;
        let mut x = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);

        let mut rx = 0.0f64;
        let (mut rm, mut rv) = (0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * (x[0] - 3.0);
            opt.update(&mut x, &[g], &mut m, &mut v, t, lr);

            let rg = 2.0 * (rx - 3.0);
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rx -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-15, "step {t}: {} vs {rx}", x[0]);
        }
        // first Adam step moves by ~lr regardless of gradient scale
        let mut y = [0.0];
        opt.update(&mut y, &[-1234.0], &mut [0.0], &mut [0.0], 1, lr);
        assert!((y[0] - lr).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let opt = AdamW {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = [2.0];
        opt.update(&mut p, &[0.0], &mut [0.0], &mut [0.0], 1, 0.1);
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let opt = AdamW::default();
        let mut p = [0.3, -1.7];
        opt.update(&mut p, &[5.0, -2.0], &mut [0.0; 2], &mut [0.0; 2], 1, 0.0);
        assert_eq!(p, [0.3, -1.7]);
    }

    #[test]
    fn schedule() {
        assert_eq!(linear_lr(1e-4, 0, 200), 1e-4);
        assert_eq!(linear_lr(1e-4, 50, 200), 1e-4 * (1.0 - 50.0 / 200.0));
        assert_eq!(linear_lr(1e-4, 200, 200), 0.0);
    }
}
