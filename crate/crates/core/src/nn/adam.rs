use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. State is laid out to match the order in
/// which parameter slices are passed to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps_hat,
            ..
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.t);
        let bias2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps_hat);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_textbook_update() {
        // f(x) = ½ a x², gradient a·x
        let a = 3.0;
        let mut x = vec![1.7, -0.4];
        let cfg = AdamConfig::default();
        let grads: Vec<f64> = x.iter().map(|xi| a * xi).collect();
        let expected: Vec<f64> = x
            .iter()
            .zip(&grads)
            .map(|(xi, g)| {
                let m = (1.0 - cfg.beta1) * g;
                let v = (1.0 - cfg.beta2) * g * g;
                let m_hat = m / (1.0 - cfg.beta1);
                let v_hat = v / (1.0 - cfg.beta2);
                xi - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_hat)
            })
            .collect();
        let mut adam = Adam::new(cfg);
        adam.step(vec![&mut x[..]], &[grads]);
        for (got, want) in x.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut x = vec![5.0];
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let g = vec![2.0 * x[0]];
            adam.step(vec![&mut x[..]], &[g]);
        }
        assert!(x[0].abs() < 1e-2, "{}", x[0]);
    }
}
