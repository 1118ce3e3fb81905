//! Adam with decoupled weight decay.
//!
//! Per step `t` (1-based), for every parameter `p` with gradient `g`:
//!
//! ```text
//! m = β1 m + (1 - β1) g
//! v = β2 v + (1 - β2) g²
//! p = p - lr · ( m / (1 - β1^t) / (sqrt(v / (1 - β2^t)) + ε) + wd · p )
//! ```
//!
//! Decay applies only to matrices (`ndim >= 2`); biases, norms and other
//! vectors are not decayed.

use medflip_tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64, weight_decay: f64) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            lr,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let wd = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + EPS) + wd * *pi;
                *pi -= self.lr * step;
            }
        }
    }
}
