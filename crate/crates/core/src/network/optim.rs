use crate::blocks::ParamStore;
use crate::tensor::Float;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<Float>>,
    v: Vec<Vec<Float>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<Float>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`;
    /// `None` is treated as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&[Float]>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]) as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as Float;
                v[k] = vk as Float;
                let update = self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                *w -= update as Float;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(0.1, &store);
        let g = [0.5, -2.0];
        adam.step(&mut store, &[Some(&g)]);
        let d = store.get(crate::blocks::ParamId(0)).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![0.3, -7.25, 1e-3]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(0.0, &store);
        for _ in 0..5 {
            adam.step(&mut store, &[Some(&[1.0, -3.0, 0.25])]);
        }
        assert_eq!(store, before);
    }
}
