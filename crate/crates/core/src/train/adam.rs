use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates taken so far.
    pub t: u64,
    /// Per-parameter multiplier on `lr`, in store order.
    pub lr_scale: Vec<f64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            lr_scale: vec![1.0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` follows store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let lr = self.lr * self.lr_scale[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, 1e-12);
        opt.step(&mut store, &[Tensor::vector(vec![3.0, -0.01, 0.0])]);
        let w = store.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] - -1.9).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn lr_scale_multiplies_the_step() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.0]));
        store.add("b", Tensor::vector(vec![0.0]));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, 1e-12);
        opt.lr_scale[1] = 10.0;
        opt.step(&mut store, &[Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])]);
        let w: Vec<f64> = store.iter().map(|(_, t)| t.data()[0]).collect();
        assert!((w[0] + 0.1).abs() < 1e-9 && (w[1] + 1.0).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![4.0, -3.0]));
        let mut opt = Adam::new(&store, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let w = store.iter().next().unwrap().1.data().to_vec();
            let g = Tensor::vector(vec![2.0 * (w[0] - 1.0), 2.0 * (w[1] + 0.5)]);
            opt.step(&mut store, &[g]);
        }
        let w = store.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] + 0.5).abs() < 1e-3, "{w:?}");
    }
}
