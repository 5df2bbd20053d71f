use super::{ParamStore, Tensor};

/// Adaptive moment estimation over every parameter in a store.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros_like(store.value(id))).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the accumulated gradients. When `clip_norm` is set the
    /// global gradient norm is rescaled to at most that value first.
    /// Gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, clip_norm: Option<f64>) {
        let scale = match clip_norm {
            Some(c) if c > 0.0 => {
                let n = store.grad_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tape;

    #[test]
    fn minimises_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![3.0, -2.0]).unwrap()).unwrap();
        let target = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let mut opt = Adam::new(&s, 0.05);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&s, id);
            let t = tape.constant(target.clone());
            let l = tape.mse(w, t).unwrap();
            tape.backward(l, &mut s).unwrap();
            opt.step(&mut s, Some(5.0));
        }
        assert!(s.value(id).max_abs_diff(&target) < 1e-2);
    }
}
