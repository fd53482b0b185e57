//! Adaptive-moment optimizer over a subset of a parameter store.

use ndarray::ArrayD;

use super::tape::Session;
use super::{ParamId, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct Adam<S: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<ParamId>,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    t: i32,
}

impl<S: Real> Adam<S> {
    pub fn new(store: &ParamStore<S>, ids: Vec<ParamId>, lr: f64) -> Self {
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.get(id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.get(id).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.5, // GAN-friendly default
            beta2: 0.999,
            eps: 1e-8,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Apply one update from the gradients accumulated in `sess`.
    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, sess: &Session<S>) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bias1 = S::from_f64(1.0 - self.beta1.powi(self.t));
        let bias2 = S::from_f64(1.0 - self.beta2.powi(self.t));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(grad) = sess.grad_of(id) else {
                continue;
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = store.get_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bias1;
                    let vhat = v / bias2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", arr1(&[4.0, -3.0]).into_dyn());
        let mut opt = Adam::new(&store, vec![id], 0.1);
        for _ in 0..500 {
            let mut sess = Session::new(&store);
            let x = sess.param(&store, id);
            let sq = sess.tape.square(x);
            let loss = sess.tape.sum_all(sq);
            sess.tape.backward(loss);
            opt.step(&mut store, &sess);
        }
        let x = store.get(id);
        assert!(x.iter().all(|&v| v.abs() < 1e-3), "{x:?}");
    }
}
