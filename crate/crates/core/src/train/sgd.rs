use ndarray::Array1;

use crate::detcore::ParamSet;
use crate::Real;

/// SGD with heavy-ball momentum and L2 weight decay on every parameter:
/// `v = m * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Array1<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(params: &ParamSet<F>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Array1<F>], lr: f64) {
        let (m, wd, lr) = (F::lit(self.momentum), F::lit(self.weight_decay), F::lit(lr));
        for ((w, g), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            ndarray::Zip::from(w).and(g).and(v).for_each(|w, &g, v| {
                *v = m * *v + (g + wd * *w);
                *w -= lr * *v;
            });
        }
    }
}
