//! Adaptive moment estimation with global gradient-norm clipping.

use super::params::ParamSet;
use super::Elem;
use ndarray::ArrayD;

pub struct Adam<E: Elem> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    step: u64,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
}

impl<E: Elem> Adam<E> {
    /// Gradient-norm clip fixed at 1000 across the project.
    pub const CLIP_NORM: f64 = 1000.0;

    pub fn new(params: &ParamSet<E>, lr: f64) -> Self {
        let m = (0..params.len())
            .map(|i| ArrayD::zeros(params.value_at(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| ArrayD::zeros(params.value_at(i).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Self::CLIP_NORM,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` aligns with parameter order; `None` entries
    /// are exact zeros. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet<E>, grads: &[Option<ArrayD<E>>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count");
        let mut sq = 0.0f64;
        for g in grads.iter().flatten() {
            sq += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let lr_t = self.lr * bc2.sqrt() / bc1;
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let (ob1, ob2) = (E::from_f64(1.0 - self.beta1), E::from_f64(1.0 - self.beta2));
        let eps = E::from_f64(self.eps);
        let lr_e = E::from_f64(lr_t);
        let scale_e = E::from_f64(scale);

        for (i, gopt) in grads.iter().enumerate() {
            let Some(g) = gopt else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_at_mut(i);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &graw| {
                let gc = graw * scale_e;
                *m = b1 * *m + ob1 * gc;
                *v = b2 * *v + ob2 * gc * gc;
                *p = *p - lr_e * *m / (v.sqrt() + eps);
            });
        }
        norm
    }
}
