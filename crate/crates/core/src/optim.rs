//! AdamW with per-group learning rates and global-norm gradient clipping.

use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub steps: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

/// Biases, norm parameters and positional tables are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("pos") || name.ends_with("pos_embed"))
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { steps: 0, m: zeros(), v: zeros() }
    }

    pub fn from_state(steps: u64, m: Vec<Matrix<T>>, v: Vec<Matrix<T>>) -> Self {
        Self { steps, m, v }
    }

    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.v
    }

    /// One update. `grads` must cover every parameter once; `lr` maps a
    /// group to its learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Matrix<T>)],
        lr: impl Fn(ParamGroup) -> f64,
        weight_decay: f64,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let eps = T::lit(EPS);
        for (id, g) in grads {
            let i = id.index();
            let (group, decay) = {
                let p = store.get(*id);
                (p.group, decays(&p.name))
            };
            let rate = lr(group);
            let step_size = T::lit(rate / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let wd = T::lit(if decay { rate * weight_decay } else { 0.0 });
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(*id);
            for (((p, &gi), mi), vi) in value
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *p -= wd * *p;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Matrix<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm().to_f64_lossy()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w.weight", Matrix::from_vec(1, 2, vec![1.0, -1.0]), ParamGroup::Backbone);
        let b = store.add("w.bias", Matrix::from_vec(1, 1, vec![0.5]), ParamGroup::Other);
        let mut opt = AdamW::new(&store);
        let grads = vec![(w, Matrix::from_vec(1, 2, vec![0.3, -2.0])), (b, Matrix::from_vec(1, 1, vec![4.0]))];
        opt.step(&mut store, &grads, |g| if g == ParamGroup::Backbone { 0.1 } else { 0.01 }, 0.5);
        // Adam's first step is lr·sign(g) (up to eps); decay shrinks weights by lr·wd
        let wv = store.value(w);
        assert!((wv.get(0, 0) - (1.0 * (1.0 - 0.05) - 0.1)).abs() < 1e-6);
        assert!((wv.get(0, 1) - (-1.0 * (1.0 - 0.05) + 0.1)).abs() < 1e-6);
        assert!((store.value(b).get(0, 0) - (0.5 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = vec![(ParamId(0), Matrix::from_vec(1, 2, vec![3.0, 4.0]))];
        let n = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(n, 5.0);
        let after: f64 = grads[0].1.sq_norm();
        let after = after.sqrt();
        assert!((after - 1.0f64).abs() < 1e-5);
        let mut small = vec![(ParamId(0), Matrix::from_vec(1, 1, vec![0.5]))];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].1.get(0, 0), 0.5);
    }
}
