use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 1e-2,
        }
    }
}

/// Moment estimates and step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T = f32> {
    pub hyper: AdamW,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            p.expect_same_shape(g, "adamw")?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let decay = T::lit(1.0 - lr * weight_decay);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = mv.as_f64() / c1;
                let vhat = vv.as_f64() / c2;
                *pv = *pv * decay - T::lit(lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_min;
    }
    let frac = (t.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::autodiff::Init;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 1e-7), 5e-4);
        assert!((cosine_lr(100, 100, 5e-4, 1e-7) - 1e-7).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let before = p.clone();
        let mut st = OptimState::new(AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        });
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros([3]))]);
        for _ in 0..5 {
            st.update(&mut p, &grads, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::full([1], 0.0));
        let mut st = OptimState::new(AdamW::default());
        let target = Tensor::full([1], 3.0);
        let loss_at = |p: &ParamStore<f64>| {
            let g = Graph::training(p);
            let x = g.scope().param("x", &[1], Init::Const(0.0)).unwrap();
            let d = x
                .sub(&crate::autodiff::Var::constant(target.clone()))
                .unwrap();
            let l = d.mul(&d).unwrap().sum().unwrap();
            let grads = g.backward(&l).unwrap();
            (l.value().data()[0], grads.by_name)
        };
        let (initial, _) = loss_at(&p);
        for t in 0..100 {
            let (_, grads) = loss_at(&p);
            st.update(&mut p, &grads, cosine_lr(t, 100, 0.2, 1e-3))
                .unwrap();
        }
        let (last, _) = loss_at(&p);
        assert!(last < 1e-3 * initial, "{initial} -> {last}");
    }
}
