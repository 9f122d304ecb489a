//! Low-frequency state-space block.
//!
//! ```text
//! Z   = vssm(LN(x)) + beta * x
//! out = gffn(Z) + gamma * Z
//! ```
//!
//! `vssm` gates the four-direction scan of an expanded copy of its input
//! with a second SiLU branch; `gffn` is a depth-wise feed-forward layer
//! whose expanded channels are split in two, one half GELU-gating the other.

use crate::autodiff::{Init, Scope, Var};
use crate::error::{Error, Result};
use crate::layers::{depthwise, layer_norm, linear};
use crate::real::Real;
use crate::scan2d::ssm2d;
use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LfssConfig {
    /// Channel expansion inside the scan branch.
    pub lambda: usize,
    pub state_size: usize,
}

impl Default for LfssConfig {
    fn default() -> Self {
        Self {
            lambda: 2,
            state_size: 16,
        }
    }
}

impl LfssConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 || self.state_size == 0 {
            return Err(Error::Config(format!(
                "lambda and state size must be positive, got {} and {}",
                self.lambda, self.state_size
            )));
        }
        Ok(())
    }
}

/// `out_linear(LN(ssm2d(SiLU(dw(in_linear(x))))) * SiLU(gate_linear(x)))`
pub fn vssm<T: Real>(s: &Scope<'_, '_, T>, x: &Var<T>, cfg: &LfssConfig) -> Result<Var<T>> {
    let c = x.value().channels();
    let dc = cfg.lambda * c;
    let x1 = linear(s, "in_linear", x, dc)?;
    let x1 = depthwise(s, "dw_conv", &x1)?.act(Activation::Silu)?;
    let x1 = ssm2d(&s.sub("scan"), &x1, cfg.state_size)?;
    let x1 = layer_norm(s, "out_norm", &x1)?;
    let x2 = linear(s, "gate_linear", x, dc)?.act(Activation::Silu)?;
    linear(s, "out_linear", &x1.mul(&x2)?, c)
}

/// `out(GELU(F1) * F2)` with `[F1 | F2] = dw(expand(LN(x)))`.
pub fn gffn<T: Real>(s: &Scope<'_, '_, T>, x: &Var<T>) -> Result<Var<T>> {
    let c = x.value().channels();
    let f = layer_norm(s, "norm", x)?;
    let f = linear(s, "expand", &f, 2 * c)?;
    let f = depthwise(s, "dw", &f)?;
    let f1 = f.narrow_channels(0, c)?.act(Activation::Gelu)?;
    let f2 = f.narrow_channels(c, c)?;
    linear(s, "out", &f1.mul(&f2)?, c)
}

pub fn lfss_block<T: Real>(s: &Scope<'_, '_, T>, x: &Var<T>, cfg: &LfssConfig) -> Result<Var<T>> {
    let c = x.value().channels();
    let beta = s.param("beta", &[c], Init::Const(1.0))?;
    let gamma = s.param("gamma", &[c], Init::Const(1.0))?;
    let z = vssm(&s.sub("vssm"), &layer_norm(s, "norm1", x)?, cfg)?.add(&x.mul_channels(&beta)?)?;
    gffn(&s.sub("gffn"), &z)?.add(&z.mul_channels(&gamma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{build_params, evaluate, ParamStore};
    use crate::layers::LN_EPS;
    use crate::tensor::{conv2d, layer_norm as ln, ConvSpec, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CFG: LfssConfig = LfssConfig {
        lambda: 2,
        state_size: 4,
    };

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn input(x: &Tensor<f64>) -> Var<f64> {
        Var::constant(x.clone())
    }

    fn set(store: &mut ParamStore<f64>, name: &str, v: f64) {
        store
            .get_mut(name)
            .unwrap_or_else(|| panic!("{name}"))
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = v);
    }

    /// Randomizes every tensor so that LN affine terms and scales matter.
    fn perturbed(mut store: ParamStore<f64>, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in store.iter_mut() {
            if name.ends_with("gamma") || name.ends_with("beta") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        store
    }

    // Straight-line references over the tensor primitives.
    struct Ref<'a>(&'a ParamStore<f64>, String);

    impl Ref<'_> {
        fn p(&self, k: &str) -> &Tensor<f64> {
            self.0.get(&format!("{}{k}", self.1)).unwrap()
        }
        fn conv(&self, k: &str, x: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
            conv2d(
                x,
                self.p(&format!("{k}.w")),
                self.p(&format!("{k}.b")),
                spec,
            )
            .unwrap()
        }
        fn ln(&self, k: &str, x: &Tensor<f64>) -> Tensor<f64> {
            ln(
                x,
                self.p(&format!("{k}.gamma")),
                self.p(&format!("{k}.beta")),
                LN_EPS,
            )
            .unwrap()
        }
        fn vssm(&self, x: &Tensor<f64>) -> Tensor<f64> {
            let dc = CFG.lambda * x.channels();
            let x1 = self.conv("in_linear", x, ConvSpec::dense(1));
            let x1 = Activation::Silu.apply(&self.conv("dw_conv", &x1, ConvSpec::depthwise(dc)));
            let prefix = format!("{}scan", self.1);
            let mut sub = ParamStore::new();
            for (k, v) in self.0.iter() {
                if let Some(rest) = k.strip_prefix(&prefix) {
                    sub.insert(rest.trim_start_matches('.'), v.clone());
                }
            }
            let x1 = evaluate(&sub, |s| ssm2d(s, &input(&x1), CFG.state_size)).unwrap();
            let x1 = self.ln("out_norm", &x1);
            let x2 = Activation::Silu.apply(&self.conv("gate_linear", x, ConvSpec::dense(1)));
            self.conv("out_linear", &x1.mul(&x2).unwrap(), ConvSpec::dense(1))
        }
        fn gffn(&self, x: &Tensor<f64>) -> Tensor<f64> {
            let c = x.channels();
            let f = self.conv("expand", &self.ln("norm", x), ConvSpec::dense(1));
            let f = self.conv("dw", &f, ConvSpec::depthwise(2 * c));
            let g = Activation::Gelu
                .apply(&f.narrow_channels(0, c).unwrap())
                .mul(&f.narrow_channels(c, c).unwrap())
                .unwrap();
            self.conv("out", &g, ConvSpec::dense(1))
        }
    }

    #[test]
    fn vssm_closed_gate_leaves_bias() {
        let x = random(&[4, 4, 8], 1);
        let mut store = build_params(0, |s| vssm(s, &input(&x), &CFG)).unwrap();
        set(&mut store, "gate_linear.w", 0.0);
        set(&mut store, "gate_linear.b", 0.0);
        let y = evaluate(&store, |s| vssm(s, &input(&x), &CFG)).unwrap();
        let b = store.get("out_linear.b").unwrap();
        let expect = Tensor::from_fn([4, 4, 8], |i| b.data()[i % 8]);
        assert!(y.max_abs_diff(&expect).unwrap() == 0.0);
    }

    #[test]
    fn vssm_open_gate_passes_scan_branch() {
        let cfg = LfssConfig {
            lambda: 1,
            state_size: 4,
        };
        let x = random(&[4, 4, 3], 2);
        let mut store = build_params(1, |s| vssm(s, &input(&x), &cfg)).unwrap();
        // SiLU(z) = 1 at the root of z * sigmoid(z) - 1
        let mut z = 1.0f64;
        for _ in 0..50 {
            let sg = 1.0 / (1.0 + (-z).exp());
            z -= (z * sg - 1.0) / (sg + z * sg * (1.0 - sg));
        }
        set(&mut store, "gate_linear.w", 0.0);
        set(&mut store, "gate_linear.b", z);
        set(&mut store, "out_linear.w", 0.0);
        set(&mut store, "out_linear.b", 0.0);
        let w = store.get_mut("out_linear.w").unwrap();
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = evaluate(&store, |s| vssm(s, &input(&x), &cfg)).unwrap();
        let x1 = evaluate(&store, |s| {
            let v = linear(s, "in_linear", &input(&x), 3)?;
            let v = depthwise(s, "dw_conv", &v)?.act(Activation::Silu)?;
            layer_norm(s, "out_norm", &ssm2d(&s.sub("scan"), &v, 4)?)
        })
        .unwrap();
        assert!(y.max_abs_diff(&x1).unwrap() < 1e-12);
    }

    #[test]
    fn vssm_matches_reference() {
        let x = random(&[4, 4, 8], 3);
        let store = perturbed(build_params(2, |s| vssm(s, &input(&x), &CFG)).unwrap(), 9);
        let y = evaluate(&store, |s| vssm(s, &input(&x), &CFG)).unwrap();
        let r = Ref(&store, String::new()).vssm(&x);
        assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
    }

    #[test]
    fn gffn_closed_halves() {
        let x = random(&[5, 3, 4], 4);
        let store = build_params(3, |s| gffn(s, &input(&x))).unwrap();
        let out_b = store.get("out.b").unwrap().clone();
        let expect = Tensor::from_fn([5, 3, 4], |i| out_b.data()[i % 4]);
        for half in [0usize, 1] {
            let mut st = store.clone();
            let (w, b) = (
                st.get("expand.w").unwrap().clone(),
                st.get("expand.b").unwrap().clone(),
            );
            let (mut w, mut b) = (w, b);
            for o in half * 4..half * 4 + 4 {
                w.data_mut()[o * 4..(o + 1) * 4]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                b.data_mut()[o] = 0.0;
            }
            let mut db = st.get("dw.b").unwrap().clone();
            for o in half * 4..half * 4 + 4 {
                db.data_mut()[o] = 0.0;
            }
            st.insert("expand.w", w);
            st.insert("expand.b", b);
            st.insert("dw.b", db);
            let y = evaluate(&st, |s| gffn(s, &input(&x))).unwrap();
            assert!(y.max_abs_diff(&expect).unwrap() < 1e-15, "half {half}");
        }
    }

    #[test]
    fn gffn_matches_reference() {
        let x = random(&[4, 4, 6], 5);
        let store = perturbed(build_params(4, |s| gffn(s, &input(&x))).unwrap(), 10);
        let y = evaluate(&store, |s| gffn(s, &input(&x))).unwrap();
        let r = Ref(&store, String::new()).gffn(&x);
        assert!(y.max_abs_diff(&r).unwrap() < 1e-13);
    }

    fn zero_inner(store: &mut ParamStore<f64>) {
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            if n == "beta" || n == "gamma" || n.ends_with(".gamma") {
                continue;
            }
            set(store, &n, 0.0);
        }
    }

    #[test]
    fn residual_wiring() {
        let x = random(&[4, 6, 4], 6);
        let mut store = build_params(5, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
        zero_inner(&mut store);
        let y = evaluate(&store, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
        assert_eq!(y, x);

        let c1 = [0.1, -0.2, 0.3, 0.05];
        let c2 = [0.7, 0.1, -0.4, 0.0];
        store.insert("vssm.out_linear.b", Tensor::from_f64([4], &c1).unwrap());
        store.insert("gffn.out.b", Tensor::from_f64([4], &c2).unwrap());
        let y = evaluate(&store, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
        let shift = Tensor::from_fn([4, 6, 4], |i| c1[i % 4] + c2[i % 4]);
        assert!(y.sub(&x).unwrap().max_abs_diff(&shift).unwrap() < 1e-15);

        set(&mut store, "beta", 0.0);
        set(&mut store, "gamma", 0.0);
        let y = evaluate(&store, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
        assert_eq!(y, Tensor::from_fn([4, 6, 4], |i| c2[i % 4]));
    }

    #[test]
    fn block_matches_reference() {
        let x = random(&[4, 4, 4], 7);
        let store = perturbed(
            build_params(6, |s| lfss_block(s, &input(&x), &CFG)).unwrap(),
            11,
        );
        let y = evaluate(&store, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
        let top = Ref(&store, String::new());
        let z = Ref(&store, "vssm.".into())
            .vssm(&top.ln("norm1", &x))
            .add(&x.mul_channels(top.p("beta")).unwrap())
            .unwrap();
        let r = Ref(&store, "gffn.".into())
            .gffn(&z)
            .add(&z.mul_channels(top.p("gamma")).unwrap())
            .unwrap();
        assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
    }

    #[test]
    fn shape_is_preserved() {
        for (h, w, c) in [(2, 2, 1), (6, 4, 3), (8, 10, 5)] {
            let x = random(&[h, w, c], 8);
            let store = build_params(7, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
            let y = evaluate(&store, |s| lfss_block(s, &input(&x), &CFG)).unwrap();
            assert_eq!(y.shape(), &[h, w, c]);
        }
    }
}
