//! Four-direction selective scan over a 2D feature map.
//!
//! The map is flattened row-major and column-major, each forwards and
//! backwards. Every direction gets its own input-dependent `B`, `C` and
//! `delta` projections; the state matrix and skip gains are shared. The
//! four scanned sequences are folded back and summed.

use serde::Serialize;

use crate::autodiff::{selective_scan, Init, Scope, Var};
use crate::error::{shape_err, Result};
use crate::layers::{conv_with_bias, linear};
use crate::real::Real;
use crate::tensor::{Activation, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

/// Bounds of the initial time step.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowReverse,
        ScanDirection::ColForward,
        ScanDirection::ColReverse,
    ];

    /// Parameter-name segment.
    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::RowForward => "row_fwd",
            ScanDirection::RowReverse => "row_rev",
            ScanDirection::ColForward => "col_fwd",
            ScanDirection::ColReverse => "col_rev",
        }
    }

    /// The direction that visits a 180-degree-rotated map in the same order.
    pub fn rotated(self) -> Self {
        match self {
            ScanDirection::RowForward => ScanDirection::RowReverse,
            ScanDirection::RowReverse => ScanDirection::RowForward,
            ScanDirection::ColForward => ScanDirection::ColReverse,
            ScanDirection::ColReverse => ScanDirection::ColForward,
        }
    }

    /// `perm[i]` is the row-major position visited at step `i`.
    pub fn permutation(self, h: usize, w: usize) -> Vec<usize> {
        let col_major = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x));
        match self {
            ScanDirection::RowForward => (0..h * w).collect(),
            ScanDirection::RowReverse => (0..h * w).rev().collect(),
            ScanDirection::ColForward => col_major.collect(),
            ScanDirection::ColReverse => {
                let mut p: Vec<usize> = col_major.collect();
                p.reverse();
                p
            }
        }
    }

    pub fn inverse_permutation(self, h: usize, w: usize) -> Vec<usize> {
        let p = self.permutation(h, w);
        let mut inv = vec![0; p.len()];
        for (i, &j) in p.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

/// `[H, W, C]` to the `[H * W, C]` sequence visited by `d`.
pub fn unfold<T: Real>(x: &Tensor<T>, d: ScanDirection) -> Result<Tensor<T>> {
    let (h, w, _) = x.dims3("unfold")?;
    Ok(unfold_var(&Var::constant(x.clone()), d, h, w)?
        .value()
        .clone())
}

/// Inverse of [`unfold`].
pub fn fold<T: Real>(seq: &Tensor<T>, d: ScanDirection, h: usize, w: usize) -> Result<Tensor<T>> {
    let (l, _) = seq.dims2("fold")?;
    if l != h * w {
        return shape_err("fold", format!("sequence length {l} is not {h}x{w}"));
    }
    Ok(fold_var(&Var::constant(seq.clone()), d, h, w)?
        .value()
        .clone())
}

pub fn unfold_var<T: Real>(x: &Var<T>, d: ScanDirection, h: usize, w: usize) -> Result<Var<T>> {
    let c = x.value().channels();
    x.gather_rows(d.permutation(h, w), &[h * w, c])
}

pub fn fold_var<T: Real>(seq: &Var<T>, d: ScanDirection, h: usize, w: usize) -> Result<Var<T>> {
    let c = seq.value().channels();
    seq.gather_rows(d.inverse_permutation(h, w), &[h, w, c])
}

/// Sum over the four directions of the folded selective scans of `x`.
///
/// Parameters under `s`: `a_log [D, N]`, `d_skip [D]`, and per direction
/// `x_proj` (1x1, `D -> 2N`, giving `B | C`) and `dt_proj` (1x1, `D -> D`,
/// followed by softplus).
pub fn ssm2d<T: Real>(s: &Scope<'_, '_, T>, x: &Var<T>, state_size: usize) -> Result<Var<T>> {
    let (h, w, d) = x.value().dims3("ssm2d")?;
    let n = state_size;
    let a = s.param("a_log", &[d, n], Init::StateLog)?.neg_exp()?;
    let d_skip = s.param("d_skip", &[d], Init::Const(1.0))?;
    let mut acc: Option<Var<T>> = None;
    for dir in ScanDirection::ALL {
        let ds = s.sub(dir.name());
        let bc = linear(&ds, "x_proj", x, 2 * n)?;
        let dt = conv_with_bias(
            &ds,
            "dt_proj",
            x,
            d,
            ConvSpec::dense(1),
            Some(Init::DtBias {
                min: DT_MIN,
                max: DT_MAX,
            }),
        )?
        .act(Activation::Softplus)?;
        let u = unfold_var(x, dir, h, w)?;
        let delta = unfold_var(&dt, dir, h, w)?;
        let bc = unfold_var(&bc, dir, h, w)?;
        let b = bc.narrow_channels(0, n)?;
        let c = bc.narrow_channels(n, n)?;
        let y = fold_var(&selective_scan(&u, &delta, &a, &b, &c, &d_skip)?, dir, h, w)?;
        acc = Some(match acc {
            None => y,
            Some(prev) => prev.add(&y)?,
        });
    }
    Ok(acc.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, ParamStore};
    use crate::ssm::discretize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Tensor<f64> {
        Tensor::from_f64([2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn unfold_layouts() {
        let x = grid();
        let seq = |d| unfold(&x, d).unwrap().into_data();
        assert_eq!(seq(ScanDirection::RowForward), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(seq(ScanDirection::ColForward), [1.0, 3.0, 2.0, 4.0]);
        assert_eq!(seq(ScanDirection::RowReverse), [4.0, 3.0, 2.0, 1.0]);
        assert_eq!(seq(ScanDirection::ColReverse), [4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn fold_examples() {
        let s = Tensor::from_f64([4, 1], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(fold(&s, ScanDirection::ColForward, 2, 2).unwrap(), grid());
        let c = Tensor::full([6, 2], 0.25);
        assert_eq!(
            fold(&c, ScanDirection::ColReverse, 2, 3).unwrap(),
            Tensor::full([2, 3, 2], 0.25)
        );
        assert!(fold(&c, ScanDirection::RowForward, 2, 2).is_err());
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn built(d: usize, n: usize, seed: u64) -> ParamStore<f64> {
        let g = Graph::building(seed);
        ssm2d(&g.scope(), &Var::constant(Tensor::zeros([2, 2, d])), n).unwrap();
        g.into_params().unwrap()
    }

    fn run(store: &ParamStore<f64>, x: &Tensor<f64>, n: usize) -> Tensor<f64> {
        let g = Graph::inference(store);
        ssm2d(&g.scope(), &Var::constant(x.clone()), n)
            .unwrap()
            .value()
            .clone()
    }

    #[test]
    fn parameter_layout() {
        let store = built(8, 4, 0);
        let names: Vec<&String> = store.names().collect();
        assert_eq!(names.len(), 2 + 4 * 4);
        assert!(store.contains("row_rev.dt_proj.b"));
        assert_eq!(
            store.get("col_fwd.x_proj.w").unwrap().shape(),
            &[8, 8, 1, 1]
        );
        assert_eq!(store.param_count(), 8 * 4 + 8 + 4 * (8 * 8 + 8 + 8 * 8 + 8));
    }

    #[test]
    fn zero_projections_give_four_skips() {
        let mut store = built(3, 4, 1);
        for (name, t) in store.iter_mut() {
            if name.contains("x_proj") || name.ends_with("dt_proj.w") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random(&[5, 3, 3], &mut ChaCha8Rng::seed_from_u64(2));
        let y = run(&store, &x, 4);
        assert!(y.max_abs_diff(&x.scale(4.0)).unwrap() < 1e-14);
    }

    #[test]
    fn single_pixel_closed_form() {
        let (d, n) = (3, 2);
        let mut store = built(d, n, 3);
        // identical directions so the sum is four equal terms
        for dir in &ScanDirection::ALL[1..] {
            for leaf in ["x_proj.w", "x_proj.b", "dt_proj.w", "dt_proj.b"] {
                let src = store.get(&format!("row_fwd.{leaf}")).unwrap().clone();
                store.insert(format!("{}.{leaf}", dir.name()), src);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 1, d], &mut rng);
        let y = run(&store, &x, n);

        let w = |k: &str| store.get(k).unwrap().data().to_vec();
        let (xw, xb, dw, db) = (
            w("row_fwd.x_proj.w"),
            w("row_fwd.x_proj.b"),
            w("row_fwd.dt_proj.w"),
            w("row_fwd.dt_proj.b"),
        );
        let (a_log, skip) = (w("a_log"), w("d_skip"));
        let xv = x.data();
        let proj = |wt: &[f64], b: &[f64], o: usize| -> f64 {
            b[o] + (0..d).map(|i| wt[o * d + i] * xv[i]).sum::<f64>()
        };
        for ch in 0..d {
            let delta = proj(&dw, &db, ch).exp().ln_1p();
            let mut one = skip[ch] * xv[ch];
            for k in 0..n {
                let bk = proj(&xw, &xb, k);
                let ck = proj(&xw, &xb, n + k);
                let (_, b_bar) = discretize(-a_log[ch * n + k].exp(), bk, delta).unwrap();
                one += ck * b_bar * xv[ch];
            }
            assert!(
                (y.data()[ch] - 4.0 * one).abs() < 1e-12,
                "{} vs {}",
                y.data()[ch],
                4.0 * one
            );
        }
    }

    #[test]
    fn rotation_symmetry() {
        let store = built(4, 3, 5);
        let mut swapped = ParamStore::new();
        for (name, t) in store.iter() {
            let renamed = ScanDirection::ALL
                .iter()
                .find_map(|dir| {
                    name.strip_prefix(dir.name())
                        .map(|rest| format!("{}{rest}", dir.rotated().name()))
                })
                .unwrap_or_else(|| name.clone());
            swapped.insert(renamed, t.clone());
        }
        let x = random(&[4, 4, 4], &mut ChaCha8Rng::seed_from_u64(6));
        let rot = |t: &Tensor<f64>| {
            let (h, w, c) = t.dims3("rot").unwrap();
            let mut out = t.clone();
            for y in 0..h {
                for xx in 0..w {
                    for k in 0..c {
                        out.data_mut()[(y * w + xx) * c + k] =
                            t.data()[((h - 1 - y) * w + (w - 1 - xx)) * c + k];
                    }
                }
            }
            out
        };
        let y = run(&store, &x, 3);
        let y_rot = run(&swapped, &rot(&x), 3);
        assert!(y_rot.max_abs_diff(&rot(&y)).unwrap() < 1e-12);
    }

    #[test]
    fn large_map_is_finite() {
        let g = Graph::<f32>::building(7);
        let x = Tensor::from_fn([64, 64, 32], |i| ((i * 31 % 97) as f32 / 97.0) - 0.5);
        let y = ssm2d(&g.scope(), &Var::constant(x), 16).unwrap();
        assert_eq!(y.shape(), &[64, 64, 32]);
        assert!(y.value().is_finite());
    }

    proptest! {
        #[test]
        fn fold_inverts_unfold(h in 1usize..12, w in 1usize..12, c in 1usize..4, seed: u64) {
            let x = random(&[h, w, c], &mut ChaCha8Rng::seed_from_u64(seed));
            for d in ScanDirection::ALL {
                let s = unfold(&x, d).unwrap();
                prop_assert_eq!(s.shape(), &[h * w, c]);
                prop_assert_eq!(fold(&s, d, h, w).unwrap(), x.clone());
            }
        }
    }
}
