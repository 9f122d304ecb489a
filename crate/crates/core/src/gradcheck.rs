//! The finite-difference suite: one case per differentiable operation and
//! per composite block.
//!
//! Inputs are declared as parameters with a uniform init, so every input and
//! weight of a case is perturbed. Cases containing channel matching are
//! evaluated only at points whose matching margin exceeds `10 h`.

use crate::autodiff::{
    build_params, check_gradients, selective_scan, CheckOptions, CheckReport, Graph, Init,
    ParamStore, Scope, Var,
};
use crate::error::{Error, Result};
use crate::hfe::{fcfn, fmt, fmta, hfe_block, skff};
use crate::layers::layer_norm;
use crate::lfss::{gffn, lfss_block, vssm, LfssConfig};
use crate::network::{forward_graph, ModelConfig};
use crate::scan2d::{fold_var, ssm2d, unfold_var, ScanDirection};
use crate::tensor::{Activation, ConvSpec, Tensor};

type CaseFn = fn(&Scope<'_, '_, f64>) -> Result<Var<f64>>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    /// Linear in each input coordinate, checked at the tight tolerance.
    pub linear: bool,
    /// Contains channel matching.
    pub routed: bool,
    /// Coordinates sampled per tensor. Cases that sample few coordinates
    /// are deep compositions whose smallest gradients sit near the
    /// finite-difference noise floor; they are normalized case-wide.
    pub coords: usize,
    f: CaseFn,
}

fn input(s: &Scope<'_, '_, f64>, name: &str, shape: &[usize]) -> Result<Var<f64>> {
    s.param(name, shape, Init::Uniform(1.0))
}

fn x443(s: &Scope<'_, '_, f64>) -> Result<Var<f64>> {
    input(s, "x", &[4, 4, 3])
}

fn conv_case(
    s: &Scope<'_, '_, f64>,
    spec: ConvSpec,
    c_in: usize,
    c_out: usize,
) -> Result<Var<f64>> {
    let x = input(s, "x", &[4, 5, c_in])?;
    let w = input(s, "w", &spec.weight_shape(c_in, c_out))?;
    let b = input(s, "b", &[c_out])?;
    x.conv2d(&w, &b, spec)
}

fn act_case(s: &Scope<'_, '_, f64>, a: Activation) -> Result<Var<f64>> {
    input(s, "x", &[3, 4, 2])?.scale(3.0)?.act(a)
}

fn unfold_case(s: &Scope<'_, '_, f64>, d: ScanDirection) -> Result<Var<f64>> {
    let x = input(s, "x", &[3, 4, 2])?;
    let seq = unfold_var(&x, d, 3, 4)?;
    let (h, w) = if matches!(d, ScanDirection::ColForward | ScanDirection::ColReverse) {
        (4, 3)
    } else {
        (3, 4)
    };
    // Fold with a different grid so the pair is not the identity.
    fold_var(&seq, ScanDirection::RowReverse, h, w)
}

fn routed_pair(s: &Scope<'_, '_, f64>, c: usize) -> Result<(Var<f64>, Var<f64>)> {
    Ok((input(s, "fl", &[4, 4, c])?, input(s, "fh", &[4, 4, c])?))
}

fn lfss_cfg() -> LfssConfig {
    LfssConfig {
        lambda: 2,
        state_size: 4,
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 4,
        lfss_counts: vec![1, 0, 1],
        hfe_counts: vec![1, 0, 0],
        heads: 2,
        lambda: 1,
        state_size: 2,
        seed: 0,
    }
}

macro_rules! case {
    ($name:expr, $linear:expr, $routed:expr, $coords:expr, $f:expr) => {
        GradCase {
            name: $name,
            linear: $linear,
            routed: $routed,
            coords: $coords,
            f: $f,
        }
    };
    ($name:expr, linear, $f:expr) => {
        case!($name, true, false, 256, $f)
    };
    ($name:expr, nonlinear, $f:expr) => {
        case!($name, false, false, 256, $f)
    };
}

/// Every case, in table order.
pub fn cases() -> Vec<GradCase> {
    vec![
        case!("add", linear, |s| x443(s)?.add(&input(s, "y", &[4, 4, 3])?)),
        case!("sub", linear, |s| x443(s)?.sub(&input(s, "y", &[4, 4, 3])?)),
        case!("mul", linear, |s| x443(s)?.mul(&input(s, "y", &[4, 4, 3])?)),
        case!("scale", linear, |s| x443(s)?.scale(-2.5)),
        case!("mul_channels", linear, |s| x443(s)?.mul_channels(&input(
            s,
            "k",
            &[3]
        )?)),
        case!("conv2d_1x1", linear, |s| conv_case(
            s,
            ConvSpec::dense(1),
            3,
            2
        )),
        case!("conv2d_3x3", linear, |s| conv_case(
            s,
            ConvSpec::dense(3),
            3,
            2
        )),
        case!("conv2d_depthwise", linear, |s| conv_case(
            s,
            ConvSpec::depthwise(3),
            3,
            3
        )),
        case!("layer_norm", nonlinear, |s| {
            let g = input(s, "gamma", &[3])?;
            let b = input(s, "beta", &[3])?;
            x443(s)?.layer_norm(&g, &b, 1e-5)
        }),
        case!("silu", nonlinear, |s| act_case(s, Activation::Silu)),
        case!("gelu", nonlinear, |s| act_case(s, Activation::Gelu)),
        case!("sigmoid", nonlinear, |s| act_case(s, Activation::Sigmoid)),
        case!("softplus", nonlinear, |s| act_case(s, Activation::Softplus)),
        case!("softmax_rows", nonlinear, |s| input(s, "x", &[3, 5])?
            .scale(2.0)?
            .softmax(1)),
        case!("softmax_cols", nonlinear, |s| input(s, "x", &[3, 5])?
            .scale(2.0)?
            .softmax(0)),
        case!("matmul", linear, |s| input(s, "a", &[3, 4])?
            .matmul(&input(s, "b", &[4, 2])?)),
        case!("transpose", linear, |s| input(s, "x", &[3, 4])?.transpose()),
        case!("dwt2", linear, |s| input(s, "x", &[4, 6, 2])?.dwt2()),
        case!("iwt2", linear, |s| input(s, "x", &[2, 3, 8])?.iwt2()),
        case!("narrow_channels", linear, |s| input(s, "x", &[2, 2, 5])?
            .narrow_channels(1, 3)),
        case!("concat_channels", linear, |s| {
            let a = input(s, "a", &[2, 3, 2])?;
            let b = input(s, "b", &[2, 3, 1])?;
            Var::concat_channels(&[&a, &b, &a])
        }),
        case!("narrow_rows", linear, |s| input(s, "x", &[5, 3])?
            .narrow_rows(1, 3)),
        case!("concat_rows", linear, |s| {
            let a = input(s, "a", &[2, 3])?;
            let b = input(s, "b", &[1, 3])?;
            Var::concat_rows(&[&b, &a, &b])
        }),
        case!("reshape", linear, |s| input(s, "x", &[2, 6])?
            .reshape(&[3, 2, 2])),
        case!("gather_rows", linear, |s| {
            input(s, "x", &[4, 3])?.gather_rows(vec![2, 0, 0, 3, 1], &[5, 3])
        }),
        case!("gather_channels", linear, |s| {
            input(s, "x", &[2, 2, 3])?.gather_channels(vec![2, 2, 0, 1])
        }),
        case!("channel_mean", linear, |s| x443(s)?.channel_mean()),
        case!("crop", linear, |s| x443(s)?.crop(3, 2)),
        case!("sum", linear, |s| x443(s)?.sum()),
        case!("mean", linear, |s| x443(s)?.mean()),
        case!("dot_const", linear, |s| {
            x443(s)?.dot_const(&Tensor::from_fn([4, 4, 3], |i| (i as f64 * 0.37).sin()))
        }),
        case!("l2_normalize_rows", nonlinear, |s| input(s, "x", &[3, 5])?
            .l2_normalize_rows(1e-12)),
        case!("div_by", nonlinear, |s| {
            let alpha = input(s, "alpha", &[1])?.act(Activation::Softplus)?;
            input(s, "x", &[2, 3])?.div_by(&alpha)
        }),
        case!("neg_exp", nonlinear, |s| input(s, "x", &[2, 3])?.neg_exp()),
        case!("l1_loss", nonlinear, |s| {
            x443(s)?.l1_loss(&Tensor::from_fn([4, 4, 3], |i| {
                (i as f64 * 0.91).cos() * 0.7
            }))
        }),
        case!("selective_scan", nonlinear, |s| {
            let (l, d, n) = (6, 3, 4);
            let u = input(s, "u", &[l, d])?;
            let delta = input(s, "delta_raw", &[l, d])?.act(Activation::Softplus)?;
            let a = input(s, "a_log", &[d, n])?.neg_exp()?;
            let b = input(s, "b", &[l, n])?;
            let c = input(s, "c", &[l, n])?;
            let dd = input(s, "d_skip", &[d])?;
            selective_scan(&u, &delta, &a, &b, &c, &dd)
        }),
        case!("unfold_row_fwd", linear, |s| unfold_case(
            s,
            ScanDirection::RowForward
        )),
        case!("unfold_row_rev", linear, |s| unfold_case(
            s,
            ScanDirection::RowReverse
        )),
        case!("unfold_col_fwd", linear, |s| unfold_case(
            s,
            ScanDirection::ColForward
        )),
        case!("unfold_col_rev", linear, |s| unfold_case(
            s,
            ScanDirection::ColReverse
        )),
        case!("ssm2d", nonlinear, |s| ssm2d(s, &x443(s)?, 4)),
        case!("vssm", nonlinear, |s| vssm(
            s,
            &input(s, "x", &[4, 4, 4])?,
            &lfss_cfg()
        )),
        case!("gffn", nonlinear, |s| gffn(s, &input(s, "x", &[4, 4, 4])?)),
        case!("lfss_block", nonlinear, |s| {
            lfss_block(s, &input(s, "x", &[4, 4, 4])?, &lfss_cfg())
        }),
        case!("layer_norm_params", nonlinear, |s| layer_norm(
            s,
            "norm",
            &x443(s)?
        )),
        case!("skff", nonlinear, |s| {
            let [a, b, c] = ["a", "b", "c"].map(|n| input(s, n, &[3, 3, 4]));
            skff(s, [&a?, &b?, &c?])
        }),
        case!("fmt", false, true, 256, |s| {
            let (fl, fh) = routed_pair(s, 4)?;
            fmt(s, &fl, &fh)
        }),
        case!("fmta", false, true, 256, |s| {
            let (fl, fh) = routed_pair(s, 4)?;
            fmta(s, &fh, &fl, 2)
        }),
        case!("fcfn", false, true, 256, |s| {
            let (fl, fh) = routed_pair(s, 4)?;
            fcfn(s, &fh, &fl)
        }),
        case!("hfe_block", false, true, 256, |s| {
            let (fl, fh) = routed_pair(s, 4)?;
            hfe_block(s, &fh, &fl, 2)
        }),
        case!("network", false, true, 6, |s| {
            let img = Tensor::from_fn([8, 8, 3], |i| 0.5 + 0.4 * (i as f64 * 0.61).sin());
            forward_graph(s, &tiny_model(), &img)
        }),
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Smallest matching margin of `f` at `store`, infinite if nothing is routed.
fn routing_margin(store: &ParamStore<f64>, f: CaseFn) -> Result<f64> {
    let g = Graph::inference(store);
    f(&g.scope())?;
    Ok(g.routing()
        .iter()
        .fold(f64::INFINITY, |m, r| m.min(r.margin)))
}

impl GradCase {
    pub fn options(&self, seed: u64) -> CheckOptions {
        let base = if self.linear {
            CheckOptions::linear()
        } else {
            CheckOptions::nonlinear()
        };
        CheckOptions {
            max_coords: self.coords,
            seed,
            per_tensor: self.coords >= 256,
            ..base
        }
    }

    /// Draws a point (retrying seeds for routed cases until the matching is
    /// stable under perturbation) and checks it.
    pub fn run(&self, seed: u64) -> Result<CheckReport> {
        let opts = self.options(seed);
        let mut store = build_params(seed, self.f)?;
        if self.routed {
            let mut attempt = seed;
            while routing_margin(&store, self.f)? <= 10.0 * opts.h {
                attempt += 1;
                if attempt > seed + 50 {
                    return Err(Error::InvalidArgument {
                        op: "gradcheck",
                        detail: format!("{}: no point with a stable matching", self.name),
                    });
                }
                store = build_params(attempt, self.f)?;
            }
        }
        check_gradients(self.name, &store, opts, self.f)
    }
}

/// Runs every case, or the single case called `which`.
pub fn run_suite(which: &str, seed: u64) -> Result<Vec<CheckReport>> {
    let all = cases();
    let selected: Vec<&GradCase> = all
        .iter()
        .filter(|c| which == "all" || c.name == which)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument {
            op: "gradcheck",
            detail: format!(
                "unknown op {which:?}; expected all or one of {:?}",
                case_names()
            ),
        });
    }
    selected.iter().map(|c| c.run(seed)).collect()
}
