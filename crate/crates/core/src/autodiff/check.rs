//! Central finite-difference checking of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Scope, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates sampled per tensor.
    pub max_coords: usize,
    pub seed: u64,
    /// Normalize errors by the largest gradient of each tensor (`true`) or of
    /// the whole case (`false`).
    pub per_tensor: bool,
}

impl CheckOptions {
    /// For ops that are linear in every input.
    pub fn linear() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            max_coords: 256,
            seed: 0,
            per_tensor: true,
        }
    }

    pub fn nonlinear() -> Self {
        Self {
            tol: 1e-4,
            ..Self::linear()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `tensor[index]` of the worst coordinate.
    pub worst: String,
    pub tol: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed a channel-matching decision.
    pub skipped: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `sum(f(store) * R)`, for a fixed random
/// `R`, with central differences in every tensor of `store`.
pub fn check_gradients<F>(
    name: &str,
    store: &ParamStore<f64>,
    opts: CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&Scope<'_, '_, f64>) -> Result<Var<f64>>,
{
    // Offset so the weights never coincide with inputs drawn from the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let graph = Graph::training(store);
    let out = f(&graph.scope())?;
    let weights = Tensor::from_fn(out.shape().to_vec(), |_| rng.random_range(-1.0..1.0));
    let loss = out.dot_const(&weights)?;
    let grads = graph.backward(&loss)?;
    let routing = graph.routing();
    drop(graph);

    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let g = Graph::inference(s);
        let out = f(&g.scope())?;
        let same = g
            .routing()
            .iter()
            .map(|r| &r.indices)
            .eq(routing.iter().map(|r| &r.indices));
        Ok((out.value().mul(&weights)?.sum(), same))
    };

    let mut work = store.clone();
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        tol: opts.tol,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    // (tensor, [(index, analytic, numeric)])
    type Row = (String, Vec<(usize, f64, f64)>);
    let mut rows: Vec<Row> = Vec::new();
    let names: Vec<String> = store.names().cloned().collect();
    for pname in names {
        let numel = store.get(&pname).unwrap().numel();
        let analytic = grads
            .by_name
            .get(&pname)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(&pname).unwrap().shape().to_vec()));
        let coords: Vec<usize> = if numel <= opts.max_coords {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut pairs = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = work.get(&pname).unwrap().data()[i];
            work.get_mut(&pname).unwrap().data_mut()[i] = orig + opts.h;
            let (plus, same_p) = eval(&work)?;
            work.get_mut(&pname).unwrap().data_mut()[i] = orig - opts.h;
            let (minus, same_m) = eval(&work)?;
            work.get_mut(&pname).unwrap().data_mut()[i] = orig;
            if !(same_p && same_m) {
                report.skipped += 1;
                continue;
            }
            pairs.push((i, analytic.data()[i], (plus - minus) / (2.0 * opts.h)));
        }
        report.checked += pairs.len();
        rows.push((pname, pairs));
    }
    let scale_of = |pairs: &[(usize, f64, f64)]| {
        pairs
            .iter()
            .fold(1e-8f64, |m, &(_, a, n)| m.max(a.abs()).max(n.abs()))
    };
    let global = rows.iter().fold(1e-8f64, |m, (_, p)| m.max(scale_of(p)));
    for (pname, pairs) in &rows {
        let scale = if opts.per_tensor {
            scale_of(pairs)
        } else {
            global
        };
        for &(i, a, n) in pairs {
            let rel = (a - n).abs() / scale;
            if report.worst.is_empty() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{pname}[{i}]");
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_f64([3], &[0.3, -0.2, 0.9]).unwrap());
        let good = check_gradients("mul", &store, CheckOptions::nonlinear(), |s| {
            let x = s.param("x", &[3], Init::Const(0.0))?;
            x.mul(&x)
        })
        .unwrap();
        assert!(good.passed, "{good:?}");
        assert_eq!(good.checked, 3);

        // exp(x) recorded with the derivative of x*x
        let bad = check_gradients("bogus", &store, CheckOptions::nonlinear(), |s| {
            let x = s.param("x", &[3], Init::Const(0.0))?;
            let v = x.value().map(f64::exp);
            Var::record("bogus", v, vec![x], |g, ps, _| {
                Ok(vec![Some(g.mul(&ps[0].value().scale(2.0))?)])
            })
        })
        .unwrap();
        assert!(!bad.passed);
        assert!(bad.worst.starts_with("x["));
    }
}
