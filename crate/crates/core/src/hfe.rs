//! High-frequency enhancement.
//!
//! The frequency matching transform (`fmt`) pairs every high-frequency
//! channel with the low-frequency channel nearest to it in Euclidean
//! distance over all positions, stacks the pair, and mixes it through a
//! sigmoid-gated convolution. `fmta` is channel attention whose queries have
//! been matched this way; `fcfn` is a depth-wise feed-forward layer ending in
//! another matching step. `skff` reduces the three detail bands to one map.
//!
//! ```text
//! F'  = fmta(LN(fh), fl) + fh
//! out = fcfn(LN(F'), fl) + F'
//! ```

use serde::Serialize;

use crate::autodiff::{Init, Routing, Scope, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{conv, depthwise, layer_norm, linear};
use crate::real::Real;
use crate::tensor::{Activation, ConvSpec, Tensor};

/// Clamp for the L2 norms of attention queries and keys.
pub const NORM_EPS: f64 = 1e-12;

/// Nearest low-frequency channel for every high-frequency channel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FmtMatch {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Smallest gap between a chosen distance and the next-best one
    /// (infinite with a single candidate).
    pub margin: f64,
}

/// Exhaustive channel matching; ties go to the lowest index.
pub fn fmt_match<T: Real>(fl: &Tensor<T>, fh: &Tensor<T>) -> Result<FmtMatch> {
    let (h, w, cl) = fl.dims3("fmt")?;
    let (hh, hw, ch) = fh.dims3("fmt")?;
    if (h, w) != (hh, hw) {
        return shape_err(
            "fmt",
            format!("low band is {h}x{w} but high band is {hh}x{hw}"),
        );
    }
    let mut sq = vec![0f64; ch * cl];
    for (lrow, hrow) in fl.data().chunks(cl).zip(fh.data().chunks(ch)) {
        for (i, &hv) in hrow.iter().enumerate() {
            let out = &mut sq[i * cl..(i + 1) * cl];
            for (acc, &lv) in out.iter_mut().zip(lrow) {
                let d = lv.as_f64() - hv.as_f64();
                *acc += d * d;
            }
        }
    }
    let mut m = FmtMatch {
        indices: Vec::with_capacity(ch),
        distances: Vec::with_capacity(ch),
        margin: f64::INFINITY,
    };
    for row in sq.chunks(cl) {
        let mut best = 0;
        for (j, &d) in row.iter().enumerate() {
            if d < row[best] {
                best = j;
            }
        }
        let dist = row[best].sqrt();
        for (j, &d) in row.iter().enumerate() {
            if j != best {
                m.margin = m.margin.min(d.sqrt() - dist);
            }
        }
        m.indices.push(best);
        m.distances.push(dist);
    }
    Ok(m)
}

/// `out(Sigmoid(gate(Y)) * conv(Y))` with `Y = [matched low | fh]`.
/// The matching is recorded on the graph and treated as constant.
pub fn fmt<T: Real>(s: &Scope<'_, '_, T>, fl: &Var<T>, fh: &Var<T>) -> Result<Var<T>> {
    let m = fmt_match(fl.value(), fh.value())?;
    let c = fh.value().channels();
    s.graph().log_routing(Routing {
        indices: m.indices.clone(),
        margin: m.margin,
    });
    let y = Var::concat_channels(&[&fl.gather_channels(m.indices)?, fh])?;
    let gate = linear(s, "gate", &y, 2 * c)?.act(Activation::Sigmoid)?;
    let mixed = conv(s, "conv", &y, 2 * c, ConvSpec::dense(3))?;
    linear(s, "out", &gate.mul(&mixed)?, c)
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} attention heads do not divide {c} channels"
        )));
    }
    Ok(())
}

/// Per-head transposed attention. Returns the `[C, H*W]` output rows and
/// the `[C/heads, C/heads]` attention matrices.
fn channel_attention<T: Real>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    alpha: &Var<T>,
    heads: usize,
) -> Result<(Var<T>, Vec<Var<T>>)> {
    let (h, w, c) = q.value().dims3("fmta")?;
    let rows = |t: &Var<T>| t.reshape(&[h * w, c])?.transpose();
    let (q, k, v) = (rows(q)?, rows(k)?, rows(v)?);
    let ch = c / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = q.narrow_rows(hd * ch, ch)?.l2_normalize_rows(NORM_EPS)?;
        let kh = k.narrow_rows(hd * ch, ch)?.l2_normalize_rows(NORM_EPS)?;
        let attn = kh
            .matmul(&qh.transpose()?)?
            .div_by(&alpha.narrow_rows(hd, 1)?)?
            .softmax(1)?;
        outs.push(attn.matmul(&v.narrow_rows(hd * ch, ch)?)?);
        maps.push(attn);
    }
    let refs: Vec<&Var<T>> = outs.iter().collect();
    Ok((Var::concat_rows(&refs)?, maps))
}

fn fmta_parts<T: Real>(
    s: &Scope<'_, '_, T>,
    fh: &Var<T>,
    fl: &Var<T>,
    heads: usize,
) -> Result<(Var<T>, Vec<Var<T>>)> {
    let (h, w, c) = fh.value().dims3("fmta")?;
    check_heads(c, heads)?;
    let qkv = depthwise(s, "qkv_dw", &linear(s, "qkv", fh, 3 * c)?)?;
    let q = qkv.narrow_channels(0, c)?;
    let k = qkv.narrow_channels(c, c)?;
    let v = qkv.narrow_channels(2 * c, c)?;
    let q = fmt(&s.sub("fmt"), fl, &q)?;
    let alpha = s.param("alpha", &[heads], Init::Const(((c / heads) as f64).sqrt()))?;
    let (o, maps) = channel_attention(&q, &k, &v, &alpha, heads)?;
    let o = o.transpose()?.reshape(&[h, w, c])?;
    Ok((linear(s, "proj", &o, c)?, maps))
}

/// Matched-query channel attention followed by a 1x1 projection.
pub fn fmta<T: Real>(
    s: &Scope<'_, '_, T>,
    fh: &Var<T>,
    fl: &Var<T>,
    heads: usize,
) -> Result<Var<T>> {
    fmta_parts(s, fh, fl, heads).map(|(o, _)| o)
}

/// `fmt(dw(pw(LN(x))), fl)`
pub fn fcfn<T: Real>(s: &Scope<'_, '_, T>, x: &Var<T>, fl: &Var<T>) -> Result<Var<T>> {
    let c = x.value().channels();
    let f = layer_norm(s, "norm", x)?;
    let f = depthwise(s, "dw", &linear(s, "pw", &f, c)?)?;
    fmt(&s.sub("fmt"), fl, &f)
}

pub fn hfe_block<T: Real>(
    s: &Scope<'_, '_, T>,
    fh: &Var<T>,
    fl: &Var<T>,
    heads: usize,
) -> Result<Var<T>> {
    let f1 = fmta(&s.sub("fmta"), &layer_norm(s, "norm1", fh)?, fl, heads)?.add(fh)?;
    fcfn(&s.sub("fcfn"), &layer_norm(s, "norm2", &f1)?, fl)?.add(&f1)
}

/// Per-channel branch weights `[3, C]`, a softmax over the three bands.
pub fn skff_weights<T: Real>(s: &Scope<'_, '_, T>, bands: [&Var<T>; 3]) -> Result<Var<T>> {
    let c = bands[0].value().channels();
    for b in &bands[1..] {
        if b.shape() != bands[0].shape() {
            return shape_err("skff", format!("{:?} vs {:?}", b.shape(), bands[0].shape()));
        }
    }
    let pooled = bands[0]
        .add(bands[1])?
        .add(bands[2])?
        .channel_mean()?
        .reshape(&[1, 1, c])?;
    let z = linear(s, "squeeze", &pooled, (c / 4).max(1))?;
    let logits = (0..3)
        .map(|k| linear(s, &format!("branch{k}"), &z, c)?.reshape(&[1, c]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_rows(&[&logits[0], &logits[1], &logits[2]])?.softmax(0)
}

/// Selective-kernel fusion of three same-shape maps.
pub fn skff<T: Real>(s: &Scope<'_, '_, T>, bands: [&Var<T>; 3]) -> Result<Var<T>> {
    let c = bands[0].value().channels();
    let wts = skff_weights(s, bands)?;
    let mut out: Option<Var<T>> = None;
    for (k, b) in bands.iter().enumerate() {
        let term = b.mul_channels(&wts.narrow_rows(k, 1)?.reshape(&[c])?)?;
        out = Some(match out {
            None => term,
            Some(o) => o.add(&term)?,
        });
    }
    Ok(out.unwrap())
}
