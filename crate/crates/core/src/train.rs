//! Overfitting a reduced model to a single image pair.
//!
//! Training runs in f64 on the unclamped network output with an L1 loss and
//! AdamW under a cosine schedule.

use serde::Serialize;

use crate::autodiff::{cosine_lr, AdamW, Graph, OptimState};
use crate::error::{arg_err, Result};
use crate::network::{forward_graph, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ToyOptions {
    pub config: ModelConfig,
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Side of the centered square both images are cropped to.
    pub crop: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            config: ModelConfig::toy(),
            steps: 200,
            lr_max: 2e-3,
            lr_min: 1e-5,
            weight_decay: 0.0,
            crop: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyReport {
    pub steps: usize,
    pub initial_l1: f64,
    pub final_l1: f64,
    pub ratio: f64,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Centered `size x size` window, or the whole image if it is smaller.
pub fn center_crop(img: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = img.dims3("center_crop")?;
    let (ch, cw) = (size.min(h), size.min(w));
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    Ok(Tensor::from_fn([ch, cw, c], |i| {
        let (y, rest) = (i / (cw * c), i % (cw * c));
        img.data()[((y0 + y) * w + x0) * c + rest]
    }))
}

/// Fits a freshly initialized model so that `low` maps to `target`.
pub fn train_toy(
    low: &Tensor<f32>,
    target: &Tensor<f32>,
    opts: &ToyOptions,
) -> Result<(Model, ToyReport)> {
    if low.shape() != target.shape() {
        return arg_err(
            "train_toy",
            format!(
                "input {:?} and target {:?} differ",
                low.shape(),
                target.shape()
            ),
        );
    }
    if opts.steps == 0 || opts.crop == 0 {
        return arg_err("train_toy", "steps and crop must be positive");
    }
    let x = center_crop(&low.cast(), opts.crop)?;
    let y = center_crop(&target.cast(), opts.crop)?;
    let init = Model::build(&opts.config)?;
    let mut params = init.params.cast::<f64>();
    let mut optim = OptimState::new(AdamW {
        weight_decay: opts.weight_decay,
        ..AdamW::default()
    });
    let mut losses = Vec::with_capacity(opts.steps);
    for t in 0..opts.steps {
        let g = Graph::training(&params);
        let loss = forward_graph(&g.scope(), &opts.config, &x)?.l1_loss(&y)?;
        let grads = g.backward(&loss)?;
        losses.push(loss.value().data()[0]);
        drop(g);
        let lr = cosine_lr(t as u64, opts.steps as u64, opts.lr_max, opts.lr_min);
        optim.update(&mut params, &grads.by_name, lr)?;
    }
    let g = Graph::inference(&params);
    let final_l1 = forward_graph(&g.scope(), &opts.config, &x)?
        .l1_loss(&y)?
        .value()
        .data()[0];
    drop(g);
    let initial_l1 = losses[0];
    let model = Model {
        config: opts.config.clone(),
        params: params.cast(),
    };
    Ok((
        model,
        ToyReport {
            steps: opts.steps,
            initial_l1,
            final_l1,
            ratio: final_l1 / initial_l1,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_crop_picks_the_middle() {
        let img = Tensor::from_fn([5, 6, 1], |i| i as f64);
        let c = center_crop(&img, 2).unwrap();
        assert_eq!(c.data(), &[8.0, 9.0, 14.0, 15.0]);
        assert_eq!(center_crop(&img, 9).unwrap(), img);
    }

    #[test]
    fn short_run_reduces_the_loss() {
        let low = Tensor::from_fn([16, 16, 3], |i| 0.1 + 0.05 * ((i % 7) as f32 / 7.0));
        let target = low.map(|v| (v * 4.0).min(1.0));
        let opts = ToyOptions {
            steps: 15,
            crop: 16,
            ..ToyOptions::default()
        };
        let (model, r) = train_toy(&low, &target, &opts).unwrap();
        assert!(r.final_l1 < r.initial_l1, "{r:?}");
        assert_eq!(r.losses.len(), 15);
        assert_eq!(model.config, opts.config);
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let a = Tensor::<f32>::zeros([8, 8, 3]);
        let b = Tensor::<f32>::zeros([8, 6, 3]);
        assert!(train_toy(&a, &b, &ToyOptions::default()).is_err());
    }
}
