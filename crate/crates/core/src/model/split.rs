//! Forward/backward passes across the client–server split.
//!
//! Each stage runs on its own graph. Activations and gradients cross stage
//! boundaries only through a [`Link`], which is where channel noise enters.
//! [`monolithic_train_step`] executes the identical operation sequence on a
//! single graph with no link at all and serves as the reference for the split path.

use crate::autograd::{argmax_channels, Graph, Mode, Tensor, Var};
use crate::channel::{Hop, Link};
use crate::error::{Error, Result};
use crate::model::params::SplitModelWeights;
use crate::model::unet::{forward_back, forward_front, forward_server, ArchConfig};
use crate::scalar::Scalar;

/// Parameter gradients of the three stages, aligned with each stage's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitGrads<T> {
    pub front_end: Vec<Option<Vec<T>>>,
    pub server: Vec<Option<Vec<T>>>,
    pub back_end: Vec<Option<Vec<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub loss: T,
    pub grads: SplitGrads<T>,
}

/// One training pass (train-mode batch norm) through the split model.
///
/// Batch-norm running statistics in `w` are updated as a side effect.
pub fn split_train_step<T: Scalar>(
    cfg: &ArchConfig,
    w: &mut SplitModelWeights<T>,
    images: &Tensor<T>,
    target: &Tensor<T>,
    link: &mut dyn Link<T>,
) -> Result<StepOutput<T>> {
    let mut gf = Graph::new();
    let x = gf.leaf(images.clone(), false);
    let fe = forward_front(&mut gf, cfg, &mut w.front_end, x, Mode::Train, true)?;
    let f1 = link.send(Hop::FeaturesUp, gf.value(fe.output).clone());

    let mut gs = Graph::new();
    let s_in = gs.leaf(f1, true);
    let srv = forward_server(&mut gs, cfg, &mut w.server, s_in, Mode::Train, true)?;
    let f2 = link.send(Hop::FeaturesDown, gs.value(srv.output).clone());

    let mut gb = Graph::new();
    let b_in = gb.leaf(f2, true);
    let be = forward_back(&mut gb, cfg, &mut w.back_end, b_in, true)?;
    let loss_var = gb.dice_loss(be.output, target)?;
    let loss = gb.value(loss_var).item();
    gb.backward(loss_var)?;

    let g2 = grad_tensor(&gb, b_in)?;
    let g2 = link.send(Hop::GradientsUp, g2);
    gs.backward_with(srv.output, g2.data())?;
    let g1 = grad_tensor(&gs, s_in)?;
    let g1 = link.send(Hop::GradientsDown, g1);
    gf.backward_with(fe.output, g1.data())?;

    Ok(StepOutput {
        loss,
        grads: SplitGrads {
            front_end: fe.params.grads(&gf),
            server: srv.params.grads(&gs),
            back_end: be.params.grads(&gb),
        },
    })
}

fn grad_tensor<T: Scalar>(g: &Graph<T>, v: Var) -> Result<Tensor<T>> {
    let data = g.grad(v).ok_or_else(|| Error::invalid("split_train_step", "boundary gradient missing"))?;
    Tensor::new(g.value(v).shape().to_vec(), data.to_vec())
}

/// The same layer sequence as [`split_train_step`] on one graph, with no link.
pub fn monolithic_train_step<T: Scalar>(
    cfg: &ArchConfig,
    w: &mut SplitModelWeights<T>,
    images: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<StepOutput<T>> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let fe = forward_front(&mut g, cfg, &mut w.front_end, x, Mode::Train, true)?;
    let srv = forward_server(&mut g, cfg, &mut w.server, fe.output, Mode::Train, true)?;
    let be = forward_back(&mut g, cfg, &mut w.back_end, srv.output, true)?;
    let loss_var = g.dice_loss(be.output, target)?;
    let loss = g.value(loss_var).item();
    g.backward(loss_var)?;
    Ok(StepOutput {
        loss,
        grads: SplitGrads {
            front_end: fe.params.grads(&g),
            server: srv.params.grads(&g),
            back_end: be.params.grads(&g),
        },
    })
}

/// Eval-mode class probabilities through the split model.
pub fn split_predict<T: Scalar>(
    cfg: &ArchConfig,
    w: &mut SplitModelWeights<T>,
    images: &Tensor<T>,
    link: &mut dyn Link<T>,
) -> Result<Tensor<T>> {
    let mut gf = Graph::new();
    let x = gf.leaf(images.clone(), false);
    let fe = forward_front(&mut gf, cfg, &mut w.front_end, x, Mode::Eval, false)?;
    let f1 = link.send(Hop::FeaturesUp, gf.value(fe.output).clone());
    let mut gs = Graph::new();
    let s_in = gs.leaf(f1, false);
    let srv = forward_server(&mut gs, cfg, &mut w.server, s_in, Mode::Eval, false)?;
    let f2 = link.send(Hop::FeaturesDown, gs.value(srv.output).clone());
    let mut gb = Graph::new();
    let b_in = gb.leaf(f2, false);
    let be = forward_back(&mut gb, cfg, &mut w.back_end, b_in, false)?;
    Ok(gb.value(be.output).clone())
}

/// Eval-mode probabilities of the unsplit layer stack.
pub fn monolithic_predict<T: Scalar>(
    cfg: &ArchConfig,
    w: &mut SplitModelWeights<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let fe = forward_front(&mut g, cfg, &mut w.front_end, x, Mode::Eval, false)?;
    let srv = forward_server(&mut g, cfg, &mut w.server, fe.output, Mode::Eval, false)?;
    let be = forward_back(&mut g, cfg, &mut w.back_end, srv.output, false)?;
    Ok(g.value(be.output).clone())
}

/// Per-pixel labels from probabilities.
pub fn predict_labels<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    argmax_channels(probs)
}

/// Dice loss of a probability map against a one-hot target.
pub fn dice_value<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.leaf(probs.clone(), false);
    let l = g.dice_loss(p, target)?;
    Ok(g.value(l).item())
}

/// Eval-mode Dice loss of every sample on its own, each forward pass routed through `link`.
pub fn per_sample_losses<T: Scalar>(
    cfg: &ArchConfig,
    w: &mut SplitModelWeights<T>,
    samples: &[(Tensor<T>, Tensor<T>)],
    link: &mut dyn Link<T>,
) -> Result<Vec<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("per_sample_losses"));
    }
    samples
        .iter()
        .map(|(image, target)| {
            let probs = split_predict(cfg, w, image, link)?;
            dice_value(&probs, target)
        })
        .collect()
}
