//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation as it is executed. Node ids grow
//! monotonically, so creation order is a valid topological order and the
//! backward pass is a single reverse sweep. Gradients of a tensor used by
//! several consumers are summed in reverse creation order of the consumers.
//!
//! The split model runs its three stages on three separate graphs. A stage
//! whose output gradient arrives from elsewhere is differentiated with
//! [`Graph::backward_with`], seeding the upstream gradient directly.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, Mode, RunningStats, Var, BN_EPS, BN_MOMENTUM, DICE_EPS};
pub use tensor::Tensor;

/// Per-pixel argmax over channels; ties and NaN rows resolve to the lowest class index.
pub fn argmax_channels<T: crate::Scalar>(probs: &Tensor<T>) -> crate::Result<Vec<u8>> {
    let [n, c, h, w] = probs.dims4("argmax_channels")?;
    let hw = h * w;
    let d = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0usize;
            for ch in 1..c {
                if d[(b * c + ch) * hw + p] > d[(b * c + best) * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
