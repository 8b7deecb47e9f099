//! Global-model averaging: uniform, sample-count weighted, and loss-aware ("smart").
//!
//! The smart strategy scores each client by an upper confidence bound on its
//! mean training loss, `b_i = μ_i + 2σ_i`, turns the bounds into quality
//! scores `q = softmax(α·(1 − b))`, mixes them with the data shares
//! `d = m / Σm` as `r = (q ⊙ d) / (qᵀd)`, and averages with `r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SplitModelWeights;
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    #[serde(rename = "fedavg")]
    FedAvg,
    Smart,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::FedAvg, Strategy::Smart];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::FedAvg => "fedavg",
            Strategy::Smart => "smart",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Strategy::Naive),
            "fedavg" => Ok(Strategy::FedAvg),
            "smart" => Ok(Strategy::Smart),
            other => Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

/// `mean + 2·std` of a client's per-sample losses, population standard deviation.
pub fn unreliability_indicator<T: Scalar>(losses: &[T]) -> Result<T> {
    if losses.is_empty() {
        return Err(Error::Empty("unreliability_indicator"));
    }
    let n = T::from_usize(losses.len()).unwrap();
    let mean = losses.iter().copied().sum::<T>() / n;
    let var = losses.iter().map(|&l| (l - mean) * (l - mean)).sum::<T>() / n;
    Ok(mean + T::lit(2.0) * var.sqrt())
}

/// `softmax(α·(1 − b))` with max subtraction.
pub fn quality_scores<T: Scalar>(b: &[T], alpha: T) -> Result<Vec<T>> {
    if b.is_empty() {
        return Err(Error::Empty("quality_scores"));
    }
    if let Some((i, v)) = b.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteIndicator { client: i + 1, value: v.to_f64_lossy() });
    }
    let logits: Vec<T> = b.iter().map(|&bi| alpha * (T::one() - bi)).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Data shares, quality scores and the final averaging weights of the smart strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights<T> {
    pub d: Vec<T>,
    pub q: Vec<T>,
    pub r: Vec<T>,
}

pub fn data_shares<T: Scalar>(m: &[usize]) -> Result<Vec<T>> {
    if m.is_empty() {
        return Err(Error::Empty("data_shares"));
    }
    if m.contains(&0) {
        return Err(Error::invalid("data_shares", "every client needs at least one sample"));
    }
    let total = T::from_usize(m.iter().sum()).unwrap();
    Ok(m.iter().map(|&mi| T::from_usize(mi).unwrap() / total).collect())
}

pub fn smart_weights<T: Scalar>(b: &[T], m: &[usize], alpha: T) -> Result<AggregationWeights<T>> {
    if b.len() != m.len() {
        return Err(Error::invalid("smart_weights", format!("{} indicators for {} sample counts", b.len(), m.len())));
    }
    let d = data_shares::<T>(m)?;
    let q = quality_scores(b, alpha)?;
    let qd: Vec<T> = q.iter().zip(&d).map(|(&qi, &di)| qi * di).collect();
    let norm = qd.iter().copied().sum::<T>();
    let r = qd.into_iter().map(|x| x / norm).collect();
    Ok(AggregationWeights { d, q, r })
}

fn check_snapshots<T: Scalar>(snapshots: &[SplitModelWeights<T>], op: &'static str) -> Result<()> {
    let first = snapshots.first().ok_or(Error::Empty(op))?;
    if let Some(i) = snapshots.iter().position(|s| !s.same_layout(first)) {
        return Err(Error::invalid(op, format!("snapshot {i} has a different parameter layout")));
    }
    Ok(())
}

/// `Σ_i coef_i·x_i / norm` per element, projected onto the clients' `[min, max]`
/// range so rounding never leaves the convex hull.
fn combine<T: Scalar>(snapshots: &[SplitModelWeights<T>], coef: &[T], norm: Option<T>) -> SplitModelWeights<T> {
    let mut out = snapshots[0].clone();
    for (s, stage) in out.stages_mut().into_iter().enumerate() {
        for (p, param) in stage.iter_mut().enumerate() {
            let sources: Vec<&[T]> = snapshots.iter().map(|w| w.stages()[s].params()[p].tensor.data()).collect();
            for (j, dst) in param.tensor.data_mut().iter_mut().enumerate() {
                let mut acc = T::zero();
                let mut lo = T::infinity();
                let mut hi = T::neg_infinity();
                for (src, &c) in sources.iter().zip(coef) {
                    let x = src[j];
                    acc += c * x;
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                if let Some(n) = norm {
                    acc /= n;
                }
                if acc.is_finite() && lo <= hi {
                    acc = acc.max(lo).min(hi);
                }
                *dst = acc;
            }
        }
    }
    out
}

/// Equal weight per client.
pub fn naive_average<T: Scalar>(snapshots: &[SplitModelWeights<T>]) -> Result<SplitModelWeights<T>> {
    check_snapshots(snapshots, "naive_average")?;
    let coef = vec![T::one(); snapshots.len()];
    Ok(combine(snapshots, &coef, Some(T::from_usize(snapshots.len()).unwrap())))
}

/// Weights proportional to the clients' sample counts.
pub fn federated_average<T: Scalar>(snapshots: &[SplitModelWeights<T>], m: &[usize]) -> Result<SplitModelWeights<T>> {
    check_snapshots(snapshots, "federated_average")?;
    if m.len() != snapshots.len() {
        return Err(Error::invalid(
            "federated_average",
            format!("{} sample counts for {} snapshots", m.len(), snapshots.len()),
        ));
    }
    if m.contains(&0) {
        return Err(Error::invalid("federated_average", "sample counts must be positive"));
    }
    let coef: Vec<T> = m.iter().map(|&mi| T::from_usize(mi).unwrap()).collect();
    let total = T::from_usize(m.iter().sum()).unwrap();
    Ok(combine(snapshots, &coef, Some(total)))
}

/// `Σ r_i·W_i` for a weight vector on the probability simplex.
pub fn weighted_average<T: Scalar>(snapshots: &[SplitModelWeights<T>], r: &[T]) -> Result<SplitModelWeights<T>> {
    check_snapshots(snapshots, "weighted_average")?;
    if r.len() != snapshots.len() {
        return Err(Error::invalid(
            "weighted_average",
            format!("{} weights for {} snapshots", r.len(), snapshots.len()),
        ));
    }
    let sum = r.iter().copied().sum::<T>();
    if r.iter().any(|&ri| ri.is_nan() || ri < T::zero()) || (sum - T::one()).abs() > T::lit(1e-9) {
        return Err(Error::invalid("weighted_average", "weights must be non-negative and sum to 1"));
    }
    Ok(combine(snapshots, r, None))
}

/// Result of one aggregation round.
#[derive(Clone, Debug)]
pub struct Aggregate<T> {
    pub model: SplitModelWeights<T>,
    /// The per-client weight each client effectively received.
    pub weights: Vec<T>,
    /// Present for the smart strategy.
    pub smart: Option<AggregationWeights<T>>,
}

/// Applies `strategy`; `b` is only consulted by the smart strategy.
pub fn aggregate<T: Scalar>(
    strategy: Strategy,
    snapshots: &[SplitModelWeights<T>],
    m: &[usize],
    b: &[T],
    alpha: T,
) -> Result<Aggregate<T>> {
    match strategy {
        Strategy::Naive => {
            let n = T::from_usize(snapshots.len().max(1)).unwrap();
            Ok(Aggregate {
                model: naive_average(snapshots)?,
                weights: vec![T::one() / n; snapshots.len()],
                smart: None,
            })
        }
        Strategy::FedAvg => {
            Ok(Aggregate { model: federated_average(snapshots, m)?, weights: data_shares(m)?, smart: None })
        }
        Strategy::Smart => {
            let w = smart_weights(b, m, alpha)?;
            Ok(Aggregate { model: weighted_average(snapshots, &w.r)?, weights: w.r.clone(), smart: Some(w) })
        }
    }
}
