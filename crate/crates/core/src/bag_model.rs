//! Relation-wise sentence attention over a bag, the bag classifier and its
//! cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BagParams {
    /// `l x d_model`.
    pub w3: ParamId,
    /// `l`.
    pub b3: ParamId,
}

/// How the per-relation bag score is formed from the attention weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BagScoring {
    /// `b_k = W3[k] . (sum_i alpha_ik P_i) + b3[k]`.
    #[default]
    AttendedVector,
    /// `b_k = sum_i alpha_ik u_ik`.
    WeightedScore,
}

impl fmt::Display for BagScoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BagScoring::AttendedVector => "attended_vector",
            BagScoring::WeightedScore => "weighted_score",
        })
    }
}

impl FromStr for BagScoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attended_vector" => Ok(BagScoring::AttendedVector),
            "weighted_score" => Ok(BagScoring::WeightedScore),
            other => Err(Error::Config(format!("unknown bag scoring `{other}`"))),
        }
    }
}

/// Per-sentence relation scores `U = P W3^T + b3` for an `n x d_model`
/// feature matrix; `n x l`.
pub fn sentence_scores(g: &mut Graph<'_>, features: Var, params: &BagParams) -> Result<Var> {
    let w3 = g.param(params.w3);
    let w3t = g.transpose(w3)?;
    let u = g.matmul(features, w3t)?;
    let b3 = g.param(params.b3);
    g.add_bias(u, b3)
}

#[derive(Clone, Copy, Debug)]
pub struct BagOutput {
    /// Bag scores, shape `[l]`.
    pub scores: Var,
    /// Attention `alpha`, `n x l`; every column sums to one.
    pub alpha: Var,
}

/// Softmax of `U` over the sentence axis, then bag scores per `scoring`.
pub fn bag_attention(
    g: &mut Graph<'_>,
    features: Var,
    scores: Var,
    params: &BagParams,
    scoring: BagScoring,
) -> Result<BagOutput> {
    let n = g.value(features).dims2().0;
    if n == 0 || g.value(scores).dims2().0 != n {
        return Err(Error::InvalidArgument(
            "bag attention needs at least one sentence".into(),
        ));
    }
    let alpha = g.softmax(scores, 0)?;
    let bag_scores = match scoring {
        BagScoring::AttendedVector => {
            let at = g.transpose(alpha)?;
            let attended = g.matmul(at, features)?;
            let w3 = g.param(params.w3);
            let prod = g.mul(attended, w3)?;
            let dots = g.sum_axis(prod, 1)?;
            let b3 = g.param(params.b3);
            g.add(dots, b3)?
        }
        BagScoring::WeightedScore => {
            let weighted = g.mul(alpha, scores)?;
            g.sum_axis(weighted, 0)?
        }
    };
    Ok(BagOutput {
        scores: bag_scores,
        alpha,
    })
}

/// Relation probabilities from bag scores.
pub fn classify(scores: &Tensor) -> Tensor {
    Tensor::vector(scores.data().to_vec())
        .softmax(0)
        .expect("non-empty score vector")
}

/// How per-bag losses are combined over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

impl fmt::Display for LossReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            other => Err(Error::Config(format!("unknown loss reduction `{other}`"))),
        }
    }
}

impl LossReduction {
    /// Weight applied to each per-bag loss in a batch of `batch` bags.
    pub fn weight(self, batch: usize) -> f64 {
        match self {
            LossReduction::Mean => 1.0 / batch as f64,
            LossReduction::Sum => 1.0,
        }
    }
}
