//! Graph-form of the fusion objective: the same per-dimension log-normalizer
//! algebra as [`crate::gaussian`], expressed as autodiff ops so the loss is
//! differentiable end to end. Scores are assembled column by column (one
//! fused support item at a time) to keep every intermediate rank-2.
//!
//! The numeric module stays the oracle; `scores_graph_matches_numeric` in the
//! tests pins the two routes together.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::gaussian::PriorSpec;

const LN_2PI: f64 = 1.8378770664093453;

/// Encoded views of one support item: mean and precision nodes, each [V, D].
#[derive(Clone, Copy, Debug)]
pub struct ItemNodes {
    pub means: NodeId,
    pub precisions: NodeId,
}

/// Fused support item in the graph: mean and precision of the normalized
/// view product, each of shape [1, D].
#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    pub mean: NodeId,
    pub precision: NodeId,
}

/// Product of one item's view factors: tau_s = sum_v tau_v,
/// mu_s = sum_v tau_v mu_v / tau_s.
pub fn build_fuse_item(g: &mut Graph, item: ItemNodes) -> Result<FusedNodes> {
    let tau_s = g.sum(item.precisions, &[0], true)?;
    let weighted = g.mul(item.precisions, item.means)?;
    let tau_mu = g.sum(weighted, &[0], true)?;
    let mu_s = g.div(tau_mu, tau_s)?;
    Ok(FusedNodes { mean: mu_s, precision: tau_s })
}

/// Per-dimension two-factor log normalizer of (a, b), elementwise with
/// broadcasting:
///   log S = -1/2 ln 2pi + 1/2 (ln ta + ln tb - ln(ta+tb))
///           - 1/2 (ma - mb)^2 * ta tb / (ta + tb)
fn build_pair_log_norm(
    g: &mut Graph,
    a_mean: NodeId,
    a_tau: NodeId,
    b_mean: NodeId,
    b_tau: NodeId,
) -> Result<NodeId> {
    let ln_ta = g.ln(a_tau);
    let ln_tb = g.ln(b_tau);
    let tsum = g.add(a_tau, b_tau)?;
    let ln_tsum = g.ln(tsum);
    let lnpart = g.add(ln_ta, ln_tb)?;
    let lnpart = g.sub(lnpart, ln_tsum)?;
    let lnpart = g.affine(lnpart, 0.5, -0.5 * LN_2PI);

    let w = g.mul(a_tau, b_tau)?;
    let w = g.div(w, tsum)?;
    let dmu = g.sub(a_mean, b_mean)?;
    let dsq = g.square(dmu);
    let quad = g.mul(w, dsq)?;
    let quad = g.affine(quad, -0.5, 0.0);

    g.add(lnpart, quad)
}

/// Score matrix node of shape [N, M]: entry (n, m) is the log predictive
/// score of query n against support item m under `prior`.
pub fn build_episode_scores(
    g: &mut Graph,
    support: &[ItemNodes],
    query_means: NodeId,
    query_precisions: NodeId,
    prior: &PriorSpec,
) -> Result<NodeId> {
    if support.is_empty() {
        return Err(Error::Graph("episode with zero support items".into()));
    }
    let prior_nodes = match prior {
        PriorSpec::Neglect => None,
        PriorSpec::Gaussian { mean, precision } => {
            let d = mean.len();
            let pm = g.constant(Tensor::from_vec(vec![1, d], mean.clone())?);
            let pt = g.constant(Tensor::from_vec(vec![1, d], precision.clone())?);
            Some((pm, pt))
        }
    };

    let mut cols = Vec::with_capacity(support.len());
    for item in support {
        let fused = build_fuse_item(g, *item)?;
        let star = build_pair_log_norm(g, query_means, query_precisions, fused.mean, fused.precision)?;
        let mut col = g.sum(star, &[1], true)?; // [N, 1]
        if let Some((pm, pt)) = prior_nodes {
            let prime = build_pair_log_norm(g, pm, pt, fused.mean, fused.precision)?;
            let prime = g.sum(prime, &[1], true)?; // [1, 1]
            col = g.sub(col, prime)?;
        }
        cols.push(col);
    }
    g.concat(&cols, 1)
}

/// Mean negative log likelihood of the targets under the row softmax of a
/// score matrix node. The target pick is a one-hot mask contraction so the
/// whole loss stays inside the primitive op set.
pub fn build_poem_nll(g: &mut Graph, scores: NodeId, targets: &[usize]) -> Result<NodeId> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 {
        return Err(Error::Graph(format!("score node must be rank 2, got {shape:?}")));
    }
    let (n, m) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(Error::Graph("target count does not match query count".into()));
    }
    let mut onehot = vec![0.0; n * m];
    for (q, &t) in targets.iter().enumerate() {
        if t >= m {
            return Err(Error::Graph(format!("target {t} out of range for {m} items")));
        }
        onehot[q * m + t] = 1.0;
    }
    let mask = g.constant(Tensor::from_vec(vec![n, m], onehot)?);
    let picked = g.mul(scores, mask)?;
    let picked = g.sum(picked, &[1], false)?; // [N]
    let lse = g.logsumexp(scores, 1, false)?; // [N]
    let per_query = g.sub(lse, picked)?;
    g.mean(per_query, &[], false)
}

/// Row argmax of an evaluated [N, M] tensor.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let m = t.shape()[1];
    t.data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
