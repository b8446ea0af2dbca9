//! Training losses: Monte-Carlo value regression, advantage-weighted
//! regression, and the enriched policy adaptation loss.
//!
//! The enriched loss is the sum of the advantage-weighted regression term
//! and a λ-weighted advantage-regression term. The extra term exists for a
//! structural reason: the gradient of the weighted log-likelihood alone maps
//! distinct `(action, advantage)` label pairs to identical gradients, so no
//! network adapted through that gradient can distinguish them. Regressing an
//! explicit advantage head during adaptation restores the missing
//! information (see the `universality` module for the numerical
//! demonstration).
//!
//! Advantage weights and advantage-regression targets are computed from
//! value-net *values* and enter the policy losses as constants: the policy
//! adaptation gradient treats the weights as fixed, and value-function
//! learning flows exclusively through the value regression loss.

use alloc::vec::Vec;

use crate::envs::Batch;
use crate::fmath;
use crate::graph::{DiffError, Graph, NodeId};
use crate::nets::{gaussian_log_prob, NetError, PolicyNet, ValueNet};
use crate::tensor::{Shape, Tensor};

/// Scalar knobs shared by the losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Advantage-weight temperature `T`.
    pub temperature: f64,
    /// Coefficient `λ` on the advantage-regression term of the enriched
    /// adaptation loss.
    pub lambda: f64,
    /// Cap on the pre-exponential advantage logit.
    pub adv_clip: f64,
    /// Dataset-level discount used for Monte-Carlo returns.
    pub gamma: f64,
    /// Additive stabilizer on the advantage-normalization denominator.
    pub norm_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 1.0, lambda: 1e-2, adv_clip: 20.0, gamma: 0.99, norm_eps: 1e-8 }
    }
}

/// Errors from loss construction.
#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Losses are means over a batch; an empty batch has no mean.
    EmptyBatch,
    Net(NetError),
    Diff(DiffError),
}

impl core::fmt::Display for LossError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LossError::EmptyBatch => write!(f, "loss requested over an empty batch"),
            LossError::Net(e) => write!(f, "{e}"),
            LossError::Diff(e) => write!(f, "{e}"),
        }
    }
}

impl From<NetError> for LossError {
    fn from(e: NetError) -> Self {
        LossError::Net(e)
    }
}

impl From<DiffError> for LossError {
    fn from(e: DiffError) -> Self {
        LossError::Diff(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LossError {}

/// Discounted Monte-Carlo return of each step of one episode's rewards:
/// `R_t = r_t + γ·R_{t+1}`.
pub fn monte_carlo_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    assert!(gamma > 0.0 && gamma <= 1.0, "discount must lie in (0, 1]");
    let mut out = alloc::vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Exponentiated, normalized advantage weights.
///
/// Advantages are normalized to zero mean and unit (population) std over the
/// batch — with `norm_eps` added to the std so a constant batch maps to zero
/// logits — then divided by the temperature, clipped from above at
/// `adv_clip`, and exponentiated. A single-sample batch skips normalization,
/// since its own statistics would erase the signal.
pub fn advantage_weights(advantages: &[f64], cfg: &LossConfig) -> Result<Vec<f64>, LossError> {
    let n = advantages.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let normalized: Vec<f64> = if n == 1 {
        advantages.to_vec()
    } else {
        let mean = advantages.iter().sum::<f64>() / n as f64;
        let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let denom = fmath::sqrt(var) + cfg.norm_eps;
        advantages.iter().map(|a| (a - mean) / denom).collect()
    };
    Ok(normalized
        .iter()
        .map(|a| {
            let logit = a / cfg.temperature;
            fmath::exp(if logit > cfg.adv_clip { cfg.adv_clip } else { logit })
        })
        .collect())
}

/// Value predictions for a batch as a length-B vector node.
pub fn value_predictions(
    g: &mut Graph,
    vnet: &ValueNet,
    phi: &[NodeId],
    batch: &Batch,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let obs = batch.obs_node(g);
    let preds = vnet.forward(g, phi, obs)?;
    Ok(g.reshape(preds, Shape::vector(batch.len()))?)
}

/// Monte-Carlo value regression: `mean((V_φ(s) − R)²)`.
pub fn value_loss(
    g: &mut Graph,
    vnet: &ValueNet,
    phi: &[NodeId],
    batch: &Batch,
) -> Result<NodeId, LossError> {
    let preds = value_predictions(g, vnet, phi, batch)?;
    let ret = batch.ret_node(g);
    let diff = g.sub(preds, ret)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Advantage-weighted regression loss `mean(−log π(a|s) · w)` with weights
/// precomputed from detached value predictions.
pub fn awr_loss_with_values(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    batch: &Batch,
    v_values: &[f64],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    assert_eq!(v_values.len(), batch.len(), "one value per batch row");
    let adv: Vec<f64> = batch.ret.iter().zip(v_values).map(|(r, v)| r - v).collect();
    let w = advantage_weights(&adv, cfg)?;
    let obs = batch.obs_node(g);
    let act = batch.act_node(g);
    let (mean, _) = pnet.forward(g, theta, obs, None, false)?;
    let logp = gaussian_log_prob(g, mean, act, pnet.sigma2)?;
    let w_node = g.constant(Tensor::vector(w));
    let weighted = g.mul(logp, w_node)?;
    let avg = g.mean(weighted);
    Ok(g.scale(avg, -1.0))
}

/// Advantage-weighted regression against a value net: weights come from
/// `R − V_φ(s)` with the value predictions detached.
pub fn awr_loss(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    vnet: &ValueNet,
    phi: &[NodeId],
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let v = value_predictions(g, vnet, phi, batch)?;
    let v_values = g.value(v).data().to_vec();
    awr_loss_with_values(g, pnet, theta, batch, &v_values, cfg)
}

/// Advantage-regression loss `mean((Â_θ(s,a) − (R − V(s)))²)` with detached
/// targets.
pub fn adv_loss_with_values(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    batch: &Batch,
    v_values: &[f64],
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    assert_eq!(v_values.len(), batch.len(), "one value per batch row");
    let obs = batch.obs_node(g);
    let act = batch.act_node(g);
    let (_, adv) = pnet.forward(g, theta, obs, Some(act), true)?;
    let adv = adv.expect("advantage requested");
    let flat = g.reshape(adv, Shape::vector(batch.len()))?;
    let targets: Vec<f64> = batch.ret.iter().zip(v_values).map(|(r, v)| r - v).collect();
    let t_node = g.constant(Tensor::vector(targets));
    let diff = g.sub(flat, t_node)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Advantage regression against a value net (targets detached).
pub fn adv_loss(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    vnet: &ValueNet,
    phi: &[NodeId],
    batch: &Batch,
) -> Result<NodeId, LossError> {
    let v = value_predictions(g, vnet, phi, batch)?;
    let v_values = g.value(v).data().to_vec();
    adv_loss_with_values(g, pnet, theta, batch, &v_values)
}

/// Enriched policy adaptation loss: AWR term plus `λ ×` advantage
/// regression, sharing a single body forward pass.
pub fn policy_adapt_loss_with_values(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    batch: &Batch,
    v_values: &[f64],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    assert_eq!(v_values.len(), batch.len(), "one value per batch row");
    let adv_vals: Vec<f64> = batch.ret.iter().zip(v_values).map(|(r, v)| r - v).collect();
    let w = advantage_weights(&adv_vals, cfg)?;

    let obs = batch.obs_node(g);
    let act = batch.act_node(g);
    let (mean, adv) = pnet.forward(g, theta, obs, Some(act), true)?;

    let logp = gaussian_log_prob(g, mean, act, pnet.sigma2)?;
    let w_node = g.constant(Tensor::vector(w));
    let weighted = g.mul(logp, w_node)?;
    let awr_avg = g.mean(weighted);
    let awr_term = g.scale(awr_avg, -1.0);

    let adv = adv.expect("advantage requested");
    let flat = g.reshape(adv, Shape::vector(batch.len()))?;
    let t_node = g.constant(Tensor::vector(adv_vals));
    let diff = g.sub(flat, t_node)?;
    let sq = g.square(diff);
    let adv_term = g.mean(sq);

    let scaled = g.scale(adv_term, cfg.lambda);
    Ok(g.add(awr_term, scaled)?)
}

/// Enriched adaptation loss against a value net.
pub fn policy_adapt_loss(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    vnet: &ValueNet,
    phi: &[NodeId],
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let v = value_predictions(g, vnet, phi, batch)?;
    let v_values = g.value(v).data().to_vec();
    policy_adapt_loss_with_values(g, pnet, theta, batch, &v_values, cfg)
}

/// Plain negative log-likelihood `mean(−log π(a|s))`, the behavior-cloning
/// objective.
pub fn nll_loss(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    batch: &Batch,
) -> Result<NodeId, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let obs = batch.obs_node(g);
    let act = batch.act_node(g);
    let (mean, _) = pnet.forward(g, theta, obs, None, false)?;
    let logp = gaussian_log_prob(g, mean, act, pnet.sigma2)?;
    let avg = g.mean(logp);
    Ok(g.scale(avg, -1.0))
}
