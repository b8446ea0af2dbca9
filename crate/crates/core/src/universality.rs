//! Numerical verifier for the loss-universality results.
//!
//! Setting: single-sample, unnormalized, unclipped losses, with gradients
//! taken with respect to the model's *predictions* (the Gaussian policy
//! mean and the advantage-head output) rather than network weights. Two
//! facts are checked numerically:
//!
//! 1. **Collision**: the plain advantage-weighted regression loss maps two
//!    different label pairs (action, advantage) to the same gradient, so no
//!    update rule built from that gradient can distinguish them.
//! 2. **Recovery**: the enriched loss (with λ > 0) admits closed-form
//!    inversion from its gradients back to the labels, for any labels —
//!    and the inversion degenerates exactly at λ = 0.
//!
//! Closed forms are cross-checked against reverse-mode gradients of the
//! same losses built from the production weight and log-density code, so
//! drift in either implementation breaks these checks.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::graph::{DiffError, Graph};
use crate::losses::{advantage_weights, LossConfig, LossError};
use crate::nets::gaussian_log_prob_single;
use crate::tensor::Tensor;

/// A supervision pair: the action label and the scalar advantage label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPair {
    pub action: Vec<f64>,
    pub advantage: f64,
}

impl LabelPair {
    pub fn new(action: Vec<f64>, advantage: f64) -> Result<LabelPair, UniversalityError> {
        if !advantage.is_finite() || action.iter().any(|v| !v.is_finite()) || action.is_empty() {
            return Err(UniversalityError::InvalidLabels);
        }
        Ok(LabelPair { action, advantage })
    }

    pub fn dim(&self) -> usize {
        self.action.len()
    }

    /// ∞-norm distance over the concatenated (action, advantage) vector.
    pub fn distance(&self, other: &LabelPair) -> f64 {
        let mut d = (self.advantage - other.advantage).abs();
        for (a, b) in self.action.iter().zip(&other.action) {
            d = d.max((a - b).abs());
        }
        d
    }
}

/// Errors from the universality checks.
#[derive(Debug, Clone, PartialEq)]
pub enum UniversalityError {
    /// Labels must be finite and the action non-empty.
    InvalidLabels,
    /// Collision is only meaningful for distinct pairs.
    IdenticalPairs,
    /// The two pairs have different action dimensions.
    DimMismatch { left: usize, right: usize },
    /// λ = 0 removes the advantage term; the gradient no longer determines
    /// the labels.
    NonInvertible,
    Diff(DiffError),
    Loss(LossError),
}

impl core::fmt::Display for UniversalityError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            UniversalityError::InvalidLabels => write!(f, "labels must be finite and non-empty"),
            UniversalityError::IdenticalPairs => {
                write!(f, "collision check needs two distinct label pairs")
            }
            UniversalityError::DimMismatch { left, right } => {
                write!(f, "action dimensions differ: {left} vs {right}")
            }
            UniversalityError::NonInvertible => {
                write!(f, "labels cannot be recovered when the advantage term is absent (λ = 0)")
            }
            UniversalityError::Diff(e) => write!(f, "{e}"),
            UniversalityError::Loss(e) => write!(f, "{e}"),
        }
    }
}

impl From<DiffError> for UniversalityError {
    fn from(e: DiffError) -> Self {
        UniversalityError::Diff(e)
    }
}

impl From<LossError> for UniversalityError {
    fn from(e: LossError) -> Self {
        UniversalityError::Loss(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for UniversalityError {}

fn single_sample_cfg(temp: f64) -> LossConfig {
    // The proofs' setting has no weight clipping; everything else follows
    // the production configuration.
    LossConfig { temperature: temp, adv_clip: f64::INFINITY, ..LossConfig::default() }
}

/// Closed-form gradient of the single-sample advantage-weighted regression
/// loss with respect to the policy mean: `(1/σ²)·exp(A/T)·(â_μ − a)`.
pub fn awr_grad_wrt_mean(mu: &[f64], a: &[f64], adv: f64, sigma2: f64, temp: f64) -> Vec<f64> {
    assert!(sigma2 > 0.0 && temp > 0.0, "variance and temperature must be positive");
    assert_eq!(mu.len(), a.len(), "mean and action must share a dimension");
    let w = fmath::exp(adv / temp) / sigma2;
    mu.iter().zip(a).map(|(m, x)| w * (m - x)).collect()
}

/// The same gradient computed by reverse-mode differentiation of the loss
/// assembled from the production weight and log-density implementations.
pub fn awr_grad_autodiff(
    mu: &[f64],
    a: &[f64],
    adv: f64,
    sigma2: f64,
    temp: f64,
) -> Result<Vec<f64>, UniversalityError> {
    let k = mu.len();
    let cfg = single_sample_cfg(temp);
    let w = advantage_weights(&[adv], &cfg)?[0];
    let mut g = Graph::new();
    let mu_id = g.param(Tensor::matrix(1, k, mu.to_vec()));
    let a_id = g.constant(Tensor::matrix(1, k, a.to_vec()));
    let logp = gaussian_log_prob_single(&mut g, mu_id, a_id, sigma2)?;
    let loss = g.scale(logp, -w);
    let grads = g.grad(loss, &[mu_id], false)?;
    Ok(g.value(grads[0]).data().to_vec())
}

/// Outcome of a collision check.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionReport {
    /// ∞-norm gap between the two closed-form gradients.
    pub gap: f64,
    /// ∞-norm gap between the two reverse-mode gradients.
    pub gap_autodiff: f64,
    /// ∞-norm distance between the label pairs themselves.
    pub label_distance: f64,
    /// True iff both gradient gaps fall below the tolerance while the
    /// labels stay apart — i.e. the loss cannot tell the pairs apart.
    pub collides: bool,
}

/// Check whether two distinct label pairs produce the same advantage-
/// weighted regression gradient at policy mean zero, via both the closed
/// form and reverse-mode differentiation.
pub fn verify_collision(
    p1: &LabelPair,
    p2: &LabelPair,
    sigma2: f64,
    temp: f64,
    tol: f64,
) -> Result<CollisionReport, UniversalityError> {
    if p1.dim() != p2.dim() {
        return Err(UniversalityError::DimMismatch { left: p1.dim(), right: p2.dim() });
    }
    let label_distance = p1.distance(p2);
    if label_distance <= tol {
        return Err(UniversalityError::IdenticalPairs);
    }
    let mu = vec![0.0; p1.dim()];

    let g1 = awr_grad_wrt_mean(&mu, &p1.action, p1.advantage, sigma2, temp);
    let g2 = awr_grad_wrt_mean(&mu, &p2.action, p2.advantage, sigma2, temp);
    let gap = inf_gap(&g1, &g2);

    let h1 = awr_grad_autodiff(&mu, &p1.action, p1.advantage, sigma2, temp)?;
    let h2 = awr_grad_autodiff(&mu, &p2.action, p2.advantage, sigma2, temp)?;
    let gap_autodiff = inf_gap(&h1, &h2);

    Ok(CollisionReport {
        gap,
        gap_autodiff,
        label_distance,
        collides: gap < tol && gap_autodiff < tol,
    })
}

fn inf_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// The canonical colliding pair: `a₁ = 1⃗, A₁ = T` against `a₂ = 0.1·1⃗`
/// with `A₂ = (1 + ln 10)·T`, the advantage solving `exp(A₂/T)·0.1 = e`.
/// Both pairs map to the gradient `−(e/σ²)·1⃗` at mean zero; they are the
/// `c = 1` and `c = 0.1` members of [`scaled_member`]'s family.
pub fn colliding_pair(k: usize, temp: f64) -> (LabelPair, LabelPair) {
    (scaled_member(1.0, k, temp), scaled_member(0.1, k, temp))
}

/// One member of the colliding family `a = c·1⃗, A = T·(1 − ln c)`, c > 0:
/// every member produces the gradient `−(e/σ²)·1⃗` at mean zero, because
/// `exp(A/T)·c = exp(1 − ln c)·c = e`.
pub fn scaled_member(c: f64, k: usize, temp: f64) -> LabelPair {
    assert!(c > 0.0, "the family is defined for positive scales");
    LabelPair { action: vec![c; k], advantage: temp * (1.0 - fmath::ln(c)) }
}

/// Reverse-mode gradients of the single-sample enriched loss
/// `w(A)·(−log π(a | â_μ)) + λ·(Â − A)²` with respect to the two
/// predictions: the policy mean (`g_awr`) and the advantage output
/// (`g_adv`).
pub fn enriched_grads(
    mu: &[f64],
    adv_pred: f64,
    labels: &LabelPair,
    sigma2: f64,
    lambda: f64,
    temp: f64,
) -> Result<(Vec<f64>, f64), UniversalityError> {
    let k = mu.len();
    if labels.dim() != k {
        return Err(UniversalityError::DimMismatch { left: k, right: labels.dim() });
    }
    let cfg = single_sample_cfg(temp);
    let w = advantage_weights(&[labels.advantage], &cfg)?[0];

    let mut g = Graph::new();
    let mu_id = g.param(Tensor::matrix(1, k, mu.to_vec()));
    let ahat_id = g.param(Tensor::scalar(adv_pred));
    let a_id = g.constant(Tensor::matrix(1, k, labels.action.clone()));
    let logp = gaussian_log_prob_single(&mut g, mu_id, a_id, sigma2)?;
    let awr = g.scale(logp, -w);
    let resid = g.offset(ahat_id, -labels.advantage);
    let sq = g.square(resid);
    let adv_term = g.scale(sq, lambda);
    let loss = g.add(awr, adv_term)?;

    let grads = g.grad(loss, &[mu_id, ahat_id], false)?;
    let g_awr = g.value(grads[0]).data().to_vec();
    let g_adv = g.item(grads[1]);
    Ok((g_awr, g_adv))
}

/// Invert the enriched-loss gradients back to the labels:
/// `A = Â − g_adv/(2λ)`, then `a = â_μ − σ²·exp(−A/T)·g_awr`.
pub fn recover_labels(
    g_adv: f64,
    g_awr: &[f64],
    adv_pred: f64,
    mu: &[f64],
    sigma2: f64,
    lambda: f64,
    temp: f64,
) -> Result<LabelPair, UniversalityError> {
    assert!(sigma2 > 0.0 && temp > 0.0, "variance and temperature must be positive");
    if lambda == 0.0 {
        return Err(UniversalityError::NonInvertible);
    }
    if g_awr.len() != mu.len() {
        return Err(UniversalityError::DimMismatch { left: mu.len(), right: g_awr.len() });
    }
    let advantage = adv_pred - g_adv / (2.0 * lambda);
    let scale = sigma2 * fmath::exp(-advantage / temp);
    let action: Vec<f64> = mu.iter().zip(g_awr).map(|(m, g)| m - scale * g).collect();
    LabelPair::new(action, advantage)
}
