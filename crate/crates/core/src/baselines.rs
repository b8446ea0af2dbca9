//! Comparison methods and ablations.
//!
//! - **Meta behavior cloning**: the same bi-level structure as the main
//!   method, but both policy losses are unweighted negative log-likelihood
//!   and no value network is kept.
//! - **Multi-task AWR + fine-tuning**: one policy/value pair trained
//!   single-level on the union of all task buffers, adapted at test time by
//!   a short run of optimizer steps.
//! - **No-enriched ablation**: λ = 0 in the inner loss and the advantage
//!   head frozen, isolating the contribution of the advantage-regression
//!   term.
//! - **No-weight-transform ablation**: every weight-transform layer swapped
//!   for a plain dense layer of equal width, all else identical.

use alloc::vec::Vec;

use crate::envs::{Batch, EnvError, ReplayBuffer, Transition};
use crate::graph::Graph;
use crate::losses::{awr_loss_with_values, value_loss, LossConfig};
use crate::meta::{
    meta_train, DataRegime, EvalHook, IterationMetrics, MetaError, MetaParams, PolicyObjective,
    TrainConfig, Trainer,
};
use crate::nets::{PolicyNet, ValueNet, DEFAULT_HIDDEN, DEFAULT_LATENT};
use crate::opt::Adam;
use crate::params::ParamSet;
use crate::rng::{purpose, sample_without_replacement, stream_rng};

/// Multi-task training learning rate for the value network.
pub const MT_VALUE_LR: f64 = 1e-4;
/// Multi-task training learning rate for the policy.
pub const MT_POLICY_LR: f64 = 1e-4;
/// Fine-tuning learning rate for the value network.
pub const FT_VALUE_LR: f64 = 1e-4;
/// Fine-tuning learning rate for the policy.
pub const FT_POLICY_LR: f64 = 1e-3;
/// Optimizer steps used to adapt at test time.
pub const FT_STEPS: usize = 20;

/// Every trainable method the experiment runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Macaw,
    MetaBc,
    MtAwrFt,
    MacawNoEnriched,
    MacawNoWt,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Macaw, Method::MetaBc, Method::MtAwrFt, Method::MacawNoEnriched, Method::MacawNoWt];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Macaw => "macaw",
            Method::MetaBc => "meta-bc",
            Method::MtAwrFt => "mt-awr-ft",
            Method::MacawNoEnriched => "macaw-no-enriched",
            Method::MacawNoWt => "macaw-no-wt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.tag() == tag)
    }

    /// Whether the method trains through the bi-level meta loop.
    pub fn is_meta(self) -> bool {
        !matches!(self, Method::MtAwrFt)
    }
}

/// Build the policy/value pair a method trains: dense layers for the
/// no-weight-transform ablation, weight-transform layers otherwise.
pub fn build_nets(
    method: Method,
    obs_dim: usize,
    act_dim: usize,
    hidden: &[usize],
    latent: usize,
) -> (PolicyNet, ValueNet) {
    match method {
        Method::MacawNoWt => {
            (PolicyNet::dense(obs_dim, act_dim, hidden), ValueNet::dense(obs_dim, hidden))
        }
        _ => (
            PolicyNet::wt(obs_dim, act_dim, hidden, latent),
            ValueNet::wt(obs_dim, hidden, latent),
        ),
    }
}

/// Build nets at the default experiment scale.
pub fn default_nets(method: Method, obs_dim: usize, act_dim: usize) -> (PolicyNet, ValueNet) {
    build_nets(method, obs_dim, act_dim, &DEFAULT_HIDDEN, DEFAULT_LATENT)
}

/// Configure a meta-trainer for any meta-style method. The no-enriched
/// ablation is exactly the main method with λ = 0 in the inner loss and the
/// advantage head's meta-gradient zeroed; behavior cloning swaps both policy
/// losses for negative log-likelihood and drops the value parameters.
///
/// Panics if called for the (single-level) multi-task method.
pub fn trainer_for(
    method: Method,
    pnet: PolicyNet,
    vnet: ValueNet,
    cfg: TrainConfig,
    mut loss_cfg: LossConfig,
    init_seed: u64,
) -> Trainer {
    assert!(method.is_meta(), "the multi-task baseline does not use the meta-trainer");
    let (objective, meta) = match method {
        Method::MetaBc => (PolicyObjective::Nll, MetaParams::init_policy_only(&pnet, init_seed)),
        _ => (PolicyObjective::EnrichedAwr, MetaParams::init(&pnet, &vnet, init_seed)),
    };
    if method == Method::MacawNoEnriched {
        loss_cfg.lambda = 0.0;
    }
    let mut trainer = Trainer::new(pnet, vnet, meta, cfg, loss_cfg, objective);
    trainer.freeze_adv_head = method == Method::MacawNoEnriched;
    trainer
}

/// Meta behavior cloning: run the bi-level loop with NLL at both levels and
/// return the learned meta-parameters.
pub fn meta_bc_train(
    pnet: PolicyNet,
    vnet: ValueNet,
    buffers: &[ReplayBuffer],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    eval: Option<&EvalHook>,
    on_metrics: impl FnMut(&IterationMetrics),
) -> Result<MetaParams, MetaError> {
    let mut trainer = trainer_for(Method::MetaBc, pnet, vnet, cfg, loss_cfg, cfg.seed);
    meta_train(&mut trainer, buffers, DataRegime::Standard, eval, cfg.iterations, on_metrics)?;
    Ok(trainer.meta)
}

/// One shared policy/value pair, trained without task conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct MtNets {
    pub theta: ParamSet,
    pub phi: ParamSet,
}

/// Multi-task AWR: single-level training on the union of all task buffers.
/// Each iteration samples one uniform batch across every buffer, takes a
/// value-regression optimizer step, then a policy AWR step whose weights use
/// the just-updated value function. Metrics rows report `task_id` 0 (the
/// model is shared across tasks); the value-loss columns hold the batch loss
/// before and after the value step.
pub fn mt_awr_train(
    pnet: &PolicyNet,
    vnet: &ValueNet,
    buffers: &[ReplayBuffer],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_metrics: impl FnMut(&IterationMetrics),
) -> Result<MtNets, MetaError> {
    if buffers.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let total: usize = buffers.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(MetaError::Env(EnvError::EmptyBatch));
    }
    // Global index = position in the concatenation of all buffers.
    let mut starts = Vec::with_capacity(buffers.len());
    let mut acc = 0;
    for b in buffers {
        starts.push(acc);
        acc += b.len();
    }
    let row_of = |global: usize| -> Transition {
        let bi = match starts.binary_search(&global) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        buffers[bi].transitions[global - starts[bi]]
    };

    let mut rng_init = stream_rng(cfg.seed, purpose::INIT, 0, 0);
    let mut theta = pnet.init_params(&mut rng_init);
    let mut phi = vnet.init_params(&mut rng_init);
    let mut opt_theta = Adam::new(MT_POLICY_LR, theta.total_len());
    let mut opt_phi = Adam::new(MT_VALUE_LR, phi.total_len());

    for it in 0..cfg.iterations {
        let mut rng = stream_rng(cfg.seed, purpose::BATCH, it as u32, 0);
        let size = cfg.batch_size.min(total);
        let mut pool: Vec<usize> = (0..total).collect();
        let picks = sample_without_replacement(&mut rng, &mut pool, size);
        let rows: Vec<Transition> = picks.iter().map(|&i| row_of(i)).collect();
        let batch = Batch::from_rows(&rows, picks);

        // Value step.
        let mut g = Graph::new();
        let phi_ids = phi.bind(&mut g);
        let v_loss_node = value_loss(&mut g, vnet, &phi_ids, &batch)?;
        let v_loss_pre = g.item(v_loss_node);
        let vg = g.grad(v_loss_node, &phi_ids, false)?;
        let flat_g: Vec<f64> = vg.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
        let mut flat_p = phi.flatten();
        opt_phi.step(&mut flat_p, &flat_g);
        phi.unflatten_into(&flat_p)?;

        // Policy step with weights from the updated value function.
        let v_values = vnet.forward_plain(&phi, batch.obs.data(), batch.len());
        let v_loss_post = {
            let mut acc = 0.0;
            for (v, r) in v_values.iter().zip(&batch.ret) {
                acc += (v - r) * (v - r);
            }
            acc / batch.len() as f64
        };
        let theta_ids = theta.bind(&mut g);
        let p_loss_node = awr_loss_with_values(&mut g, pnet, &theta_ids, &batch, &v_values, loss_cfg)?;
        let p_loss = g.item(p_loss_node);
        let pg = g.grad(p_loss_node, &theta_ids, false)?;
        let flat_g: Vec<f64> = pg.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
        let mut flat_p = theta.flatten();
        opt_theta.step(&mut flat_p, &flat_g);
        theta.unflatten_into(&flat_p)?;

        on_metrics(&IterationMetrics {
            // 1-based in the log: row k describes the state after step k.
            iteration: it + 1,
            task_id: 0,
            pre_adapt_value_loss: Some(v_loss_pre),
            post_adapt_value_loss: Some(v_loss_post),
            outer_awr_loss: Some(p_loss),
            eval_return_mean: None,
            eval_return_stderr: None,
        });
    }

    Ok(MtNets { theta, phi })
}

/// Test-time adaptation for the multi-task baseline: `steps` optimizer steps
/// on the test batch — value regression first, then advantage-weighted
/// regression with weights from the just-updated value function. Fresh
/// optimizer state, fine-tuning learning rates.
pub fn finetune(
    pnet: &PolicyNet,
    vnet: &ValueNet,
    theta0: &ParamSet,
    phi0: &ParamSet,
    d_test: &Batch,
    steps: usize,
    loss_cfg: &LossConfig,
) -> Result<(ParamSet, ParamSet), MetaError> {
    if d_test.is_empty() {
        return Err(MetaError::Loss(crate::losses::LossError::EmptyBatch));
    }
    let mut theta = theta0.clone();
    let mut phi = phi0.clone();
    let mut opt_theta = Adam::new(FT_POLICY_LR, theta.total_len());
    let mut opt_phi = Adam::new(FT_VALUE_LR, phi.total_len());

    for _ in 0..steps {
        let mut g = Graph::new();
        let phi_ids = phi.bind(&mut g);
        let v_loss_node = value_loss(&mut g, vnet, &phi_ids, d_test)?;
        let vg = g.grad(v_loss_node, &phi_ids, false)?;
        let flat_g: Vec<f64> = vg.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
        let mut flat_p = phi.flatten();
        opt_phi.step(&mut flat_p, &flat_g);
        phi.unflatten_into(&flat_p)?;

        let v_values = vnet.forward_plain(&phi, d_test.obs.data(), d_test.len());
        let theta_ids = theta.bind(&mut g);
        let p_loss_node =
            awr_loss_with_values(&mut g, pnet, &theta_ids, d_test, &v_values, loss_cfg)?;
        let pg = g.grad(p_loss_node, &theta_ids, false)?;
        let flat_g: Vec<f64> = pg.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
        let mut flat_p = theta.flatten();
        opt_theta.step(&mut flat_p, &flat_g);
        theta.unflatten_into(&flat_p)?;
    }

    Ok((theta, phi))
}
