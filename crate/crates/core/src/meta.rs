//! Bi-level meta-training, offline meta-testing, and online fine-tuning.
//!
//! Meta-training alternates two levels per task: an inner adaptation that
//! takes gradient steps on task-specific training batches (value regression
//! first, then the enriched policy loss using the adapted value function),
//! and an outer update that differentiates the post-adaptation test-batch
//! losses through the whole adaptation — second-order terms included —
//! with respect to the initial parameters *and* the per-layer inner learning
//! rates. Outer updates use one optimizer per parameter group.
//!
//! Meta-testing replays the same adaptation without building higher-order
//! graphs; online fine-tuning then alternates environment interaction with
//! plain gradient steps at the outer learning rates.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha12Rng;

use crate::envs::{
    rollout, Batch, EnvError, Region, ReplayBuffer, SampleMode, Task, Tier, EPISODE_LEN,
};
use crate::fmath;
use crate::graph::{DiffError, Graph, NodeId};
use crate::losses::{
    awr_loss_with_values, nll_loss, policy_adapt_loss_with_values, value_loss, value_predictions,
    LossConfig, LossError,
};
use crate::nets::{PolicyNet, ValueNet};
use crate::opt::{Adam, AdamState};
use crate::params::{ParamError, ParamSet};
use crate::rng::{purpose, sample_without_replacement, stream_rng};
use crate::tensor::Tensor;

/// Initial value of every learned per-layer inner learning rate.
pub const INIT_INNER_LR: f64 = 1e-3;

/// Errors from the meta-level procedures.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaError {
    Loss(LossError),
    Diff(DiffError),
    Env(EnvError),
    Param(ParamError),
    /// Inner and outer batches for a task shared a transition index.
    Overlap { index: usize },
    /// A task batch was requested from an empty task set.
    NoTasks,
    /// A learning-rate vector does not have one entry per network layer.
    LayerCount { expected: usize, got: usize },
    /// A restored state does not match the trainer's layout.
    StateMismatch,
}

impl core::fmt::Display for MetaError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetaError::Loss(e) => write!(f, "{e}"),
            MetaError::Diff(e) => write!(f, "{e}"),
            MetaError::Env(e) => write!(f, "{e}"),
            MetaError::Param(e) => write!(f, "{e}"),
            MetaError::Overlap { index } => {
                write!(f, "inner and outer batches overlap at transition {index}")
            }
            MetaError::NoTasks => write!(f, "meta-training needs at least one task"),
            MetaError::LayerCount { expected, got } => {
                write!(f, "expected {expected} per-layer learning rates, got {got}")
            }
            MetaError::StateMismatch => write!(f, "restored trainer state has a different layout"),
        }
    }
}

impl From<LossError> for MetaError {
    fn from(e: LossError) -> Self {
        MetaError::Loss(e)
    }
}

impl From<DiffError> for MetaError {
    fn from(e: DiffError) -> Self {
        MetaError::Diff(e)
    }
}

impl From<EnvError> for MetaError {
    fn from(e: EnvError) -> Self {
        MetaError::Env(e)
    }
}

impl From<ParamError> for MetaError {
    fn from(e: ParamError) -> Self {
        MetaError::Param(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetaError {}

/// Everything the outer loop optimizes: network initializations plus
/// per-layer inner learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub theta: ParamSet,
    pub phi: ParamSet,
    /// One learning rate per policy layer (body, action head, adv head).
    pub policy_lrs: Vec<f64>,
    /// One learning rate per value layer.
    pub value_lrs: Vec<f64>,
}

impl MetaParams {
    /// Fresh initialization; learning rates start at [`INIT_INNER_LR`].
    pub fn init(pnet: &PolicyNet, vnet: &ValueNet, seed: u64) -> MetaParams {
        let mut rng = stream_rng(seed, purpose::INIT, 0, 0);
        MetaParams {
            theta: pnet.init_params(&mut rng),
            phi: vnet.init_params(&mut rng),
            policy_lrs: vec![INIT_INNER_LR; pnet.n_layers()],
            value_lrs: vec![INIT_INNER_LR; vnet.n_layers()],
        }
    }

    /// Policy-only initialization (behavior cloning keeps no value net).
    pub fn init_policy_only(pnet: &PolicyNet, seed: u64) -> MetaParams {
        let mut rng = stream_rng(seed, purpose::INIT, 0, 0);
        MetaParams {
            theta: pnet.init_params(&mut rng),
            phi: ParamSet::new(),
            policy_lrs: vec![INIT_INNER_LR; pnet.n_layers()],
            value_lrs: Vec::new(),
        }
    }
}

/// What the inner and outer policy losses optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyObjective {
    /// Inner: advantage-weighted regression plus λ-weighted advantage
    /// regression; outer: advantage-weighted regression.
    EnrichedAwr,
    /// Plain negative log-likelihood at both levels (behavior cloning).
    Nll,
}

/// Outer-loop hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Tasks sampled per outer step.
    pub task_batch: usize,
    /// Transitions per inner and outer batch.
    pub batch_size: usize,
    /// Inner adaptation steps during meta-training.
    pub n_inner: usize,
    /// Outer optimizer rate for the policy initialization.
    pub outer_policy_lr: f64,
    /// Outer optimizer rate for the value initialization.
    pub outer_value_lr: f64,
    /// Outer optimizer rate for the per-layer inner learning rates.
    pub lr_lr: f64,
    /// Fraction of each buffer (from the end) that outer batches draw from.
    pub outer_tail_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            task_batch: 5,
            batch_size: 256,
            n_inner: 1,
            outer_policy_lr: 1e-4,
            outer_value_lr: 1e-5,
            lr_lr: 1e-3,
            outer_tail_frac: 0.25,
            seed: 0,
        }
    }
}

/// Result of an in-graph adaptation: the adapted parameter nodes plus the
/// adaptation loss before and after. `retained` records whether the adapted
/// nodes remain differentiable functions of the originals.
#[derive(Debug, Clone)]
pub struct AdaptationResult {
    pub adapted: Vec<NodeId>,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub retained: bool,
}

/// Take `n_inner` value-regression steps in-graph: `φ ← φ − lr_layer·∇L_V`.
///
/// With `create_graph`, step gradients are emitted as graph nodes, so the
/// adapted parameters stay differentiable with respect to both `phi` and the
/// learning-rate nodes.
pub fn adapt_value(
    g: &mut Graph,
    vnet: &ValueNet,
    phi: &[NodeId],
    lrs: &[NodeId],
    batch: &Batch,
    n_inner: usize,
    create_graph: bool,
) -> Result<AdaptationResult, MetaError> {
    assert!(n_inner >= 1, "adaptation needs at least one step");
    if lrs.len() != vnet.n_layers() {
        return Err(MetaError::LayerCount { expected: vnet.n_layers(), got: lrs.len() });
    }
    let mut cur: Vec<NodeId> = phi.to_vec();
    let mut pre = 0.0;
    for step in 0..n_inner {
        let loss = value_loss(g, vnet, &cur, batch)?;
        if step == 0 {
            pre = g.item(loss);
        }
        let grads = g.grad_nodes(loss, &cur, create_graph)?;
        let mut next = Vec::with_capacity(cur.len());
        for (i, (&p, &gr)) in cur.iter().zip(&grads).enumerate() {
            let scaled = g.scale_by(gr, lrs[vnet.layer_of(i)])?;
            next.push(g.sub(p, scaled)?);
        }
        cur = next;
    }
    let post_node = value_loss(g, vnet, &cur, batch)?;
    let post = g.item(post_node);
    Ok(AdaptationResult { adapted: cur, pre_loss: pre, post_loss: post, retained: create_graph })
}

/// Take `n_inner` policy steps in-graph on the chosen inner objective.
///
/// For [`PolicyObjective::EnrichedAwr`], `v_values` must hold detached value
/// predictions (from the adapted value function) for the batch rows.
pub fn adapt_policy(
    g: &mut Graph,
    pnet: &PolicyNet,
    theta: &[NodeId],
    lrs: &[NodeId],
    batch: &Batch,
    v_values: Option<&[f64]>,
    objective: PolicyObjective,
    cfg: &LossConfig,
    n_inner: usize,
    create_graph: bool,
) -> Result<AdaptationResult, MetaError> {
    assert!(n_inner >= 1, "adaptation needs at least one step");
    if lrs.len() != pnet.n_layers() {
        return Err(MetaError::LayerCount { expected: pnet.n_layers(), got: lrs.len() });
    }
    let inner_loss = |g: &mut Graph, params: &[NodeId]| -> Result<NodeId, LossError> {
        match objective {
            PolicyObjective::EnrichedAwr => {
                let v = v_values.expect("enriched objective needs value predictions");
                policy_adapt_loss_with_values(g, pnet, params, batch, v, cfg)
            }
            PolicyObjective::Nll => nll_loss(g, pnet, params, batch),
        }
    };
    let mut cur: Vec<NodeId> = theta.to_vec();
    let mut pre = 0.0;
    for step in 0..n_inner {
        let loss = inner_loss(g, &cur)?;
        if step == 0 {
            pre = g.item(loss);
        }
        let grads = g.grad_nodes(loss, &cur, create_graph)?;
        let mut next = Vec::with_capacity(cur.len());
        for (i, (&p, &gr)) in cur.iter().zip(&grads).enumerate() {
            let scaled = g.scale_by(gr, lrs[pnet.layer_of(i)])?;
            next.push(g.sub(p, scaled)?);
        }
        cur = next;
    }
    let post_node = inner_loss(g, &cur)?;
    let post = g.item(post_node);
    Ok(AdaptationResult { adapted: cur, pre_loss: pre, post_loss: post, retained: create_graph })
}

/// Verify two batches share no buffer index.
pub fn ensure_disjoint(a: &Batch, b: &Batch) -> Result<(), MetaError> {
    let mut seen = a.indices.clone();
    seen.sort_unstable();
    for &i in &b.indices {
        if seen.binary_search(&i).is_ok() {
            return Err(MetaError::Overlap { index: i });
        }
    }
    Ok(())
}

/// Meta-gradients for one task, flattened per parameter group.
#[derive(Debug, Clone)]
pub struct TaskGrads {
    pub d_theta: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub d_policy_lrs: Vec<f64>,
    pub d_value_lrs: Vec<f64>,
    pub pre_value_loss: f64,
    pub post_value_loss: f64,
    pub outer_policy_loss: f64,
    /// Post-adaptation value loss on the outer batch — the scalar whose
    /// gradient `d_phi`/`d_value_lrs` carry (0 for likelihood-only training).
    pub outer_value_loss: f64,
}

/// Full bi-level computation for one task on fixed batches: adapt on
/// `d_tr`, evaluate outer losses on `d_ts`, and differentiate them back
/// through the adaptation to the meta-parameters and learning rates.
///
/// Outer gradients are routed per level: the post-adaptation value loss
/// drives `phi` and the value learning rates; the post-adaptation policy
/// loss drives `theta` and the policy learning rates.
pub fn meta_grads_on_batches(
    pnet: &PolicyNet,
    vnet: &ValueNet,
    meta: &MetaParams,
    d_tr: &Batch,
    d_ts: &Batch,
    n_inner: usize,
    objective: PolicyObjective,
    cfg: &LossConfig,
) -> Result<TaskGrads, MetaError> {
    ensure_disjoint(d_tr, d_ts)?;

    let mut g = Graph::new();
    let theta = meta.theta.bind(&mut g);
    let plr: Vec<NodeId> = meta.policy_lrs.iter().map(|&l| g.param(Tensor::scalar(l))).collect();

    let (value_part, v_tr_values, v_ts_values) = match objective {
        PolicyObjective::EnrichedAwr => {
            let phi = meta.phi.bind(&mut g);
            let vlr: Vec<NodeId> =
                meta.value_lrs.iter().map(|&l| g.param(Tensor::scalar(l))).collect();
            let res = adapt_value(&mut g, vnet, &phi, &vlr, d_tr, n_inner, true)?;

            // Adapted-value predictions: on d_tr for the inner policy loss,
            // on d_ts for the outer losses (forward shared with L_V below).
            let v_tr = value_predictions(&mut g, vnet, &res.adapted, d_tr)?;
            let v_tr_values = g.value(v_tr).data().to_vec();
            let v_ts = value_predictions(&mut g, vnet, &res.adapted, d_ts)?;
            let v_ts_values = g.value(v_ts).data().to_vec();

            let ret = d_ts.ret_node(&mut g);
            let diff = g.sub(v_ts, ret)?;
            let sq = g.square(diff);
            let outer_v_loss = g.mean(sq);

            (Some((phi, vlr, res, outer_v_loss)), v_tr_values, v_ts_values)
        }
        PolicyObjective::Nll => (None, Vec::new(), Vec::new()),
    };

    let theta_res = adapt_policy(
        &mut g,
        pnet,
        &theta,
        &plr,
        d_tr,
        if v_tr_values.is_empty() { None } else { Some(&v_tr_values) },
        objective,
        cfg,
        n_inner,
        true,
    )?;

    let outer_p_loss = match objective {
        PolicyObjective::EnrichedAwr => {
            awr_loss_with_values(&mut g, pnet, &theta_res.adapted, d_ts, &v_ts_values, cfg)?
        }
        PolicyObjective::Nll => nll_loss(&mut g, pnet, &theta_res.adapted, d_ts)?,
    };

    // Policy-side meta-gradients.
    let mut p_targets = theta.clone();
    p_targets.extend_from_slice(&plr);
    let pg = g.grad(outer_p_loss, &p_targets, false)?;
    let d_theta: Vec<f64> =
        pg[..theta.len()].iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
    let d_policy_lrs: Vec<f64> = pg[theta.len()..].iter().map(|&id| g.item(id)).collect();

    // Value-side meta-gradients.
    let (d_phi, d_value_lrs, pre_v, post_v, outer_v) = match value_part {
        Some((phi, vlr, res, outer_v_loss)) => {
            let mut v_targets = phi.clone();
            v_targets.extend_from_slice(&vlr);
            let vg = g.grad(outer_v_loss, &v_targets, false)?;
            let d_phi: Vec<f64> =
                vg[..phi.len()].iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
            let d_vlr: Vec<f64> = vg[phi.len()..].iter().map(|&id| g.item(id)).collect();
            (d_phi, d_vlr, res.pre_loss, res.post_loss, g.item(outer_v_loss))
        }
        None => (Vec::new(), Vec::new(), 0.0, 0.0, 0.0),
    };

    Ok(TaskGrads {
        d_theta,
        d_phi,
        d_policy_lrs,
        d_value_lrs,
        pre_value_loss: pre_v,
        post_value_loss: post_v,
        outer_policy_loss: g.item(outer_p_loss),
        outer_value_loss: outer_v,
    })
}

/// Data routing for one task during meta-training.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub buffer: &'a ReplayBuffer,
    /// Region inner (adaptation) batches sample from, contiguously.
    pub inner_region: Region,
    /// Region outer batches sample from, uniformly.
    pub outer_region: Region,
}

/// How buffers are sliced into inner/outer sampling regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataRegime {
    /// Inner batches from the whole buffer; outer batches from its tail.
    Standard,
    /// Inner batches from one quality tier; outer batches pinned to the
    /// good tier (the data-quality ablation).
    TierAblation { adapt_tier: Tier },
}

impl DataRegime {
    pub fn task_data<'a>(
        &self,
        buffer: &'a ReplayBuffer,
        outer_tail_frac: f64,
    ) -> Result<TaskData<'a>, MetaError> {
        let (inner_region, outer_region) = match self {
            DataRegime::Standard => (buffer.full_region(), buffer.tail_region(outer_tail_frac)),
            DataRegime::TierAblation { adapt_tier } => {
                (buffer.tier_slice(*adapt_tier)?, buffer.tier_slice(Tier::Good)?)
            }
        };
        Ok(TaskData { buffer, inner_region, outer_region })
    }
}

/// One metrics row. Train rows carry losses; evaluation rows carry returns.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub task_id: usize,
    pub pre_adapt_value_loss: Option<f64>,
    pub post_adapt_value_loss: Option<f64>,
    pub outer_awr_loss: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_stderr: Option<f64>,
}

/// Serializable snapshot of a [`Trainer`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub policy_lrs: Vec<f64>,
    pub value_lrs: Vec<f64>,
    pub opt_theta: AdamState,
    pub opt_phi: AdamState,
    pub opt_policy_lrs: AdamState,
    pub opt_value_lrs: AdamState,
}

/// Owns the meta-parameters and the four outer-loop optimizers.
pub struct Trainer {
    pub pnet: PolicyNet,
    pub vnet: ValueNet,
    pub meta: MetaParams,
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub objective: PolicyObjective,
    /// Zero the advantage-head meta-gradient so the head never trains
    /// (the no-enriched-loss ablation pairs this with λ = 0).
    pub freeze_adv_head: bool,
    pub iteration: usize,
    opt_theta: Adam,
    opt_phi: Adam,
    opt_plr: Adam,
    opt_vlr: Adam,
}

impl Trainer {
    pub fn new(
        pnet: PolicyNet,
        vnet: ValueNet,
        meta: MetaParams,
        cfg: TrainConfig,
        loss_cfg: LossConfig,
        objective: PolicyObjective,
    ) -> Trainer {
        let opt_theta = Adam::new(cfg.outer_policy_lr, meta.theta.total_len());
        let opt_phi = Adam::new(cfg.outer_value_lr, meta.phi.total_len());
        let opt_plr = Adam::new(cfg.lr_lr, meta.policy_lrs.len());
        let opt_vlr = Adam::new(cfg.lr_lr, meta.value_lrs.len());
        Trainer {
            pnet,
            vnet,
            meta,
            cfg,
            loss_cfg,
            objective,
            freeze_adv_head: false,
            iteration: 0,
            opt_theta,
            opt_phi,
            opt_plr,
            opt_vlr,
        }
    }

    /// Flat index range of the advantage-head parameters within `theta`.
    fn adv_head_flat_range(&self) -> core::ops::Range<usize> {
        let lens = self.meta.theta.entry_lens();
        let entries = self.pnet.adv_head_param_range();
        let start: usize = lens[..entries.start].iter().sum();
        let len: usize = lens[entries.clone()].iter().sum();
        start..start + len
    }

    /// One outer iteration: sample a task batch, accumulate per-task
    /// meta-gradients, and apply the four optimizer updates (gradients are
    /// summed over tasks). Returns one metrics row per sampled task.
    pub fn outer_step(&mut self, tasks: &[TaskData]) -> Result<Vec<IterationMetrics>, MetaError> {
        if tasks.is_empty() {
            return Err(MetaError::NoTasks);
        }
        let it = self.iteration;
        let chosen: Vec<usize> = if tasks.len() > self.cfg.task_batch {
            let mut rng = stream_rng(self.cfg.seed, purpose::TASK_BATCH, it as u32, 0);
            let mut pool: Vec<usize> = (0..tasks.len()).collect();
            sample_without_replacement(&mut rng, &mut pool, self.cfg.task_batch)
        } else {
            (0..tasks.len()).collect()
        };

        let mut sum_theta = vec![0.0; self.meta.theta.total_len()];
        let mut sum_phi = vec![0.0; self.meta.phi.total_len()];
        let mut sum_plr = vec![0.0; self.meta.policy_lrs.len()];
        let mut sum_vlr = vec![0.0; self.meta.value_lrs.len()];
        let mut rows = Vec::with_capacity(chosen.len());

        for &slot in &chosen {
            let data = &tasks[slot];
            let mut rng = stream_rng(self.cfg.seed, purpose::BATCH, it as u32, slot as u32);
            let d_tr = data.buffer.sample_batch(
                self.cfg.batch_size,
                SampleMode::Contiguous,
                data.inner_region,
                &mut rng,
            )?;
            let d_ts = data.buffer.sample_batch_excluding(
                self.cfg.batch_size,
                data.outer_region,
                &d_tr.indices,
                &mut rng,
            )?;
            let tg = meta_grads_on_batches(
                &self.pnet,
                &self.vnet,
                &self.meta,
                &d_tr,
                &d_ts,
                self.cfg.n_inner,
                self.objective,
                &self.loss_cfg,
            )?;

            let mut d_theta = tg.d_theta;
            if self.freeze_adv_head {
                for v in &mut d_theta[self.adv_head_flat_range()] {
                    *v = 0.0;
                }
            }
            for (s, d) in sum_theta.iter_mut().zip(&d_theta) {
                *s += d;
            }
            for (s, d) in sum_phi.iter_mut().zip(&tg.d_phi) {
                *s += d;
            }
            for (s, d) in sum_plr.iter_mut().zip(&tg.d_policy_lrs) {
                *s += d;
            }
            for (s, d) in sum_vlr.iter_mut().zip(&tg.d_value_lrs) {
                *s += d;
            }

            let is_bc = matches!(self.objective, PolicyObjective::Nll);
            rows.push(IterationMetrics {
                // 1-based in the log: row k describes the state after step k,
                // matching the numbering of evaluation rows.
                iteration: it + 1,
                task_id: data.buffer.task.id,
                pre_adapt_value_loss: (!is_bc).then_some(tg.pre_value_loss),
                post_adapt_value_loss: (!is_bc).then_some(tg.post_value_loss),
                outer_awr_loss: Some(tg.outer_policy_loss),
                eval_return_mean: None,
                eval_return_stderr: None,
            });
        }

        let mut th = self.meta.theta.flatten();
        self.opt_theta.step(&mut th, &sum_theta);
        self.meta.theta.unflatten_into(&th)?;

        if !self.meta.phi.is_empty() {
            let mut ph = self.meta.phi.flatten();
            self.opt_phi.step(&mut ph, &sum_phi);
            self.meta.phi.unflatten_into(&ph)?;
        }

        self.opt_plr.step(&mut self.meta.policy_lrs, &sum_plr);
        self.opt_vlr.step(&mut self.meta.value_lrs, &sum_vlr);

        self.iteration += 1;
        Ok(rows)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            iteration: self.iteration,
            theta: self.meta.theta.flatten(),
            phi: self.meta.phi.flatten(),
            policy_lrs: self.meta.policy_lrs.clone(),
            value_lrs: self.meta.value_lrs.clone(),
            opt_theta: self.opt_theta.state(),
            opt_phi: self.opt_phi.state(),
            opt_policy_lrs: self.opt_plr.state(),
            opt_value_lrs: self.opt_vlr.state(),
        }
    }

    pub fn restore_state(&mut self, st: &TrainerState) -> Result<(), MetaError> {
        if st.theta.len() != self.meta.theta.total_len()
            || st.phi.len() != self.meta.phi.total_len()
            || st.policy_lrs.len() != self.meta.policy_lrs.len()
            || st.value_lrs.len() != self.meta.value_lrs.len()
            || st.opt_theta.m.len() != self.opt_theta.dim()
            || st.opt_phi.m.len() != self.opt_phi.dim()
        {
            return Err(MetaError::StateMismatch);
        }
        self.iteration = st.iteration;
        self.meta.theta.unflatten_into(&st.theta)?;
        self.meta.phi.unflatten_into(&st.phi)?;
        self.meta.policy_lrs = st.policy_lrs.clone();
        self.meta.value_lrs = st.value_lrs.clone();
        self.opt_theta.restore(&st.opt_theta);
        self.opt_phi.restore(&st.opt_phi);
        self.opt_plr.restore(&st.opt_policy_lrs);
        self.opt_vlr.restore(&st.opt_value_lrs);
        Ok(())
    }
}

/// Periodic evaluation on held-out tasks during meta-training.
pub struct EvalHook<'a> {
    /// Held-out tasks with their offline buffers (adaptation data source).
    pub buffers: &'a [ReplayBuffer],
    /// Evaluate every this many iterations (0 = never).
    pub every: usize,
    pub rollouts: usize,
    /// Meta-test adaptation steps before each evaluation.
    pub adapt_steps: usize,
    /// Absolute iteration that also triggers an evaluation (the end of the
    /// run), so a resumed run evaluates at the same points as a fresh one.
    pub final_iteration: usize,
}

/// Run `iterations` outer steps, streaming metrics rows through
/// `on_metrics` (training rows per task, then evaluation rows per held-out
/// task whenever the hook fires).
pub fn meta_train(
    trainer: &mut Trainer,
    train: &[ReplayBuffer],
    regime: DataRegime,
    eval: Option<&EvalHook>,
    iterations: usize,
    mut on_metrics: impl FnMut(&IterationMetrics),
) -> Result<(), MetaError> {
    if train.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let tail = trainer.cfg.outer_tail_frac;
    let tasks: Vec<TaskData> = train
        .iter()
        .map(|b| regime.task_data(b, tail))
        .collect::<Result<Vec<_>, MetaError>>()?;

    for _ in 0..iterations {
        let rows = trainer.outer_step(&tasks)?;
        for row in &rows {
            on_metrics(row);
        }
        if let Some(hook) = eval {
            let done = trainer.iteration; // already advanced past this step
            if hook.every > 0 && (done % hook.every == 0 || done == hook.final_iteration) {
                for (slot, buffer) in hook.buffers.iter().enumerate() {
                    let row = evaluate_test_task(trainer, buffer, slot, done, hook)?;
                    on_metrics(&row);
                }
            }
        }
    }
    Ok(())
}

fn evaluate_test_task(
    trainer: &Trainer,
    buffer: &ReplayBuffer,
    slot: usize,
    iteration: usize,
    hook: &EvalHook,
) -> Result<IterationMetrics, MetaError> {
    let seed = trainer.cfg.seed;
    let mut batch_rng = stream_rng(seed, purpose::EVAL, iteration as u32, (2 * slot) as u32);
    let d_test = buffer.sample_batch(
        trainer.cfg.batch_size.min(buffer.len()),
        SampleMode::Uniform,
        buffer.full_region(),
        &mut batch_rng,
    )?;
    let (theta_ad, _, _) = meta_test(
        &trainer.pnet,
        &trainer.vnet,
        &trainer.meta,
        &d_test,
        hook.adapt_steps,
        trainer.objective,
        &trainer.loss_cfg,
    )?;
    let mut roll_rng = stream_rng(seed, purpose::EVAL, iteration as u32, (2 * slot + 1) as u32);
    let stats =
        evaluate_policy(&buffer.task, &trainer.pnet, &theta_ad, hook.rollouts, &mut roll_rng)?;
    Ok(IterationMetrics {
        iteration,
        task_id: buffer.task.id,
        pre_adapt_value_loss: None,
        post_adapt_value_loss: None,
        outer_awr_loss: None,
        eval_return_mean: Some(stats.mean),
        eval_return_stderr: Some(stats.stderr),
    })
}

/// Loss trajectories over meta-test adaptation: entry `k` is the loss before
/// step `k`, with a final post-adaptation entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptCurves {
    pub value: Vec<f64>,
    pub policy: Vec<f64>,
}

/// Offline adaptation to a new task: `n_steps` alternating steps of value
/// regression and enriched policy updates on the test batch, using the
/// learned per-layer learning rates. No higher-order graphs are built.
pub fn meta_test(
    pnet: &PolicyNet,
    vnet: &ValueNet,
    meta: &MetaParams,
    d_test: &Batch,
    n_steps: usize,
    objective: PolicyObjective,
    cfg: &LossConfig,
) -> Result<(ParamSet, ParamSet, AdaptCurves), MetaError> {
    if d_test.is_empty() {
        return Err(MetaError::Loss(LossError::EmptyBatch));
    }
    let mut theta = meta.theta.clone();
    let mut phi = meta.phi.clone();
    let mut curves = AdaptCurves { value: Vec::new(), policy: Vec::new() };
    let is_bc = matches!(objective, PolicyObjective::Nll);

    for _ in 0..n_steps {
        let mut g = Graph::new();
        let (phi_new, v_values) = if is_bc {
            (phi.clone(), Vec::new())
        } else {
            let phi_ids = phi.bind(&mut g);
            let vlr: Vec<NodeId> =
                meta.value_lrs.iter().map(|&l| g.constant(Tensor::scalar(l))).collect();
            let res = adapt_value(&mut g, vnet, &phi_ids, &vlr, d_test, 1, false)?;
            curves.value.push(res.pre_loss);
            let phi_new = phi.read_values(&g, &res.adapted);
            // Policy weights come from the just-updated value function.
            let v = value_predictions(&mut g, vnet, &res.adapted, d_test)?;
            (phi_new, g.value(v).data().to_vec())
        };

        let theta_ids = theta.bind(&mut g);
        let plr: Vec<NodeId> =
            meta.policy_lrs.iter().map(|&l| g.constant(Tensor::scalar(l))).collect();
        let res = adapt_policy(
            &mut g,
            pnet,
            &theta_ids,
            &plr,
            d_test,
            if is_bc { None } else { Some(&v_values) },
            objective,
            cfg,
            1,
            false,
        )?;
        curves.policy.push(res.pre_loss);
        theta = theta.read_values(&g, &res.adapted);
        phi = phi_new;
    }

    // Closing entries: losses at the final parameters.
    let mut g = Graph::new();
    if !is_bc {
        let phi_ids = phi.bind_const(&mut g);
        let l = value_loss(&mut g, vnet, &phi_ids, d_test)?;
        curves.value.push(g.item(l));
    }
    let theta_ids = theta.bind_const(&mut g);
    let final_policy = if is_bc {
        nll_loss(&mut g, pnet, &theta_ids, d_test)?
    } else {
        let phi_ids = phi.bind_const(&mut g);
        let v = value_predictions(&mut g, vnet, &phi_ids, d_test)?;
        let v_values = g.value(v).data().to_vec();
        policy_adapt_loss_with_values(&mut g, pnet, &theta_ids, d_test, &v_values, cfg)?
    };
    curves.policy.push(g.item(final_policy));

    Ok((theta, phi, curves))
}

/// Evaluation statistics over deterministic (mean-action) rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub stderr: f64,
    pub returns: Vec<f64>,
}

/// Roll out the policy's mean action for `rollouts` episodes and report the
/// undiscounted return mean and standard error.
pub fn evaluate_policy(
    task: &Task,
    pnet: &PolicyNet,
    theta: &ParamSet,
    rollouts: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EvalStats, MetaError> {
    assert!(rollouts >= 1, "need at least one evaluation rollout");
    let mut returns = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let (_, ret) = rollout(
            task,
            |state, _| {
                let m = pnet.mean_plain(theta, state, 1);
                [m[0], m[1]]
            },
            0,
            1.0,
            rng,
        )?;
        returns.push(ret);
    }
    Ok(stats_of(returns))
}

fn stats_of(returns: Vec<f64>) -> EvalStats {
    let n = returns.len();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        0.0
    } else {
        let var =
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n as f64 - 1.0);
        fmath::sqrt(var / n as f64)
    };
    EvalStats { mean, stderr, returns }
}

/// Outcome of online fine-tuning.
#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub theta: ParamSet,
    pub phi: ParamSet,
    /// `(environment steps consumed, mean evaluation return)` samples,
    /// including one at step 0 and one at the end.
    pub curve: Vec<(usize, f64)>,
}

/// Knobs for online fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineConfig {
    pub total_env_steps: usize,
    /// Gradient steps after each collected trajectory.
    pub grad_steps_per_traj: usize,
    /// Trajectories required in the buffer before training starts.
    pub min_trajectories: usize,
    pub batch_size: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Evaluate every this many trajectories.
    pub eval_every_trajs: usize,
    pub eval_rollouts: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            total_env_steps: 10_000,
            grad_steps_per_traj: 100,
            min_trajectories: 5,
            batch_size: 256,
            policy_lr: 1e-4,
            value_lr: 1e-5,
            eval_every_trajs: 5,
            eval_rollouts: 10,
            seed: 0,
        }
    }
}

/// Online fine-tuning from adapted parameters: alternate collecting one
/// exploration trajectory (actions sampled from the policy's Gaussian) with
/// gradient steps on uniform batches from the aggregate buffer (offline
/// test batch plus everything collected; nothing is ever evicted). The
/// value net descends the value regression loss and the policy descends the
/// advantage-weighted regression loss, both at the outer-loop learning
/// rates.
pub fn online_finetune(
    pnet: &PolicyNet,
    vnet: &ValueNet,
    theta0: &ParamSet,
    phi0: &ParamSet,
    task: &Task,
    d_test: &Batch,
    gamma: f64,
    cfg: &OnlineConfig,
    loss_cfg: &LossConfig,
) -> Result<OnlineResult, MetaError> {
    let mut theta = theta0.clone();
    let mut phi = phi0.clone();
    let mut opt_theta = Adam::new(cfg.policy_lr, theta.total_len());
    let mut opt_phi = Adam::new(cfg.value_lr, phi.total_len());

    // Seed the online buffer with the offline test batch. Those rows carry
    // their Monte-Carlo returns already; episode bookkeeping treats them as
    // standalone rows, which is fine since sampling is uniform.
    let mut buffer: Vec<BufferedRow> = (0..d_test.len())
        .map(|i| BufferedRow {
            s: {
                let mut s = [0.0; crate::envs::OBS_DIM];
                s.copy_from_slice(&d_test.obs.data()[i * crate::envs::OBS_DIM..(i + 1) * crate::envs::OBS_DIM]);
                s
            },
            a: {
                let mut a = [0.0; crate::envs::ACT_DIM];
                a.copy_from_slice(&d_test.act.data()[i * crate::envs::ACT_DIM..(i + 1) * crate::envs::ACT_DIM]);
                a
            },
            ret: d_test.ret[i],
        })
        .collect();

    let sigma = fmath::sqrt(pnet.sigma2);
    let mut curve = Vec::new();
    let mut eval_rng = stream_rng(cfg.seed, purpose::EVAL, 0, 999);
    let initial = evaluate_policy(task, pnet, &theta, cfg.eval_rollouts, &mut eval_rng)?;
    curve.push((0, initial.mean));

    let n_traj = cfg.total_env_steps / EPISODE_LEN;
    for round in 0..n_traj {
        // Collect one exploration trajectory with the current policy.
        let mut collect_rng = stream_rng(cfg.seed, purpose::ONLINE, round as u32, 0);
        let (steps, _) = rollout(
            task,
            |state, r| {
                let m = pnet.mean_plain(&theta, state, 1);
                [
                    m[0] + sigma * crate::rng::normal01(r),
                    m[1] + sigma * crate::rng::normal01(r),
                ]
            },
            round as u32,
            gamma,
            &mut collect_rng,
        )?;
        buffer.extend(steps.iter().map(|tr| BufferedRow { s: tr.s, a: tr.a, ret: tr.ret }));

        // Train only once enough online data has accumulated.
        if round + 1 >= cfg.min_trajectories {
            for gstep in 0..cfg.grad_steps_per_traj {
                let mut batch_rng =
                    stream_rng(cfg.seed, purpose::ONLINE, round as u32, 1 + gstep as u32);
                let batch = sample_buffered(&buffer, cfg.batch_size, &mut batch_rng);

                let mut g = Graph::new();
                // Value step.
                let phi_ids = phi.bind(&mut g);
                let v_loss = value_loss(&mut g, vnet, &phi_ids, &batch)?;
                let vg = g.grad(v_loss, &phi_ids, false)?;
                let flat_g: Vec<f64> =
                    vg.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
                let mut flat_p = phi.flatten();
                opt_phi.step(&mut flat_p, &flat_g);
                phi.unflatten_into(&flat_p)?;

                // Policy step with weights from the updated value function.
                let v_values = vnet.forward_plain(&phi, batch.obs.data(), batch.len());
                let theta_ids = theta.bind(&mut g);
                let p_loss =
                    awr_loss_with_values(&mut g, pnet, &theta_ids, &batch, &v_values, loss_cfg)?;
                let pg = g.grad(p_loss, &theta_ids, false)?;
                let flat_g: Vec<f64> =
                    pg.iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
                let mut flat_p = theta.flatten();
                opt_theta.step(&mut flat_p, &flat_g);
                theta.unflatten_into(&flat_p)?;
            }
        }

        let steps_done = (round + 1) * EPISODE_LEN;
        if (round + 1) % cfg.eval_every_trajs == 0 || round + 1 == n_traj {
            let mut eval_rng = stream_rng(cfg.seed, purpose::EVAL, (round + 1) as u32, 999);
            let stats = evaluate_policy(task, pnet, &theta, cfg.eval_rollouts, &mut eval_rng)?;
            curve.push((steps_done, stats.mean));
        }
    }

    Ok(OnlineResult { theta, phi, curve })
}

/// Minimal stored row for the online buffer.
#[derive(Debug, Clone, Copy)]
struct BufferedRow {
    s: [f64; crate::envs::OBS_DIM],
    a: [f64; crate::envs::ACT_DIM],
    ret: f64,
}

fn sample_buffered(buffer: &[BufferedRow], size: usize, rng: &mut ChaCha12Rng) -> Batch {
    let size = size.min(buffer.len());
    let mut pool: Vec<usize> = (0..buffer.len()).collect();
    let picks = sample_without_replacement(rng, &mut pool, size);
    let mut obs = Vec::with_capacity(size * crate::envs::OBS_DIM);
    let mut act = Vec::with_capacity(size * crate::envs::ACT_DIM);
    let mut ret = Vec::with_capacity(size);
    for &i in &picks {
        obs.extend_from_slice(&buffer[i].s);
        act.extend_from_slice(&buffer[i].a);
        ret.push(buffer[i].ret);
    }
    Batch {
        obs: Tensor::matrix(size, crate::envs::OBS_DIM, obs),
        act: Tensor::matrix(size, crate::envs::ACT_DIM, act),
        ret,
        indices: picks,
    }
}
