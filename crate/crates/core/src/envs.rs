//! Point-mass task suites, scripted behavior policies, and offline replay
//! buffers with quality tiers.
//!
//! Three task distributions over a 2-D point mass stand in for the usual
//! locomotion benchmarks: reach a goal *direction*, hold a target forward
//! *velocity*, and run forward under per-task randomized actuator *gain*.
//! Offline data comes from a proportional controller whose exploration noise
//! decays over a simulated lifetime, so early episodes are poor and late
//! episodes near the controller's best — giving meaningful bad/medium/good
//! data tiers within every buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha12Rng;

use crate::fmath;
use crate::graph::{Graph, NodeId};
use crate::losses;
use crate::rng::{self, purpose, stream_rng};
use crate::tensor::Tensor;

/// Observation layout: `[x, y, v_x, v_y, time_remaining]`.
pub const OBS_DIM: usize = 5;
/// Two-dimensional acceleration command, each entry clipped to [−1, 1].
pub const ACT_DIM: usize = 2;
/// Fixed trajectory length.
pub const EPISODE_LEN: usize = 200;
/// Integration step.
pub const DT: f64 = 0.05;
/// Velocity damping per step.
pub const FRICTION: f64 = 0.1;
/// Actuator gain for Direction and Velocity tasks; Gain tasks scale it
/// per-dimension. Steady-state speed per dimension is `gain·a·DT/FRICTION`,
/// i.e. 4.0 at full action under the base gain.
pub const BASE_GAIN: f64 = 8.0;

/// Errors from environment stepping and buffer sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvError {
    /// A state fed to `env_step` contained a non-finite entry.
    NonFiniteState,
    /// Tier slicing needs at least three episodes.
    TooFewEpisodes { have: usize, need: usize },
    /// A batch was requested that the region cannot supply.
    RegionTooSmall { need: usize, have: usize },
    /// A batch of size zero was requested.
    EmptyBatch,
}

impl core::fmt::Display for EnvError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EnvError::NonFiniteState => write!(f, "environment state contains non-finite values"),
            EnvError::TooFewEpisodes { have, need } => {
                write!(f, "buffer has {have} episodes, tiers need at least {need}")
            }
            EnvError::RegionTooSmall { need, have } => {
                write!(f, "batch of {need} requested from a region holding {have}")
            }
            EnvError::EmptyBatch => write!(f, "batch size must be at least 1"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EnvError {}

/// Which task distribution an experiment draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Direction,
    Velocity,
    Gain,
}

impl EnvKind {
    pub fn tag(self) -> &'static str {
        match self {
            EnvKind::Direction => "direction",
            EnvKind::Velocity => "velocity",
            EnvKind::Gain => "gain",
        }
    }

    pub fn from_tag(tag: &str) -> Option<EnvKind> {
        match tag {
            "direction" => Some(EnvKind::Direction),
            "velocity" => Some(EnvKind::Velocity),
            "gain" => Some(EnvKind::Gain),
            _ => None,
        }
    }
}

/// Per-task parameters, one variant per distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskParams {
    /// Reward is velocity projected onto this unit goal direction.
    Direction { dir: [f64; 2] },
    /// Reward is −|v_x − target|.
    Velocity { target: f64 },
    /// Reward is forward velocity; actuator gain is `BASE_GAIN·scale`
    /// per dimension.
    Gain { scale: [f64; 2] },
}

/// An MDP instance: environment parameters plus a stable id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    pub id: usize,
    pub params: TaskParams,
}

impl Task {
    pub fn kind(&self) -> EnvKind {
        match self.params {
            TaskParams::Direction { .. } => EnvKind::Direction,
            TaskParams::Velocity { .. } => EnvKind::Velocity,
            TaskParams::Gain { .. } => EnvKind::Gain,
        }
    }

    /// Draw one task from the distribution for `kind`. Tasks are a pure
    /// function of `(seed, id)`, so growing a task set never reshuffles
    /// previously drawn tasks.
    ///
    /// Distributions: Direction angle uniform over [0, 2π); Velocity target
    /// uniform over [0, 3]; Gain scale log-uniform over [0.5, 2] per
    /// dimension.
    pub fn sample(kind: EnvKind, id: usize, seed: u64) -> Task {
        let mut rng = stream_rng(seed, purpose::TASKS, id as u32, 0);
        let params = match kind {
            EnvKind::Direction => {
                let angle = rng::uniform_in(&mut rng, 0.0, 2.0 * core::f64::consts::PI);
                TaskParams::Direction { dir: [fmath::cos(angle), fmath::sin(angle)] }
            }
            EnvKind::Velocity => {
                TaskParams::Velocity { target: rng::uniform_in(&mut rng, 0.0, 3.0) }
            }
            EnvKind::Gain => {
                let (lo, hi) = (fmath::ln(0.5), fmath::ln(2.0));
                let sx = fmath::exp(rng::uniform_in(&mut rng, lo, hi));
                let sy = fmath::exp(rng::uniform_in(&mut rng, lo, hi));
                TaskParams::Gain { scale: [sx, sy] }
            }
        };
        Task { id, params }
    }

    /// Per-dimension actuator gain.
    pub fn gain(&self) -> [f64; 2] {
        match self.params {
            TaskParams::Gain { scale } => [BASE_GAIN * scale[0], BASE_GAIN * scale[1]],
            _ => [BASE_GAIN, BASE_GAIN],
        }
    }

    /// Reward as a pure function of velocity.
    pub fn reward(&self, v: [f64; 2]) -> f64 {
        match self.params {
            TaskParams::Direction { dir } => v[0] * dir[0] + v[1] * dir[1],
            TaskParams::Velocity { target } => -(v[0] - target).abs(),
            TaskParams::Gain { .. } => v[0],
        }
    }
}

/// Draw `count` tasks with ids starting at `first_id`.
pub fn sample_tasks(kind: EnvKind, first_id: usize, count: usize, seed: u64) -> Vec<Task> {
    (0..count).map(|i| Task::sample(kind, first_id + i, seed)).collect()
}

/// Fresh initial state: origin position, small uniform velocity jitter in
/// [−0.1, 0.1] per dimension, full time budget.
pub fn initial_state(rng: &mut ChaCha12Rng) -> Vec<f64> {
    let vx = rng::uniform_in(rng, -0.1, 0.1);
    let vy = rng::uniform_in(rng, -0.1, 0.1);
    vec![0.0, 0.0, vx, vy, 1.0]
}

/// One step of the point-mass dynamics.
///
/// The action is clipped to [−1, 1] per dimension, then
/// `velocity += gain·action·DT − FRICTION·velocity` and
/// `position += velocity·DT` (with the updated velocity). The reward is the
/// task's reward function evaluated at the updated velocity. The last
/// observation entry is the remaining time fraction `1 − t/200`; `done`
/// rises on the 200th step.
pub fn env_step(task: &Task, state: &[f64], action: [f64; 2]) -> Result<(Vec<f64>, f64, bool), EnvError> {
    assert_eq!(state.len(), OBS_DIM, "state must have {OBS_DIM} entries");
    if !state.iter().all(|v| v.is_finite()) {
        return Err(EnvError::NonFiniteState);
    }
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let gain = task.gain();
    let (x, y, vx, vy, trem) = (state[0], state[1], state[2], state[3], state[4]);

    let vx2 = vx + gain[0] * a[0] * DT - FRICTION * vx;
    let vy2 = vy + gain[1] * a[1] * DT - FRICTION * vy;
    let x2 = x + vx2 * DT;
    let y2 = y + vy2 * DT;

    // Recover the integer step index from the time channel so that repeated
    // float subtraction cannot drift the episode clock.
    let t = ((1.0 - trem) * EPISODE_LEN as f64 + 0.5) as usize;
    let t2 = t + 1;
    let trem2 = 1.0 - t2 as f64 / EPISODE_LEN as f64;

    let reward = task.reward([vx2, vy2]);
    Ok((vec![x2, y2, vx2, vy2, trem2], reward, t2 >= EPISODE_LEN))
}

/// Scripted proportional controller emulating an improving RL agent.
///
/// It steers velocity toward a task-appropriate target with gain `kp` and
/// adds Gaussian exploration noise whose std decays linearly from
/// `noise_hi` (first episode) to `noise_lo` (last episode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorPolicy {
    pub kp: f64,
    pub noise_hi: f64,
    pub noise_lo: f64,
}

impl Default for BehaviorPolicy {
    fn default() -> Self {
        BehaviorPolicy { kp: 2.0, noise_hi: 0.8, noise_lo: 0.05 }
    }
}

impl BehaviorPolicy {
    /// Noise std for episode `ep` of `total`; non-increasing in `ep`.
    pub fn noise_std(&self, ep: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.noise_hi;
        }
        let frac = ep as f64 / (total - 1) as f64;
        // Lerp form so both endpoints are exact.
        self.noise_hi * (1.0 - frac) + self.noise_lo * frac
    }

    /// Velocity the controller steers toward.
    ///
    /// Velocity tasks: `(v*, 0)`. Direction tasks: cruise at speed 2 along
    /// the goal direction. Gain tasks: the per-task maximum steady forward
    /// speed, `gain_x·DT/FRICTION`.
    pub fn target_velocity(&self, task: &Task) -> [f64; 2] {
        match task.params {
            TaskParams::Direction { dir } => [2.0 * dir[0], 2.0 * dir[1]],
            TaskParams::Velocity { target } => [target, 0.0],
            TaskParams::Gain { .. } => [task.gain()[0] * DT / FRICTION, 0.0],
        }
    }

    /// Noisy proportional action (pre-clip; the environment clips).
    pub fn action(&self, task: &Task, state: &[f64], noise_std: f64, rng: &mut ChaCha12Rng) -> [f64; 2] {
        let vt = self.target_velocity(task);
        let ax = self.kp * (vt[0] - state[2]) + noise_std * rng::normal01(rng);
        let ay = self.kp * (vt[1] - state[3]) + noise_std * rng::normal01(rng);
        [ax, ay]
    }
}

/// One environment transition, including its Monte-Carlo return under the
/// buffer's discount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: [f64; OBS_DIM],
    pub a: [f64; ACT_DIM],
    pub s2: [f64; OBS_DIM],
    pub r: f64,
    pub done: bool,
    /// Episode index within the buffer.
    pub ep: u32,
    /// Step index within the episode.
    pub t: u32,
    /// Discounted Monte-Carlo return from this step to episode end.
    pub ret: f64,
}

/// Roll out one episode under `act_fn`, which maps `(state, rng)` to a raw
/// action (clipped before recording). Returns the transitions (with
/// Monte-Carlo returns filled in) and the undiscounted episode return.
pub fn rollout<F>(
    task: &Task,
    mut act_fn: F,
    ep: u32,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<Transition>, f64), EnvError>
where
    F: FnMut(&[f64], &mut ChaCha12Rng) -> [f64; 2],
{
    let mut state = initial_state(rng);
    let mut steps = Vec::with_capacity(EPISODE_LEN);
    let mut rewards = Vec::with_capacity(EPISODE_LEN);
    for t in 0..EPISODE_LEN {
        let raw = act_fn(&state, rng);
        let a = [raw[0].clamp(-1.0, 1.0), raw[1].clamp(-1.0, 1.0)];
        let (next, r, done) = env_step(task, &state, a)?;
        let mut s = [0.0; OBS_DIM];
        s.copy_from_slice(&state);
        let mut s2 = [0.0; OBS_DIM];
        s2.copy_from_slice(&next);
        steps.push(Transition { s, a, s2, r, done, ep, t: t as u32, ret: 0.0 });
        rewards.push(r);
        state = next;
    }
    let returns = losses::monte_carlo_returns(&rewards, gamma);
    for (step, ret) in steps.iter_mut().zip(&returns) {
        step.ret = *ret;
    }
    Ok((steps, rewards.iter().sum()))
}

/// Data-quality tier within a buffer: first/middle/last third of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Bad,
    Medium,
    Good,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Bad, Tier::Medium, Tier::Good];

    pub fn tag(self) -> &'static str {
        match self {
            Tier::Bad => "bad",
            Tier::Medium => "medium",
            Tier::Good => "good",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Tier> {
        match tag {
            "bad" => Some(Tier::Bad),
            "medium" => Some(Tier::Medium),
            "good" => Some(Tier::Good),
            _ => None,
        }
    }
}

/// A contiguous range of transition indices within a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub start: usize,
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// How `sample_batch` draws indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// A run of consecutive transitions starting at a random offset.
    Contiguous,
    /// Uniform without replacement.
    Uniform,
}

/// A minibatch of transitions bound for loss computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Observations, [B, OBS_DIM].
    pub obs: Tensor,
    /// Actions, [B, ACT_DIM].
    pub act: Tensor,
    /// Monte-Carlo returns, length B.
    pub ret: Vec<f64>,
    /// Buffer indices each row came from, for disjointness checks.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_rows(rows: &[Transition], indices: Vec<usize>) -> Batch {
        let mut obs = Vec::with_capacity(rows.len() * OBS_DIM);
        let mut act = Vec::with_capacity(rows.len() * ACT_DIM);
        let mut ret = Vec::with_capacity(rows.len());
        for tr in rows {
            obs.extend_from_slice(&tr.s);
            act.extend_from_slice(&tr.a);
            ret.push(tr.ret);
        }
        Batch {
            obs: Tensor::matrix(rows.len(), OBS_DIM, obs),
            act: Tensor::matrix(rows.len(), ACT_DIM, act),
            ret,
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.ret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ret.is_empty()
    }

    pub fn obs_node(&self, g: &mut Graph) -> NodeId {
        g.constant(self.obs.clone())
    }

    pub fn act_node(&self, g: &mut Graph) -> NodeId {
        g.constant(self.act.clone())
    }

    pub fn ret_node(&self, g: &mut Graph) -> NodeId {
        g.constant(Tensor::vector(self.ret.clone()))
    }
}

/// Offline dataset for one task: contiguous fixed-length episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub task: Task,
    pub gamma: f64,
    pub episode_len: usize,
    pub seed: u64,
    pub transitions: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn episodes(&self) -> usize {
        self.transitions.len() / self.episode_len
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn full_region(&self) -> Region {
        Region { start: 0, len: self.transitions.len() }
    }

    /// The trailing `frac` of the buffer (at least one transition), for
    /// outer-loop sampling biased toward the freshest data.
    pub fn tail_region(&self, frac: f64) -> Region {
        assert!((0.0..=1.0).contains(&frac), "tail fraction must lie in [0, 1]");
        let len = ((self.transitions.len() as f64 * frac) as usize).max(1).min(self.transitions.len());
        Region { start: self.transitions.len() - len, len }
    }

    /// Episode range `[start, end)` for a tier. Thirds use a floor/ceil
    /// rule: bad = `[0, ⌊E/3⌋)`, medium = `[⌊E/3⌋, ⌈2E/3⌉)`, good =
    /// `[⌈2E/3⌉, E)`, so for 10 episodes the middle tier is episodes 3–6.
    pub fn tier_episode_range(episodes: usize, tier: Tier) -> (usize, usize) {
        let b = episodes / 3;
        let g = (2 * episodes).div_ceil(3);
        match tier {
            Tier::Bad => (0, b),
            Tier::Medium => (b, g),
            Tier::Good => (g, episodes),
        }
    }

    /// Transition-index region covering a tier's episodes.
    pub fn tier_slice(&self, tier: Tier) -> Result<Region, EnvError> {
        let eps = self.episodes();
        if eps < 3 {
            return Err(EnvError::TooFewEpisodes { have: eps, need: 3 });
        }
        let (e0, e1) = Self::tier_episode_range(eps, tier);
        Ok(Region { start: e0 * self.episode_len, len: (e1 - e0) * self.episode_len })
    }

    /// Draw a batch from `region`.
    pub fn sample_batch(
        &self,
        size: usize,
        mode: SampleMode,
        region: Region,
        rng: &mut ChaCha12Rng,
    ) -> Result<Batch, EnvError> {
        if size == 0 {
            return Err(EnvError::EmptyBatch);
        }
        if size > region.len {
            return Err(EnvError::RegionTooSmall { need: size, have: region.len });
        }
        let indices: Vec<usize> = match mode {
            SampleMode::Contiguous => {
                let offset = rng::gen_range_u(rng, region.len - size + 1);
                (region.start + offset..region.start + offset + size).collect()
            }
            SampleMode::Uniform => {
                let mut pool: Vec<usize> = (region.start..region.end()).collect();
                rng::sample_without_replacement(rng, &mut pool, size)
            }
        };
        Ok(self.batch_from_indices(&indices))
    }

    /// Uniform without-replacement draw from `region` avoiding `exclude`
    /// (sorted or not). Guarantees disjointness from a prior batch.
    pub fn sample_batch_excluding(
        &self,
        size: usize,
        region: Region,
        exclude: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> Result<Batch, EnvError> {
        if size == 0 {
            return Err(EnvError::EmptyBatch);
        }
        let mut excl = exclude.to_vec();
        excl.sort_unstable();
        let mut pool: Vec<usize> =
            (region.start..region.end()).filter(|i| excl.binary_search(i).is_err()).collect();
        if size > pool.len() {
            return Err(EnvError::RegionTooSmall { need: size, have: pool.len() });
        }
        let indices = rng::sample_without_replacement(rng, &mut pool, size);
        Ok(self.batch_from_indices(&indices))
    }

    pub fn batch_from_indices(&self, indices: &[usize]) -> Batch {
        let rows: Vec<Transition> = indices.iter().map(|&i| self.transitions[i]).collect();
        Batch::from_rows(&rows, indices.to_vec())
    }

    /// Undiscounted return of each episode.
    pub fn episode_returns(&self) -> Vec<f64> {
        (0..self.episodes())
            .map(|e| {
                self.transitions[e * self.episode_len..(e + 1) * self.episode_len]
                    .iter()
                    .map(|tr| tr.r)
                    .sum()
            })
            .collect()
    }

    /// Mean undiscounted return over an episode range.
    pub fn mean_return_over(&self, e0: usize, e1: usize) -> f64 {
        let rets = self.episode_returns();
        let slice = &rets[e0..e1];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    /// Append one already-rolled-out episode (online fine-tuning).
    pub fn append_episode(&mut self, steps: Vec<Transition>) {
        assert_eq!(steps.len(), self.episode_len, "episodes have fixed length");
        self.transitions.extend(steps);
    }
}

/// Generate an offline dataset: `episodes` rollouts of the scripted
/// controller with linearly decaying exploration noise. Deterministic in
/// `(task.id, seed)`.
pub fn generate_offline_dataset(
    task: &Task,
    behavior: &BehaviorPolicy,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> ReplayBuffer {
    assert!(episodes >= 1, "need at least one episode");
    let mut rng = stream_rng(seed, purpose::DATA, task.id as u32, 0);
    let mut transitions = Vec::with_capacity(episodes * EPISODE_LEN);
    for ep in 0..episodes {
        let std = behavior.noise_std(ep, episodes);
        let (steps, _) = rollout(
            task,
            |state, r| behavior.action(task, state, std, r),
            ep as u32,
            gamma,
            &mut rng,
        )
        .expect("scripted rollouts keep states finite");
        transitions.extend(steps);
    }
    ReplayBuffer { task: *task, gamma, episode_len: EPISODE_LEN, seed, transitions }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn velocity_task(target: f64) -> Task {
        Task { id: 0, params: TaskParams::Velocity { target } }
    }

    #[test]
    fn velocity_reward_is_negative_distance_to_target() {
        let task = velocity_task(1.5);
        assert_eq!(task.reward([1.0, -0.3]), -0.5);
    }

    #[test]
    fn direction_reward_is_zero_perpendicular_to_goal() {
        let task = Task { id: 0, params: TaskParams::Direction { dir: [1.0, 0.0] } };
        assert_eq!(task.reward([0.0, 2.0]), 0.0);
        // And exactly linear in velocity along the goal.
        let r1 = task.reward([1.0, 0.5]);
        let r2 = task.reward([2.0, 0.5]);
        let r3 = task.reward([3.0, 0.5]);
        assert!((r3 - r2 - (r2 - r1)).abs() < 1e-15, "direction reward must be linear");
    }

    #[test]
    fn zero_action_zero_velocity_changes_only_time() {
        let task = velocity_task(1.0);
        let state = vec![0.4, -0.2, 0.0, 0.0, 1.0];
        let (next, _, done) = env_step(&task, &state, [0.0, 0.0]).unwrap();
        assert_eq!(&next[..4], &state[..4], "position and velocity must be unchanged");
        assert_eq!(next[4], 1.0 - 1.0 / EPISODE_LEN as f64);
        assert!(!done);
    }

    #[test]
    fn episode_terminates_after_exactly_200_steps() {
        let task = velocity_task(1.0);
        let mut state = vec![0.0, 0.0, 0.0, 0.0, 1.0];
        for t in 0..EPISODE_LEN {
            let (next, _, done) = env_step(&task, &state, [0.3, -0.1]).unwrap();
            assert_eq!(done, t == EPISODE_LEN - 1, "done must rise exactly at step 200");
            state = next;
        }
        assert!(state[4].abs() < 1e-12, "time budget must be exhausted");
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let task = velocity_task(1.0);
        let err = env_step(&task, &[0.0, 0.0, f64::NAN, 0.0, 1.0], [0.0, 0.0]).unwrap_err();
        assert_eq!(err, EnvError::NonFiniteState);
    }

    #[test]
    fn velocity_reward_is_maximized_at_the_target() {
        // Finite difference of reward over v_x changes sign at v*.
        let task = velocity_task(1.5);
        let h = 1e-6;
        let slope_below = (task.reward([1.4 + h, 0.0]) - task.reward([1.4 - h, 0.0])) / (2.0 * h);
        let slope_above = (task.reward([1.6 + h, 0.0]) - task.reward([1.6 - h, 0.0])) / (2.0 * h);
        assert!(slope_below > 0.0 && slope_above < 0.0, "reward slope must cross zero at v*");
    }

    #[test]
    fn datasets_are_seed_deterministic() {
        let task = Task::sample(EnvKind::Velocity, 3, 7);
        let behavior = BehaviorPolicy::default();
        let a = generate_offline_dataset(&task, &behavior, 4, 0.99, 11);
        let b = generate_offline_dataset(&task, &behavior, 4, 0.99, 11);
        assert_eq!(a, b, "same seed must reproduce the buffer exactly");
        let c = generate_offline_dataset(&task, &behavior, 4, 0.99, 12);
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn buffer_size_is_episodes_times_200() {
        let task = Task::sample(EnvKind::Direction, 0, 5);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 6, 0.99, 5);
        assert_eq!(buf.len(), 6 * EPISODE_LEN);
        assert_eq!(buf.episodes(), 6);
    }

    #[test]
    fn tier_rule_matches_documented_examples() {
        assert_eq!(ReplayBuffer::tier_episode_range(9, Tier::Bad), (0, 3));
        assert_eq!(ReplayBuffer::tier_episode_range(9, Tier::Medium), (3, 6));
        assert_eq!(ReplayBuffer::tier_episode_range(9, Tier::Good), (6, 9));
        // 10 episodes: middle tier is episodes 3–6 inclusive.
        assert_eq!(ReplayBuffer::tier_episode_range(10, Tier::Bad), (0, 3));
        assert_eq!(ReplayBuffer::tier_episode_range(10, Tier::Medium), (3, 7));
        assert_eq!(ReplayBuffer::tier_episode_range(10, Tier::Good), (7, 10));
    }

    #[test]
    fn tiny_buffers_cannot_be_tiered() {
        let task = Task::sample(EnvKind::Velocity, 0, 3);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 2, 0.99, 3);
        let err = buf.tier_slice(Tier::Bad).unwrap_err();
        assert_eq!(err, EnvError::TooFewEpisodes { have: 2, need: 3 });
    }

    #[test]
    fn good_tier_outperforms_bad_tier() {
        for id in 0..3 {
            let task = Task::sample(EnvKind::Velocity, id, 21);
            let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 12, 0.99, 21);
            let (b0, b1) = ReplayBuffer::tier_episode_range(12, Tier::Bad);
            let (g0, g1) = ReplayBuffer::tier_episode_range(12, Tier::Good);
            let bad = buf.mean_return_over(b0, b1);
            let good = buf.mean_return_over(g0, g1);
            assert!(
                good > bad,
                "task {id}: good tier ({good:.2}) must beat bad tier ({bad:.2})"
            );
        }
    }

    #[test]
    fn mc_returns_match_double_loop_oracle() {
        let task = Task::sample(EnvKind::Gain, 1, 9);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 3, 0.99, 9);
        for e in 0..buf.episodes() {
            let ep = &buf.transitions[e * EPISODE_LEN..(e + 1) * EPISODE_LEN];
            for (t, tr) in ep.iter().enumerate() {
                let mut oracle = 0.0;
                for (j, fut) in ep.iter().enumerate().skip(t) {
                    let mut pow = 1.0;
                    for _ in 0..(j - t) {
                        pow *= 0.99;
                    }
                    oracle += pow * fut.r;
                }
                assert!(
                    (tr.ret - oracle).abs() < 1e-9,
                    "episode {e} step {t}: stored {} vs oracle {oracle}",
                    tr.ret
                );
            }
        }
    }

    #[test]
    fn contiguous_batch_of_region_size_is_the_whole_region() {
        let task = Task::sample(EnvKind::Velocity, 2, 13);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 3, 0.99, 13);
        let region = buf.tier_slice(Tier::Medium).unwrap();
        let mut rng = stream_rng(13, purpose::TEST, 0, 0);
        let batch = buf.sample_batch(region.len, SampleMode::Contiguous, region, &mut rng).unwrap();
        let expected: Vec<usize> = (region.start..region.end()).collect();
        assert_eq!(batch.indices, expected);
    }

    #[test]
    fn contiguous_chunk_spans_few_episodes() {
        let task = Task::sample(EnvKind::Velocity, 2, 13);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 6, 0.99, 13);
        let mut rng = stream_rng(14, purpose::TEST, 0, 0);
        for &size in &[64usize, 256, 300] {
            let batch =
                buf.sample_batch(size, SampleMode::Contiguous, buf.full_region(), &mut rng).unwrap();
            let first_ep = batch.indices[0] / EPISODE_LEN;
            let last_ep = batch.indices[size - 1] / EPISODE_LEN;
            let span = last_ep - first_ep + 1;
            assert!(
                span <= size.div_ceil(EPISODE_LEN) + 1,
                "size {size} spans {span} episodes"
            );
        }
    }

    #[test]
    fn uniform_draws_with_exclusion_are_disjoint() {
        let task = Task::sample(EnvKind::Velocity, 2, 13);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 3, 0.99, 13);
        let mut rng = stream_rng(15, purpose::TEST, 0, 0);
        let first = buf.sample_batch(200, SampleMode::Uniform, buf.full_region(), &mut rng).unwrap();
        let second = buf
            .sample_batch_excluding(200, buf.full_region(), &first.indices, &mut rng)
            .unwrap();
        for i in &second.indices {
            assert!(!first.indices.contains(i), "index {i} appears in both draws");
        }
    }

    #[test]
    fn oversized_batches_are_rejected() {
        let task = Task::sample(EnvKind::Velocity, 2, 13);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 3, 0.99, 13);
        let region = buf.tier_slice(Tier::Bad).unwrap();
        let mut rng = stream_rng(16, purpose::TEST, 0, 0);
        let err = buf.sample_batch(region.len + 1, SampleMode::Contiguous, region, &mut rng);
        assert_eq!(err.unwrap_err(), EnvError::RegionTooSmall { need: 201, have: 200 });
    }

    #[test]
    fn noise_schedule_is_non_increasing() {
        let b = BehaviorPolicy::default();
        let total = 30;
        let mut prev = f64::INFINITY;
        for ep in 0..total {
            let std = b.noise_std(ep, total);
            assert!(std <= prev, "noise must not increase over the lifetime");
            prev = std;
        }
        assert_eq!(b.noise_std(0, total), 0.8);
        assert_eq!(b.noise_std(total - 1, total), 0.05);
    }

    #[test]
    fn recorded_actions_are_within_bounds() {
        let task = Task::sample(EnvKind::Gain, 4, 17);
        let buf = generate_offline_dataset(&task, &BehaviorPolicy::default(), 3, 0.99, 17);
        for tr in &buf.transitions {
            assert!(tr.a.iter().all(|a| (-1.0..=1.0).contains(a)), "action out of bounds");
        }
    }

    #[test]
    fn direction_tasks_have_unit_norm_goals() {
        for id in 0..20 {
            let task = Task::sample(EnvKind::Direction, id, 31);
            if let TaskParams::Direction { dir } = task.params {
                let norm = fmath::hypot(dir[0], dir[1]);
                assert!((norm - 1.0).abs() < 1e-12, "goal direction must be unit norm");
            }
        }
    }

    #[test]
    fn velocity_targets_and_gain_scales_stay_in_range() {
        for id in 0..50 {
            match Task::sample(EnvKind::Velocity, id, 33).params {
                TaskParams::Velocity { target } => assert!((0.0..=3.0).contains(&target)),
                _ => unreachable!(),
            }
            match Task::sample(EnvKind::Gain, id, 33).params {
                TaskParams::Gain { scale } => {
                    assert!(scale.iter().all(|s| (0.5..=2.0).contains(s)))
                }
                _ => unreachable!(),
            }
        }
    }
}
