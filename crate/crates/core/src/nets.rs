//! Network architectures: weight-transform layers, the scalar value network,
//! and the two-head Gaussian policy.
//!
//! A weight-transform layer does not store its weight matrix directly.
//! It holds a latent code `z ∈ R^c` and a transform matrix
//! `W^wt ∈ R^{(d_in·d_out + d_out) × c}`; the product `W^wt z` is split into
//! an effective weight matrix `W* ∈ R^{d_out × d_in}` (row-major) and bias
//! `b* ∈ R^{d_out}`, and the layer computes `act(W* x + b*)`. Both `z` and
//! `W^wt` are trainable, so a gradient step moves the effective weights
//! along a learned, expressive direction — the property that makes a few
//! adaptation steps enough at test time. Every layer of both networks,
//! hidden and output alike, is a weight-transform layer in the default
//! configuration; plain dense layers exist for the ablation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha12Rng;

use crate::fmath;
use crate::graph::{kernel_nn, kernel_nt, DiffError, Graph, NodeId};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{Shape, Tensor};

/// Fixed per-dimension variance of the policy's output Gaussian.
pub const POLICY_VARIANCE: f64 = 0.04;

/// Default latent code width `c` for weight-transform layers.
pub const DEFAULT_LATENT: usize = 32;

/// Default hidden widths for both networks.
pub const DEFAULT_HIDDEN: [usize; 3] = [100, 100, 100];

/// Errors from network construction and forwarding.
#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    /// The advantage output was requested without supplying an action.
    MissingAction,
    /// An underlying graph operation failed (shape mismatch etc.).
    Diff(DiffError),
}

impl core::fmt::Display for NetError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NetError::MissingAction => {
                write!(f, "advantage output requested without an action input")
            }
            NetError::Diff(e) => write!(f, "{e}"),
        }
    }
}

impl From<DiffError> for NetError {
    fn from(e: DiffError) -> Self {
        NetError::Diff(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NetError {}

/// Elementwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Tanh,
    Relu,
}

impl Act {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Act::Identity => x,
            Act::Tanh => g.tanh(x),
            Act::Relu => g.relu(x),
        }
    }

    pub fn apply_plain(self, x: &mut [f64]) {
        match self {
            Act::Identity => {}
            Act::Tanh => {
                for v in x.iter_mut() {
                    *v = fmath::tanh(*v);
                }
            }
            Act::Relu => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Act::Identity => "identity",
            Act::Tanh => "tanh",
            Act::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Act> {
        match tag {
            "identity" => Some(Act::Identity),
            "tanh" => Some(Act::Tanh),
            "relu" => Some(Act::Relu),
            _ => None,
        }
    }
}

/// How a layer parameterizes its affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Latent code `z` [c,1] plus transform `W^wt` [(d_in·d_out+d_out), c].
    WeightTransform { latent: usize },
    /// Ordinary weight matrix [d_out, d_in] plus bias [d_out].
    Dense,
}

impl LayerKind {
    pub fn tag(self) -> &'static str {
        match self {
            LayerKind::WeightTransform { .. } => "wt",
            LayerKind::Dense => "dense",
        }
    }
}

/// One layer: dimensions, parameterization, activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub kind: LayerKind,
    pub act: Act,
}

impl LayerSpec {
    /// Parameter-set entries per layer (both kinds store exactly two).
    pub const ENTRIES: usize = 2;

    pub fn wt(d_in: usize, d_out: usize, latent: usize, act: Act) -> Self {
        LayerSpec { d_in, d_out, kind: LayerKind::WeightTransform { latent }, act }
    }

    pub fn dense(d_in: usize, d_out: usize, act: Act) -> Self {
        LayerSpec { d_in, d_out, kind: LayerKind::Dense, act }
    }

    /// Draw this layer's parameters and append them under `prefix`.
    ///
    /// Weight-transform: `W^wt ~ U(±1/√(c·d_in))`, `z ~ 0.1·N(0,1)`.
    /// Dense: `W ~ U(±1/√d_in)`, `b = 0`.
    pub fn init_into(&self, set: &mut ParamSet, prefix: &str, rng: &mut ChaCha12Rng) {
        match self.kind {
            LayerKind::WeightTransform { latent } => {
                let d = self.d_in * self.d_out + self.d_out;
                let bound = 1.0 / fmath::sqrt((latent * self.d_in) as f64);
                let wwt: Vec<f64> =
                    (0..d * latent).map(|_| rng::uniform_in(rng, -bound, bound)).collect();
                let z: Vec<f64> = (0..latent).map(|_| 0.1 * rng::normal01(rng)).collect();
                set.push(format!("{prefix}.wwt"), Tensor::matrix(d, latent, wwt))
                    .expect("layer prefixes are unique");
                set.push(format!("{prefix}.z"), Tensor::matrix(latent, 1, z))
                    .expect("layer prefixes are unique");
            }
            LayerKind::Dense => {
                let bound = 1.0 / fmath::sqrt(self.d_in as f64);
                let w: Vec<f64> =
                    (0..self.d_out * self.d_in).map(|_| rng::uniform_in(rng, -bound, bound)).collect();
                set.push(format!("{prefix}.w"), Tensor::matrix(self.d_out, self.d_in, w))
                    .expect("layer prefixes are unique");
                set.push(format!("{prefix}.b"), Tensor::vector(vec![0.0; self.d_out]))
                    .expect("layer prefixes are unique");
            }
        }
    }

    /// Effective weight matrix [d_out, d_in] and bias [d_out] as graph nodes.
    ///
    /// For a weight-transform layer this builds `W^wt z` and splits it; for a
    /// dense layer the stored parameters are returned as-is.
    pub fn materialize(&self, g: &mut Graph, p: &[NodeId]) -> Result<(NodeId, NodeId), DiffError> {
        match self.kind {
            LayerKind::WeightTransform { .. } => {
                let wz = g.matmul(p[0], p[1])?; // [D, 1]
                let d = self.d_in * self.d_out;
                let flat = g.reshape(wz, Shape::vector(d + self.d_out))?;
                let wflat = g.slice_cols(flat, 0, d)?;
                let wstar = g.reshape(wflat, Shape::matrix(self.d_out, self.d_in))?;
                let bstar = g.slice_cols(flat, d, self.d_out)?;
                Ok((wstar, bstar))
            }
            LayerKind::Dense => Ok((p[0], p[1])),
        }
    }

    /// Forward a batch `x` [B, d_in] -> [B, d_out], activation applied.
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId, DiffError> {
        let (wstar, bstar) = self.materialize(g, p)?;
        let y = g.matmul_nt(x, wstar)?;
        let rows = g.shape_of(x).rows();
        let bias = g.repeat_rows(bstar, rows)?;
        let yb = g.add(y, bias)?;
        Ok(self.act.apply(g, yb))
    }

    /// Graph-free forward for rollouts. Runs the same kernels in the same
    /// order as [`LayerSpec::forward`], so outputs agree bitwise with the
    /// graph path.
    pub fn forward_plain(&self, first: &Tensor, second: &Tensor, x: &[f64], rows: usize) -> Vec<f64> {
        let (wstar, bstar): (Vec<f64>, Vec<f64>) = match self.kind {
            LayerKind::WeightTransform { latent } => {
                let d = self.d_in * self.d_out + self.d_out;
                let mut flat = vec![0.0; d];
                kernel_nn(first.data(), second.data(), d, latent, 1, &mut flat);
                let split = self.d_in * self.d_out;
                let b = flat.split_off(split);
                (flat, b)
            }
            LayerKind::Dense => (first.data().to_vec(), second.data().to_vec()),
        };
        let mut y = vec![0.0; rows * self.d_out];
        kernel_nt(x, &wstar, rows, self.d_in, self.d_out, &mut y);
        for r in 0..rows {
            for (c, &b) in bstar.iter().enumerate() {
                y[r * self.d_out + c] += b;
            }
        }
        self.act.apply_plain(&mut y);
        y
    }
}

/// Run a stack of layers over a bound batch; `p` holds two ids per layer.
fn forward_stack(
    layers: &[LayerSpec],
    g: &mut Graph,
    p: &[NodeId],
    x: NodeId,
) -> Result<NodeId, DiffError> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(g, &p[LayerSpec::ENTRIES * i..LayerSpec::ENTRIES * (i + 1)], h)?;
    }
    Ok(h)
}

fn forward_stack_plain(layers: &[LayerSpec], params: &ParamSet, offset: usize, x: &[f64], rows: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let base = offset + LayerSpec::ENTRIES * i;
        h = layer.forward_plain(params.tensor(base), params.tensor(base + 1), &h, rows);
    }
    h
}

/// State-value network: obs -> hidden stack -> scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub layers: Vec<LayerSpec>,
}

impl ValueNet {
    /// All layers weight-transform; hidden activations tanh, output linear.
    pub fn wt(obs_dim: usize, hidden: &[usize], latent: usize) -> Self {
        ValueNet { layers: stack_specs(obs_dim, hidden, 1, |i, o, a| LayerSpec::wt(i, o, latent, a)) }
    }

    /// Dense variant for the weight-transform ablation.
    pub fn dense(obs_dim: usize, hidden: &[usize]) -> Self {
        ValueNet { layers: stack_specs(obs_dim, hidden, 1, LayerSpec::dense) }
    }

    pub fn obs_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Which layer a parameter-set index belongs to (two entries per layer).
    pub fn layer_of(&self, param_index: usize) -> usize {
        param_index / LayerSpec::ENTRIES
    }

    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let mut set = ParamSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.init_into(&mut set, &format!("l{i}"), rng);
        }
        set
    }

    /// Batch of values as a [B, 1] node.
    pub fn forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId, DiffError> {
        forward_stack(&self.layers, g, p, x)
    }

    /// Graph-free values, one per row of `x`.
    pub fn forward_plain(&self, params: &ParamSet, x: &[f64], rows: usize) -> Vec<f64> {
        forward_stack_plain(&self.layers, params, 0, x, rows)
    }
}

/// Gaussian policy with a shared body and two heads.
///
/// The action head maps features to the Gaussian mean `â_μ` (fixed variance
/// [`POLICY_VARIANCE`]). The advantage head maps features concatenated with
/// an action to a scalar advantage estimate `Â`; it only participates in the
/// enriched adaptation loss, never in action selection.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub body: Vec<LayerSpec>,
    pub action_head: LayerSpec,
    pub adv_head: LayerSpec,
    pub sigma2: f64,
}

impl PolicyNet {
    pub fn wt(obs_dim: usize, act_dim: usize, hidden: &[usize], latent: usize) -> Self {
        Self::build(obs_dim, act_dim, hidden, |i, o, a| LayerSpec::wt(i, o, latent, a))
    }

    pub fn dense(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Self {
        Self::build(obs_dim, act_dim, hidden, LayerSpec::dense)
    }

    fn build(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        mk: impl Fn(usize, usize, Act) -> LayerSpec,
    ) -> Self {
        assert!(!hidden.is_empty(), "policy needs at least one hidden layer");
        let mut body = Vec::with_capacity(hidden.len());
        let mut d = obs_dim;
        for &h in hidden {
            body.push(mk(d, h, Act::Tanh));
            d = h;
        }
        PolicyNet {
            body,
            action_head: mk(d, act_dim, Act::Identity),
            adv_head: mk(d + act_dim, 1, Act::Identity),
            sigma2: POLICY_VARIANCE,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.body[0].d_in
    }

    pub fn act_dim(&self) -> usize {
        self.action_head.d_out
    }

    /// Layers in parameter order: body, action head, advantage head.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = self.body.clone();
        out.push(self.action_head);
        out.push(self.adv_head);
        out
    }

    pub fn n_layers(&self) -> usize {
        self.body.len() + 2
    }

    pub fn layer_of(&self, param_index: usize) -> usize {
        param_index / LayerSpec::ENTRIES
    }

    /// Parameter-set index where the advantage head's entries start.
    pub fn adv_head_param_range(&self) -> core::ops::Range<usize> {
        let start = LayerSpec::ENTRIES * (self.body.len() + 1);
        start..start + LayerSpec::ENTRIES
    }

    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let mut set = ParamSet::new();
        for (i, layer) in self.body.iter().enumerate() {
            layer.init_into(&mut set, &format!("l{i}"), rng);
        }
        self.action_head.init_into(&mut set, "act", rng);
        self.adv_head.init_into(&mut set, "adv", rng);
        set
    }

    /// Forward observations `s` [B, obs_dim]. Returns the Gaussian mean
    /// [B, act_dim] and, when `want_adv` is set, the advantage estimate
    /// [B, 1] for the supplied actions `a` [B, act_dim].
    ///
    /// Requesting the advantage output without an action is an error.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        s: NodeId,
        a: Option<NodeId>,
        want_adv: bool,
    ) -> Result<(NodeId, Option<NodeId>), NetError> {
        let feats = forward_stack(&self.body, g, p, s)?;
        let nb = LayerSpec::ENTRIES * self.body.len();
        let mean = self.action_head.forward(g, &p[nb..nb + LayerSpec::ENTRIES], feats)?;
        let adv = if want_adv {
            let a = a.ok_or(NetError::MissingAction)?;
            let fa = g.concat(feats, a)?;
            let na = nb + LayerSpec::ENTRIES;
            Some(self.adv_head.forward(g, &p[na..na + LayerSpec::ENTRIES], fa)?)
        } else {
            None
        };
        Ok((mean, adv))
    }

    /// Graph-free Gaussian means, row-major [B * act_dim].
    pub fn mean_plain(&self, params: &ParamSet, s: &[f64], rows: usize) -> Vec<f64> {
        let feats = forward_stack_plain(&self.body, params, 0, s, rows);
        let base = LayerSpec::ENTRIES * self.body.len();
        self.action_head.forward_plain(params.tensor(base), params.tensor(base + 1), &feats, rows)
    }
}

fn stack_specs(
    d_in: usize,
    hidden: &[usize],
    d_out: usize,
    mk: impl Fn(usize, usize, Act) -> LayerSpec,
) -> Vec<LayerSpec> {
    assert!(!hidden.is_empty(), "network needs at least one hidden layer");
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut d = d_in;
    for &h in hidden {
        layers.push(mk(d, h, Act::Tanh));
        d = h;
    }
    layers.push(mk(d, d_out, Act::Identity));
    layers
}

/// Per-sample log-density of `a` under `N(mean, σ²·I)`:
/// `logp_i = −(k/2)·ln(2πσ²) − ‖a_i − mean_i‖² / (2σ²)`, shape [B].
pub fn gaussian_log_prob(
    g: &mut Graph,
    mean: NodeId,
    a: NodeId,
    sigma2: f64,
) -> Result<NodeId, DiffError> {
    assert!(sigma2 > 0.0, "variance must be positive");
    let k = g.shape_of(mean).last_dim();
    let diff = g.sub(a, mean)?;
    let sq = g.square(diff);
    let ssq = g.sum_cols(sq)?;
    let quad = g.scale(ssq, -1.0 / (2.0 * sigma2));
    let norm = -0.5 * k as f64 * (fmath::LN_TAU + fmath::ln(sigma2));
    Ok(g.offset(quad, norm))
}

/// Single-sample variant: [1, k] inputs, rank-0 output.
pub fn gaussian_log_prob_single(
    g: &mut Graph,
    mean: NodeId,
    a: NodeId,
    sigma2: f64,
) -> Result<NodeId, DiffError> {
    let lp = gaussian_log_prob(g, mean, a, sigma2)?;
    g.reshape(lp, Shape::scalar())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, stream_rng};

    fn test_rng() -> ChaCha12Rng {
        stream_rng(42, purpose::TEST, 0, 0)
    }

    #[test]
    fn wt_layer_matches_manually_materialized_dense_layer() {
        let layer = LayerSpec::wt(3, 4, 8, Act::Tanh);
        let mut rng = test_rng();
        let mut params = ParamSet::new();
        layer.init_into(&mut params, "l", &mut rng);

        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let x = g.constant(Tensor::matrix(2, 3, vec![0.3, -0.8, 1.1, 0.0, 0.5, -0.2]));
        let y_wt = layer.forward(&mut g, &ids, x).unwrap();

        // Materialize W*, b* and forward through an equivalent dense layer.
        let (wstar, bstar) = layer.materialize(&mut g, &ids).unwrap();
        let dense = LayerSpec::dense(3, 4, Act::Tanh);
        let dense_ids = [wstar, bstar];
        let y_dense = dense.forward(&mut g, &dense_ids, x).unwrap();

        for (a, b) in g.value(y_wt).data().iter().zip(g.value(y_dense).data()) {
            assert!((a - b).abs() < 1e-12, "wt and dense forwards disagree: {a} vs {b}");
        }
    }

    #[test]
    fn plain_forward_agrees_bitwise_with_graph_forward() {
        let layer = LayerSpec::wt(5, 7, 4, Act::Tanh);
        let mut rng = test_rng();
        let mut params = ParamSet::new();
        layer.init_into(&mut params, "l", &mut rng);

        let x: Vec<f64> = (0..3 * 5).map(|i| (i as f64) * 0.17 - 1.2).collect();
        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let xn = g.constant(Tensor::matrix(3, 5, x.clone()));
        let y_graph = layer.forward(&mut g, &ids, xn).unwrap();
        let y_plain = layer.forward_plain(params.tensor(0), params.tensor(1), &x, 3);

        assert_eq!(g.value(y_graph).data(), &y_plain[..], "graph and plain paths must agree bitwise");
    }

    #[test]
    fn value_net_has_expected_layer_shapes() {
        let net = ValueNet::wt(5, &DEFAULT_HIDDEN, DEFAULT_LATENT);
        assert_eq!(net.n_layers(), 4);
        assert_eq!(net.layers[0].d_in, 5);
        assert_eq!(net.layers[3].d_out, 1);
        let mut rng = test_rng();
        let params = net.init_params(&mut rng);
        assert_eq!(params.len(), 8);
        // First layer transform: (5*100 + 100) x 32.
        assert_eq!(params.get("l0.wwt").unwrap().shape().dims(), &[600, 32]);
        assert_eq!(params.get("l0.z").unwrap().shape().dims(), &[32, 1]);
    }

    #[test]
    fn policy_forward_produces_mean_and_advantage() {
        let net = PolicyNet::wt(5, 2, &[16, 16], 8);
        let mut rng = test_rng();
        let params = net.init_params(&mut rng);
        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let s = g.constant(Tensor::matrix(4, 5, vec![0.1; 20]));
        let a = g.constant(Tensor::matrix(4, 2, vec![0.2; 8]));

        let (mean, adv) = net.forward(&mut g, &ids, s, Some(a), true).unwrap();
        assert_eq!(g.shape_of(mean).dims(), &[4, 2]);
        assert_eq!(g.shape_of(adv.unwrap()).dims(), &[4, 1]);

        let (_, no_adv) = net.forward(&mut g, &ids, s, None, false).unwrap();
        assert!(no_adv.is_none());
    }

    #[test]
    fn advantage_without_action_is_an_error() {
        let net = PolicyNet::wt(5, 2, &[8], 4);
        let mut rng = test_rng();
        let params = net.init_params(&mut rng);
        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let s = g.constant(Tensor::matrix(1, 5, vec![0.0; 5]));
        let err = net.forward(&mut g, &ids, s, None, true).unwrap_err();
        assert_eq!(err, NetError::MissingAction);
    }

    #[test]
    fn policy_mean_plain_agrees_bitwise_with_graph() {
        let net = PolicyNet::wt(5, 2, &[16, 16], 8);
        let mut rng = test_rng();
        let params = net.init_params(&mut rng);
        let s: Vec<f64> = (0..2 * 5).map(|i| (i as f64) * 0.31 - 0.7).collect();

        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let sn = g.constant(Tensor::matrix(2, 5, s.clone()));
        let (mean, _) = net.forward(&mut g, &ids, sn, None, false).unwrap();
        let plain = net.mean_plain(&params, &s, 2);
        assert_eq!(g.value(mean).data(), &plain[..]);
    }

    #[test]
    fn gaussian_log_prob_matches_hand_computed_density() {
        // k = 2, σ² = 0.04, mean = (0.1, −0.2), a = (0.15, −0.1):
        // ‖d‖² = 0.0025 + 0.01 = 0.0125
        // logp = −ln(2π·0.04) − 0.0125/0.08 = 1.3809987584588551… − 0.15625
        let mut g = Graph::new();
        let mean = g.constant(Tensor::matrix(1, 2, vec![0.1, -0.2]));
        let a = g.constant(Tensor::matrix(1, 2, vec![0.15, -0.1]));
        let lp = gaussian_log_prob_single(&mut g, mean, a, 0.04).unwrap();
        let expected = 1.2247487584588551;
        assert!(
            (g.item(lp) - expected).abs() < 1e-12,
            "log-prob {} differs from oracle {expected}",
            g.item(lp)
        );
    }

    #[test]
    fn gaussian_log_prob_integrates_to_one_in_1d() {
        // Riemann check that exp(logp) is a density: ∫ ≈ 1.
        let mut g = Graph::new();
        let n = 4000;
        let (lo, hi) = (-2.0, 2.0);
        let step = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * step;
            let mean = g.constant(Tensor::matrix(1, 1, vec![0.3]));
            let a = g.constant(Tensor::matrix(1, 1, vec![x]));
            let lp = gaussian_log_prob_single(&mut g, mean, a, 0.04).unwrap();
            total += fmath::exp(g.item(lp)) * step;
        }
        assert!((total - 1.0).abs() < 1e-6, "density integrates to {total}");
    }

    #[test]
    fn init_draws_respect_documented_ranges() {
        let layer = LayerSpec::wt(5, 100, 32, Act::Tanh);
        let mut rng = test_rng();
        let mut params = ParamSet::new();
        layer.init_into(&mut params, "l", &mut rng);
        let bound = 1.0 / fmath::sqrt((32 * 5) as f64);
        let wwt = params.get("l.wwt").unwrap();
        assert!(wwt.data().iter().all(|&v| v > -bound && v < bound));
        // Latent code scale: std should be near 0.1 (loose, it is 32 draws).
        let z = params.get("l.z").unwrap();
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / 32.0;
        assert!(var > 0.001 && var < 0.05, "z variance {var} wildly off 0.01");
    }
}
