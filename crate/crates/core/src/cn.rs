//! Collision-captured message-passing surrogate.
//!
//! One round of message passing over the fixed chain graph: an edge network
//! `phi` turns (receiver features, sender features, displacement) into a
//! message, messages are summed at their receivers, and a node network
//! `gamma` maps (node features, summed messages) to the next-step velocity.
//! The same two networks are shared by every edge and every node.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dem::{self, FloeSystem, SimState, Trajectory};
use crate::graph::{build_chain_graph, edge_features, RelationMatrices};
use crate::nn::{Activation, AdamState, Mlp, MlpGrads, NnError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CnError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("step index {index} out of range for a trajectory of {len} states (need 2 <= j < len)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss needs at least one target")]
    EmptyTarget,
    #[error("prediction has {pred} entries but target has {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("training data too short: {0}")]
    DataTooShort(String),
    #[error("loss became non-finite at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: u64 },
    #[error("model expects {expected} floes, got {got}")]
    FloeCountMismatch { expected: usize, got: usize },
    #[error("inconsistent feature width: expected {expected}, got {got}")]
    FeatureWidth { expected: usize, got: usize },
}

/// How much position history the node features carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum History {
    /// `[x_{t-2}, x_{t-1}, v_{t-1}, r]` with finite-difference velocity.
    #[default]
    TwoStep,
    /// `[x_{t-1}, v_{t-1}, r]` with the velocity supplied.
    OneStep,
}

impl History {
    pub fn feature_width(self) -> usize {
        match self {
            History::TwoStep => 4,
            History::OneStep => 3,
        }
    }
}

/// What the node network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Next-step velocity; position follows by integration.
    #[default]
    Velocity,
    /// Next-step position; velocity follows by finite difference.
    Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnConfig {
    pub activation: Activation,
    pub history: History,
    pub target: Target,
    /// Width of each edge message.
    pub message_width: usize,
    pub phi_hidden: Vec<usize>,
    pub gamma_hidden: Vec<usize>,
    /// Velocity target only: predict the change from the previous velocity
    /// rather than the velocity itself.
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub edge_scaling: EdgeScaling,
}

/// How edge displacements are standardized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeScaling {
    /// Mean and std of the training displacements.
    Fitted,
    /// Zero-centred, divided by the mean floe radius, so that contact
    /// distances land near unit scale.
    #[default]
    Radius,
}

impl Default for CnConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Mish,
            history: History::TwoStep,
            target: Target::Velocity,
            message_width: 100,
            phi_hidden: vec![150; 4],
            gamma_hidden: vec![100],
            residual: true,
            edge_scaling: EdgeScaling::Radius,
        }
    }
}

impl CnConfig {
    pub fn feature_width(&self) -> usize {
        self.history.feature_width()
    }

    pub fn phi_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.feature_width() + 1];
        w.extend(&self.phi_hidden);
        w.push(self.message_width);
        w
    }

    pub fn gamma_widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_width() + self.message_width];
        w.extend(&self.gamma_hidden);
        w.push(1);
        w
    }

    /// Whether predictions are offsets from the previous velocity.
    pub fn predicts_residual(&self) -> bool {
        self.residual && self.target == Target::Velocity
    }

    /// Value the network's output is added to, per floe node.
    fn base(&self, block: &NodeFeatureBlock, floe: usize) -> f64 {
        if self.predicts_residual() {
            block.row(floe + 1)[block.width - 2]
        } else {
            0.0
        }
    }
}

/// Standardization statistics, fixed from the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub edge_mean: f64,
    pub edge_std: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalization {
    pub fn identity(width: usize) -> Self {
        Self {
            feature_mean: vec![0.0; width],
            feature_std: vec![1.0; width],
            edge_mean: 0.0,
            edge_std: 1.0,
            target_mean: 0.0,
            target_std: 1.0,
        }
    }
}

/// Trainable weights plus everything needed to apply them.
#[derive(Debug, Clone, PartialEq)]
pub struct CnParams {
    pub config: CnConfig,
    pub phi: Mlp,
    pub gamma: Mlp,
    pub norm: Normalization,
}

impl CnParams {
    pub fn new<R: Rng + ?Sized>(config: CnConfig, rng: &mut R) -> Result<Self, CnError> {
        let phi = Mlp::new(&config.phi_widths(), config.activation, rng)?;
        let gamma = Mlp::new(&config.gamma_widths(), config.activation, rng)?;
        let norm = Normalization::identity(config.feature_width());
        Ok(Self {
            config,
            phi,
            gamma,
            norm,
        })
    }

    pub fn zeros(config: CnConfig) -> Result<Self, CnError> {
        let phi = Mlp::zeros(&config.phi_widths(), config.activation)?;
        let gamma = Mlp::zeros(&config.gamma_widths(), config.activation)?;
        let norm = Normalization::identity(config.feature_width());
        Ok(Self {
            config,
            phi,
            gamma,
            norm,
        })
    }

    fn check(&self) -> Result<(), CnError> {
        let f = self.config.feature_width();
        if self.phi.input_width() != 2 * f + 1 {
            return Err(CnError::FeatureWidth {
                expected: 2 * f + 1,
                got: self.phi.input_width(),
            });
        }
        if self.gamma.input_width() != f + self.phi.output_width() {
            return Err(CnError::FeatureWidth {
                expected: f + self.phi.output_width(),
                got: self.gamma.input_width(),
            });
        }
        if self.gamma.output_width() != 1 {
            return Err(CnError::FeatureWidth {
                expected: 1,
                got: self.gamma.output_width(),
            });
        }
        Ok(())
    }
}

/// Per-node input features, row-major `n_nodes x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureBlock {
    pub width: usize,
    pub data: Vec<f64>,
}

impl NodeFeatureBlock {
    pub fn n_nodes(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.data[node * self.width..(node + 1) * self.width]
    }

    /// Builds the block for the chain graph: walls at both ends with zero
    /// velocity and zero radius.
    ///
    /// `v_prev` overrides the finite-difference velocity (used by the
    /// one-step variant during training).
    pub fn for_chain(
        history: History,
        system: &FloeSystem,
        dt: f64,
        x_prev2: &[f64],
        x_prev: &[f64],
        v_prev: Option<&[f64]>,
    ) -> Self {
        let width = history.feature_width();
        let n = system.n_floes();
        let mut data = Vec::with_capacity((n + 2) * width);
        let mut push_node = |x2: f64, x1: f64, v: f64, r: f64| match history {
            History::TwoStep => data.extend_from_slice(&[x2, x1, v, r]),
            History::OneStep => data.extend_from_slice(&[x1, v, r]),
        };
        let (left, right) = (system.domain_left(), system.domain_right());
        push_node(left, left, 0.0, 0.0);
        for i in 0..n {
            let v = match v_prev {
                Some(v) => v[i],
                None => (x_prev[i] - x_prev2[i]) / dt,
            };
            push_node(x_prev2[i], x_prev[i], v, system.radius()[i]);
        }
        push_node(right, right, 0.0, 0.0);
        Self { width, data }
    }
}

/// Positions of every chain node: walls then floes then wall.
pub fn chain_node_positions(system: &FloeSystem, x: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(x.len() + 2);
    p.push(system.domain_left());
    p.extend_from_slice(x);
    p.push(system.domain_right());
    p
}

/// Node block and edge displacements for predicting step `j` of `traj`.
pub fn marshal_features(
    traj: &Trajectory,
    j: usize,
    history: History,
    rel: &RelationMatrices,
) -> Result<(NodeFeatureBlock, Vec<f64>), CnError> {
    if j < 2 || j >= traj.len() {
        return Err(CnError::IndexOutOfRange {
            index: j,
            len: traj.len(),
        });
    }
    let (s2, s1) = (&traj.states[j - 2], &traj.states[j - 1]);
    let supplied = match history {
        History::OneStep => Some(s1.v.as_slice()),
        History::TwoStep => None,
    };
    let block = NodeFeatureBlock::for_chain(history, &traj.system, traj.dt, &s2.x, &s1.x, supplied);
    let edges = edge_features(&chain_node_positions(&traj.system, &s1.x), rel);
    Ok((block, edges))
}

/// Cached intermediates of a batched forward pass.
struct ForwardPass {
    phi_trace: crate::nn::Trace,
    gamma_trace: crate::nn::Trace,
    /// Normalized output per node, `1 x (batch * n_nodes)`.
    output: DMatrix<f64>,
}

fn batched_forward(
    params: &CnParams,
    blocks: &[&NodeFeatureBlock],
    edges: &[&[f64]],
    rel: &RelationMatrices,
) -> Result<ForwardPass, CnError> {
    params.check()?;
    let f = params.config.feature_width();
    let (n_nodes, n_edges) = (rel.n_nodes(), rel.n_edges());
    let batch = blocks.len();
    let norm = &params.norm;
    for (b, e) in blocks.iter().zip(edges) {
        if b.width != f {
            return Err(CnError::FeatureWidth {
                expected: f,
                got: b.width,
            });
        }
        if b.n_nodes() != n_nodes {
            return Err(NnError::DimensionMismatch {
                expected: n_nodes,
                got: b.n_nodes(),
            }
            .into());
        }
        if e.len() != n_edges {
            return Err(NnError::DimensionMismatch {
                expected: n_edges,
                got: e.len(),
            }
            .into());
        }
    }
    // Normalized node features, `f x (batch * n_nodes)`.
    let nodes = DMatrix::from_fn(f, batch * n_nodes, |c, col| {
        let (b, i) = (col / n_nodes, col % n_nodes);
        (blocks[b].data[i * f + c] - norm.feature_mean[c]) / norm.feature_std[c]
    });
    let phi_in = DMatrix::from_fn(2 * f + 1, batch * n_edges, |row, col| {
        let (b, k) = (col / n_edges, col % n_edges);
        if row < f {
            nodes[(row, b * n_nodes + rel.receiver_of(k))]
        } else if row < 2 * f {
            nodes[(row - f, b * n_nodes + rel.sender_of(k))]
        } else {
            (edges[b][k] - norm.edge_mean) / norm.edge_std
        }
    });
    let phi_trace = params.phi.forward_traced(&phi_in)?;
    let messages = phi_trace.output();
    let d = messages.nrows();
    let mut gamma_in = DMatrix::zeros(f + d, batch * n_nodes);
    gamma_in.rows_mut(0, f).copy_from(&nodes);
    for col in 0..batch * n_edges {
        let (b, k) = (col / n_edges, col % n_edges);
        let target = b * n_nodes + rel.receiver_of(k);
        let mut agg = gamma_in.view_mut((f, target), (d, 1));
        agg += messages.column(col);
    }
    let gamma_trace = params.gamma.forward_traced(&gamma_in)?;
    let output = gamma_trace.output().clone();
    Ok(ForwardPass {
        phi_trace,
        gamma_trace,
        output,
    })
}

/// Predicted next-step quantity (velocity or position, per the config) for
/// every node, in physical units. Wall entries are raw network output.
pub fn cn_forward(
    params: &CnParams,
    block: &NodeFeatureBlock,
    edges: &[f64],
    rel: &RelationMatrices,
) -> Result<Vec<f64>, CnError> {
    let pass = batched_forward(params, &[block], &[edges], rel)?;
    let norm = &params.norm;
    let n = rel.n_nodes();
    Ok(pass
        .output
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let base = if i == 0 || i + 1 == n { 0.0 } else { params.config.base(block, i - 1) };
            base + y * norm.target_std + norm.target_mean
        })
        .collect())
}

/// Mean squared error between predicted and target values.
pub fn cn_loss(pred: &[f64], target: &[f64]) -> Result<f64, CnError> {
    if pred.len() != target.len() {
        return Err(CnError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(CnError::EmptyTarget);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Input/target pair for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub block: NodeFeatureBlock,
    pub edges: Vec<f64>,
    /// What the network itself predicts, one per floe (walls excluded):
    /// the next velocity or position, or for residual models the velocity
    /// change.
    pub target: Vec<f64>,
}

impl TrainingPair {
    pub fn from_trajectory(
        traj: &Trajectory,
        j: usize,
        config: &CnConfig,
        rel: &RelationMatrices,
    ) -> Result<Self, CnError> {
        let (block, edges) = marshal_features(traj, j, config.history, rel)?;
        let s = &traj.states[j];
        let mut target = match config.target {
            Target::Velocity => s.v.clone(),
            Target::Position => s.x.clone(),
        };
        for (i, t) in target.iter_mut().enumerate() {
            *t -= config.base(&block, i);
        }
        Ok(Self { block, edges, target })
    }
}

/// Normalized-target MSE over floe nodes and its gradient.
///
/// Returns the loss in physical units squared alongside the gradients.
pub fn loss_and_gradient(
    params: &CnParams,
    pairs: &[&TrainingPair],
    rel: &RelationMatrices,
) -> Result<(f64, MlpGrads, MlpGrads), CnError> {
    let blocks: Vec<&NodeFeatureBlock> = pairs.iter().map(|p| &p.block).collect();
    let edges: Vec<&[f64]> = pairs.iter().map(|p| p.edges.as_slice()).collect();
    let pass = batched_forward(params, &blocks, &edges, rel)?;
    let (n_nodes, n_edges) = (rel.n_nodes(), rel.n_edges());
    let n_floes = n_nodes - 2;
    let count = (pairs.len() * n_floes) as f64;
    if count == 0.0 {
        return Err(CnError::EmptyTarget);
    }
    let norm = &params.norm;
    let mut upstream = DMatrix::zeros(1, pairs.len() * n_nodes);
    let mut loss = 0.0;
    for (b, pair) in pairs.iter().enumerate() {
        if pair.target.len() != n_floes {
            return Err(CnError::LengthMismatch {
                pred: n_floes,
                target: pair.target.len(),
            });
        }
        for i in 0..n_floes {
            let col = b * n_nodes + i + 1;
            let t = (pair.target[i] - norm.target_mean) / norm.target_std;
            let diff = pass.output[(0, col)] - t;
            loss += diff * diff;
            upstream[(0, col)] = 2.0 * diff / count;
        }
    }
    let loss = loss / count * norm.target_std * norm.target_std;
    let (gamma_grads, gamma_in_grad) = params.gamma.backward(&pass.gamma_trace, &upstream)?;
    let f = params.config.feature_width();
    let d = params.phi.output_width();
    let mut msg_grad = DMatrix::zeros(d, pairs.len() * n_edges);
    for col in 0..pairs.len() * n_edges {
        let (b, k) = (col / n_edges, col % n_edges);
        let node = b * n_nodes + rel.receiver_of(k);
        msg_grad.column_mut(col).copy_from(&gamma_in_grad.view((f, node), (d, 1)));
    }
    let (phi_grads, _) = params.phi.backward(&pass.phi_trace, &msg_grad)?;
    Ok((loss, phi_grads, gamma_grads))
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    /// Fraction of whole trajectories held out for validation.
    pub validation_fraction: f64,
    /// Cap on validation pairs evaluated per epoch.
    pub validation_pairs: usize,
    /// Share of each batch drawn from steps where some floe's velocity
    /// changes (a contact is active); the rest are uniform over all steps.
    #[serde(default)]
    pub contact_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 1e-3,
            lr_decay: 0.94,
            epochs: 30,
            pairs_per_epoch: 40_000,
            validation_fraction: 0.1,
            validation_pairs: 2_000,
            contact_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub n_train_trajectories: usize,
    pub n_validation_trajectories: usize,
}

/// Mean/std over training pairs. Constant columns get unit scale.
fn fit_normalization(config: &CnConfig, trajs: &[&Trajectory]) -> Result<Normalization, CnError> {
    let f = config.feature_width();
    let mut feat = vec![Welford::default(); f];
    let mut edge = Welford::default();
    let mut target = Welford::default();
    let mut radius = Welford::default();
    for traj in trajs {
        traj.system.radius().iter().for_each(|&r| radius.push(r));
        let (rel, _) = build_chain_graph(traj.n_floes());
        for j in 2..traj.len() {
            let pair = TrainingPair::from_trajectory(traj, j, config, &rel)?;
            for node in 0..pair.block.n_nodes() {
                for (c, w) in feat.iter_mut().enumerate() {
                    w.push(pair.block.row(node)[c]);
                }
            }
            pair.edges.iter().for_each(|&e| edge.push(e));
            pair.target.iter().for_each(|&t| target.push(t));
        }
    }
    let mean_radius = if radius.mean > 1e-12 { radius.mean } else { 1.0 };
    Ok(Normalization {
        feature_mean: feat.iter().map(|w| w.mean).collect(),
        feature_std: feat.iter().map(Welford::scale).collect(),
        edge_mean: match config.edge_scaling {
            EdgeScaling::Fitted => edge.mean,
            EdgeScaling::Radius => 0.0,
        },
        edge_std: match config.edge_scaling {
            EdgeScaling::Fitted => edge.scale(),
            EdgeScaling::Radius => mean_radius,
        },
        target_mean: target.mean,
        target_std: target.scale(),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn scale(&self) -> f64 {
        let sd = if self.n > 1 { (self.m2 / self.n as f64).sqrt() } else { 0.0 };
        if sd > 1e-12 {
            sd
        } else {
            1.0
        }
    }
}

/// Splits trajectory indices into (train, validation) by holding out whole
/// trajectories. A single trajectory is used for both.
pub fn split_trajectories<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Fits a fresh network to the trajectories.
///
/// Normalization is fitted on the training trajectories first; pairs are
/// then drawn with replacement, uniformly over every (trajectory, step)
/// except for the `contact_fraction` share reserved for contact steps.
pub fn train<R: Rng + ?Sized>(
    trajs: &[Trajectory],
    config: CnConfig,
    hyper: &TrainConfig,
    rng: &mut R,
) -> Result<(CnParams, TrainReport), CnError> {
    train_with_progress(trajs, config, hyper, rng, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress<R: Rng + ?Sized>(
    trajs: &[Trajectory],
    config: CnConfig,
    hyper: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(CnParams, TrainReport), CnError> {
    if trajs.is_empty() {
        return Err(CnError::DataTooShort("no trajectories".into()));
    }
    if let Some(t) = trajs.iter().find(|t| t.len() < 3) {
        return Err(CnError::DataTooShort(format!(
            "trajectory with {} states; at least 3 are needed",
            t.len()
        )));
    }
    let n_floes = trajs[0].n_floes();
    if let Some(t) = trajs.iter().find(|t| t.n_floes() != n_floes) {
        return Err(CnError::FloeCountMismatch {
            expected: n_floes,
            got: t.n_floes(),
        });
    }
    if hyper.batch_size == 0 {
        return Err(CnError::DataTooShort("batch size is zero".into()));
    }
    let (rel, _) = build_chain_graph(n_floes);
    let (train_idx, val_idx) = split_trajectories(trajs.len(), hyper.validation_fraction, rng);
    let train_set: Vec<&Trajectory> = train_idx.iter().map(|&i| &trajs[i]).collect();
    let val_set: Vec<&Trajectory> = val_idx.iter().map(|&i| &trajs[i]).collect();

    let mut params = CnParams::new(config.clone(), rng)?;
    params.norm = fit_normalization(&config, &train_set)?;

    // Cumulative pair counts for uniform sampling over (trajectory, step).
    let mut offsets = Vec::with_capacity(train_set.len());
    let mut total = 0usize;
    for t in &train_set {
        offsets.push(total);
        total += t.len() - 2;
    }
    let locate = |g: usize| -> (usize, usize) {
        let ti = offsets.partition_point(|&o| o <= g) - 1;
        (ti, g - offsets[ti] + 2)
    };
    let contact_steps: Vec<usize> = (0..total)
        .filter(|&g| {
            let (ti, j) = locate(g);
            let t = train_set[ti];
            t.states[j].v != t.states[j - 1].v
        })
        .collect();
    let n_contact = if contact_steps.is_empty() {
        0
    } else {
        ((hyper.contact_fraction.clamp(0.0, 1.0) * hyper.batch_size as f64).round() as usize).min(hyper.batch_size)
    };

    let val_pairs: Vec<TrainingPair> = {
        let all: Vec<(usize, usize)> = val_set
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (2..t.len()).map(move |j| (ti, j)))
            .collect();
        let stride = (all.len() / hyper.validation_pairs.max(1)).max(1);
        all.iter()
            .step_by(stride)
            .map(|&(ti, j)| TrainingPair::from_trajectory(val_set[ti], j, &config, &rel))
            .collect::<Result<_, _>>()?
    };

    let lens = |m: &Mlp| m.params().iter().map(|t| t.len()).collect::<Vec<_>>();
    let mut adam_phi = AdamState::new(&lens(&params.phi), hyper.learning_rate, hyper.lr_decay);
    let mut adam_gamma = AdamState::new(&lens(&params.gamma), hyper.learning_rate, hyper.lr_decay);
    let mut report = TrainReport {
        history: Vec::with_capacity(hyper.epochs),
        n_train_trajectories: train_set.len(),
        n_validation_trajectories: val_set.len(),
    };
    let batches_per_epoch = hyper.pairs_per_epoch.div_ceil(hyper.batch_size).max(1);
    let mut batch_index = 0;
    for epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches_per_epoch {
            let pairs: Vec<TrainingPair> = (0..hyper.batch_size)
                .map(|k| {
                    let g = if k < n_contact {
                        contact_steps[rng.gen_range(0..contact_steps.len())]
                    } else {
                        rng.gen_range(0..total)
                    };
                    let (ti, j) = locate(g);
                    TrainingPair::from_trajectory(train_set[ti], j, &config, &rel)
                })
                .collect::<Result<_, _>>()?;
            let refs: Vec<&TrainingPair> = pairs.iter().collect();
            let (loss, phi_g, gamma_g) = loss_and_gradient(&params, &refs, &rel)?;
            if !loss.is_finite() {
                return Err(CnError::NonFiniteLoss { batch: batch_index });
            }
            adam_phi.step(&mut params.phi.params_mut(), &phi_g.tensors());
            adam_gamma.step(&mut params.gamma.params_mut(), &gamma_g.tensors());
            epoch_loss += loss;
            batch_index += 1;
        }
        let validation_loss = evaluate_loss(&params, &val_pairs, &rel, hyper.batch_size)?;
        let stats = EpochStats {
            epoch,
            learning_rate: adam_phi.lr,
            train_loss: epoch_loss / batches_per_epoch as f64,
            validation_loss,
        };
        on_epoch(&stats);
        report.history.push(stats);
        adam_phi.decay_epoch();
        adam_gamma.decay_epoch();
    }
    Ok((params, report))
}

/// Loss over a fixed set of pairs, evaluated in chunks.
pub fn evaluate_loss(
    params: &CnParams,
    pairs: &[TrainingPair],
    rel: &RelationMatrices,
    chunk: usize,
) -> Result<f64, CnError> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for part in pairs.chunks(chunk.max(1)) {
        let blocks: Vec<&NodeFeatureBlock> = part.iter().map(|p| &p.block).collect();
        let edges: Vec<&[f64]> = part.iter().map(|p| p.edges.as_slice()).collect();
        let pass = batched_forward(params, &blocks, &edges, rel)?;
        let n_nodes = rel.n_nodes();
        for (b, p) in part.iter().enumerate() {
            for (i, t) in p.target.iter().enumerate() {
                let y = pass.output[(0, b * n_nodes + i + 1)] * params.norm.target_std + params.norm.target_mean;
                sum += (y - t) * (y - t);
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// One predicted step of a floe configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Anything that advances floe positions by one step from a two-step history.
///
/// `t` is the time index of the state being produced.
pub trait StepModel {
    fn dt(&self) -> f64;

    fn n_floes(&self) -> usize;

    fn advance_batch(&self, t: u64, histories: &[(&[f64], &[f64])]) -> Result<Vec<Advance>, CnError>;

    /// Whether the output depends on `t` and not just the history.
    fn time_dependent(&self) -> bool {
        false
    }

    fn advance(&self, t: u64, x_prev2: &[f64], x_prev: &[f64]) -> Result<Advance, CnError> {
        Ok(self.advance_batch(t, &[(x_prev2, x_prev)])?.remove(0))
    }
}

/// A trained network bound to a concrete floe system.
#[derive(Debug, Clone)]
pub struct CnModel {
    params: CnParams,
    system: FloeSystem,
    dt: f64,
    rel: RelationMatrices,
}

impl CnModel {
    pub fn new(params: CnParams, system: FloeSystem, dt: f64) -> Self {
        let (rel, _) = build_chain_graph(system.n_floes());
        Self {
            params,
            system,
            dt,
            rel,
        }
    }

    pub fn params(&self) -> &CnParams {
        &self.params
    }

    pub fn system(&self) -> &FloeSystem {
        &self.system
    }

    pub fn relations(&self) -> &RelationMatrices {
        &self.rel
    }
}

/// Largest number of histories pushed through the networks at once.
const MAX_CHUNK: usize = 256;

impl StepModel for CnModel {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn n_floes(&self) -> usize {
        self.system.n_floes()
    }

    fn advance_batch(&self, _t: u64, histories: &[(&[f64], &[f64])]) -> Result<Vec<Advance>, CnError> {
        let n = self.system.n_floes();
        let n_nodes = self.rel.n_nodes();
        let norm = &self.params.norm;
        let mut out = Vec::with_capacity(histories.len());
        for chunk in histories.chunks(MAX_CHUNK) {
            let mut blocks = Vec::with_capacity(chunk.len());
            let mut edges = Vec::with_capacity(chunk.len());
            for (x2, x1) in chunk {
                if x1.len() != n || x2.len() != n {
                    return Err(CnError::FloeCountMismatch {
                        expected: n,
                        got: x1.len().min(x2.len()),
                    });
                }
                blocks.push(NodeFeatureBlock::for_chain(
                    self.params.config.history,
                    &self.system,
                    self.dt,
                    x2,
                    x1,
                    None,
                ));
                edges.push(edge_features(&chain_node_positions(&self.system, x1), &self.rel));
            }
            let block_refs: Vec<&NodeFeatureBlock> = blocks.iter().collect();
            let edge_refs: Vec<&[f64]> = edges.iter().map(Vec::as_slice).collect();
            let pass = batched_forward(&self.params, &block_refs, &edge_refs, &self.rel)?;
            for (b, (_, x1)) in chunk.iter().enumerate() {
                let config = &self.params.config;
                let pred = (1..=n).map(|i| {
                    config.base(&blocks[b], i - 1) + pass.output[(0, b * n_nodes + i)] * norm.target_std + norm.target_mean
                });
                let adv = match self.params.config.target {
                    Target::Velocity => {
                        let v: Vec<f64> = pred.collect();
                        let x = x1.iter().zip(&v).map(|(x, v)| x + v * self.dt).collect();
                        Advance { x, v }
                    }
                    Target::Position => {
                        let x: Vec<f64> = pred.collect();
                        let v = x.iter().zip(x1.iter()).map(|(a, b)| (a - b) / self.dt).collect();
                        Advance { x, v }
                    }
                };
                out.push(adv);
            }
        }
        Ok(out)
    }
}

/// The reference integrator viewed as a [`StepModel`] acting on positions only.
#[derive(Debug, Clone)]
pub struct DemStepModel {
    pub system: FloeSystem,
    pub dt: f64,
}

impl StepModel for DemStepModel {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn n_floes(&self) -> usize {
        self.system.n_floes()
    }

    fn advance_batch(&self, _t: u64, histories: &[(&[f64], &[f64])]) -> Result<Vec<Advance>, CnError> {
        Ok(histories
            .iter()
            .map(|(x2, x1)| {
                let v = dem::next_velocity_from_positions(x2, x1, &self.system, self.dt);
                let x = x1.iter().zip(&v).map(|(x, v)| x + v * self.dt).collect();
                Advance { x, v }
            })
            .collect())
    }
}

/// Replays the velocities of a reference trajectory by time index.
#[derive(Debug, Clone, Copy)]
pub struct TruthVelocities<'a>(pub &'a Trajectory);

impl StepModel for TruthVelocities<'_> {
    fn dt(&self) -> f64 {
        self.0.dt
    }

    fn n_floes(&self) -> usize {
        self.0.n_floes()
    }

    fn time_dependent(&self) -> bool {
        true
    }

    fn advance_batch(&self, t: u64, histories: &[(&[f64], &[f64])]) -> Result<Vec<Advance>, CnError> {
        let state = self.0.states.get(t as usize).ok_or(CnError::IndexOutOfRange {
            index: t as usize,
            len: self.0.len(),
        })?;
        Ok(histories
            .iter()
            .map(|(_, x1)| Advance {
                x: x1.iter().zip(&state.v).map(|(x, v)| x + v * self.0.dt).collect(),
                v: state.v.clone(),
            })
            .collect())
    }
}

/// Autoregressive free run from two consecutive states.
///
/// Returns `n_steps + 2` states: the two seeds followed by the predictions.
pub fn rollout(
    model: &dyn StepModel,
    system: &FloeSystem,
    first: &SimState,
    second: &SimState,
    n_steps: usize,
) -> Result<Trajectory, CnError> {
    if first.n_floes() != model.n_floes() || second.n_floes() != model.n_floes() {
        return Err(CnError::FloeCountMismatch {
            expected: model.n_floes(),
            got: first.n_floes(),
        });
    }
    let mut states = Vec::with_capacity(n_steps + 2);
    states.push(first.clone());
    states.push(second.clone());
    for _ in 0..n_steps {
        let len = states.len();
        let (prev2, prev) = (&states[len - 2], &states[len - 1]);
        let t = prev.time_index + 1;
        let adv = model.advance(t, &prev2.x, &prev.x)?;
        if adv.x.iter().chain(&adv.v).any(|v| !v.is_finite()) {
            return Err(CnError::NonFiniteState { step: t });
        }
        states.push(SimState::new(t, adv.x, adv.v));
    }
    Ok(Trajectory {
        system: system.clone(),
        dt: model.dt(),
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> CnConfig {
        CnConfig {
            message_width: 5,
            phi_hidden: vec![7, 6],
            gamma_hidden: vec![6],
            ..CnConfig::default()
        }
    }

    fn randomized(config: CnConfig, seed: u64) -> CnParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = CnParams::new(config, &mut rng).unwrap();
        for mlp in [&mut p.phi, &mut p.gamma] {
            for l in mlp.layers_mut() {
                l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
            }
        }
        let f = p.config.feature_width();
        p.norm = Normalization {
            feature_mean: (0..f).map(|i| i as f64 * 0.5).collect(),
            feature_std: (0..f).map(|i| 1.0 + i as f64).collect(),
            edge_mean: 0.1,
            edge_std: 3.0,
            target_mean: 2.0,
            target_std: 4.0,
        };
        p
    }

    fn moving_trajectory(n_floes: usize, steps: usize) -> Trajectory {
        let sys = FloeSystem::uniform(n_floes, 0.0, 10.0 * n_floes as f64 + 10.0).unwrap();
        let x = (0..n_floes).map(|i| 5.0 + 10.0 * i as f64).collect();
        let v = (0..n_floes).map(|i| if i % 2 == 0 { 150.0 } else { -160.0 }).collect();
        dem::generate_trajectory(SimState::new(0, x, v), &sys, steps, 1e-4).unwrap()
    }

    #[test]
    fn marshal_recovers_velocity_and_walls() {
        let traj = moving_trajectory(2, 5);
        let (rel, _) = build_chain_graph(2);
        let (block, edges) = marshal_features(&traj, 3, History::TwoStep, &rel).unwrap();
        assert_eq!(block.row(0), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(block.row(3), &[30.0, 30.0, 0.0, 0.0]);
        assert_relative_eq!(block.row(1)[2], 150.0, max_relative = 1e-9);
        assert_relative_eq!(block.row(2)[2], -160.0, max_relative = 1e-9);
        assert_eq!(edges.len(), 6);
        assert_eq!(edges[0], traj.states[2].x[0]);
        assert!(matches!(
            marshal_features(&traj, 1, History::TwoStep, &rel),
            Err(CnError::IndexOutOfRange { index: 1, .. })
        ));
        assert!(marshal_features(&traj, 6, History::TwoStep, &rel).is_err());
    }

    #[test]
    fn stationary_system_has_zero_velocity_column() {
        let sys = FloeSystem::uniform(3, 0.0, 40.0).unwrap();
        let init = SimState::new(0, vec![5.0, 15.0, 25.0], vec![0.0; 3]);
        let traj = dem::generate_trajectory(init, &sys, 4, 1e-4).unwrap();
        let (rel, _) = build_chain_graph(3);
        let (block, _) = marshal_features(&traj, 2, History::TwoStep, &rel).unwrap();
        assert!((0..5).all(|i| block.row(i)[2] == 0.0));
    }

    #[test]
    fn zero_networks_predict_the_target_mean() {
        let config = CnConfig {
            residual: false,
            ..CnConfig::default()
        };
        let mut p = CnParams::zeros(config).unwrap();
        p.norm.target_mean = 7.5;
        p.norm.target_std = 3.0;
        let traj = moving_trajectory(3, 4);
        let (rel, _) = build_chain_graph(3);
        let (block, edges) = marshal_features(&traj, 2, History::TwoStep, &rel).unwrap();
        let out = cn_forward(&p, &block, &edges, &rel).unwrap();
        assert_eq!(out, vec![7.5; 5]);
    }

    #[test]
    fn zero_residual_network_keeps_previous_velocity() {
        let p = CnParams::zeros(CnConfig::default()).unwrap();
        let traj = moving_trajectory(3, 4);
        let (rel, _) = build_chain_graph(3);
        let (block, edges) = marshal_features(&traj, 2, History::TwoStep, &rel).unwrap();
        let out = cn_forward(&p, &block, &edges, &rel).unwrap();
        for i in 0..3 {
            assert_eq!(out[i + 1], block.row(i + 1)[2]);
        }
        assert_eq!((out[0], out[4]), (0.0, 0.0));
        // Position models never predict residuals.
        let pos = CnConfig {
            target: Target::Position,
            ..CnConfig::default()
        };
        assert!(!pos.predicts_residual());
        let pair = TrainingPair::from_trajectory(&traj, 3, &CnConfig::default(), &rel).unwrap();
        for i in 0..3 {
            assert_eq!(pair.target[i], traj.states[3].v[i] - pair.block.row(i + 1)[2]);
        }
    }

    /// Literal dense-matrix form of one message-passing round.
    fn dense_oracle(p: &CnParams, block: &NodeFeatureBlock, edges: &[f64], rel: &RelationMatrices) -> Vec<f64> {
        let f = block.width;
        let n = block.n_nodes();
        let x = DMatrix::from_fn(n, f, |i, c| (block.row(i)[c] - p.norm.feature_mean[c]) / p.norm.feature_std[c]);
        let recv = rel.receiver_matrix().transpose() * &x;
        let send = rel.sender_matrix().transpose() * &x;
        let m = rel.n_edges();
        let mut messages = DMatrix::zeros(m, p.phi.output_width());
        for k in 0..m {
            let mut input: Vec<f64> = recv.row(k).iter().copied().collect();
            input.extend(send.row(k).iter());
            input.push((edges[k] - p.norm.edge_mean) / p.norm.edge_std);
            let out = p.phi.forward_one(&input).unwrap();
            for (d, v) in out.iter().enumerate() {
                messages[(k, d)] = *v;
            }
        }
        let agg = rel.receiver_matrix() * &messages;
        (0..n)
            .map(|i| {
                let mut input: Vec<f64> = x.row(i).iter().copied().collect();
                input.extend(agg.row(i).iter());
                let base = if p.config.predicts_residual() && i > 0 && i + 1 < n { block.row(i)[f - 2] } else { 0.0 };
                base + p.gamma.forward_one(&input).unwrap()[0] * p.norm.target_std + p.norm.target_mean
            })
            .collect()
    }

    #[test]
    fn single_floe_matches_dense_oracle() {
        let p = randomized(small_config(), 3);
        let traj = moving_trajectory(1, 4);
        let (rel, _) = build_chain_graph(1);
        let (block, edges) = marshal_features(&traj, 3, History::TwoStep, &rel).unwrap();
        let fast = cn_forward(&p, &block, &edges, &rel).unwrap();
        let slow = dense_oracle(&p, &block, &edges, &rel);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn relabeling_nodes_permutes_outputs() {
        let p = randomized(small_config(), 8);
        let traj = moving_trajectory(4, 4);
        let (rel, _) = build_chain_graph(4);
        let (block, edges) = marshal_features(&traj, 3, History::TwoStep, &rel).unwrap();
        let base = cn_forward(&p, &block, &edges, &rel).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = rel.n_nodes();
        let m = rel.n_edges();
        // new_label[old] for nodes, new position for edges.
        let mut node_perm: Vec<usize> = (0..n).collect();
        let mut edge_perm: Vec<usize> = (0..m).collect();
        for i in (1..n).rev() {
            node_perm.swap(i, rng.gen_range(0..=i));
        }
        for i in (1..m).rev() {
            edge_perm.swap(i, rng.gen_range(0..=i));
        }
        let mut new_edges = vec![(0, 0); m];
        let mut new_e = vec![0.0; m];
        for k in 0..m {
            new_edges[edge_perm[k]] = (node_perm[rel.sender_of(k)], node_perm[rel.receiver_of(k)]);
            new_e[edge_perm[k]] = edges[k];
        }
        let new_rel = RelationMatrices::from_edges(n, &new_edges);
        let new_perm = crate::graph::EdgePermutation::from_relations(&new_rel).unwrap();
        assert_eq!(
            &(new_rel.sender_matrix() * new_perm.matrix()),
            new_rel.receiver_matrix()
        );
        let mut data = vec![0.0; block.data.len()];
        for i in 0..n {
            data[node_perm[i] * 4..node_perm[i] * 4 + 4].copy_from_slice(block.row(i));
        }
        let new_block = NodeFeatureBlock { width: 4, data };
        let out = cn_forward(&p, &new_block, &new_e, &new_rel).unwrap();
        for i in 0..n {
            assert!((out[node_perm[i]] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(cn_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cn_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(cn_loss(&[4.0, 3.0], &[0.0, 0.0]).unwrap(), cn_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap());
        assert_eq!(cn_loss(&[], &[]), Err(CnError::EmptyTarget));
        assert!(matches!(cn_loss(&[1.0], &[]), Err(CnError::LengthMismatch { .. })));
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        for (seed, act) in [(1, Activation::Mish), (2, Activation::Silu)] {
            let config = CnConfig {
                activation: act,
                ..small_config()
            };
            let mut p = randomized(config.clone(), seed);
            let traj = moving_trajectory(2, 6);
            p.norm = fit_normalization(&config, &[&traj]).unwrap();
            let (rel, _) = build_chain_graph(2);
            let pairs: Vec<TrainingPair> = (2..5)
                .map(|j| TrainingPair::from_trajectory(&traj, j, &config, &rel).unwrap())
                .collect();
            let refs: Vec<&TrainingPair> = pairs.iter().collect();
            let (_, gphi, ggamma) = loss_and_gradient(&p, &refs, &rel).unwrap();
            let scale = p.norm.target_std * p.norm.target_std;
            let loss = |q: &CnParams| loss_and_gradient(q, &refs, &rel).unwrap().0 / scale;
            let h = 1e-5;
            for (which, grads) in [(0, &gphi), (1, &ggamma)] {
                for (ti, g) in grads.tensors().iter().enumerate() {
                    for i in (0..g.len()).step_by(3) {
                        let perturb = |delta: f64| {
                            let mut q = p.clone();
                            let net = if which == 0 { &mut q.phi } else { &mut q.gamma };
                            net.params_mut()[ti][i] += delta;
                            loss(&q)
                        };
                        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                        let rel_err = (g[i] - fd).abs() / fd.abs().max(1e-6);
                        assert!(rel_err < 1e-4 || (g[i] - fd).abs() < 1e-9, "net {which} t{ti}[{i}] {} vs {fd}", g[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn truth_velocities_reproduce_dem_positions() {
        let traj = moving_trajectory(3, 400);
        let out = rollout(&TruthVelocities(&traj), &traj.system, &traj.states[0], &traj.states[1], 399).unwrap();
        assert_eq!(out.states, traj.states);
    }

    #[test]
    fn dem_step_model_tracks_dem() {
        let traj = moving_trajectory(3, 400);
        let model = DemStepModel {
            system: traj.system.clone(),
            dt: traj.dt,
        };
        let out = rollout(&model, &traj.system, &traj.states[0], &traj.states[1], 399).unwrap();
        for (a, b) in out.states.iter().zip(&traj.states) {
            for (p, q) in a.x.iter().zip(&b.x) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_step_rollout_returns_seeds() {
        let traj = moving_trajectory(2, 3);
        let out = rollout(&TruthVelocities(&traj), &traj.system, &traj.states[0], &traj.states[1], 0).unwrap();
        assert_eq!(out.states, traj.states[..2].to_vec());
    }

    #[test]
    fn training_is_deterministic_and_rejects_short_data() {
        let trajs = vec![moving_trajectory(2, 30), moving_trajectory(2, 30)];
        let hyper = TrainConfig {
            batch_size: 8,
            epochs: 2,
            pairs_per_epoch: 16,
            ..TrainConfig::default()
        };
        let a = train(&trajs, small_config(), &hyper, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = train(&trajs, small_config(), &hyper, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.history.len(), 2);
        assert!(a.1.history.iter().all(|e| e.train_loss.is_finite() && e.validation_loss.is_finite()));
        let short = vec![moving_trajectory(2, 1)];
        assert!(matches!(
            train(&short, small_config(), &hyper, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(CnError::DataTooShort(_))
        ));
    }

    #[test]
    fn free_flight_corpus_is_learned() {
        let sys = FloeSystem::uniform(3, 0.0, 60.0).unwrap();
        let trajs: Vec<Trajectory> = (0..4)
            .map(|k| {
                let v = vec![20.0 + k as f64, -10.0 * k as f64, 15.0 - 3.0 * k as f64];
                dem::generate_trajectory(SimState::new(0, vec![10.0, 30.0, 50.0], v), &sys, 200, 1e-4).unwrap()
            })
            .collect();
        assert!(trajs.iter().all(|t| dem::count_collisions(t) == 0));
        let hyper = TrainConfig {
            batch_size: 50,
            epochs: 6,
            pairs_per_epoch: 1000,
            ..TrainConfig::default()
        };
        let (params, report) = train(&trajs, small_config(), &hyper, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let val: Vec<f64> = report.history.iter().map(|e| e.validation_loss).collect();
        assert!(val.iter().all(|v| v.is_finite()));
        let min = val.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(*val.last().unwrap() <= 2.0 * min, "{val:?}");
        let model = CnModel::new(params, sys, 1e-4);
        let t = &trajs[3];
        let mut se = 0.0;
        for j in 2..t.len() {
            let adv = model.advance(j as u64, &t.states[j - 2].x, &t.states[j - 1].x).unwrap();
            se += adv.v.iter().zip(&t.states[j].v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let rmse = (se / ((t.len() - 2) * 3) as f64).sqrt();
        assert!(rmse < 1e-2, "{rmse}");
    }

    #[test]
    fn batch_advance_matches_single() {
        let p = randomized(small_config(), 4);
        let traj = moving_trajectory(3, 5);
        let model = CnModel::new(p, traj.system.clone(), traj.dt);
        let h: Vec<(&[f64], &[f64])> = (1..4)
            .map(|j| (traj.states[j - 1].x.as_slice(), traj.states[j].x.as_slice()))
            .collect();
        let batch = model.advance_batch(0, &h).unwrap();
        for (i, (a, b)) in h.iter().enumerate() {
            let single = model.advance(0, a, b).unwrap();
            for (p, q) in batch[i].v.iter().zip(&single.v) {
                assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
            }
        }
    }
}
