//! The unified model and its per-task training loop: graph growth, label
//! disambiguation, the four-part objective, optimization, protocol
//! execution, and checkpointing.

use crate::baselines::{ReplayBuffer, ReplayItem, ReplayKind};
use crate::data::{IncrementalTask, TaskDataset};
use crate::decoupling::{expand_head, Activation, BoundDecoupler, ClassifierHead, Decoupler};
use crate::distillation::{rkd_loss_on_tape, rsm, Rsm, RsmSource, MIN_RSM_BATCH};
use crate::error::{AeslError, Result};
use crate::evaluation::{macro_f1, mean_average_precision, micro_f1, MetricsReport, TaskStepRecord};
use crate::graph::{
    augment, complete_blocks, cooccurrence_adjacency, erg_pcc, median_pairwise_distance,
    PropagationState, RelationGraph,
};
use crate::numerics::adam::{AdamConfig, AdamState};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{NodeId, Tape};
use crate::semantics::{grow_nodes, reconstruction_loss_on_tape, BoundGin, GinEncoder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Score clamp for the cross-entropy logs.
pub const BCE_GUARD: f64 = 1e-7;

/// Layer widths of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Instance feature dimension D.
    pub feature_dim: usize,
    /// Node feature width d0, a task-agnostic constant.
    pub node_dim: usize,
    /// Hidden width of the GIN encoder.
    pub gin_hidden: usize,
    /// Emotion embedding width d_L.
    pub embed_dim: usize,
    /// Deep latent width d_z.
    pub latent_dim: usize,
    /// Semantic feature width d.
    pub semantic_dim: usize,
}

impl ModelDims {
    pub fn with_defaults(feature_dim: usize) -> Self {
        ModelDims {
            feature_dim,
            node_dim: 32,
            gin_hidden: 64,
            embed_dim: 64,
            latent_dim: 64,
            semantic_dim: 64,
        }
    }

    fn gin_dims(&self) -> Vec<usize> {
        vec![self.node_dim, self.gin_hidden, self.embed_dim]
    }
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AeslError::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One batch's loss components.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub kd_model: f64,
    pub kd_aff: f64,
    pub le: f64,
    pub total: f64,
}

/// Where the old-class targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelPolicy {
    /// No old-class supervision at all.
    None,
    /// The frozen teacher's raw scores, no disambiguation.
    RawScores,
    /// Teacher scores refined by label propagation.
    Propagated,
}

/// How the inter-task graph blocks are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPolicy {
    /// Zero old-new coupling: the graph grows block-diagonally.
    Zero,
    /// Blocks estimated from the soft labels.
    FromSoftLabels,
}

/// Everything that distinguishes one method from another on the shared
/// backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub soft_labels: SoftLabelPolicy,
    pub blocks: BlockPolicy,
    pub weights: LossWeights,
    pub replay: Option<ReplayKind>,
}

/// Kernel bandwidth selection for label disambiguation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    /// Median of pairwise Euclidean distances of the task's features.
    Median,
    /// A multiple of the median pairwise distance. Useful when the median
    /// kernel is too flat and propagation would wash the confidence out.
    MedianScaled(f64),
    Fixed(f64),
}

impl SigmaPolicy {
    pub fn bandwidth(&self, features: &Matrix) -> f64 {
        match self {
            SigmaPolicy::Median => median_pairwise_distance(features),
            SigmaPolicy::MedianScaled(factor) => factor * median_pairwise_distance(features),
            SigmaPolicy::Fixed(v) => *v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Propagation balance beta.
    pub beta: f64,
    pub sigma: SigmaPolicy,
    pub propagation_tolerance: f64,
    pub propagation_max_iters: usize,
    /// Buffer capacity for replay methods.
    pub replay_capacity: usize,
    /// Per-minibatch replay sample cap; the effective size is
    /// min(buffer, batch_size, this).
    pub replay_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            beta: 0.95,
            sigma: SigmaPolicy::Median,
            propagation_tolerance: 1e-10,
            propagation_max_iters: 5000,
            replay_capacity: 500,
            replay_sample: 64,
        }
    }
}

/// Stable sub-seed derivation: hash of the base seed and a purpose tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// The unified model: GIN encoder over the relation graph, decoupler, and
/// the expandable head, plus the non-trainable node features and the graph
/// itself.
#[derive(Debug, Clone)]
pub struct AeslModel {
    pub dims: ModelDims,
    pub encoder: GinEncoder,
    pub node_features: Matrix,
    pub decoupler: Decoupler,
    pub head: ClassifierHead,
    pub graph: RelationGraph,
    pub task_index: usize,
}

struct BoundModel {
    encoder: BoundGin,
    decoupler: BoundDecoupler,
    head: Vec<(NodeId, NodeId)>,
}

impl BoundModel {
    /// Node ids in the same order as [`AeslModel::params`].
    fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for layer in &self.encoder.layers {
            ids.extend([layer.weight, layer.bias, layer.eps]);
        }
        ids.extend([
            self.decoupler.instance_weight,
            self.decoupler.instance_bias,
            self.decoupler.gate_weight,
            self.decoupler.gate_bias,
            self.decoupler.output_weight,
            self.decoupler.output_bias,
        ]);
        for &(w, b) in &self.head {
            ids.extend([w, b]);
        }
        ids
    }
}

struct ForwardNodes {
    scores: NodeId,
    latent: NodeId,
    embeddings: NodeId,
}

impl AeslModel {
    pub fn new(dims: ModelDims, activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init"));
        let encoder = GinEncoder::new(&dims.gin_dims(), &mut rng)?;
        let decoupler = Decoupler::new(
            dims.feature_dim,
            dims.embed_dim,
            dims.latent_dim,
            dims.semantic_dim,
            activation,
            &mut rng,
        );
        Ok(AeslModel {
            dims,
            encoder,
            node_features: Matrix::zeros(0, dims.node_dim),
            decoupler,
            head: ClassifierHead::empty(),
            graph: RelationGraph::empty(),
            task_index: 0,
        })
    }

    pub fn label_count(&self) -> usize {
        self.graph.label_count()
    }

    /// Trainable parameters in declared order: encoder, decoupler, head.
    /// Head growth appends; earlier indices never move.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = self.encoder.params();
        out.extend(self.decoupler.params());
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoupler.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape),
            decoupler: self.decoupler.bind(tape),
            head: self.head.bind(tape),
        }
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        features: &Matrix,
    ) -> Result<ForwardNodes> {
        if features.cols() != self.dims.feature_dim {
            return Err(AeslError::ShapeMismatch {
                op: "forward",
                left_rows: features.rows(),
                left_cols: features.cols(),
                right_rows: 1,
                right_cols: self.dims.feature_dim,
            });
        }
        if self.label_count() == 0 {
            return Err(AeslError::invalid("model has no classes yet"));
        }
        let a_sym = self.graph.symmetrize().adjacency;
        let h0 = tape.leaf(self.node_features.clone());
        let adj = tape.leaf(a_sym);
        let embeddings = self
            .encoder
            .forward_on_tape(tape, &bound.encoder, h0, adj)?;

        let x = tape.leaf(features.clone());
        let latent = self
            .decoupler
            .latent_on_tape(tape, &bound.decoupler, x)?;
        let gates = self
            .decoupler
            .gates_on_tape(tape, &bound.decoupler, embeddings)?;

        let mut logit_cols = Vec::with_capacity(self.label_count());
        for (k, &(w, b)) in bound.head.iter().enumerate() {
            let gate_row = tape.slice_row(gates, k)?;
            let semantic = self
                .decoupler
                .semantic_feature_on_tape(tape, &bound.decoupler, latent, gate_row)?;
            let lin = tape.matmul(semantic, w)?;
            let logit = tape.add_row_broadcast(lin, b)?;
            logit_cols.push(logit);
        }
        let logits = tape.concat_cols(&logit_cols)?;
        let scores = tape.sigmoid(logits);
        Ok(ForwardNodes {
            scores,
            latent,
            embeddings,
        })
    }

    /// Confidence scores for a batch, one row per instance, one column per
    /// seen class, in graph label order.
    pub fn scores(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(features.rows(), self.label_count());
        for start in (0..features.rows()).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(features.rows() - start);
            let rows: Vec<usize> = (start..start + len).collect();
            let chunk = features.select_rows(&rows);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let fwd = self.forward_on_tape(&mut tape, &bound, &chunk)?;
            let s = tape.value(fwd.scores);
            for (i, row) in rows.iter().enumerate() {
                out.row_mut(*row).copy_from_slice(s.row(i));
            }
        }
        Ok(out)
    }

    /// Deep latent z for a batch.
    pub fn latent(&self, features: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.decoupler.bind(&mut tape);
        let x = tape.leaf(features.clone());
        let z = self.decoupler.latent_on_tape(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }

    /// Emotion embeddings under the current graph.
    pub fn embeddings(&self) -> Result<Matrix> {
        self.encoder
            .forward(&self.node_features, &self.graph.symmetrize().adjacency)
    }
}

const EVAL_CHUNK: usize = 256;

/// Binary cross entropy over mixed targets with a mask selecting which
/// (instance, class) cells carry supervision; summed over classes, averaged
/// over the batch.
pub fn bce_loss_on_tape(
    tape: &mut Tape,
    scores: NodeId,
    targets: &Matrix,
    mask: &Matrix,
) -> Result<NodeId> {
    let shape = tape.value(scores).shape();
    if targets.shape() != shape || mask.shape() != shape {
        return Err(AeslError::ShapeMismatch {
            op: "bce_loss",
            left_rows: shape.0,
            left_cols: shape.1,
            right_rows: targets.rows(),
            right_cols: targets.cols(),
        });
    }
    let n = shape.0;
    let clamped = tape.clamp(scores, BCE_GUARD, 1.0 - BCE_GUARD);
    let log_s = tape.ln(clamped);
    let neg = tape.scale_const(clamped, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let log_one_minus = tape.ln(one_minus);

    let t = tape.leaf(targets.clone());
    let t_complement = tape.leaf(targets.map(|v| 1.0 - v));
    let pos = tape.hadamard(t, log_s)?;
    let negt = tape.hadamard(t_complement, log_one_minus)?;
    let summed = tape.add(pos, negt)?;
    let mask_node = tape.leaf(mask.clone());
    let masked = tape.hadamard(summed, mask_node)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale_const(total, -1.0 / n as f64))
}

/// Direct BCE evaluation, clamp and averaging identical to the tape path.
pub fn bce_loss(scores: &Matrix, targets: &Matrix, mask: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let loss = bce_loss_on_tape(&mut tape, s, targets, mask)?;
    tape.value(loss).item()
}

/// Frozen per-task context for loss assembly.
pub struct BatchContext<'a> {
    /// Mixed targets for every row of the batch.
    pub targets: &'a Matrix,
    /// Supervision mask, same shape as targets.
    pub mask: &'a Matrix,
    /// Rows 0..fresh of the batch are current-task data; RSM losses are
    /// computed over exactly these rows.
    pub fresh: usize,
    /// Teacher RSM from the frozen previous model, when one exists.
    pub old_model_rsm: Option<&'a Rsm>,
    /// Teacher RSM from the affective ratings.
    pub affective_rsm: Option<&'a Rsm>,
}

struct LossNodes {
    total: NodeId,
    report: LossReport,
}

/// Assembles Eq. 15 on the tape: L_ce + l1 L_kd_model + l2 L_kd_aff + l3 L_le.
fn total_loss_on_tape(
    tape: &mut Tape,
    model: &AeslModel,
    fwd: &ForwardNodes,
    ctx: &BatchContext,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let ce = bce_loss_on_tape(tape, fwd.scores, ctx.targets, ctx.mask)?;
    let mut total = ce;
    let mut report = LossReport {
        ce: tape.value(ce).item()?,
        ..LossReport::default()
    };

    if weights.lambda1 > 0.0 {
        if let Some(teacher) = ctx.old_model_rsm {
            let student = tape.slice_rows(fwd.latent, 0, ctx.fresh)?;
            let kd = rkd_loss_on_tape(tape, student, teacher)?;
            report.kd_model = tape.value(kd).item()?;
            let weighted = tape.scale_const(kd, weights.lambda1);
            total = tape.add(total, weighted)?;
        }
    }
    if weights.lambda2 > 0.0 {
        if let Some(teacher) = ctx.affective_rsm {
            let student = tape.slice_rows(fwd.latent, 0, ctx.fresh)?;
            let kd = rkd_loss_on_tape(tape, student, teacher)?;
            report.kd_aff = tape.value(kd).item()?;
            let weighted = tape.scale_const(kd, weights.lambda2);
            total = tape.add(total, weighted)?;
        }
    }
    if weights.lambda3 > 0.0 && model.label_count() >= 2 {
        let target = model.graph.decoder_target();
        let le = reconstruction_loss_on_tape(tape, fwd.embeddings, &target)?;
        report.le = tape.value(le).item()?;
        let weighted = tape.scale_const(le, weights.lambda3);
        total = tape.add(total, weighted)?;
    }
    report.total = tape.value(total).item()?;
    Ok(LossNodes { total, report })
}

/// Public single-batch objective evaluation: forward, loss report, no update.
pub fn total_loss(
    model: &AeslModel,
    features: &Matrix,
    ctx: &BatchContext,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward_on_tape(&mut tape, &bound, features)?;
    let nodes = total_loss_on_tape(&mut tape, model, &fwd, ctx, weights)?;
    Ok(nodes.report)
}

/// Objective value plus analytic gradients for every trainable parameter, in
/// [`AeslModel::params`] order. Parameters that do not influence the loss
/// get zero gradients.
pub fn loss_gradients(
    model: &AeslModel,
    features: &Matrix,
    ctx: &BatchContext,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward_on_tape(&mut tape, &bound, features)?;
    let nodes = total_loss_on_tape(&mut tape, model, &fwd, ctx, weights)?;
    let grads = tape.backward(nodes.total)?;
    let gradients = bound
        .param_ids()
        .iter()
        .zip(model.params())
        .map(|(&id, p)| grads.get_or_zeros(id, p))
        .collect();
    Ok((nodes.report, gradients))
}

/// Teacher scores on new data refined by graph-based label disambiguation.
pub fn compute_soft_labels(
    old_model: &AeslModel,
    task_features: &Matrix,
    cfg: &TrainConfig,
) -> Result<Matrix> {
    let raw = old_model.scores(task_features)?;
    let sigma = cfg.sigma.bandwidth(task_features);
    let state = PropagationState::new(task_features, sigma, cfg.beta)?
        .with_termination(cfg.propagation_tolerance, cfg.propagation_max_iters);
    state.propagate(&raw)
}

/// Builds mixed targets [soft | y] and the matching supervision mask for the
/// current task's rows.
fn fresh_targets(
    soft: Option<&Matrix>,
    task_labels: &Matrix,
    old_classes: usize,
) -> (Matrix, Matrix) {
    let n = task_labels.rows();
    let new_classes = task_labels.cols();
    let total = old_classes + new_classes;
    let mut targets = Matrix::zeros(n, total);
    let mut mask = Matrix::zeros(n, total);
    for r in 0..n {
        if let Some(s) = soft {
            for c in 0..old_classes {
                targets.set(r, c, s.get(r, c));
                mask.set(r, c, 1.0);
            }
        }
        for c in 0..new_classes {
            targets.set(r, old_classes + c, task_labels.get(r, c));
            mask.set(r, old_classes + c, 1.0);
        }
    }
    (targets, mask)
}

fn divergence_component(report: &LossReport) -> Option<&'static str> {
    [
        ("cross_entropy", report.ce),
        ("kd_model", report.kd_model),
        ("kd_affective", report.kd_aff),
        ("label_embedding", report.le),
        ("total", report.total),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(name, _)| name)
}

/// Statistics from one trained task.
#[derive(Debug, Clone, Default)]
pub struct TaskTrainStats {
    pub epoch_mean_loss: Vec<f64>,
    pub last_report: LossReport,
    pub soft_labels: Option<Matrix>,
}

/// Trains one incremental task in place: augments the graph, grows node
/// features and head, then optimizes the configured objective. The graph and
/// the refined soft labels depend only on the frozen teacher, so both are
/// computed once per task rather than per epoch.
pub fn train_task(
    model: &mut AeslModel,
    task: &IncrementalTask,
    spec: &MethodSpec,
    cfg: &TrainConfig,
    buffer: Option<&mut ReplayBuffer>,
    task_seed: u64,
) -> Result<TaskTrainStats> {
    spec.weights.validate()?;
    cfg.adam.validate()?;
    for id in &task.label_ids {
        if model.graph.labels.contains(id) {
            return Err(AeslError::validation(format!(
                "label id {id} already belongs to an earlier task"
            )));
        }
    }
    let old_classes = model.label_count();
    let teacher = if old_classes > 0 {
        Some(model.clone())
    } else {
        None
    };

    // Soft labels from the frozen teacher.
    let soft = match (&teacher, spec.soft_labels) {
        (Some(t), SoftLabelPolicy::RawScores) => Some(t.scores(&task.train.features)?),
        (Some(t), SoftLabelPolicy::Propagated) => {
            Some(compute_soft_labels(t, &task.train.features, cfg)?)
        }
        _ => None,
    };

    // Graph growth.
    let new_block = cooccurrence_adjacency(&task.train.labels, &task.label_ids)?;
    let (r, q) = match (&soft, spec.blocks) {
        (Some(s), BlockPolicy::FromSoftLabels) => {
            complete_blocks(&model.graph, s, &task.train.labels)?
        }
        _ => (
            Matrix::zeros(old_classes, task.label_ids.len()),
            Matrix::zeros(task.label_ids.len(), old_classes),
        ),
    };
    model.graph = augment(&model.graph, &r, &q, &new_block.adjacency, &task.label_ids)?;
    model.node_features = grow_nodes(
        &model.node_features,
        task.label_ids.len(),
        derive_seed(task_seed, "nodes"),
    );
    model.head = expand_head(
        &model.head,
        model.dims.semantic_dim,
        task.label_ids.len(),
        derive_seed(task_seed, "head"),
    );

    let (targets, mask) = fresh_targets(soft.as_ref(), &task.train.labels, old_classes);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, "shuffle"));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed, "replay"));
    let mut optimizer = AdamState::new(cfg.adam);
    let mut stats = TaskTrainStats::default();
    stats.soft_labels = soft.clone();

    let n = task.train.len();
    let buffer_ref = buffer.as_deref();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < MIN_RSM_BATCH {
                continue;
            }
            let fresh_features = task.train.features.select_rows(chunk);
            let fresh_targets_rows = targets.select_rows(chunk);
            let fresh_mask_rows = mask.select_rows(chunk);
            let fresh_affective = task.train.affective.select_rows(chunk);

            // Optional replayed rows appended after the fresh ones.
            let (batch_features, batch_targets, batch_mask) = if let (Some(buf), Some(_)) =
                (buffer_ref, spec.replay)
            {
                let want = cfg.replay_sample.min(cfg.batch_size);
                let sample = buf.sample(want, &mut replay_rng);
                if sample.is_empty() {
                    (fresh_features.clone(), fresh_targets_rows.clone(), fresh_mask_rows.clone())
                } else {
                    let mut feats = fresh_features.clone();
                    let mut tg = fresh_targets_rows.clone();
                    let mut mk = fresh_mask_rows.clone();
                    for item in sample {
                        let row = Matrix::from_vec(1, feats.cols(), item.features.clone())?;
                        feats = feats.vstack(&row)?;
                        let mut trow = Matrix::zeros(1, model.label_count());
                        let mut mrow = Matrix::zeros(1, model.label_count());
                        for (pos_in_item, label_id) in item.label_ids.iter().enumerate() {
                            let global = model
                                .graph
                                .labels
                                .iter()
                                .position(|l| l == label_id)
                                .ok_or_else(|| {
                                    AeslError::invalid(format!(
                                        "replayed label {label_id} unknown to the model"
                                    ))
                                })?;
                            trow.set(0, global, item.labels[pos_in_item]);
                            mrow.set(0, global, 1.0);
                        }
                        tg = tg.vstack(&trow)?;
                        mk = mk.vstack(&mrow)?;
                    }
                    (feats, tg, mk)
                }
            } else {
                (fresh_features.clone(), fresh_targets_rows.clone(), fresh_mask_rows.clone())
            };

            // Teacher RSMs over the fresh rows only.
            let old_model_rsm = match (&teacher, spec.weights.lambda1 > 0.0) {
                (Some(t), true) => Some(rsm(&t.latent(&fresh_features)?, RsmSource::OldModel)?),
                _ => None,
            };
            let affective_rsm = if spec.weights.lambda2 > 0.0 {
                Some(rsm(&fresh_affective, RsmSource::Affective)?)
            } else {
                None
            };

            let ctx = BatchContext {
                targets: &batch_targets,
                mask: &batch_mask,
                fresh: chunk.len(),
                old_model_rsm: old_model_rsm.as_ref(),
                affective_rsm: affective_rsm.as_ref(),
            };

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let fwd = model.forward_on_tape(&mut tape, &bound, &batch_features)?;
            let losses = total_loss_on_tape(&mut tape, model, &fwd, &ctx, &spec.weights)?;
            if let Some(component) = divergence_component(&losses.report) {
                return Err(AeslError::TrainingDiverged {
                    component,
                    task: model.task_index + 1,
                    epoch,
                });
            }
            let grads = tape.backward(losses.total)?;
            let ids = bound.param_ids();
            let grad_list: Vec<Option<Matrix>> =
                ids.iter().map(|&id| grads.get(id).cloned()).collect();
            let mut params = model.params_mut();
            optimizer.step(&mut params, &grad_list)?;

            epoch_losses.push(losses.report.total);
            stats.last_report = losses.report;
        }
        if !epoch_losses.is_empty() {
            stats
                .epoch_mean_loss
                .push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
        }
    }

    // Replay buffers ingest the finished task.
    if let (Some(buf), Some(kind)) = (buffer, spec.replay) {
        let items: Vec<ReplayItem> = (0..n)
            .map(|i| ReplayItem {
                features: task.train.features.row(i).to_vec(),
                labels: task.train.labels.row(i).to_vec(),
                label_ids: task.label_ids.clone(),
                source_task: model.task_index + 1,
            })
            .collect();
        match kind {
            ReplayKind::Random => buf.extend_random(items, &mut replay_rng),
            ReplayKind::Reservoir => {
                for item in items {
                    buf.reservoir_update(item, &mut replay_rng);
                }
            }
        }
    }

    model.task_index += 1;
    Ok(stats)
}

/// Evaluates the model on a test set restricted to the classes it has seen.
pub fn evaluate(model: &AeslModel, test: &TaskDataset) -> Result<(f64, f64, f64)> {
    let restricted = test.restrict_labels(&model.graph.labels)?;
    let scores = model.scores(&restricted.features)?;
    Ok((
        mean_average_precision(&scores, &restricted.labels)?,
        macro_f1(&scores, &restricted.labels)?,
        micro_f1(&scores, &restricted.labels)?,
    ))
}

/// Output of one full protocol run.
#[derive(Debug)]
pub struct ProtocolRun {
    pub model: AeslModel,
    pub report: MetricsReport,
    /// Graph snapshot after each task.
    pub graphs: Vec<RelationGraph>,
}

/// Runs a task stream end to end: train each task, then evaluate over all
/// seen classes on the shared test set; optionally correlates the grown
/// graph against an oracle graph restricted to the seen labels.
pub fn run_protocol(
    dims: ModelDims,
    activation: Activation,
    stream: &[IncrementalTask],
    test: &TaskDataset,
    spec: &MethodSpec,
    cfg: &TrainConfig,
    seed: u64,
    oracle: Option<&RelationGraph>,
) -> Result<ProtocolRun> {
    // Overlapping class sets are a protocol bug; fail before any training.
    let mut seen = std::collections::BTreeSet::new();
    for task in stream {
        for id in &task.label_ids {
            if !seen.insert(*id) {
                return Err(AeslError::validation(format!(
                    "label id {id} appears in more than one task"
                )));
            }
        }
    }

    let mut model = AeslModel::new(dims, activation, seed)?;
    let mut buffer = spec.replay.map(|_| ReplayBuffer::new(cfg.replay_capacity));
    let mut report = MetricsReport::default();
    let mut graphs = Vec::new();

    for task in stream {
        let task_seed = derive_seed(seed, &format!("task-{}", task.index));
        train_task(
            &mut model,
            task,
            spec,
            cfg,
            buffer.as_mut(),
            task_seed,
        )?;
        let (map, ma, mi) = evaluate(&model, test)?;
        let erg = match oracle {
            Some(oracle_graph) => {
                let restricted = restrict_graph(oracle_graph, &model.graph.labels)?;
                erg_pcc(&model.graph, &restricted).ok()
            }
            None => None,
        };
        report.steps.push(TaskStepRecord {
            task: model.task_index,
            seen_classes: model.label_count(),
            map,
            macro_f1: ma,
            micro_f1: mi,
            erg_pcc: erg,
        });
        graphs.push(model.graph.clone());
    }
    Ok(ProtocolRun {
        model,
        report,
        graphs,
    })
}

/// Restriction of a graph to a label subset. Conditional probabilities are
/// pairwise, so the restriction is exactly the corresponding sub-block.
pub fn restrict_graph(graph: &RelationGraph, labels: &[usize]) -> Result<RelationGraph> {
    let positions: Vec<usize> = labels
        .iter()
        .map(|id| {
            graph
                .labels
                .iter()
                .position(|l| l == id)
                .ok_or_else(|| AeslError::invalid(format!("label {id} not in oracle graph")))
        })
        .collect::<Result<_>>()?;
    let sub = graph
        .adjacency
        .select_rows(&positions)
        .select_cols(&positions);
    RelationGraph::new(labels.to_vec(), sub)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub dims: ModelDims,
    pub activation: Activation,
    pub label_ids: Vec<usize>,
    pub task_index: usize,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

fn model_arrays(model: &AeslModel) -> Vec<(String, &Matrix)> {
    let mut out = vec![
        ("node_features".to_string(), &model.node_features),
        ("graph.adjacency".to_string(), &model.graph.adjacency),
    ];
    for (i, layer) in model.encoder.layers.iter().enumerate() {
        out.push((format!("encoder.{i}.weight"), &layer.weight));
        out.push((format!("encoder.{i}.bias"), &layer.bias));
        out.push((format!("encoder.{i}.eps"), &layer.eps));
    }
    out.push(("decoupler.instance_weight".into(), &model.decoupler.instance_weight));
    out.push(("decoupler.instance_bias".into(), &model.decoupler.instance_bias));
    out.push(("decoupler.gate_weight".into(), &model.decoupler.gate_weight));
    out.push(("decoupler.gate_bias".into(), &model.decoupler.gate_bias));
    out.push(("decoupler.output_weight".into(), &model.decoupler.output_weight));
    out.push(("decoupler.output_bias".into(), &model.decoupler.output_bias));
    for (k, col) in model.head.columns.iter().enumerate() {
        out.push((format!("head.{k}.weight"), &col.weight));
        out.push((format!("head.{k}.bias"), &col.bias));
    }
    out
}

/// Writes `checkpoint.json` and `checkpoint.bin` (little-endian f64 arrays in
/// manifest order) into `dir`. The round trip is bit-exact.
pub fn save_checkpoint(
    model: &AeslModel,
    seed: u64,
    config_hash: Option<String>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let arrays = model_arrays(model);
    let manifest = CheckpointManifest {
        config_hash,
        dims: model.dims,
        activation: model.decoupler.activation,
        label_ids: model.graph.labels.clone(),
        task_index: model.task_index,
        seed,
        arrays: arrays
            .iter()
            .map(|(name, m)| ArrayEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let mut blob = Vec::new();
    for (_, m) in &arrays {
        for v in m.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    serde_json::to_writer_pretty(std::fs::File::create(dir.join("checkpoint.json"))?, &manifest)?;
    std::fs::write(dir.join("checkpoint.bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(AeslModel, CheckpointManifest)> {
    let manifest_path = dir.join("checkpoint.json");
    let file = std::fs::File::open(&manifest_path)
        .map_err(|_| AeslError::MissingFile(manifest_path.display().to_string()))?;
    let manifest: CheckpointManifest = serde_json::from_reader(file)?;
    let blob = std::fs::read(dir.join("checkpoint.bin"))?;

    let mut offset = 0usize;
    let mut arrays = Vec::new();
    for entry in &manifest.arrays {
        let len = entry.rows * entry.cols;
        let bytes = blob
            .get(offset..offset + len * 8)
            .ok_or_else(|| AeslError::validation("checkpoint blob is shorter than its manifest"))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((entry.name.clone(), Matrix::from_vec(entry.rows, entry.cols, data)?));
        offset += len * 8;
    }
    if offset != blob.len() {
        return Err(AeslError::validation(
            "checkpoint blob is longer than its manifest",
        ));
    }

    let mut model = AeslModel::new(manifest.dims, manifest.activation, manifest.seed)?;
    model.task_index = manifest.task_index;
    let mut adjacency = None;
    let mut head_columns: Vec<(Option<Matrix>, Option<Matrix>)> = Vec::new();
    for (name, matrix) in arrays {
        match name.as_str() {
            "node_features" => model.node_features = matrix,
            "graph.adjacency" => adjacency = Some(matrix),
            "decoupler.instance_weight" => model.decoupler.instance_weight = matrix,
            "decoupler.instance_bias" => model.decoupler.instance_bias = matrix,
            "decoupler.gate_weight" => model.decoupler.gate_weight = matrix,
            "decoupler.gate_bias" => model.decoupler.gate_bias = matrix,
            "decoupler.output_weight" => model.decoupler.output_weight = matrix,
            "decoupler.output_bias" => model.decoupler.output_bias = matrix,
            other => {
                if let Some(rest) = other.strip_prefix("encoder.") {
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| AeslError::validation(format!("bad array name {other}")))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| AeslError::validation(format!("bad array name {other}")))?;
                    let layer = model.encoder.layers.get_mut(idx).ok_or_else(|| {
                        AeslError::validation(format!("checkpoint has unexpected layer {idx}"))
                    })?;
                    match field {
                        "weight" => layer.weight = matrix,
                        "bias" => layer.bias = matrix,
                        "eps" => layer.eps = matrix,
                        _ => return Err(AeslError::validation(format!("bad array name {other}"))),
                    }
                } else if let Some(rest) = other.strip_prefix("head.") {
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| AeslError::validation(format!("bad array name {other}")))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| AeslError::validation(format!("bad array name {other}")))?;
                    if head_columns.len() <= idx {
                        head_columns.resize(idx + 1, (None, None));
                    }
                    match field {
                        "weight" => head_columns[idx].0 = Some(matrix),
                        "bias" => head_columns[idx].1 = Some(matrix),
                        _ => return Err(AeslError::validation(format!("bad array name {other}"))),
                    }
                } else {
                    return Err(AeslError::validation(format!("bad array name {other}")));
                }
            }
        }
    }
    let adjacency = adjacency
        .ok_or_else(|| AeslError::validation("checkpoint lacks graph.adjacency"))?;
    model.graph = RelationGraph::new(manifest.label_ids.clone(), adjacency)?;
    model.head = ClassifierHead {
        columns: head_columns
            .into_iter()
            .map(|(w, b)| {
                Ok(crate::decoupling::HeadColumn {
                    weight: w.ok_or_else(|| {
                        AeslError::validation("checkpoint head column lacks weight")
                    })?,
                    bias: b.ok_or_else(|| {
                        AeslError::validation("checkpoint head column lacks bias")
                    })?,
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok((model, manifest))
}
