//! Comparison methods over the shared backbone: Finetune, LwF-style
//! distillation, and the ER/RS replay buffers. Each method is a target and
//! loss configuration of the same trainer; the buffer stores task-local
//! labels only, so replayed instances keep exactly the annotations their
//! source task revealed.

use crate::data::IncrementalTask;
use crate::error::Result;
use crate::trainer::{
    train_task, AeslModel, BlockPolicy, LossWeights, MethodSpec, SoftLabelPolicy, TaskTrainStats,
    TrainConfig,
};
use rand::seq::SliceRandom;
use rand::Rng;

/// Plain fine-tuning: BCE on the new classes only, a block-diagonal graph,
/// no distillation.
pub fn finetune_spec() -> MethodSpec {
    MethodSpec {
        soft_labels: SoftLabelPolicy::None,
        blocks: BlockPolicy::Zero,
        weights: LossWeights::zero(),
        replay: None,
    }
}

/// LwF-style distillation: the teacher's raw scores become old-class targets
/// (no label propagation), nothing else.
pub fn lwf_spec() -> MethodSpec {
    MethodSpec {
        soft_labels: SoftLabelPolicy::RawScores,
        blocks: BlockPolicy::FromSoftLabels,
        weights: LossWeights::zero(),
        replay: None,
    }
}

/// Replay over the finetune objective with the chosen buffer policy.
pub fn replay_spec(kind: ReplayKind) -> MethodSpec {
    MethodSpec {
        soft_labels: SoftLabelPolicy::None,
        blocks: BlockPolicy::Zero,
        weights: LossWeights::zero(),
        replay: Some(kind),
    }
}

/// The full method: propagated soft labels, soft-label graph blocks, and all
/// three auxiliary losses.
pub fn aesl_spec(weights: LossWeights) -> MethodSpec {
    MethodSpec {
        soft_labels: SoftLabelPolicy::Propagated,
        blocks: BlockPolicy::FromSoftLabels,
        weights,
        replay: None,
    }
}

pub fn finetune_task(
    model: &mut AeslModel,
    task: &IncrementalTask,
    cfg: &TrainConfig,
    task_seed: u64,
) -> Result<TaskTrainStats> {
    train_task(model, task, &finetune_spec(), cfg, None, task_seed)
}

pub fn lwf_task(
    model: &mut AeslModel,
    task: &IncrementalTask,
    cfg: &TrainConfig,
    task_seed: u64,
) -> Result<TaskTrainStats> {
    train_task(model, task, &lwf_spec(), cfg, None, task_seed)
}

pub fn replay_task(
    model: &mut AeslModel,
    task: &IncrementalTask,
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
    kind: ReplayKind,
    task_seed: u64,
) -> Result<TaskTrainStats> {
    train_task(model, task, &replay_spec(kind), cfg, Some(buffer), task_seed)
}

/// How the buffer is (re)filled at task boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayKind {
    /// Uniform random subsample of everything seen so far.
    Random,
    /// Classic streaming reservoir.
    Reservoir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub features: Vec<f64>,
    /// Multi-hot labels over the source task's label ids only.
    pub labels: Vec<f64>,
    pub label_ids: Vec<usize>,
    pub source_task: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    seen: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// One reservoir-sampling step: the first `capacity` items are always
    /// kept; afterwards an incoming item replaces a uniformly chosen slot
    /// with probability capacity / seen.
    pub fn reservoir_update(&mut self, item: ReplayItem, rng: &mut impl Rng) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.gen_range(0..self.seen);
            if j < self.capacity {
                self.items[j] = item;
            }
        }
    }

    /// Random-sampling policy: append the batch, then keep a uniform subset
    /// of size `capacity`.
    pub fn extend_random(&mut self, new_items: Vec<ReplayItem>, rng: &mut impl Rng) {
        self.seen += new_items.len();
        self.items.extend(new_items);
        if self.capacity == 0 {
            self.items.clear();
            return;
        }
        if self.items.len() > self.capacity {
            let mut keep: Vec<usize> = (0..self.items.len()).collect();
            keep.shuffle(rng);
            keep.truncate(self.capacity);
            keep.sort_unstable();
            self.items = keep.into_iter().map(|i| self.items[i].clone()).collect();
        }
    }

    /// Uniform sample without replacement of up to `k` stored items.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Vec<&ReplayItem> {
        let k = k.min(self.items.len());
        let mut indices: Vec<usize> = (0..self.items.len()).collect();
        indices.shuffle(rng);
        indices.truncate(k);
        indices.sort_unstable();
        indices.into_iter().map(|i| &self.items[i]).collect()
    }

    /// Every stored item keeps only its source task's labels.
    pub fn audit_task_local_labels(&self) -> bool {
        self.items
            .iter()
            .all(|item| item.labels.len() == item.label_ids.len())
    }
}
