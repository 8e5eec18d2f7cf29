//! Continual learners behind a single boundary-free interface, plus the
//! offline joint trainer.
//!
//! Streaming methods implement [`Learner`]: one [`ObservedBatch`] in, one
//! SGD step out. The batch carries no task identity, so rehearsal methods are
//! boundary-free by construction; the only method that consumes boundaries
//! (the frozen-logit comparator) receives them through the explicit
//! [`Learner::on_task_boundary`] hook, which the harness invokes solely on
//! streams that expose boundaries.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, MemoryBuffer};
use crate::data::{apply_transform_into, Dataset, Transform, IMAGE_PIXELS};
use crate::error::ConfigError;
use crate::nn::{
    backward_into, DenseMatrix, DenseModel, ForwardCache, GradientBundle, LossSpec, LossTargets,
};
use crate::rng::ComponentRng;
use crate::streams::{materialize, ManifestEntry, ObservedBatch, TaskSpec, TaskStream};

/// The seven training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Sgd,
    Joint,
    Er,
    Der,
    Derpp,
    Fdr,
    AgemR,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Sgd,
        MethodKind::Joint,
        MethodKind::Er,
        MethodKind::Der,
        MethodKind::Derpp,
        MethodKind::Fdr,
        MethodKind::AgemR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sgd => "sgd",
            MethodKind::Joint => "joint",
            MethodKind::Er => "er",
            MethodKind::Der => "der",
            MethodKind::Derpp => "derpp",
            MethodKind::Fdr => "fdr",
            MethodKind::AgemR => "agem_r",
        }
    }

    pub fn parse(s: &str) -> Result<MethodKind, ConfigError> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::UnknownName {
                what: "method",
                value: s.to_string(),
            })
    }

    /// Whether the method rehearses from a replay buffer.
    pub fn uses_buffer(self) -> bool {
        matches!(
            self,
            MethodKind::Er | MethodKind::Der | MethodKind::Derpp | MethodKind::Fdr | MethodKind::AgemR
        )
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Method hyperparameters. `alpha` weights the logit-matching replay term,
/// `beta` the label replay term; both default to zero and are ignored by
/// methods that do not use them. `minibatch_size` is the replay draw size;
/// `None` means "match the stream batch size" (the standard-setting rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub lr: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
}

impl MethodConfig {
    pub fn new(kind: MethodKind, lr: f64) -> Self {
        MethodConfig {
            kind,
            lr,
            alpha: 0.0,
            beta: 0.0,
            minibatch_size: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_minibatch(mut self, mbs: usize) -> Self {
        self.minibatch_size = Some(mbs);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0) {
            return Err(ConfigError::NonPositiveLr(self.lr));
        }
        if self.alpha < 0.0 {
            return Err(ConfigError::NegativeCoefficient {
                name: "alpha",
                value: self.alpha,
            });
        }
        if self.beta < 0.0 {
            return Err(ConfigError::NegativeCoefficient {
                name: "beta",
                value: self.beta,
            });
        }
        if let Some(m) = self.minibatch_size {
            if m == 0 {
                return Err(ConfigError::NonPositiveSize {
                    name: "minibatch_size",
                    value: m,
                });
            }
        }
        Ok(())
    }
}

/// Weight applied to the replay logit-matching loss before the α factor.
///
/// The underlying distance is the squared Euclidean gap summed over classes
/// and averaged over the replay batch; dividing by the class count turns it
/// into the mean squared per-logit gap, the convention the tuned α defaults
/// assume (α = 1 at lr 0.2 diverges under the summed reading).
fn replay_mse_scale(classes: usize) -> f64 {
    1.0 / classes as f64
}

/// Serializable position of a deterministic RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

pub fn capture_rng(rng: &ComponentRng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore_rng(state: &RngState) -> ComponentRng {
    let mut rng = ComponentRng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}

/// A streaming continual learner: one training step per observed batch.
pub trait Learner {
    /// Consume one batch (inputs + labels only — no task identity), take one
    /// SGD step, and return the step's training loss.
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64;

    fn model(&self) -> &DenseModel<f64>;

    fn model_mut(&mut self) -> &mut DenseModel<f64>;

    fn buffer(&self) -> Option<&MemoryBuffer<f64>>;

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>>;

    /// Total training examples observed so far.
    fn observed_count(&self) -> u64;

    /// End-of-task hook, called by the harness only on streams with visible
    /// boundaries. The default is a no-op: most methods are boundary-free.
    fn on_task_boundary(&mut self, _ds: &Dataset, _task: &TaskSpec) {}

    /// Positions of the learner's internal RNG streams (replay draw first,
    /// then reservoir), for exact-resume checkpoints. Empty for memoryless
    /// methods.
    fn rng_states(&self) -> Vec<RngState> {
        Vec::new()
    }

    fn restore_rng_states(&mut self, _states: &[RngState]) {}
}

/// Model + optimizer state shared by every streaming learner.
struct Core {
    model: DenseModel<f64>,
    lr: f64,
    observed: u64,
    cache: ForwardCache<f64>,
    grads: GradientBundle<f64>,
    /// Scratch bundle for replay-term gradients, merged into `grads`.
    replay_grads: GradientBundle<f64>,
}

impl Core {
    fn new(model: DenseModel<f64>, lr: f64) -> Self {
        let grads = GradientBundle::zeros_like(&model);
        let replay_grads = GradientBundle::zeros_like(&model);
        Core {
            model,
            lr,
            observed: 0,
            cache: ForwardCache::new(),
            grads,
            replay_grads,
        }
    }

    /// Cross-entropy backward pass into `grads`; afterwards `cache` holds the
    /// batch logits of the *current* (pre-step) parameters.
    fn ce_backward(&mut self, inputs: &DenseMatrix<f64>, labels: &[usize]) -> f64 {
        backward_into(
            &self.model,
            inputs,
            &LossSpec::cross_entropy(),
            &LossTargets {
                labels: Some(labels),
                stored_logits: None,
                class_mask: None,
            },
            &mut self.cache,
            &mut self.grads,
        )
    }

    /// Cross-entropy backward on a replay draw into the scratch bundle.
    fn replay_ce_backward(&mut self, inputs: &DenseMatrix<f64>, labels: &[usize]) -> f64 {
        backward_into(
            &self.model,
            inputs,
            &LossSpec::cross_entropy(),
            &LossTargets {
                labels: Some(labels),
                stored_logits: None,
                class_mask: None,
            },
            &mut self.cache,
            &mut self.replay_grads,
        )
    }

    /// Logit-matching backward on a replay draw into the scratch bundle.
    fn replay_mse_backward(&mut self, inputs: &DenseMatrix<f64>, stored: &DenseMatrix<f64>) -> f64 {
        backward_into(
            &self.model,
            inputs,
            &LossSpec::logit_mse(),
            &LossTargets {
                labels: None,
                stored_logits: Some(stored),
                class_mask: None,
            },
            &mut self.cache,
            &mut self.replay_grads,
        )
    }

    fn step(&mut self) {
        self.model.sgd_step(&self.grads, self.lr);
    }
}

/// The two RNG streams a rehearsal method owns: one for replay draws, one for
/// reservoir victims. Keeping them separate makes zero-coefficient method
/// variants consume identical draw sequences.
struct RehearsalRngs {
    replay: ComponentRng,
    reservoir: ComponentRng,
}

impl RehearsalRngs {
    fn states(&self) -> Vec<RngState> {
        vec![capture_rng(&self.replay), capture_rng(&self.reservoir)]
    }

    fn restore(&mut self, states: &[RngState]) {
        assert_eq!(states.len(), 2, "rehearsal learners carry two RNG streams");
        self.replay = restore_rng(&states[0]);
        self.reservoir = restore_rng(&states[1]);
    }
}

/// Plain SGD on the incoming batches: no memory, no countermeasures.
pub struct SgdLearner {
    core: Core,
}

impl SgdLearner {
    pub fn new(model: DenseModel<f64>, lr: f64) -> Self {
        SgdLearner {
            core: Core::new(model, lr),
        }
    }
}

impl Learner for SgdLearner {
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64 {
        let loss = self.core.ce_backward(batch.inputs, batch.labels);
        self.core.step();
        self.core.observed += batch.len() as u64;
        loss
    }

    fn model(&self) -> &DenseModel<f64> {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut DenseModel<f64> {
        &mut self.core.model
    }

    fn buffer(&self) -> Option<&MemoryBuffer<f64>> {
        None
    }

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>> {
        None
    }

    fn observed_count(&self) -> u64 {
        self.core.observed
    }
}

/// Experience replay: the incoming batch and a buffer draw are concatenated
/// and a single cross-entropy step is taken over the union (one gradient,
/// averaged over all union rows). Stores `(x, y)`.
pub struct ErLearner {
    core: Core,
    buffer: MemoryBuffer<f64>,
    mbs: usize,
    rngs: RehearsalRngs,
}

impl ErLearner {
    pub fn new(
        model: DenseModel<f64>,
        lr: f64,
        capacity: usize,
        mbs: usize,
        replay_rng: ComponentRng,
        reservoir_rng: ComponentRng,
    ) -> Self {
        ErLearner {
            core: Core::new(model, lr),
            buffer: MemoryBuffer::new(capacity),
            mbs,
            rngs: RehearsalRngs {
                replay: replay_rng,
                reservoir: reservoir_rng,
            },
        }
    }
}

impl Learner for ErLearner {
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64 {
        let loss = match self.buffer.sample_indices(self.mbs, &mut self.rngs.replay) {
            Some(idx) => {
                let buf_inputs = self.buffer.gather_inputs(&idx);
                let buf_labels = self
                    .buffer
                    .gather_labels(&idx)
                    .expect("replay entries carry labels");
                let union_inputs = batch.inputs.vcat(&buf_inputs);
                let mut union_labels = batch.labels.to_vec();
                union_labels.extend(buf_labels);
                self.core.ce_backward(&union_inputs, &union_labels)
            }
            None => self.core.ce_backward(batch.inputs, batch.labels),
        };
        self.core.step();
        for r in 0..batch.len() {
            self.buffer.reservoir_insert(
                BufferEntry {
                    input: batch.raw_inputs.row(r).to_vec(),
                    logits: None,
                    label: Some(batch.labels[r]),
                },
                &mut self.rngs.reservoir,
            );
        }
        self.core.observed += batch.len() as u64;
        loss
    }

    fn model(&self) -> &DenseModel<f64> {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut DenseModel<f64> {
        &mut self.core.model
    }

    fn buffer(&self) -> Option<&MemoryBuffer<f64>> {
        Some(&self.buffer)
    }

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>> {
        Some(&mut self.buffer)
    }

    fn observed_count(&self) -> u64 {
        self.core.observed
    }

    fn rng_states(&self) -> Vec<RngState> {
        self.rngs.states()
    }

    fn restore_rng_states(&mut self, states: &[RngState]) {
        self.rngs.restore(states);
    }
}

/// Dark experience replay: cross-entropy on the incoming batch plus an
/// α-weighted squared-distance match between the current outputs on a replay
/// draw and the logits stored when those examples streamed by. The pair
/// `(x, z)` enters the buffer with the logits computed in this step's forward
/// pass (pre-update); the ground-truth label rides along as an inert payload
/// so buffer snapshots stay probe-ready, but the update never reads it.
pub struct DerLearner {
    core: Core,
    buffer: MemoryBuffer<f64>,
    mbs: usize,
    alpha: f64,
    rngs: RehearsalRngs,
}

impl DerLearner {
    pub fn new(
        model: DenseModel<f64>,
        lr: f64,
        alpha: f64,
        capacity: usize,
        mbs: usize,
        replay_rng: ComponentRng,
        reservoir_rng: ComponentRng,
    ) -> Self {
        DerLearner {
            core: Core::new(model, lr),
            buffer: MemoryBuffer::new(capacity),
            mbs,
            alpha,
            rngs: RehearsalRngs {
                replay: replay_rng,
                reservoir: reservoir_rng,
            },
        }
    }
}

impl Learner for DerLearner {
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64 {
        let mut loss = self.core.ce_backward(batch.inputs, batch.labels);
        // Snapshot the pre-update logits before the cache is reused.
        let logits = self.core.cache.logits().clone();
        if self.alpha > 0.0 {
            if let Some(idx) = self.buffer.sample_indices(self.mbs, &mut self.rngs.replay) {
                let buf_inputs = self.buffer.gather_inputs(&idx);
                let stored = self
                    .buffer
                    .gather_logits(&idx)
                    .expect("dark-replay entries carry logits");
                let mse = self.core.replay_mse_backward(&buf_inputs, &stored);
                let weight = self.alpha * replay_mse_scale(self.core.model.output_dim());
                self.core.grads.scaled_add(&self.core.replay_grads, weight);
                loss += weight * mse;
            }
        }
        self.core.step();
        for r in 0..batch.len() {
            self.buffer.reservoir_insert(
                BufferEntry {
                    input: batch.raw_inputs.row(r).to_vec(),
                    logits: Some(logits.row(r).to_vec()),
                    label: Some(batch.labels[r]),
                },
                &mut self.rngs.reservoir,
            );
        }
        self.core.observed += batch.len() as u64;
        loss
    }

    fn model(&self) -> &DenseModel<f64> {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut DenseModel<f64> {
        &mut self.core.model
    }

    fn buffer(&self) -> Option<&MemoryBuffer<f64>> {
        Some(&self.buffer)
    }

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>> {
        Some(&mut self.buffer)
    }

    fn observed_count(&self) -> u64 {
        self.core.observed
    }

    fn rng_states(&self) -> Vec<RngState> {
        self.rngs.states()
    }

    fn restore_rng_states(&mut self, states: &[RngState]) {
        self.rngs.restore(states);
    }
}

/// DER++: the dark-replay loss plus a β-weighted cross-entropy on a second,
/// independent buffer draw against the stored ground-truth labels. Stores
/// `(x, z, y)`. A zero coefficient skips its draw entirely, so β = 0 replays
/// the exact RNG sequence of [`DerLearner`] and the trajectories coincide
/// bit for bit.
pub struct DerppLearner {
    core: Core,
    buffer: MemoryBuffer<f64>,
    mbs: usize,
    alpha: f64,
    beta: f64,
    rngs: RehearsalRngs,
}

impl DerppLearner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: DenseModel<f64>,
        lr: f64,
        alpha: f64,
        beta: f64,
        capacity: usize,
        mbs: usize,
        replay_rng: ComponentRng,
        reservoir_rng: ComponentRng,
    ) -> Self {
        DerppLearner {
            core: Core::new(model, lr),
            buffer: MemoryBuffer::new(capacity),
            mbs,
            alpha,
            beta,
            rngs: RehearsalRngs {
                replay: replay_rng,
                reservoir: reservoir_rng,
            },
        }
    }
}

impl Learner for DerppLearner {
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64 {
        let mut loss = self.core.ce_backward(batch.inputs, batch.labels);
        let logits = self.core.cache.logits().clone();
        if self.alpha > 0.0 {
            if let Some(idx) = self.buffer.sample_indices(self.mbs, &mut self.rngs.replay) {
                let buf_inputs = self.buffer.gather_inputs(&idx);
                let stored = self
                    .buffer
                    .gather_logits(&idx)
                    .expect("dark-replay entries carry logits");
                let mse = self.core.replay_mse_backward(&buf_inputs, &stored);
                let weight = self.alpha * replay_mse_scale(self.core.model.output_dim());
                self.core.grads.scaled_add(&self.core.replay_grads, weight);
                loss += weight * mse;
            }
        }
        if self.beta > 0.0 {
            if let Some(idx) = self.buffer.sample_indices(self.mbs, &mut self.rngs.replay) {
                let buf_inputs = self.buffer.gather_inputs(&idx);
                let buf_labels = self
                    .buffer
                    .gather_labels(&idx)
                    .expect("replay entries carry labels");
                let ce = self.core.replay_ce_backward(&buf_inputs, &buf_labels);
                self.core.grads.scaled_add(&self.core.replay_grads, self.beta);
                loss += self.beta * ce;
            }
        }
        self.core.step();
        for r in 0..batch.len() {
            self.buffer.reservoir_insert(
                BufferEntry {
                    input: batch.raw_inputs.row(r).to_vec(),
                    logits: Some(logits.row(r).to_vec()),
                    label: Some(batch.labels[r]),
                },
                &mut self.rngs.reservoir,
            );
        }
        self.core.observed += batch.len() as u64;
        loss
    }

    fn model(&self) -> &DenseModel<f64> {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut DenseModel<f64> {
        &mut self.core.model
    }

    fn buffer(&self) -> Option<&MemoryBuffer<f64>> {
        Some(&self.buffer)
    }

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>> {
        Some(&mut self.buffer)
    }

    fn observed_count(&self) -> u64 {
        self.core.observed
    }

    fn rng_states(&self) -> Vec<RngState> {
        self.rngs.states()
    }

    fn restore_rng_states(&mut self, states: &[RngState]) {
        self.rngs.restore(states);
    }
}

/// Frozen-logit comparator: like dark replay, but the stored logits come
/// from end-of-task model snapshots instead of the streaming trajectory.
/// During a task it never touches the buffer contents; at each boundary it
/// reservoir-inserts the finished task's examples and then overwrites every
/// stored logit vector with the boundary model's outputs.
pub struct FdrLearner {
    core: Core,
    buffer: MemoryBuffer<f64>,
    mbs: usize,
    alpha: f64,
    rngs: RehearsalRngs,
}

impl FdrLearner {
    pub fn new(
        model: DenseModel<f64>,
        lr: f64,
        alpha: f64,
        capacity: usize,
        mbs: usize,
        replay_rng: ComponentRng,
        reservoir_rng: ComponentRng,
    ) -> Self {
        FdrLearner {
            core: Core::new(model, lr),
            buffer: MemoryBuffer::new(capacity),
            mbs,
            alpha,
            rngs: RehearsalRngs {
                replay: replay_rng,
                reservoir: reservoir_rng,
            },
        }
    }

    /// Chunk size for boundary-time materialization and logit refresh.
    const CHUNK: usize = 512;
}

impl Learner for FdrLearner {
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64 {
        let mut loss = self.core.ce_backward(batch.inputs, batch.labels);
        if self.alpha > 0.0 {
            if let Some(idx) = self.buffer.sample_indices(self.mbs, &mut self.rngs.replay) {
                let buf_inputs = self.buffer.gather_inputs(&idx);
                let stored = self
                    .buffer
                    .gather_logits(&idx)
                    .expect("boundary hook fills logits before any replay");
                let mse = self.core.replay_mse_backward(&buf_inputs, &stored);
                let weight = self.alpha * replay_mse_scale(self.core.model.output_dim());
                self.core.grads.scaled_add(&self.core.replay_grads, weight);
                loss += weight * mse;
            }
        }
        self.core.step();
        self.core.observed += batch.len() as u64;
        loss
    }

    fn on_task_boundary(&mut self, ds: &Dataset, task: &TaskSpec) {
        // Pass 1: every example of the finished task flows through the
        // reservoir (transformed as trained on; logits filled in pass 2).
        for chunk in task.example_indices.chunks(Self::CHUNK) {
            let (inputs, labels) = materialize(ds, chunk, &task.transform);
            for (r, &y) in labels.iter().enumerate() {
                self.buffer.reservoir_insert(
                    BufferEntry {
                        input: inputs.row(r).to_vec(),
                        logits: None,
                        label: Some(y),
                    },
                    &mut self.rngs.reservoir,
                );
            }
        }
        // Pass 2: freeze the boundary model's responses on everything
        // currently retained (survivors and new entries alike).
        let n = self.buffer.len();
        let mut start = 0;
        while start < n {
            let end = (start + Self::CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let inputs = self.buffer.gather_inputs(&idx);
            let logits = self.core.model.forward(&inputs);
            for (r, &i) in idx.iter().enumerate() {
                self.buffer
                    .update_logits(i, logits.row(r).to_vec())
                    .expect("index in range by construction");
            }
            start = end;
        }
    }

    fn model(&self) -> &DenseModel<f64> {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut DenseModel<f64> {
        &mut self.core.model
    }

    fn buffer(&self) -> Option<&MemoryBuffer<f64>> {
        Some(&self.buffer)
    }

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>> {
        Some(&mut self.buffer)
    }

    fn observed_count(&self) -> u64 {
        self.core.observed
    }

    fn rng_states(&self) -> Vec<RngState> {
        self.rngs.states()
    }

    fn restore_rng_states(&mut self, states: &[RngState]) {
        self.rngs.restore(states);
    }
}

/// Remove from `g` its component along `g_ref` when the two point in
/// conflicting directions: if ⟨g, g_ref⟩ < 0, set g ← g − (⟨g,g_ref⟩ /
/// ⟨g_ref,g_ref⟩)·g_ref (making ⟨g, g_ref⟩ exactly zero up to rounding);
/// otherwise leave g untouched. A zero reference gradient also leaves `g`
/// unchanged.
pub fn agem_project(g: &mut GradientBundle<f64>, g_ref: &GradientBundle<f64>) {
    let dot = g.dot(g_ref);
    if dot < 0.0 {
        let ref_sq = g_ref.norm_sq();
        if ref_sq > 0.0 {
            g.scaled_add(g_ref, -dot / ref_sq);
        }
    }
}

/// A-GEM with a reservoir buffer: the batch gradient is projected so it
/// cannot increase the loss on a replay draw (first-order), then applied.
/// Stores `(x, y)`.
pub struct AgemRLearner {
    core: Core,
    buffer: MemoryBuffer<f64>,
    mbs: usize,
    rngs: RehearsalRngs,
}

impl AgemRLearner {
    pub fn new(
        model: DenseModel<f64>,
        lr: f64,
        capacity: usize,
        mbs: usize,
        replay_rng: ComponentRng,
        reservoir_rng: ComponentRng,
    ) -> Self {
        AgemRLearner {
            core: Core::new(model, lr),
            buffer: MemoryBuffer::new(capacity),
            mbs,
            rngs: RehearsalRngs {
                replay: replay_rng,
                reservoir: reservoir_rng,
            },
        }
    }
}

impl Learner for AgemRLearner {
    fn observe(&mut self, batch: &ObservedBatch<'_>) -> f64 {
        let loss = self.core.ce_backward(batch.inputs, batch.labels);
        if let Some(idx) = self.buffer.sample_indices(self.mbs, &mut self.rngs.replay) {
            let buf_inputs = self.buffer.gather_inputs(&idx);
            let buf_labels = self
                .buffer
                .gather_labels(&idx)
                .expect("replay entries carry labels");
            self.core.replay_ce_backward(&buf_inputs, &buf_labels);
            agem_project(&mut self.core.grads, &self.core.replay_grads);
        }
        self.core.step();
        for r in 0..batch.len() {
            self.buffer.reservoir_insert(
                BufferEntry {
                    input: batch.raw_inputs.row(r).to_vec(),
                    logits: None,
                    label: Some(batch.labels[r]),
                },
                &mut self.rngs.reservoir,
            );
        }
        self.core.observed += batch.len() as u64;
        loss
    }

    fn model(&self) -> &DenseModel<f64> {
        &self.core.model
    }

    fn model_mut(&mut self) -> &mut DenseModel<f64> {
        &mut self.core.model
    }

    fn buffer(&self) -> Option<&MemoryBuffer<f64>> {
        Some(&self.buffer)
    }

    fn buffer_mut(&mut self) -> Option<&mut MemoryBuffer<f64>> {
        Some(&mut self.buffer)
    }

    fn observed_count(&self) -> u64 {
        self.core.observed
    }

    fn rng_states(&self) -> Vec<RngState> {
        self.rngs.states()
    }

    fn restore_rng_states(&mut self, states: &[RngState]) {
        self.rngs.restore(states);
    }
}

/// Build the streaming learner for `config`. `stream_batch` resolves the
/// default replay draw size; `capacity` must be present exactly for the
/// buffer-backed methods. `joint` is offline and is rejected here.
pub fn build_learner(
    config: &MethodConfig,
    model: DenseModel<f64>,
    capacity: Option<usize>,
    stream_batch: usize,
    replay_rng: ComponentRng,
    reservoir_rng: ComponentRng,
) -> Result<Box<dyn Learner>, ConfigError> {
    config.validate()?;
    if config.kind == MethodKind::Joint {
        return Err(ConfigError::OfflineMethod {
            method: "joint".to_string(),
        });
    }
    let mbs = config.minibatch_size.unwrap_or(stream_batch);
    let need_buffer = config.kind.uses_buffer();
    let capacity = match (need_buffer, capacity) {
        (true, Some(c)) => c,
        (true, None) => {
            return Err(ConfigError::MissingBuffer {
                method: config.kind.name().to_string(),
            })
        }
        (false, Some(c)) => {
            return Err(ConfigError::BufferOnBufferless {
                method: config.kind.name().to_string(),
                capacity: c,
            })
        }
        (false, None) => 0,
    };
    Ok(match config.kind {
        MethodKind::Sgd => Box::new(SgdLearner::new(model, config.lr)),
        MethodKind::Joint => unreachable!("rejected above"),
        MethodKind::Er => Box::new(ErLearner::new(
            model,
            config.lr,
            capacity,
            mbs,
            replay_rng,
            reservoir_rng,
        )),
        MethodKind::Der => Box::new(DerLearner::new(
            model,
            config.lr,
            config.alpha,
            capacity,
            mbs,
            replay_rng,
            reservoir_rng,
        )),
        MethodKind::Derpp => Box::new(DerppLearner::new(
            model,
            config.lr,
            config.alpha,
            config.beta,
            capacity,
            mbs,
            replay_rng,
            reservoir_rng,
        )),
        MethodKind::Fdr => Box::new(FdrLearner::new(
            model,
            config.lr,
            config.alpha,
            capacity,
            mbs,
            replay_rng,
            reservoir_rng,
        )),
        MethodKind::AgemR => Box::new(AgemRLearner::new(
            model,
            config.lr,
            capacity,
            mbs,
            replay_rng,
            reservoir_rng,
        )),
    })
}

/// A virtual union dataset for offline joint training: items reference a
/// shared transform table so domain streams (one transform per task) and the
/// rotated GCL stream (one rotation per example) both stay cheap to hold.
#[derive(Debug, Clone)]
pub struct JointPlan {
    pub transforms: Vec<Transform>,
    /// `(transform index, dataset row)` per training item.
    pub items: Vec<(u32, u32)>,
}

impl JointPlan {
    /// Union of a bounded stream's tasks: every task contributes its examples
    /// under its own transform.
    pub fn from_task_stream(stream: &TaskStream) -> JointPlan {
        let transforms = stream.tasks.iter().map(|t| t.transform.clone()).collect();
        let mut items = Vec::new();
        for (t, task) in stream.tasks.iter().enumerate() {
            for &e in &task.example_indices {
                items.push((t as u32, e));
            }
        }
        JointPlan { transforms, items }
    }

    /// The rotated examples a GCL stream emitted, as recorded in its
    /// manifest: one rotation per item.
    pub fn from_mnist360_manifest(entries: &[ManifestEntry]) -> JointPlan {
        let transforms = entries
            .iter()
            .map(|e| Transform::Rotation(e.angle))
            .collect();
        let items = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i as u32, e.example))
            .collect();
        JointPlan { transforms, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Offline upper bound: shuffled cross-entropy training over the union of
/// all tasks' data for `epochs` passes (the same per-task epoch budget the
/// continual methods get, applied to the union). Returns the mean training
/// loss of the final epoch.
pub fn train_joint(
    model: &mut DenseModel<f64>,
    ds: &Dataset,
    plan: &JointPlan,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    rng: &mut ComponentRng,
) -> f64 {
    use rand::Rng;
    assert!(batch_size > 0 && epochs > 0, "positive batch size and epochs");
    assert!(!plan.is_empty(), "joint training needs data");
    let mut order: Vec<(u32, u32)> = plan.items.clone();
    let mut cache = ForwardCache::new();
    let mut grads = GradientBundle::zeros_like(model);
    let mut last_epoch_loss = 0.0;
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for chunk in order.chunks(batch_size) {
            let mut inputs = DenseMatrix::zeros(chunk.len(), IMAGE_PIXELS);
            let mut labels = Vec::with_capacity(chunk.len());
            for (r, &(t, e)) in chunk.iter().enumerate() {
                apply_transform_into(
                    ds.image(e as usize),
                    &plan.transforms[t as usize],
                    inputs.row_mut(r),
                );
                labels.push(ds.labels[e as usize]);
            }
            let loss = backward_into(
                model,
                &inputs,
                &LossSpec::cross_entropy(),
                &LossTargets {
                    labels: Some(&labels),
                    stored_logits: None,
                    class_mask: None,
                },
                &mut cache,
                &mut grads,
            );
            model.sgd_step(&grads, lr);
            loss_sum += loss;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches as f64;
    }
    last_epoch_loss
}
