//! Experiment orchestration: configuration, seeding, full runs, grid search
//! with validation-based selection, multi-seed summaries, result persistence,
//! and the report renderers the CLI is built from.
//!
//! # Seeding discipline
//!
//! Every stochastic choice in a run derives from the single experiment seed
//! through one [`SeedSplitter`], each consumer owning a named stream:
//!
//! | label          | consumer                                              |
//! |----------------|-------------------------------------------------------|
//! | `init`         | model weight initialization                           |
//! | `stream`       | per-task transforms / rotation-stream shuffles        |
//! | `baseline#k`   | k-th random init for the forward-transfer baseline    |
//! | `replay`       | replay minibatch draws inside the learner             |
//! | `reservoir`    | reservoir acceptance/eviction draws                   |
//! | `order#t`      | task `t`'s example shuffle (reused across its epochs) |
//! | `order`        | the offline joint trainer's epoch shuffles            |
//! | `validation`   | the 10% stratified validation split (grid search)     |
//! | `seed#i`       | i-th derived seed of a multi-seed summary             |
//!
//! No global RNG exists anywhere, so two runs of the same config produce
//! byte-identical records (wall time aside), and adding a consumer never
//! shifts the draws seen by existing ones.
//!
//! # Config files
//!
//! Configs are JSON; omitted optional fields take the documented defaults:
//!
//! ```json
//! {
//!   "setting": "seq_mnist_class",
//!   "method": { "kind": "derpp", "lr": 0.03, "alpha": 0.2, "beta": 1.0 },
//!   "buffer_size": 200,
//!   "seed": 7,
//!   "epochs_per_task": 1,
//!   "data_dir": "data",
//!   "batch_size": null
//! }
//! ```
//!
//! Records persist under `results/<setting>/<method>/<buffer>/<seed>.json`
//! with a binary model/buffer/RNG checkpoint beside each record (same stem,
//! `.ckpt` extension) so probes can reload trained state exactly.

use crate::buffer::MemoryBuffer;
use crate::data::{split_validation, Dataset, Mnist};
use crate::error::{ConfigError, RunError};
use crate::methods::{
    build_learner, restore_rng, train_joint, JointPlan, MethodConfig, MethodKind, RngState,
};
use crate::metrics::{
    accuracy_on_task, backward_transfer, forgetting, forward_transfer, mnist360_accuracy,
    write_metrics_csv, AccuracyMatrix, MetricRow,
};
use crate::nn::DenseModel;
use crate::rng::SeedSplitter;
use crate::streams::{
    domain_stream, mnist360_test_stream, sequential_stream, task_batches, DomainKind,
    Mnist360Stream, TaskSpec, TaskStream, DOMAIN_TASKS, MNIST360_BATCH, MNIST360_CLASSES,
    MNIST360_ROUNDS,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// Fraction of the training set held out for grid-search validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Number of random initializations averaged into the forward-transfer
/// baseline.
pub const FWT_BASELINE_INITS: usize = 10;

/// Buffer capacities the bounded-stream settings accept.
pub const SUPPORTED_BUFFERS: [usize; 4] = [200, 500, 1000, 5120];

/// Buffer capacities the rotation stream accepts (its protocol caps memory
/// below the largest bounded-setting buffer).
pub const MNIST360_BUFFERS: [usize; 3] = [200, 500, 1000];

// ---------------------------------------------------------------------------
// Settings and configuration
// ---------------------------------------------------------------------------

/// The five experiment protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Five two-class tasks, scored over all ten classes at test time.
    SeqMnistClass,
    /// Five two-class tasks, scored within the known task's two classes.
    SeqMnistTask,
    /// Twenty tasks, each a fixed random pixel permutation of all ten digits.
    PermMnist,
    /// Twenty tasks, each a fixed random rotation of all ten digits.
    RotMnist,
    /// The boundary-free rotating-digit-pair stream (digit 9 excluded).
    Mnist360,
}

impl Setting {
    pub const ALL: [Setting; 5] = [
        Setting::SeqMnistClass,
        Setting::SeqMnistTask,
        Setting::PermMnist,
        Setting::RotMnist,
        Setting::Mnist360,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::SeqMnistClass => "seq_mnist_class",
            Setting::SeqMnistTask => "seq_mnist_task",
            Setting::PermMnist => "perm_mnist",
            Setting::RotMnist => "rot_mnist",
            Setting::Mnist360 => "mnist360",
        }
    }

    pub fn parse(s: &str) -> Result<Setting, ConfigError> {
        Setting::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::UnknownName {
                what: "setting",
                value: s.to_string(),
            })
    }

    /// Output width of the classifier head.
    pub fn classes(self) -> usize {
        match self {
            Setting::Mnist360 => MNIST360_CLASSES,
            _ => 10,
        }
    }

    /// The two sequential protocols share a training stream and differ only
    /// in evaluation masking.
    pub fn is_sequential(self) -> bool {
        matches!(self, Setting::SeqMnistClass | Setting::SeqMnistTask)
    }

    /// Whether test-time scoring restricts the argmax to the task's classes.
    pub fn task_scoped_scoring(self) -> bool {
        self == Setting::SeqMnistTask
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_epochs() -> usize {
    1
}

/// A fully-specified experiment: protocol, method, memory budget, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub method: MethodConfig,
    /// Replay-memory capacity; required for rehearsal methods, forbidden
    /// otherwise.
    #[serde(default)]
    pub buffer_size: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    /// Directory holding the four IDX dataset files; `data` when omitted.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Stream batch size; each setting's protocol default when omitted.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(setting: Setting, method: MethodConfig) -> Self {
        ExperimentConfig {
            setting,
            method,
            buffer_size: None,
            seed: 0,
            epochs_per_task: 1,
            data_dir: None,
            batch_size: None,
        }
    }

    pub fn with_buffer(mut self, capacity: usize) -> Self {
        self.buffer_size = Some(capacity);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch: usize) -> Self {
        self.batch_size = Some(batch);
        self
    }

    /// Reject impossible combinations before any training starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.method.validate()?;
        if self.epochs_per_task == 0 {
            return Err(ConfigError::NonPositiveSize {
                name: "epochs_per_task",
                value: 0,
            });
        }
        if self.batch_size == Some(0) {
            return Err(ConfigError::NonPositiveSize {
                name: "batch_size",
                value: 0,
            });
        }
        let m360 = self.setting == Setting::Mnist360;
        if m360 {
            if self.method.kind == MethodKind::Fdr {
                return Err(ConfigError::FdrOnMnist360);
            }
            if self.epochs_per_task != 1 {
                return Err(ConfigError::Mnist360SingleEpoch(self.epochs_per_task));
            }
        }
        match self.buffer_size {
            Some(b) if !SUPPORTED_BUFFERS.contains(&b) => {
                return Err(ConfigError::UnsupportedBufferSize(b));
            }
            Some(b) if m360 && !MNIST360_BUFFERS.contains(&b) => {
                return Err(ConfigError::UnsupportedBufferSizeMnist360(b));
            }
            Some(b) if !self.method.kind.uses_buffer() => {
                return Err(ConfigError::BufferOnBufferless {
                    method: self.method.kind.name().to_string(),
                    capacity: b,
                });
            }
            None if self.method.kind.uses_buffer() => {
                return Err(ConfigError::MissingBuffer {
                    method: self.method.kind.name().to_string(),
                });
            }
            _ => {}
        }
        Ok(())
    }

    /// Stream batch size after applying the setting default.
    pub fn resolved_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.setting {
            Setting::SeqMnistClass | Setting::SeqMnistTask => crate::streams::SEQ_MNIST_BATCH,
            Setting::PermMnist | Setting::RotMnist => crate::streams::DOMAIN_BATCH,
            Setting::Mnist360 => MNIST360_BATCH,
        })
    }
}

/// Load the dataset named by a config (falling back to `data/`).
pub fn load_mnist_for(config: &ExperimentConfig) -> Result<Mnist, RunError> {
    let dir = config
        .data_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("data"));
    Ok(Mnist::load(dir)?)
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Everything produced by one run. `config` + `seed` fully determine every
/// field except `wall_time_secs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub config: ExperimentConfig,
    /// Accuracy after each task (rows) on each task (columns), scored the
    /// setting's primary way.
    pub accuracy_matrix: AccuracyMatrix,
    /// For the sequential protocols only: the same run scored the other way
    /// (task-scoped when the primary is global, and vice versa).
    pub companion_matrix: Option<AccuracyMatrix>,
    pub final_avg_accuracy: f64,
    pub companion_final_avg: Option<f64>,
    /// Absent when undefined (single-task streams) or not measured
    /// (final-only evaluation).
    pub backward_transfer: Option<f64>,
    pub forward_transfer: Option<f64>,
    pub forgetting: Option<f64>,
    pub wall_time_secs: f64,
    pub artifact_version: String,
    /// Order-sensitive fingerprint of every RNG stream the run derived.
    pub rng_trace_digest: String,
}

/// Reloadable end-of-run state: trained weights, replay memory, and the
/// positions of the learner's RNG streams.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenseModel<f64>,
    pub buffer: Option<MemoryBuffer<f64>>,
    pub rng_states: Vec<RngState>,
}

/// How often the run evaluates the held-out set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCadence {
    /// After every task: fills the accuracy matrix and the transfer metrics.
    EveryTask,
    /// Only after the last task: final averages only, for cheap sweeps.
    FinalOnly,
}

/// Raw outcome of a training run, before record assembly.
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub companion: Option<AccuracyMatrix>,
    pub model: DenseModel<f64>,
    pub buffer: Option<MemoryBuffer<f64>>,
    pub rng_states: Vec<RngState>,
}

impl RunOutcome {
    /// Grid-search score: mean of both scorings for the sequential
    /// protocols, plain final average elsewhere.
    fn selection_score(&self) -> Result<f64, RunError> {
        let primary = self.matrix.final_average()?;
        Ok(match &self.companion {
            Some(companion) => 0.5 * (primary + companion.final_average()?),
            None => primary,
        })
    }
}

// ---------------------------------------------------------------------------
// Running experiments
// ---------------------------------------------------------------------------

/// Train and evaluate one experiment end to end (evaluating after every
/// task), without touching the filesystem.
pub fn run_full(
    config: &ExperimentConfig,
    mnist: &Mnist,
) -> Result<(ResultsRecord, Checkpoint), RunError> {
    run_with(config, mnist, EvalCadence::EveryTask)
}

/// [`run_full`] with an explicit evaluation cadence.
pub fn run_with(
    config: &ExperimentConfig,
    mnist: &Mnist,
    cadence: EvalCadence,
) -> Result<(ResultsRecord, Checkpoint), RunError> {
    config.validate()?;
    let start = Instant::now();
    let splitter = SeedSplitter::new(config.seed);
    let outcome = run_on(config, &mnist.train, &mnist.test, &splitter, cadence)?;
    let record = assemble_record(
        config,
        &outcome,
        start.elapsed().as_secs_f64(),
        splitter.trace_digest(),
    )?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        buffer: outcome.buffer,
        rng_states: outcome.rng_states,
    };
    Ok((record, checkpoint))
}

/// Run and persist record + checkpoint under `results_root`; returns the
/// record and the path it was written to.
pub fn run_and_save(
    config: &ExperimentConfig,
    mnist: &Mnist,
    results_root: &Path,
) -> Result<(ResultsRecord, PathBuf), RunError> {
    let (record, checkpoint) = run_full(config, mnist)?;
    let path = save_record(results_root, &record, Some(&checkpoint))?;
    Ok((record, path))
}

/// Dispatch a validated config onto explicit train/eval datasets.
pub fn run_on(
    config: &ExperimentConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    splitter: &SeedSplitter,
    cadence: EvalCadence,
) -> Result<RunOutcome, RunError> {
    match config.setting {
        Setting::Mnist360 => run_mnist360_on(config, train_ds, eval_ds, splitter),
        _ => run_streamed_on(config, train_ds, eval_ds, splitter, cadence),
    }
}

fn assemble_record(
    config: &ExperimentConfig,
    outcome: &RunOutcome,
    wall_time_secs: f64,
    rng_trace_digest: String,
) -> Result<ResultsRecord, RunError> {
    let final_avg_accuracy = outcome.matrix.final_average()?;
    let companion_final_avg = outcome
        .companion
        .as_ref()
        .map(AccuracyMatrix::final_average)
        .transpose()?;
    Ok(ResultsRecord {
        config: config.clone(),
        accuracy_matrix: outcome.matrix.clone(),
        companion_matrix: outcome.companion.clone(),
        final_avg_accuracy,
        companion_final_avg,
        backward_transfer: backward_transfer(&outcome.matrix).ok(),
        forward_transfer: forward_transfer(&outcome.matrix).ok(),
        forgetting: forgetting(&outcome.matrix).ok(),
        wall_time_secs,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        rng_trace_digest,
    })
}

/// Evaluation-time counterparts of the training tasks: same boundaries and
/// transforms, but indexing the held-out dataset.
fn eval_tasks_for(setting: Setting, stream: &TaskStream, eval_ds: &Dataset) -> Vec<TaskSpec> {
    match setting {
        Setting::SeqMnistClass | Setting::SeqMnistTask => sequential_stream(eval_ds, 1).tasks,
        Setting::PermMnist | Setting::RotMnist => {
            let all: Vec<u32> = (0..eval_ds.len() as u32).collect();
            stream
                .tasks
                .iter()
                .map(|t| TaskSpec {
                    task_id: t.task_id,
                    class_set: t.class_set.clone(),
                    transform: t.transform.clone(),
                    epochs: 1,
                    example_indices: all.clone(),
                })
                .collect()
        }
        Setting::Mnist360 => Vec::new(),
    }
}

fn mask_for(task: &TaskSpec, task_scoped: bool) -> Option<&[usize]> {
    if task_scoped {
        Some(task.class_set.as_slice())
    } else {
        None
    }
}

/// Reconstruct a finished run's evaluation tasks from its config alone: the
/// domain transforms re-derive deterministically from the seed, so probes can
/// score a reloaded checkpoint on exactly the data the run was scored on.
/// Empty for the boundary-free setting, which has no task structure.
pub fn evaluation_tasks(config: &ExperimentConfig, mnist: &Mnist) -> Vec<TaskSpec> {
    let splitter = SeedSplitter::new(config.seed);
    match config.setting {
        Setting::SeqMnistClass | Setting::SeqMnistTask => sequential_stream(&mnist.test, 1).tasks,
        Setting::PermMnist | Setting::RotMnist => {
            let kind = if config.setting == Setting::PermMnist {
                DomainKind::Permuted
            } else {
                DomainKind::Rotated
            };
            let stream = domain_stream(
                &mnist.train,
                kind,
                DOMAIN_TASKS,
                config.epochs_per_task,
                &mut splitter.derive("stream"),
            );
            eval_tasks_for(config.setting, &stream, &mnist.test)
        }
        Setting::Mnist360 => Vec::new(),
    }
}

/// Whether a setting's primary scoring restricts the argmax to the task's
/// classes, exposed for probe tooling that mirrors run evaluation.
pub fn scoring_mask<'t>(setting: Setting, task: &'t TaskSpec) -> Option<&'t [usize]> {
    mask_for(task, setting.task_scoped_scoring())
}

/// Mean accuracy of `FWT_BASELINE_INITS` untrained models on each task — the
/// zero-knowledge reference that forward transfer is measured against.
fn random_baselines(
    models: &[DenseModel<f64>],
    eval_ds: &Dataset,
    tasks: &[TaskSpec],
    task_scoped: bool,
) -> Vec<f64> {
    tasks
        .iter()
        .map(|task| {
            let sum: f64 = models
                .iter()
                .map(|m| accuracy_on_task(m, eval_ds, task, mask_for(task, task_scoped)))
                .sum();
            sum / models.len() as f64
        })
        .collect()
}

/// The bounded-stream path: Sequential / Permuted / Rotated MNIST.
fn run_streamed_on(
    config: &ExperimentConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    splitter: &SeedSplitter,
    cadence: EvalCadence,
) -> Result<RunOutcome, RunError> {
    let classes = config.setting.classes();
    let model = DenseModel::mlp(classes, &mut splitter.derive("init"));
    let stream = match config.setting {
        Setting::SeqMnistClass | Setting::SeqMnistTask => {
            sequential_stream(train_ds, config.epochs_per_task)
        }
        Setting::PermMnist => domain_stream(
            train_ds,
            DomainKind::Permuted,
            DOMAIN_TASKS,
            config.epochs_per_task,
            &mut splitter.derive("stream"),
        ),
        Setting::RotMnist => domain_stream(
            train_ds,
            DomainKind::Rotated,
            DOMAIN_TASKS,
            config.epochs_per_task,
            &mut splitter.derive("stream"),
        ),
        Setting::Mnist360 => unreachable!("dispatched to the rotation-stream path"),
    };
    let batch = config.batch_size.unwrap_or(stream.batch_size);
    let t_count = stream.tasks.len();
    let eval_tasks = eval_tasks_for(config.setting, &stream, eval_ds);
    let task_scoped = config.setting.task_scoped_scoring();
    let joint = config.method.kind == MethodKind::Joint;

    let mut matrix = AccuracyMatrix::new(t_count);
    let mut companion = config
        .setting
        .is_sequential()
        .then(|| AccuracyMatrix::new(t_count));
    // The baseline models are only needed when the full matrix is collected;
    // the offline trainer has no per-task checkpoints, so forward transfer
    // is undefined there and the baselines would be dead weight.
    if cadence == EvalCadence::EveryTask && !joint {
        let models: Vec<DenseModel<f64>> = (0..FWT_BASELINE_INITS)
            .map(|k| DenseModel::mlp(classes, &mut splitter.derive_indexed("baseline", k as u64)))
            .collect();
        matrix.random_baseline = random_baselines(&models, eval_ds, &eval_tasks, task_scoped);
        if let Some(companion) = companion.as_mut() {
            companion.random_baseline =
                random_baselines(&models, eval_ds, &eval_tasks, !task_scoped);
        }
    }

    let evaluate_row = |matrix: &mut AccuracyMatrix,
                            companion: &mut Option<AccuracyMatrix>,
                            model: &DenseModel<f64>,
                            after_task: usize| {
        let upto = usize::min(after_task + 1, t_count - 1);
        for (i, task) in eval_tasks.iter().enumerate().take(upto + 1) {
            let acc = accuracy_on_task(model, eval_ds, task, mask_for(task, task_scoped));
            matrix.set(after_task, i, acc);
            if let Some(companion) = companion.as_mut() {
                let other = accuracy_on_task(model, eval_ds, task, mask_for(task, !task_scoped));
                companion.set(after_task, i, other);
            }
        }
    };

    if joint {
        let mut model = model;
        let plan = JointPlan::from_task_stream(&stream);
        train_joint(
            &mut model,
            train_ds,
            &plan,
            config.method.lr,
            batch,
            config.epochs_per_task,
            &mut splitter.derive("order"),
        );
        evaluate_row(&mut matrix, &mut companion, &model, t_count - 1);
        return Ok(RunOutcome {
            matrix,
            companion,
            model,
            buffer: None,
            rng_states: Vec::new(),
        });
    }

    let mut learner = build_learner(
        &config.method,
        model,
        config.buffer_size,
        batch,
        splitter.derive("replay"),
        splitter.derive("reservoir"),
    )?;
    for t_idx in 0..t_count {
        let task = &stream.tasks[t_idx];
        let mut order_rng = splitter.derive_indexed("order", task.task_id as u64);
        for _ in 0..task.epochs {
            for stream_batch in task_batches(train_ds, task, batch, &mut order_rng) {
                learner.observe(&stream_batch.observed());
            }
        }
        if stream.boundary_visible {
            learner.on_task_boundary(train_ds, task);
        }
        if cadence == EvalCadence::EveryTask || t_idx == t_count - 1 {
            evaluate_row(&mut matrix, &mut companion, learner.model(), t_idx);
        }
    }
    Ok(RunOutcome {
        matrix,
        companion,
        model: learner.model().clone(),
        buffer: learner.buffer().cloned(),
        rng_states: learner.rng_states(),
    })
}

/// The boundary-free path: train on the rotating stream, evaluate once at
/// the end (the protocol defines no mid-stream checkpoints).
fn run_mnist360_on(
    config: &ExperimentConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    splitter: &SeedSplitter,
) -> Result<RunOutcome, RunError> {
    let model = DenseModel::mlp(MNIST360_CLASSES, &mut splitter.derive("init"));
    let batch = config.batch_size.unwrap_or(MNIST360_BATCH);
    let mut stream_rng = splitter.derive("stream");
    let (model, buffer, rng_states) = if config.method.kind == MethodKind::Joint {
        let mut stream = Mnist360Stream::new(train_ds, MNIST360_ROUNDS, batch, &mut stream_rng);
        for _ in stream.by_ref() {}
        let plan = JointPlan::from_mnist360_manifest(&stream.into_manifest());
        let mut model = model;
        train_joint(
            &mut model,
            train_ds,
            &plan,
            config.method.lr,
            batch,
            1,
            &mut splitter.derive("order"),
        );
        (model, None, Vec::new())
    } else {
        let mut learner = build_learner(
            &config.method,
            model,
            config.buffer_size,
            batch,
            splitter.derive("replay"),
            splitter.derive("reservoir"),
        )?;
        let stream = Mnist360Stream::new(train_ds, MNIST360_ROUNDS, batch, &mut stream_rng);
        for stream_batch in stream {
            learner.observe(&stream_batch.observed());
        }
        (
            learner.model().clone(),
            learner.buffer().cloned(),
            learner.rng_states(),
        )
    };
    let accuracy = mnist360_accuracy(&model, mnist360_test_stream(eval_ds));
    let mut matrix = AccuracyMatrix::new(1);
    matrix.set(0, 0, accuracy);
    Ok(RunOutcome {
        matrix,
        companion: None,
        model,
        buffer,
        rng_states,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: [u8; 4] = *b"DCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// `<root>/<setting>/<method>/<buffer|none>/<seed>.json`.
pub fn record_path(root: &Path, config: &ExperimentConfig) -> PathBuf {
    let buffer = config
        .buffer_size
        .map_or_else(|| "none".to_string(), |b| b.to_string());
    root.join(config.setting.name())
        .join(config.method.kind.name())
        .join(buffer)
        .join(format!("{}.json", config.seed))
}

/// The checkpoint written beside a record.
pub fn checkpoint_path(record: &Path) -> PathBuf {
    record.with_extension("ckpt")
}

/// Canonical serialization of a record; reparsing and reserializing this
/// string reproduces it byte for byte.
pub fn record_json(record: &ResultsRecord) -> String {
    let mut json =
        serde_json::to_string_pretty(record).expect("record serialization cannot fail");
    json.push('\n');
    json
}

/// Write record (+ optional checkpoint) into the standard layout; returns
/// the record's path.
pub fn save_record(
    root: &Path,
    record: &ResultsRecord,
    checkpoint: Option<&Checkpoint>,
) -> Result<PathBuf, RunError> {
    let path = record_path(root, &record.config);
    let dir = path.parent().expect("record path always has a parent");
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    fs::write(&path, record_json(record)).map_err(|e| RunError::io(&path, e))?;
    if let Some(checkpoint) = checkpoint {
        write_checkpoint(&checkpoint_path(&path), checkpoint)?;
    }
    Ok(path)
}

pub fn load_record(path: &Path) -> Result<ResultsRecord, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let mut dims = vec![self.model.input_dim() as u32];
        for layer in self.model.layers() {
            dims.push(layer.output_dim() as u32);
        }
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let flat = self.model.flatten();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in &flat {
            w.write_all(&v.to_le_bytes())?;
        }
        match &self.buffer {
            Some(buffer) => {
                w.write_all(&[1])?;
                buffer.write_snapshot(w)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(self.rng_states.len() as u32).to_le_bytes())?;
        for state in &self.rng_states {
            w.write_all(&state.seed)?;
            w.write_all(&(state.word_pos as u64).to_le_bytes())?;
            w.write_all(&((state.word_pos >> 64) as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Checkpoint, RunError> {
        let corrupt = |reason: String| RunError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut magic = [0u8; 4];
        read_or(r, &mut magic, path, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt(format!("bad magic {magic:02x?}")));
        }
        let version = read_u32(r, path, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n_dims = read_u32(r, path, "layer count")? as usize;
        if n_dims < 2 || n_dims > 64 {
            return Err(corrupt(format!("implausible layer-dimension count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = read_u32(r, path, "layer dimension")? as usize;
            if d == 0 {
                return Err(corrupt("zero layer dimension".to_string()));
            }
            dims.push(d);
        }
        let expected: usize = dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        let param_count = read_u64(r, path, "parameter count")? as usize;
        if param_count != expected {
            return Err(corrupt(format!(
                "parameter count {param_count} does not match dims {dims:?} (expected {expected})"
            )));
        }
        let mut params = Vec::with_capacity(param_count);
        let mut buf = [0u8; 8];
        for _ in 0..param_count {
            read_or(r, &mut buf, path, "parameters")?;
            params.push(f64::from_le_bytes(buf));
        }
        let mut model = DenseModel::new(
            &dims,
            &mut restore_rng(&RngState {
                seed: [0; 32],
                word_pos: 0,
            }),
        );
        model.load_flat(&params);
        let mut flag = [0u8; 1];
        read_or(r, &mut flag, path, "buffer flag")?;
        let buffer = match flag[0] {
            0 => None,
            1 => Some(
                MemoryBuffer::read_snapshot(r)
                    .map_err(|e| corrupt(format!("buffer snapshot: {e}")))?,
            ),
            other => return Err(corrupt(format!("bad buffer flag {other}"))),
        };
        let n_rng = read_u32(r, path, "rng state count")? as usize;
        if n_rng > 16 {
            return Err(corrupt(format!("implausible rng state count {n_rng}")));
        }
        let mut rng_states = Vec::with_capacity(n_rng);
        for _ in 0..n_rng {
            let mut seed = [0u8; 32];
            read_or(r, &mut seed, path, "rng seed")?;
            let lo = read_u64(r, path, "rng position")?;
            let hi = read_u64(r, path, "rng position")?;
            rng_states.push(RngState {
                seed,
                word_pos: u128::from(lo) | (u128::from(hi) << 64),
            });
        }
        Ok(Checkpoint {
            model,
            buffer,
            rng_states,
        })
    }
}

fn read_or<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<(), RunError> {
    r.read_exact(buf).map_err(|e| RunError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: format!("truncated while reading {what}: {e}"),
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<u32, RunError> {
    let mut buf = [0u8; 4];
    read_or(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<u64, RunError> {
    let mut buf = [0u8; 8];
    read_or(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), RunError> {
    let mut bytes = Vec::new();
    checkpoint
        .write_to(&mut bytes)
        .expect("in-memory serialization cannot fail");
    fs::write(path, bytes).map_err(|e| RunError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, RunError> {
    let bytes = fs::read(path).map_err(|e| RunError::io(path, e))?;
    Checkpoint::read_from(&mut bytes.as_slice(), path)
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// One hyperparameter combination; `None` fields keep the base config's
/// value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub minibatch_size: Option<usize>,
}

impl GridPoint {
    pub fn lr(lr: f64) -> GridPoint {
        GridPoint {
            lr,
            alpha: None,
            beta: None,
            batch_size: None,
            minibatch_size: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> GridPoint {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_beta(mut self, beta: f64) -> GridPoint {
        self.beta = Some(beta);
        self
    }

    pub fn with_batch_size(mut self, batch: usize) -> GridPoint {
        self.batch_size = Some(batch);
        self
    }

    pub fn with_minibatch(mut self, minibatch: usize) -> GridPoint {
        self.minibatch_size = Some(minibatch);
        self
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut config = base.clone();
        config.method.lr = self.lr;
        if let Some(alpha) = self.alpha {
            config.method.alpha = alpha;
        }
        if let Some(beta) = self.beta {
            config.method.beta = beta;
        }
        if let Some(minibatch) = self.minibatch_size {
            config.method.minibatch_size = Some(minibatch);
        }
        if let Some(batch) = self.batch_size {
            config.batch_size = Some(batch);
        }
        config
    }
}

/// Winner of a grid search plus the per-point validation scores.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: ExperimentConfig,
    pub best_index: usize,
    /// Validation score of each searched point, in input order.
    pub scores: Vec<f64>,
}

/// `a` strictly beats `b`: higher score wins; exact score ties fall to the
/// lower learning rate, then lower α, then lower β.
fn grid_point_beats(score_a: f64, a: &GridPoint, score_b: f64, b: &GridPoint) -> bool {
    if score_a != score_b {
        return score_a > score_b;
    }
    let key = |p: &GridPoint| (p.lr, p.alpha.unwrap_or(0.0), p.beta.unwrap_or(0.0));
    key(a) < key(b)
}

/// Evaluate every point on a stratified validation split (never the test
/// set) and return the winner. Training for each point runs on the remaining
/// 90% under the base seed; selection is deterministic.
pub fn grid_search(
    base: &ExperimentConfig,
    points: &[GridPoint],
    mnist: &Mnist,
) -> Result<GridOutcome, RunError> {
    assert!(!points.is_empty(), "grid search needs at least one point");
    let mut split_rng = SeedSplitter::new(base.seed).derive("validation");
    let (train, validation) = split_validation(&mnist.train, VALIDATION_FRACTION, &mut split_rng);
    let scores = parallel_map(points.len(), |i| {
        let config = points[i].apply(base);
        config.validate()?;
        let splitter = SeedSplitter::new(config.seed);
        let outcome = run_on(
            &config,
            &train,
            &validation,
            &splitter,
            EvalCadence::FinalOnly,
        )?;
        outcome.selection_score()
    })?;
    let mut best_index = 0;
    for i in 1..points.len() {
        if grid_point_beats(scores[i], &points[i], scores[best_index], &points[best_index]) {
            best_index = i;
        }
    }
    Ok(GridOutcome {
        best: points[best_index].apply(base),
        best_index,
        scores,
    })
}

/// Cartesian product of per-axis values into grid points. Unused axes are
/// marked by a single sentinel (`NaN` for coefficients, `0` for sizes) and
/// come out as `None`.
fn product_grid(
    lrs: &[f64],
    alphas: &[f64],
    betas: &[f64],
    batches: &[usize],
    minibatches: &[usize],
) -> Vec<GridPoint> {
    let mut points = Vec::new();
    for &lr in lrs {
        for &alpha in alphas {
            for &beta in betas {
                for &batch in batches {
                    for &minibatch in minibatches {
                        points.push(GridPoint {
                            lr,
                            alpha: (!alpha.is_nan()).then_some(alpha),
                            beta: (!beta.is_nan()).then_some(beta),
                            batch_size: (batch > 0).then_some(batch),
                            minibatch_size: (minibatch > 0).then_some(minibatch),
                        });
                    }
                }
            }
        }
    }
    points
}

/// The documented search space for a method on a setting. Axes a method does
/// not use hold a single placeholder so the product stays degenerate.
pub fn default_grid(setting: Setting, kind: MethodKind) -> Vec<GridPoint> {
    // Sentinels: NaN = "axis unused" for coefficients, 0 = unused for sizes
    // (both are invalid as real values, so they cannot collide).
    const NONE_F: [f64; 1] = [f64::NAN];
    const NONE_U: [usize; 1] = [0];
    let (lrs, alphas, betas, batches, minibatches): (
        Vec<f64>,
        Vec<f64>,
        Vec<f64>,
        Vec<usize>,
        Vec<usize>,
    ) = match (setting, kind) {
        // -- sequential ----------------------------------------------------
        (Setting::SeqMnistClass | Setting::SeqMnistTask, MethodKind::Sgd | MethodKind::Joint) => {
            (vec![0.01, 0.03, 0.1], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::SeqMnistClass | Setting::SeqMnistTask, MethodKind::Er) => {
            (vec![0.01, 0.03, 0.1], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::SeqMnistClass | Setting::SeqMnistTask, MethodKind::AgemR) => {
            (vec![0.03, 0.1], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::SeqMnistClass | Setting::SeqMnistTask, MethodKind::Fdr | MethodKind::Der) => (
            vec![0.03, 0.1],
            vec![0.2, 0.5, 1.0],
            NONE_F.into(),
            NONE_U.into(),
            NONE_U.into(),
        ),
        (Setting::SeqMnistClass | Setting::SeqMnistTask, MethodKind::Derpp) => (
            vec![0.03, 0.1],
            vec![0.2, 0.5, 1.0],
            vec![0.2, 0.5, 1.0],
            NONE_U.into(),
            NONE_U.into(),
        ),
        // -- domain-incremental --------------------------------------------
        (Setting::PermMnist | Setting::RotMnist, MethodKind::Sgd | MethodKind::Joint) => {
            (vec![0.03, 0.1, 0.2], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::PermMnist, MethodKind::Er) => {
            (vec![0.03, 0.1, 0.2], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::RotMnist, MethodKind::Er) => {
            (vec![0.1, 0.2], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::PermMnist | Setting::RotMnist, MethodKind::AgemR) => {
            (vec![0.01, 0.1, 0.3], NONE_F.into(), NONE_F.into(), NONE_U.into(), NONE_U.into())
        }
        (Setting::PermMnist | Setting::RotMnist, MethodKind::Fdr) => (
            vec![0.1, 0.2],
            vec![0.3, 0.5, 1.0],
            NONE_F.into(),
            NONE_U.into(),
            NONE_U.into(),
        ),
        (Setting::PermMnist | Setting::RotMnist, MethodKind::Der) => (
            vec![0.1, 0.2],
            vec![0.5, 1.0],
            NONE_F.into(),
            NONE_U.into(),
            NONE_U.into(),
        ),
        (Setting::PermMnist | Setting::RotMnist, MethodKind::Derpp) => (
            vec![0.1, 0.2],
            vec![0.5, 1.0],
            vec![0.5, 1.0],
            NONE_U.into(),
            NONE_U.into(),
        ),
        // -- boundary-free -------------------------------------------------
        (Setting::Mnist360, MethodKind::Sgd | MethodKind::Joint) => (
            vec![0.1, 0.2],
            NONE_F.into(),
            NONE_F.into(),
            vec![1, 4, 8, 16],
            NONE_U.into(),
        ),
        (Setting::Mnist360, MethodKind::Er) => (
            vec![0.1, 0.2],
            NONE_F.into(),
            NONE_F.into(),
            vec![1, 4, 8, 16],
            vec![16, 64, 128],
        ),
        (Setting::Mnist360, MethodKind::AgemR) => (
            vec![0.1, 0.2],
            NONE_F.into(),
            NONE_F.into(),
            vec![1, 4, 16],
            vec![16, 64, 128],
        ),
        (Setting::Mnist360, MethodKind::Der) => (
            vec![0.1, 0.2],
            vec![0.5, 1.0],
            NONE_F.into(),
            vec![1, 4, 8, 16],
            vec![16, 64, 128],
        ),
        (Setting::Mnist360, MethodKind::Derpp) => (
            vec![0.1, 0.2],
            vec![0.2, 0.5],
            vec![0.5, 1.0],
            vec![1, 4, 8, 16],
            vec![16, 64, 128],
        ),
        (Setting::Mnist360, MethodKind::Fdr) => return Vec::new(),
    };
    product_grid(&lrs, &alphas, &betas, &batches, &minibatches)
}

// ---------------------------------------------------------------------------
// Multi-seed summaries
// ---------------------------------------------------------------------------

/// Mean and spread of one config across derived seeds.
#[derive(Debug, Clone)]
pub struct MultiSeedSummary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub stddev: Option<f64>,
    pub seeds: Vec<u64>,
    pub records: Vec<ResultsRecord>,
}

/// Run `n` seeds derived from the config's base seed (fanned out across
/// worker threads; each run is internally sequential), optionally persisting
/// each record under `results_root`.
pub fn multi_seed(
    config: &ExperimentConfig,
    n: usize,
    mnist: &Mnist,
    cadence: EvalCadence,
    results_root: Option<&Path>,
) -> Result<MultiSeedSummary, RunError> {
    assert!(n >= 1, "multi-seed summaries need at least one run");
    let base = SeedSplitter::new(config.seed);
    let seeds: Vec<u64> = (0..n).map(|i| base.derive_seed("seed", i as u64)).collect();
    let records = parallel_map(n, |i| {
        let mut seeded = config.clone();
        seeded.seed = seeds[i];
        let (record, checkpoint) = run_with(&seeded, mnist, cadence)?;
        if let Some(root) = results_root {
            save_record(root, &record, Some(&checkpoint))?;
        }
        Ok(record)
    })?;
    let finals: Vec<f64> = records.iter().map(|r| r.final_avg_accuracy).collect();
    let mean = finals.iter().sum::<f64>() / n as f64;
    let stddev = (n >= 2).then(|| {
        let ss: f64 = finals.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(MultiSeedSummary {
        mean,
        stddev,
        seeds,
        records,
    })
}

/// Run `f(0..n)` across as many worker threads as the host offers (capped at
/// `n`), preserving input order in the output.
fn parallel_map<T, F>(n: usize, f: F) -> Result<Vec<T>, RunError>
where
    T: Send,
    F: Fn(usize) -> Result<T, RunError> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|c| c.get())
        .unwrap_or(1)
        .min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T, RunError>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = f(i);
                *slots[i].lock().expect("no panics while holding the slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("worker panicked")
                .expect("every slot was filled")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Flatten one record into exportable metric rows.
pub fn record_rows(record: &ResultsRecord) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64| MetricRow {
        method: record.config.method.kind.name().to_string(),
        setting: record.config.setting.name().to_string(),
        buffer: record.config.buffer_size,
        seed: record.config.seed,
        metric: metric.to_string(),
        value,
    };
    let mut rows = vec![row("final_avg_accuracy", record.final_avg_accuracy)];
    if let Some(v) = record.companion_final_avg {
        rows.push(row("companion_final_avg", v));
    }
    if let Some(v) = record.backward_transfer {
        rows.push(row("backward_transfer", v));
    }
    if let Some(v) = record.forward_transfer {
        rows.push(row("forward_transfer", v));
    }
    if let Some(v) = record.forgetting {
        rows.push(row("forgetting", v));
    }
    rows
}

/// Machine-readable export: raw fractional metrics, one row per scalar.
pub fn render_csv(records: &[ResultsRecord]) -> String {
    let rows: Vec<MetricRow> = records.iter().flat_map(record_rows).collect();
    let mut out = Vec::new();
    write_metrics_csv(&mut out, &rows).expect("in-memory write cannot fail");
    String::from_utf8(out).expect("csv output is ascii")
}

/// Human-readable export: per-(setting, method, buffer) mean ± sample stddev
/// of final accuracy, in percent.
pub fn render_markdown(records: &[ResultsRecord]) -> String {
    let mut groups: BTreeMap<(String, String, Option<usize>), Vec<f64>> = BTreeMap::new();
    for record in records {
        groups
            .entry((
                record.config.setting.name().to_string(),
                record.config.method.kind.name().to_string(),
                record.config.buffer_size,
            ))
            .or_default()
            .push(record.final_avg_accuracy);
    }
    let mut out = String::from(
        "| setting | method | buffer | seeds | final accuracy (%) |\n|---|---|---|---|---|\n",
    );
    for ((setting, method, buffer), finals) in &groups {
        let n = finals.len();
        let mean = 100.0 * finals.iter().sum::<f64>() / n as f64;
        let cell = if n >= 2 {
            let m = mean / 100.0;
            let ss: f64 = finals.iter().map(|v| (v - m) * (v - m)).sum();
            let sd = 100.0 * (ss / (n - 1) as f64).sqrt();
            format!("{mean:.2} ± {sd:.2}")
        } else {
            format!("{mean:.2}")
        };
        let buffer = buffer.map_or_else(|| "–".to_string(), |b| b.to_string());
        out.push_str(&format!(
            "| {setting} | {method} | {buffer} | {n} | {cell} |\n"
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Tuned defaults
// ---------------------------------------------------------------------------

/// The hyperparameters each method ships with, per setting and buffer size —
/// the outcome of validation grid search over [`default_grid`]. `None` when
/// the combination is unsupported.
pub fn tuned_defaults(
    setting: Setting,
    kind: MethodKind,
    buffer: Option<usize>,
) -> Option<ExperimentConfig> {
    use MethodKind::*;
    use Setting::*;
    let base = |
        lr: f64,
        alpha: Option<f64>,
        beta: Option<f64>,
        batch: Option<usize>,
        minibatch: Option<usize>,
    | -> ExperimentConfig {
        let mut method = MethodConfig::new(kind, lr);
        if let Some(a) = alpha {
            method = method.with_alpha(a);
        }
        if let Some(b) = beta {
            method = method.with_beta(b);
        }
        if let Some(m) = minibatch {
            method = method.with_minibatch(m);
        }
        let mut config = ExperimentConfig::new(setting, method);
        config.buffer_size = buffer;
        config.batch_size = batch;
        config
    };
    let plain = |lr: f64| base(lr, None, None, None, None);
    let with_alpha = |lr: f64, alpha: f64| base(lr, Some(alpha), None, None, None);
    let with_beta = |lr: f64, alpha: f64, beta: f64| base(lr, Some(alpha), Some(beta), None, None);
    let seq = matches!(setting, SeqMnistClass | SeqMnistTask);
    let key = if seq { SeqMnistClass } else { setting };
    Some(match (key, kind, buffer) {
        // -- sequential ----------------------------------------------------
        (SeqMnistClass, Sgd, None) => plain(0.03),
        (SeqMnistClass, Joint, None) => plain(0.1),
        (SeqMnistClass, Er, Some(200)) => plain(0.01),
        (SeqMnistClass, Er, Some(500 | 5120)) => plain(0.1),
        (SeqMnistClass, AgemR, Some(200 | 500 | 5120)) => plain(0.1),
        (SeqMnistClass, Fdr, Some(200)) => with_alpha(0.03, 0.5),
        (SeqMnistClass, Fdr, Some(500 | 5120)) => with_alpha(0.1, 0.2),
        (SeqMnistClass, Der, Some(200)) => with_alpha(0.03, 0.2),
        (SeqMnistClass, Der, Some(500)) => with_alpha(0.03, 1.0),
        (SeqMnistClass, Der, Some(5120)) => with_alpha(0.1, 0.5),
        (SeqMnistClass, Derpp, Some(200)) => with_beta(0.03, 0.2, 1.0),
        (SeqMnistClass, Derpp, Some(500)) => with_beta(0.03, 1.0, 0.5),
        (SeqMnistClass, Derpp, Some(5120)) => with_beta(0.1, 0.2, 0.5),
        // -- permuted ------------------------------------------------------
        (PermMnist, Sgd, None) => plain(0.2),
        (PermMnist, Joint, None) => plain(0.2),
        (PermMnist, Er, Some(200 | 500 | 5120)) => plain(0.2),
        (PermMnist, AgemR, Some(200 | 500 | 5120)) => plain(0.1),
        (PermMnist, Fdr, Some(200)) => with_alpha(0.1, 1.0),
        (PermMnist, Fdr, Some(500)) => with_alpha(0.1, 0.3),
        (PermMnist, Fdr, Some(5120)) => with_alpha(0.1, 1.0),
        (PermMnist, Der, Some(200 | 500)) => with_alpha(0.2, 1.0),
        (PermMnist, Der, Some(5120)) => with_alpha(0.2, 0.5),
        (PermMnist, Derpp, Some(200)) => with_beta(0.1, 1.0, 1.0),
        (PermMnist, Derpp, Some(500)) => with_beta(0.2, 1.0, 0.5),
        (PermMnist, Derpp, Some(5120)) => with_beta(0.2, 0.5, 1.0),
        // -- rotated -------------------------------------------------------
        (RotMnist, Sgd, None) => plain(0.2),
        (RotMnist, Joint, None) => plain(0.2),
        (RotMnist, Er, Some(200 | 500 | 5120)) => plain(0.2),
        (RotMnist, AgemR, Some(200)) => plain(0.1),
        (RotMnist, AgemR, Some(500 | 5120)) => plain(0.3),
        (RotMnist, Fdr, Some(200)) => with_alpha(0.1, 1.0),
        (RotMnist, Fdr, Some(500)) => with_alpha(0.2, 0.3),
        (RotMnist, Fdr, Some(5120)) => with_alpha(0.2, 1.0),
        (RotMnist, Der, Some(200)) => with_alpha(0.2, 1.0),
        (RotMnist, Der, Some(500 | 5120)) => with_alpha(0.2, 0.5),
        (RotMnist, Derpp, Some(200)) => with_beta(0.1, 1.0, 0.5),
        (RotMnist, Derpp, Some(500)) => with_beta(0.2, 0.5, 1.0),
        (RotMnist, Derpp, Some(5120)) => with_beta(0.2, 0.5, 0.5),
        // -- boundary-free -------------------------------------------------
        (Mnist360, Sgd, None) => base(0.1, None, None, Some(4), None),
        (Mnist360, Joint, None) => base(0.1, None, None, Some(16), None),
        (Mnist360, Er, Some(200 | 500)) => base(0.2, None, None, Some(1), Some(16)),
        (Mnist360, Er, Some(1000)) => base(0.2, None, None, Some(4), Some(16)),
        (Mnist360, AgemR, Some(200 | 500)) => base(0.1, None, None, Some(16), Some(128)),
        (Mnist360, AgemR, Some(1000)) => base(0.1, None, None, Some(4), Some(128)),
        (Mnist360, Der, Some(200)) => base(0.1, Some(0.5), None, Some(16), Some(64)),
        (Mnist360, Der, Some(500)) => base(0.2, Some(0.5), None, Some(16), Some(16)),
        (Mnist360, Der, Some(1000)) => base(0.1, Some(0.5), None, Some(8), Some(16)),
        (Mnist360, Derpp, Some(200 | 500)) => base(0.2, Some(0.5), Some(1.0), Some(16), Some(16)),
        (Mnist360, Derpp, Some(1000)) => base(0.2, Some(0.2), Some(1.0), Some(16), Some(128)),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn der_config() -> ExperimentConfig {
        ExperimentConfig::new(
            Setting::SeqMnistClass,
            MethodConfig::new(MethodKind::Der, 0.03).with_alpha(0.2),
        )
        .with_buffer(200)
    }

    #[test]
    fn setting_names_roundtrip() {
        for setting in Setting::ALL {
            assert_eq!(Setting::parse(setting.name()).unwrap(), setting);
        }
        assert!(Setting::parse("cifar10").is_err());
        assert_eq!(
            serde_json::to_string(&Setting::SeqMnistTask).unwrap(),
            "\"seq_mnist_task\""
        );
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        assert!(der_config().validate().is_ok());

        let mut fdr360 = der_config();
        fdr360.setting = Setting::Mnist360;
        fdr360.method.kind = MethodKind::Fdr;
        assert!(matches!(
            fdr360.validate(),
            Err(ConfigError::FdrOnMnist360)
        ));

        let mut big360 = der_config();
        big360.setting = Setting::Mnist360;
        big360.buffer_size = Some(5120);
        assert!(matches!(
            big360.validate(),
            Err(ConfigError::UnsupportedBufferSizeMnist360(5120))
        ));

        let mut odd = der_config();
        odd.buffer_size = Some(300);
        assert!(matches!(
            odd.validate(),
            Err(ConfigError::UnsupportedBufferSize(300))
        ));

        let mut sgd_buf = der_config();
        sgd_buf.method = MethodConfig::new(MethodKind::Sgd, 0.1);
        assert!(matches!(
            sgd_buf.validate(),
            Err(ConfigError::BufferOnBufferless { .. })
        ));

        let mut no_buf = der_config();
        no_buf.buffer_size = None;
        assert!(matches!(
            no_buf.validate(),
            Err(ConfigError::MissingBuffer { .. })
        ));

        let mut multi360 = der_config();
        multi360.setting = Setting::Mnist360;
        multi360.epochs_per_task = 3;
        assert!(matches!(
            multi360.validate(),
            Err(ConfigError::Mnist360SingleEpoch(3))
        ));
    }

    #[test]
    fn record_paths_follow_the_layout() {
        let root = Path::new("results");
        let path = record_path(root, &der_config().with_seed(7));
        assert_eq!(
            path,
            Path::new("results/seq_mnist_class/der/200/7.json")
        );
        let sgd = ExperimentConfig::new(
            Setting::Mnist360,
            MethodConfig::new(MethodKind::Sgd, 0.1),
        );
        assert_eq!(
            record_path(root, &sgd),
            Path::new("results/mnist360/sgd/none/0.json")
        );
        assert_eq!(
            checkpoint_path(&path),
            Path::new("results/seq_mnist_class/der/200/7.ckpt")
        );
    }

    #[test]
    fn tie_breaking_prefers_lower_rates() {
        let a = GridPoint::lr(0.03).with_alpha(0.2);
        let b = GridPoint::lr(0.1).with_alpha(0.2);
        assert!(grid_point_beats(0.9, &a, 0.9, &b));
        assert!(!grid_point_beats(0.9, &b, 0.9, &a));
        assert!(grid_point_beats(0.91, &b, 0.9, &a));
        let c = GridPoint::lr(0.03).with_alpha(0.5);
        assert!(grid_point_beats(0.9, &a, 0.9, &c));
    }

    #[test]
    fn default_grids_match_the_documented_spaces() {
        let sgd = default_grid(Setting::SeqMnistClass, MethodKind::Sgd);
        assert_eq!(sgd.len(), 3);
        assert!(sgd.iter().all(|p| p.alpha.is_none() && p.beta.is_none()));

        let der = default_grid(Setting::SeqMnistClass, MethodKind::Der);
        assert_eq!(der.len(), 6);
        assert!(der.iter().all(|p| p.alpha.is_some() && p.beta.is_none()));

        let derpp = default_grid(Setting::SeqMnistClass, MethodKind::Derpp);
        assert_eq!(derpp.len(), 18);

        let derpp360 = default_grid(Setting::Mnist360, MethodKind::Derpp);
        assert_eq!(derpp360.len(), 2 * 2 * 2 * 4 * 3);
        assert!(derpp360
            .iter()
            .all(|p| p.batch_size.is_some() && p.minibatch_size.is_some()));

        assert!(default_grid(Setting::Mnist360, MethodKind::Fdr).is_empty());
    }

    #[test]
    fn tuned_defaults_spot_checks() {
        let der = tuned_defaults(Setting::SeqMnistClass, MethodKind::Der, Some(200)).unwrap();
        assert_eq!(der.method.lr, 0.03);
        assert_eq!(der.method.alpha, 0.2);

        let derpp = tuned_defaults(Setting::Mnist360, MethodKind::Derpp, Some(1000)).unwrap();
        assert_eq!(derpp.method.lr, 0.2);
        assert_eq!(derpp.method.alpha, 0.2);
        assert_eq!(derpp.method.beta, 1.0);
        assert_eq!(derpp.batch_size, Some(16));
        assert_eq!(derpp.method.minibatch_size, Some(128));

        let task = tuned_defaults(Setting::SeqMnistTask, MethodKind::Der, Some(500)).unwrap();
        assert_eq!(task.setting, Setting::SeqMnistTask);
        assert_eq!(task.method.alpha, 1.0);

        assert!(tuned_defaults(Setting::Mnist360, MethodKind::Fdr, Some(200)).is_none());
        assert!(tuned_defaults(Setting::Mnist360, MethodKind::Der, Some(5120)).is_none());
        assert!(tuned_defaults(Setting::PermMnist, MethodKind::Der, None).is_none());

        // Every tuned rehearsal config passes validation.
        for setting in Setting::ALL {
            for kind in MethodKind::ALL {
                for buffer in [None, Some(200), Some(500), Some(1000), Some(5120)] {
                    if let Some(config) = tuned_defaults(setting, kind, buffer) {
                        config.validate().unwrap_or_else(|e| {
                            panic!("tuned {setting}/{kind} {buffer:?} invalid: {e}")
                        });
                    }
                }
            }
        }
    }

    #[test]
    fn markdown_report_groups_and_formats() {
        let mut record = ResultsRecord {
            config: der_config().with_seed(1),
            accuracy_matrix: AccuracyMatrix::new(1),
            companion_matrix: None,
            final_avg_accuracy: 0.8,
            companion_final_avg: None,
            backward_transfer: None,
            forward_transfer: None,
            forgetting: None,
            wall_time_secs: 1.0,
            artifact_version: "test".to_string(),
            rng_trace_digest: "0".to_string(),
        };
        let mut second = record.clone();
        second.config.seed = 2;
        second.final_avg_accuracy = 0.9;
        record.accuracy_matrix.set(0, 0, 0.8);
        let md = render_markdown(&[record.clone(), second]);
        assert!(md.contains("| seq_mnist_class | der | 200 | 2 | 85.00 ± 7.07 |"));

        let csv = render_csv(&[record]);
        assert!(csv.starts_with("method,setting,buffer,seed,metric,value\n"));
        assert!(csv.contains("der,seq_mnist_class,200,1,final_avg_accuracy,0.8"));
    }
}
