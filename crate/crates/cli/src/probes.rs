//! Post-hoc analyses over saved runs.
//!
//! Each probe reloads a record + checkpoint pair and interrogates the
//! trained model or its replay memory without retraining the run itself:
//! calibration on the evaluation data, curvature (Fisher trace, flatness
//! under parameter noise) on the training data the model was fit to, and the
//! informativeness of the replay memory (retrain from scratch on it, or
//! fine-tune toward one task from a handful of labels).
//!
//! Probes are deterministic per record: any randomness they spend comes from
//! streams derived from the record's own seed, under labels distinct from
//! the ones training used.

use std::io::Write;
use std::path::{Path, PathBuf};

use derbench_core::data::{apply_transform_into, Dataset, Mnist, Transform, IMAGE_PIXELS};
use derbench_core::error::RunError;
use derbench_core::harness::{
    checkpoint_path, evaluation_tasks, load_mnist_for, load_record, read_checkpoint, scoring_mask,
    Checkpoint, ExperimentConfig, Setting,
};
use derbench_core::metrics::{
    accuracy_on_task, buffer_finetune_probe, calibration_from_scores, calibration_scores,
    ece_over_tasks, fisher_trace, flatness_probe, mnist360_accuracy, retrain_from_buffer,
    write_flatness_gnuplot, write_reliability_gnuplot, CalibrationReport, EVAL_CHUNK,
    FLATNESS_DRAWS, FLATNESS_SIGMAS,
};
use derbench_core::rng::SeedSplitter;
use derbench_core::streams::{
    domain_stream, materialize, mnist360_test_stream, sequential_stream, DomainKind,
    Mnist360Stream, TaskSpec, DOMAIN_TASKS, MNIST360_ROUNDS,
};
use derbench_core::{Matrix, Model};
use serde_json::{json, Value};

use crate::{CliError, ProbeKind};

/// Probes sample at most this many examples, evenly strided across the data.
pub const PROBE_SAMPLE_CAP: usize = 10_000;

/// Equal-width confidence bins used by the calibration probe.
pub const ECE_BINS: usize = 10;

/// Knobs for the probes that perform SGD (retrain and fine-tune).
#[derive(Debug, Clone, Copy)]
pub struct ProbeParams {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub per_class: usize,
}

/// Reload the record at `record_path` (and its sibling checkpoint) and run
/// one probe over it, returning the probe's JSON report.
pub fn run_probe(
    record_path: &Path,
    kind: ProbeKind,
    data_dir: Option<PathBuf>,
    params: &ProbeParams,
    gnuplot: Option<&Path>,
) -> Result<Value, CliError> {
    let record = load_record(record_path)?;
    let mut config = record.config;
    if let Some(dir) = data_dir {
        config.data_dir = Some(dir);
    }
    let checkpoint = read_checkpoint(&checkpoint_path(record_path))?;
    let mnist = load_mnist_for(&config)?;
    match kind {
        ProbeKind::Ece => ece_probe(&config, &checkpoint.model, &mnist, gnuplot),
        ProbeKind::Fisher => fisher_probe(&config, &checkpoint.model, &mnist),
        ProbeKind::Flatness => flatness_curve_probe(&config, &checkpoint.model, &mnist, gnuplot),
        ProbeKind::BufferRetrain => retrain_probe(&config, &checkpoint, &mnist, params),
        ProbeKind::BufferFinetune => finetune_probe(&config, &checkpoint.model, &mnist, params),
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Thin `tasks` with one global stride so their union holds at most `cap`
/// examples while every task keeps its proportional share.
fn strided_tasks(tasks: &[TaskSpec], cap: usize) -> Vec<TaskSpec> {
    let total: usize = tasks.iter().map(|t| t.example_indices.len()).sum();
    let stride = total.div_ceil(cap).max(1);
    tasks
        .iter()
        .map(|t| TaskSpec {
            example_indices: t.example_indices.iter().copied().step_by(stride).collect(),
            ..t.clone()
        })
        .collect()
}

/// Materialize the tasks' transformed examples into one dense block.
fn task_block(ds: &Dataset, tasks: &[TaskSpec]) -> (Matrix, Vec<usize>) {
    let n: usize = tasks.iter().map(|t| t.example_indices.len()).sum();
    let mut inputs = Matrix::zeros(n, IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for task in tasks {
        for chunk in task.example_indices.chunks(EVAL_CHUNK) {
            let (block, block_labels) = materialize(ds, chunk, &task.transform);
            for r in 0..block.rows() {
                inputs.row_mut(row).copy_from_slice(block.row(r));
                row += 1;
            }
            labels.extend(block_labels);
        }
    }
    (inputs, labels)
}

/// The training tasks the run saw, re-derived from the config's seed (the
/// domain transforms come back identical because they are drawn from the
/// same labeled stream).
fn training_tasks(config: &ExperimentConfig, mnist: &Mnist) -> Vec<TaskSpec> {
    let splitter = SeedSplitter::new(config.seed);
    match config.setting {
        Setting::SeqMnistClass | Setting::SeqMnistTask => {
            sequential_stream(&mnist.train, config.epochs_per_task).tasks
        }
        Setting::PermMnist => {
            domain_stream(
                &mnist.train,
                DomainKind::Permuted,
                DOMAIN_TASKS,
                config.epochs_per_task,
                &mut splitter.derive("stream"),
            )
            .tasks
        }
        Setting::RotMnist => {
            domain_stream(
                &mnist.train,
                DomainKind::Rotated,
                DOMAIN_TASKS,
                config.epochs_per_task,
                &mut splitter.derive("stream"),
            )
            .tasks
        }
        Setting::Mnist360 => Vec::new(),
    }
}

/// Strided block of the run's training data for the curvature probes: the
/// task union for the bounded streams, or a replay of the boundary-free
/// stream's manifest with each entry's rotation re-applied.
fn curvature_block(config: &ExperimentConfig, mnist: &Mnist) -> (Matrix, Vec<usize>) {
    match config.setting {
        Setting::Mnist360 => mnist360_train_block(config, mnist, PROBE_SAMPLE_CAP),
        _ => {
            let tasks = strided_tasks(&training_tasks(config, mnist), PROBE_SAMPLE_CAP);
            task_block(&mnist.train, &tasks)
        }
    }
}

fn mnist360_train_block(
    config: &ExperimentConfig,
    mnist: &Mnist,
    cap: usize,
) -> (Matrix, Vec<usize>) {
    let splitter = SeedSplitter::new(config.seed);
    let mut stream_rng = splitter.derive("stream");
    let mut stream = Mnist360Stream::new(
        &mnist.train,
        MNIST360_ROUNDS,
        config.resolved_batch_size(),
        &mut stream_rng,
    );
    for _ in stream.by_ref() {}
    let manifest = stream.into_manifest();
    let stride = manifest.len().div_ceil(cap).max(1);
    let kept: Vec<_> = manifest.iter().step_by(stride).collect();
    let mut inputs = Matrix::zeros(kept.len(), IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(kept.len());
    for (r, entry) in kept.iter().enumerate() {
        apply_transform_into(
            mnist.train.image(entry.example as usize),
            &Transform::Rotation(entry.angle),
            inputs.row_mut(r),
        );
        labels.push(entry.digit as usize);
    }
    (inputs, labels)
}

/// The rotated test pass of the boundary-free protocol, materialized.
fn mnist360_test_block(ds: &Dataset) -> (Matrix, Vec<usize>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (image, label, _angle) in mnist360_test_stream(ds) {
        data.extend_from_slice(&image);
        labels.push(label);
    }
    (Matrix::from_vec(labels.len(), IMAGE_PIXELS, data), labels)
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

fn ece_probe(
    config: &ExperimentConfig,
    model: &Model,
    mnist: &Mnist,
    gnuplot: Option<&Path>,
) -> Result<Value, CliError> {
    let (examples, report) = match config.setting {
        Setting::Mnist360 => {
            let (inputs, labels) = mnist360_test_block(&mnist.test);
            (labels.len(), chunked_calibration(model, &inputs, &labels))
        }
        _ => {
            let tasks = strided_tasks(&evaluation_tasks(config, mnist), PROBE_SAMPLE_CAP);
            let n = tasks.iter().map(|t| t.example_indices.len()).sum();
            (n, ece_over_tasks(model, &mnist.test, &tasks, ECE_BINS))
        }
    };
    if let Some(path) = gnuplot {
        write_curve_file(path, |w| write_reliability_gnuplot(w, &report))?;
    }
    Ok(json!({
        "probe": "ece",
        "examples": examples,
        "report": report,
    }))
}

fn chunked_calibration(model: &Model, inputs: &Matrix, labels: &[usize]) -> CalibrationReport {
    let cols = inputs.cols();
    let mut confidence = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    let mut start = 0;
    while start < labels.len() {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let view = Matrix::from_vec(
            end - start,
            cols,
            inputs.data()[start * cols..end * cols].to_vec(),
        );
        let (c, ok) = calibration_scores(model, &view, &labels[start..end]);
        confidence.extend(c);
        correct.extend(ok);
        start = end;
    }
    calibration_from_scores(&confidence, &correct, ECE_BINS)
}

fn fisher_probe(
    config: &ExperimentConfig,
    model: &Model,
    mnist: &Mnist,
) -> Result<Value, CliError> {
    let (inputs, labels) = curvature_block(config, mnist);
    let trace = fisher_trace(model, &inputs, &labels);
    Ok(json!({
        "probe": "fisher",
        "examples": labels.len(),
        "fisher_trace": trace,
    }))
}

fn flatness_curve_probe(
    config: &ExperimentConfig,
    model: &Model,
    mnist: &Mnist,
    gnuplot: Option<&Path>,
) -> Result<Value, CliError> {
    let (inputs, labels) = curvature_block(config, mnist);
    let mut rng = SeedSplitter::new(config.seed).derive("flatness");
    let curve = flatness_probe(model, &inputs, &labels, &FLATNESS_SIGMAS, FLATNESS_DRAWS, &mut rng);
    if let Some(path) = gnuplot {
        write_curve_file(path, |w| write_flatness_gnuplot(w, &curve))?;
    }
    Ok(json!({
        "probe": "flatness",
        "examples": labels.len(),
        "draws": FLATNESS_DRAWS,
        "curve": curve,
    }))
}

fn retrain_probe(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    mnist: &Mnist,
    params: &ProbeParams,
) -> Result<Value, CliError> {
    let buffer = checkpoint.buffer.as_ref().ok_or_else(|| {
        CliError::Unsupported(
            "record has no replay memory; the retrain probe needs a rehearsal method's checkpoint"
                .into(),
        )
    })?;
    let splitter = SeedSplitter::new(config.seed);
    let fresh = Model::mlp(config.setting.classes(), &mut splitter.derive("retrain_init"));
    let trained = retrain_from_buffer(
        fresh,
        buffer,
        params.lr,
        params.batch,
        params.epochs,
        &mut splitter.derive("retrain"),
    )?;
    let (per_task, mean) = match config.setting {
        Setting::Mnist360 => {
            let acc = mnist360_accuracy(&trained, mnist360_test_stream(&mnist.test));
            (vec![acc], acc)
        }
        _ => {
            let tasks = evaluation_tasks(config, mnist);
            let per: Vec<f64> = tasks
                .iter()
                .map(|t| accuracy_on_task(&trained, &mnist.test, t, scoring_mask(config.setting, t)))
                .collect();
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            (per, mean)
        }
    };
    Ok(json!({
        "probe": "buffer-retrain",
        "memory_examples": buffer.len(),
        "per_task": per_task,
        "mean_accuracy": mean,
    }))
}

fn finetune_probe(
    config: &ExperimentConfig,
    model: &Model,
    mnist: &Mnist,
    params: &ProbeParams,
) -> Result<Value, CliError> {
    if config.setting == Setting::Mnist360 {
        return Err(CliError::Unsupported(
            "the boundary-free stream has no per-task structure to fine-tune against".into(),
        ));
    }
    let splitter = SeedSplitter::new(config.seed);
    let tasks = evaluation_tasks(config, mnist);
    let mut per_task = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let mut rng = splitter.derive_indexed("finetune", t as u64);
        per_task.push(buffer_finetune_probe(
            model,
            &mnist.test,
            task,
            params.per_class,
            params.lr,
            params.batch,
            params.epochs,
            &mut rng,
        )?);
    }
    let n = per_task.len() as f64;
    let mean_before = per_task.iter().map(|o| o.before).sum::<f64>() / n;
    let mean_after = per_task.iter().map(|o| o.after).sum::<f64>() / n;
    Ok(json!({
        "probe": "buffer-finetune",
        "per_class": params.per_class,
        "per_task": per_task,
        "mean_before": mean_before,
        "mean_after": mean_after,
    }))
}

fn write_curve_file(
    path: &Path,
    emit: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| RunError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    emit(&mut w).map_err(|e| RunError::io(path, e))?;
    w.flush().map_err(|e| RunError::io(path, e))?;
    Ok(())
}
