//! Evaluation: accuracy matrices, transfer metrics, calibration, curvature
//! and memory-informativeness probes, plus the plain-text emitters for
//! downstream plotting.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::RunError;
use crate::nn::{
    backward_into, cross_entropy, softmax, DenseMatrix, DenseModel, ForwardCache, GradientBundle,
    LossSpec, LossTargets,
};
use crate::rng::ComponentRng;
use crate::streams::{materialize, Mnist360TestStream, TaskSpec};

/// Rows-per-forward ceiling for all chunked evaluation passes.
pub const EVAL_CHUNK: usize = 512;

// ---------------------------------------------------------------------------
// Accuracy bookkeeping
// ---------------------------------------------------------------------------

/// Accuracy history over a run: `cell(t, i)` is accuracy on task `i`'s test
/// data measured after finishing training task `t`. The filled region is the
/// lower triangle plus the superdiagonal — after task `t` we also peek at the
/// next, still-untrained task, which is what forward transfer compares
/// against the random baseline `b_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
    pub random_baseline: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(task_count: usize) -> Self {
        AccuracyMatrix {
            cells: vec![vec![None; task_count]; task_count],
            random_baseline: vec![0.0; task_count],
        }
    }

    pub fn task_count(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, after_task: usize, on_task: usize, accuracy: f64) {
        assert!(
            (0.0..=1.0).contains(&accuracy),
            "accuracy {accuracy} outside [0,1]"
        );
        self.cells[after_task][on_task] = Some(accuracy);
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> Option<f64> {
        self.cells[after_task][on_task]
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    /// True when every lower-triangle cell (`i ≤ t`) holds a value.
    pub fn is_lower_triangle_complete(&self) -> bool {
        self.cells
            .iter()
            .enumerate()
            .all(|(t, row)| row.iter().take(t + 1).all(Option::is_some))
    }

    /// Mean accuracy over all tasks at the end of training.
    pub fn final_average(&self) -> Result<f64, RunError> {
        let t = self.task_count();
        if t == 0 {
            return Err(RunError::MetricUndefined(
                "final average needs at least one task".into(),
            ));
        }
        let last = &self.cells[t - 1];
        let mut sum = 0.0;
        for (i, cell) in last.iter().enumerate() {
            sum += cell.ok_or_else(|| {
                RunError::MetricUndefined(format!("final accuracy on task {i} missing"))
            })?;
        }
        Ok(sum / t as f64)
    }
}

fn require(matrix: &AccuracyMatrix, t: usize, i: usize) -> Result<f64, RunError> {
    matrix.get(t, i).ok_or_else(|| {
        RunError::MetricUndefined(format!("accuracy cell (after {t}, on {i}) missing"))
    })
}

fn require_multitask(matrix: &AccuracyMatrix) -> Result<usize, RunError> {
    let t = matrix.task_count();
    if t < 2 {
        Err(RunError::MetricUndefined(format!(
            "transfer metrics need at least 2 tasks, got {t}"
        )))
    } else {
        Ok(t)
    }
}

/// Mean end-of-run accuracy change on every task trained before the last
/// one: mean over `i < T−1` of `A[T−1][i] − A[i][i]`. Negative values mean
/// the final model lost ground on earlier tasks.
pub fn backward_transfer(matrix: &AccuracyMatrix) -> Result<f64, RunError> {
    let t = require_multitask(matrix)?;
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += require(matrix, t - 1, i)? - require(matrix, i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// Mean gap between each early task's best-ever accuracy and its final
/// accuracy: mean over `i < T−1` of `max_{t ≥ i} A[t][i] − A[T−1][i]`.
/// Always non-negative.
pub fn forgetting(matrix: &AccuracyMatrix) -> Result<f64, RunError> {
    let t = require_multitask(matrix)?;
    let mut sum = 0.0;
    for i in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for row in i..t {
            best = best.max(require(matrix, row, i)?);
        }
        sum += best - require(matrix, t - 1, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// Mean zero-shot advantage on each not-yet-trained task: mean over `i ≥ 1`
/// of `A[i−1][i] − b_i`, where `b_i` is the stored random-initialization
/// baseline.
pub fn forward_transfer(matrix: &AccuracyMatrix) -> Result<f64, RunError> {
    let t = require_multitask(matrix)?;
    let mut sum = 0.0;
    for i in 1..t {
        sum += require(matrix, i - 1, i)? - matrix.random_baseline[i];
    }
    Ok(sum / (t - 1) as f64)
}

// ---------------------------------------------------------------------------
// Accuracy evaluation
// ---------------------------------------------------------------------------

/// Argmax over a logit row, optionally restricted to a class subset.
pub fn masked_argmax(row: &[f64], mask: Option<&[usize]>) -> usize {
    match mask {
        Some(classes) => *classes
            .iter()
            .max_by(|&&a, &&b| row[a].total_cmp(&row[b]))
            .expect("non-empty class mask"),
        None => (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .expect("non-empty logit row"),
    }
}

/// Accuracy of `model` on one task's examples under the task's transform.
/// `mask = None` scores over all classes (class-incremental scoring);
/// `mask = Some(class_set)` restricts the argmax to the task's own classes
/// (task-incremental scoring).
pub fn accuracy_on_task(
    model: &DenseModel<f64>,
    ds: &Dataset,
    task: &TaskSpec,
    mask: Option<&[usize]>,
) -> f64 {
    assert!(!task.example_indices.is_empty(), "task without examples");
    let mut correct = 0usize;
    for chunk in task.example_indices.chunks(EVAL_CHUNK) {
        let (inputs, labels) = materialize(ds, chunk, &task.transform);
        let logits = model.forward(&inputs);
        for (r, &y) in labels.iter().enumerate() {
            if masked_argmax(logits.row(r), mask) == y {
                correct += 1;
            }
        }
    }
    correct as f64 / task.example_indices.len() as f64
}

/// Accuracy over the rotated test pass of the stream-of-rotations protocol:
/// a single number, measured once at the end of training.
pub fn mnist360_accuracy(model: &DenseModel<f64>, stream: Mnist360TestStream<'_>) -> f64 {
    let cols = model.input_dim();
    let mut inputs = DenseMatrix::zeros(EVAL_CHUNK, cols);
    let mut labels = Vec::with_capacity(EVAL_CHUNK);
    let mut filled = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    let flush = |inputs: &DenseMatrix<f64>, labels: &[usize], filled: usize, correct: &mut usize| {
        if filled == 0 {
            return;
        }
        let view = DenseMatrix::from_vec(filled, cols, inputs.data()[..filled * cols].to_vec());
        let logits = model.forward(&view);
        for (r, &y) in labels.iter().enumerate().take(filled) {
            if masked_argmax(logits.row(r), None) == y {
                *correct += 1;
            }
        }
    };
    for (image, label, _angle) in stream {
        inputs.row_mut(filled).copy_from_slice(&image);
        if labels.len() == filled {
            labels.push(label);
        } else {
            labels[filled] = label;
        }
        filled += 1;
        total += 1;
        if filled == EVAL_CHUNK {
            flush(&inputs, &labels, filled, &mut correct);
            filled = 0;
        }
    }
    flush(&inputs, &labels, filled, &mut correct);
    assert!(total > 0, "empty evaluation stream");
    correct as f64 / total as f64
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Per-example max-softmax confidence and top-1 correctness for one batch.
pub fn calibration_scores(
    model: &DenseModel<f64>,
    inputs: &DenseMatrix<f64>,
    labels: &[usize],
) -> (Vec<f64>, Vec<bool>) {
    let logits = model.forward(inputs);
    let mut confidence = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (r, &y) in labels.iter().enumerate() {
        let probs = softmax(logits.row(r));
        let arg = masked_argmax(&probs, None);
        confidence.push(probs[arg]);
        correct.push(arg == y);
    }
    (confidence, correct)
}

/// Bin confidence/correctness pairs into `n_bins` equal-width bins on [0,1]
/// and compute the expected calibration error
/// `Σ_b (|B_b|/N)·|acc(B_b) − conf(B_b)|`.
///
/// Within-bin sums run over sorted values, so the report is bit-identical
/// for any ordering of the same evaluation set.
pub fn calibration_from_scores(
    confidence: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> CalibrationReport {
    assert_eq!(confidence.len(), correct.len());
    assert!(n_bins > 0, "need at least one bin");
    assert!(!confidence.is_empty(), "empty evaluation set");
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        debug_assert!((0.0..=1.0).contains(&c), "confidence {c} outside [0,1]");
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        members[b].push(c);
        hits[b] += ok as usize;
    }
    let n = confidence.len() as f64;
    let mut bins = Vec::with_capacity(n_bins);
    let mut ece = 0.0;
    for (bin_members, &bin_hits) in members.iter_mut().zip(&hits) {
        if bin_members.is_empty() {
            bins.push(CalibrationBin {
                mean_confidence: 0.0,
                accuracy: 0.0,
                count: 0,
            });
            continue;
        }
        bin_members.sort_unstable_by(f64::total_cmp);
        let count = bin_members.len();
        let mean_confidence = bin_members.iter().sum::<f64>() / count as f64;
        let accuracy = bin_hits as f64 / count as f64;
        ece += count as f64 / n * (accuracy - mean_confidence).abs();
        bins.push(CalibrationBin {
            mean_confidence,
            accuracy,
            count,
        });
    }
    CalibrationReport { bins, ece }
}

/// Calibration of `model` over the union of the given tasks' examples,
/// scored over all classes.
pub fn ece_over_tasks(
    model: &DenseModel<f64>,
    ds: &Dataset,
    tasks: &[TaskSpec],
    n_bins: usize,
) -> CalibrationReport {
    let mut confidence = Vec::new();
    let mut correct = Vec::new();
    for task in tasks {
        for chunk in task.example_indices.chunks(EVAL_CHUNK) {
            let (inputs, labels) = materialize(ds, chunk, &task.transform);
            let (c, ok) = calibration_scores(model, &inputs, &labels);
            confidence.extend(c);
            correct.extend(ok);
        }
    }
    calibration_from_scores(&confidence, &correct, n_bins)
}

// ---------------------------------------------------------------------------
// Curvature probes
// ---------------------------------------------------------------------------

/// Compensated (Kahan) accumulator so long reductions stay order-stable.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        KahanSum::default()
    }

    pub fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Mean squared Euclidean norm of per-example gradient vectors — the trace
/// of the empirical second-moment matrix `(1/N)·Σ_n g_n g_nᵀ` without ever
/// forming it.
pub fn trace_of_outer_products<'a, I>(grads: I) -> f64
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = KahanSum::new();
    let mut n = 0usize;
    for g in grads {
        let mut sq = KahanSum::new();
        for &v in g {
            sq.add(v * v);
        }
        acc.add(sq.value());
        n += 1;
    }
    assert!(n > 0, "need at least one gradient");
    acc.value() / n as f64
}

/// Trace of the empirical Fisher information of `model`'s cross-entropy on
/// the given examples: `(1/N)·Σ_n ‖∇_θ ℓ(x_n, y_n)‖²`, streamed one example
/// at a time with compensated accumulation.
pub fn fisher_trace(model: &DenseModel<f64>, inputs: &DenseMatrix<f64>, labels: &[usize]) -> f64 {
    assert_eq!(inputs.rows(), labels.len());
    assert!(!labels.is_empty(), "empty dataset");
    let mut row = DenseMatrix::zeros(1, inputs.cols());
    let mut cache = ForwardCache::new();
    let mut grads = GradientBundle::zeros_like(model);
    let mut acc = KahanSum::new();
    for r in 0..inputs.rows() {
        row.row_mut(0).copy_from_slice(inputs.row(r));
        backward_into(
            model,
            &row,
            &LossSpec::cross_entropy(),
            &LossTargets {
                labels: Some(&labels[r..r + 1]),
                stored_logits: None,
                class_mask: None,
            },
            &mut cache,
            &mut grads,
        );
        acc.add(grads.norm_sq());
    }
    acc.value() / labels.len() as f64
}

/// Flattened per-example cross-entropy gradients. Materializes `N × P`
/// values: intended for small explicit-matrix cross-checks, not full runs.
pub fn per_example_gradients(
    model: &DenseModel<f64>,
    inputs: &DenseMatrix<f64>,
    labels: &[usize],
) -> Vec<Vec<f64>> {
    let mut row = DenseMatrix::zeros(1, inputs.cols());
    let mut cache = ForwardCache::new();
    let mut grads = GradientBundle::zeros_like(model);
    (0..inputs.rows())
        .map(|r| {
            row.row_mut(0).copy_from_slice(inputs.row(r));
            backward_into(
                model,
                &row,
                &LossSpec::cross_entropy(),
                &LossTargets {
                    labels: Some(&labels[r..r + 1]),
                    stored_logits: None,
                    class_mask: None,
                },
                &mut cache,
                &mut grads,
            );
            grads.flatten()
        })
        .collect()
}

/// Mean cross-entropy of `model` over a dense example block, chunked.
pub fn mean_ce(model: &DenseModel<f64>, inputs: &DenseMatrix<f64>, labels: &[usize]) -> f64 {
    assert_eq!(inputs.rows(), labels.len());
    assert!(!labels.is_empty(), "empty dataset");
    let mut sum = 0.0;
    let mut start = 0;
    while start < inputs.rows() {
        let end = (start + EVAL_CHUNK).min(inputs.rows());
        let view = DenseMatrix::from_vec(
            end - start,
            inputs.cols(),
            inputs.data()[start * inputs.cols()..end * inputs.cols()].to_vec(),
        );
        let logits = model.forward(&view);
        let (loss, _) = cross_entropy(&logits, &labels[start..end], None);
        sum += loss * (end - start) as f64;
        start = end;
    }
    sum / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCurve {
    pub sigmas: Vec<f64>,
    pub mean_loss: Vec<f64>,
}

/// Loss-landscape flatness around the current parameters: for each σ in the
/// grid, the mean of `loss_fn` over `n_draws` independent isotropic Gaussian
/// parameter perturbations. The grid must start at σ = 0, which is evaluated
/// exactly (no perturbation, no randomness spent).
pub fn flatness_probe_with(
    model: &DenseModel<f64>,
    sigmas: &[f64],
    n_draws: usize,
    rng: &mut ComponentRng,
    mut loss_fn: impl FnMut(&DenseModel<f64>) -> f64,
) -> FlatnessCurve {
    assert!(
        sigmas.first() == Some(&0.0),
        "perturbation grid must start at 0"
    );
    assert!(n_draws > 0, "need at least one draw");
    let mut mean_loss = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        if sigma == 0.0 {
            mean_loss.push(loss_fn(model));
            continue;
        }
        let mut sum = 0.0;
        for _ in 0..n_draws {
            let perturbed = model.perturbed(sigma, rng);
            sum += loss_fn(&perturbed);
        }
        mean_loss.push(sum / n_draws as f64);
    }
    FlatnessCurve {
        sigmas: sigmas.to_vec(),
        mean_loss,
    }
}

/// [`flatness_probe_with`] over a fully materialized training block, using
/// mean cross-entropy as the loss.
pub fn flatness_probe(
    model: &DenseModel<f64>,
    inputs: &DenseMatrix<f64>,
    labels: &[usize],
    sigmas: &[f64],
    n_draws: usize,
    rng: &mut ComponentRng,
) -> FlatnessCurve {
    flatness_probe_with(model, sigmas, n_draws, rng, |m| mean_ce(m, inputs, labels))
}

/// Default perturbation grid for the flatness probe.
pub const FLATNESS_SIGMAS: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Default number of perturbation draws per σ.
pub const FLATNESS_DRAWS: usize = 10;

// ---------------------------------------------------------------------------
// Memory-informativeness probes
// ---------------------------------------------------------------------------

/// Train `fresh` from scratch using only the replay memory's labeled
/// contents (shuffled mini-batch cross-entropy for `epochs` passes) and
/// return it. An empty memory returns the untouched fresh model, so its
/// accuracy stays at chance.
pub fn retrain_from_buffer(
    mut fresh: DenseModel<f64>,
    buffer: &crate::buffer::MemoryBuffer<f64>,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    rng: &mut ComponentRng,
) -> Result<DenseModel<f64>, RunError> {
    use rand::Rng;
    assert!(batch_size > 0 && epochs > 0, "positive batch size and epochs");
    if buffer.is_empty() {
        return Ok(fresh);
    }
    let n = buffer.len();
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            buffer.entries()[i].label.ok_or_else(|| {
                RunError::MetricUndefined(format!("memory entry {i} has no label"))
            })
        })
        .collect::<Result<_, _>>()?;
    let cols = fresh.input_dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cache = ForwardCache::new();
    let mut grads = GradientBundle::zeros_like(&fresh);
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let mut inputs = DenseMatrix::zeros(chunk.len(), cols);
            let mut chunk_labels = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                inputs.row_mut(r).copy_from_slice(&buffer.entries()[i].input);
                chunk_labels.push(labels[i]);
            }
            backward_into(
                &fresh,
                &inputs,
                &LossSpec::cross_entropy(),
                &LossTargets {
                    labels: Some(&chunk_labels),
                    stored_logits: None,
                    class_mask: None,
                },
                &mut cache,
                &mut grads,
            );
            fresh.sgd_step(&grads, lr);
        }
    }
    Ok(fresh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    /// Accuracy on the held-out remainder before fine-tuning.
    pub before: f64,
    /// Accuracy on the same remainder after fine-tuning.
    pub after: f64,
}

/// How recoverable one task is from a trained model: draw `k` examples per
/// class from the task's (test-side) examples, fine-tune on them with plain
/// unregularized cross-entropy, and report accuracy on the task's remaining
/// examples before and after. `epochs = 0` performs no updates, leaving
/// `after == before`.
#[allow(clippy::too_many_arguments)]
pub fn buffer_finetune_probe(
    model: &DenseModel<f64>,
    ds: &Dataset,
    task: &TaskSpec,
    k: usize,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    rng: &mut ComponentRng,
) -> Result<FinetuneOutcome, RunError> {
    use rand::Rng;
    assert!(k > 0 && batch_size > 0, "positive k and batch size");
    // Partition the task's examples into k-per-class probe samples and the
    // held-out remainder.
    let mut per_class: Vec<Vec<u32>> = Vec::new();
    for &i in &task.example_indices {
        let y = ds.labels[i as usize];
        if per_class.len() <= y {
            per_class.resize(y + 1, Vec::new());
        }
        per_class[y].push(i);
    }
    let mut chosen = Vec::new();
    let mut remainder = Vec::new();
    for (y, mut members) in per_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(RunError::MetricUndefined(format!(
                "class {y} has only {} examples, need {k}",
                members.len()
            )));
        }
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        chosen.extend_from_slice(&members[..k]);
        remainder.extend_from_slice(&members[k..]);
    }
    if remainder.is_empty() {
        return Err(RunError::MetricUndefined(
            "no held-out examples remain after sampling".into(),
        ));
    }
    remainder.sort_unstable();
    let held_out = TaskSpec {
        example_indices: remainder,
        ..task.clone()
    };
    let before = accuracy_on_task(model, ds, &held_out, None);

    let mut tuned = model.clone();
    let (probe_inputs, probe_labels) = materialize(ds, &chosen, &task.transform);
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    let mut cache = ForwardCache::new();
    let mut grads = GradientBundle::zeros_like(&tuned);
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let mut inputs = DenseMatrix::zeros(chunk.len(), probe_inputs.cols());
            let mut labels = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                inputs.row_mut(r).copy_from_slice(probe_inputs.row(i));
                labels.push(probe_labels[i]);
            }
            backward_into(
                &tuned,
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
            tuned.sgd_step(&grads, lr);
        }
    }
    let after = accuracy_on_task(&tuned, ds, &held_out, None);
    Ok(FinetuneOutcome { before, after })
}

// ---------------------------------------------------------------------------
// Text emitters
// ---------------------------------------------------------------------------

/// One exported scalar: a `(method, setting, buffer, seed, metric)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub setting: String,
    pub buffer: Option<usize>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricRow]) -> io::Result<()> {
    writeln!(w, "method,setting,buffer,seed,metric,value")?;
    for row in rows {
        let buffer = row
            .buffer
            .map(|b| b.to_string())
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.method, row.setting, buffer, row.seed, row.metric, row.value
        )?;
    }
    Ok(())
}

/// Two-column curve file (σ, mean loss) ready for `plot ... with linespoints`.
pub fn write_flatness_gnuplot<W: Write>(w: &mut W, curve: &FlatnessCurve) -> io::Result<()> {
    writeln!(w, "# sigma mean_loss")?;
    for (s, l) in curve.sigmas.iter().zip(&curve.mean_loss) {
        writeln!(w, "{s} {l}")?;
    }
    Ok(())
}

/// Reliability-diagram data: one row per bin with its center, mean
/// confidence, accuracy, and example count.
pub fn write_reliability_gnuplot<W: Write>(w: &mut W, report: &CalibrationReport) -> io::Result<()> {
    writeln!(w, "# bin_center mean_confidence accuracy count")?;
    let k = report.bins.len() as f64;
    for (b, bin) in report.bins.iter().enumerate() {
        let center = (b as f64 + 0.5) / k;
        writeln!(
            w,
            "{center} {} {} {}",
            bin.mean_confidence, bin.accuracy, bin.count
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_2x2() -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.9);
        m.set(0, 1, 0.1);
        m.set(1, 0, 0.6);
        m.set(1, 1, 0.9);
        m.random_baseline = vec![0.1, 0.1];
        m
    }

    #[test]
    fn transfer_metrics_on_the_worked_example() {
        let m = matrix_2x2();
        assert!((backward_transfer(&m).unwrap() - (-0.3)).abs() < 1e-15);
        assert!((forgetting(&m).unwrap() - 0.3).abs() < 1e-15);
        assert!(forward_transfer(&m).unwrap().abs() < 1e-15);
    }

    #[test]
    fn constant_matrix_has_no_transfer() {
        let mut m = AccuracyMatrix::new(3);
        for t in 0..3 {
            for i in 0..3 {
                m.set(t, i, 0.4);
            }
        }
        assert_eq!(backward_transfer(&m).unwrap(), 0.0);
        assert_eq!(forgetting(&m).unwrap(), 0.0);
        assert!(m.is_lower_triangle_complete());
        assert!((m.final_average().unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_task_transfer_is_undefined() {
        let mut m = AccuracyMatrix::new(1);
        m.set(0, 0, 0.5);
        assert!(backward_transfer(&m).is_err());
        assert!(forgetting(&m).is_err());
        assert!(forward_transfer(&m).is_err());
        assert!((m.final_average().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_cells_are_reported_not_defaulted() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.9);
        // (1,0) and (1,1) absent.
        assert!(backward_transfer(&m).is_err());
        assert!(!m.is_lower_triangle_complete());
        assert!(m.final_average().is_err());
    }

    #[test]
    fn kahan_beats_naive_on_adversarial_order() {
        let mut k = KahanSum::new();
        k.add(1.0);
        for _ in 0..10_000 {
            k.add(1e-16);
        }
        assert!((k.value() - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn outer_product_trace_hand_case() {
        let g: Vec<f64> = vec![1.0, 2.0];
        assert_eq!(trace_of_outer_products([g.as_slice()]), 5.0);
        let zero = vec![0.0; 4];
        assert_eq!(trace_of_outer_products([zero.as_slice()]), 0.0);
    }
}
