//! Task streams: Sequential MNIST (class/task-incremental), Permuted and
//! Rotated MNIST (domain-incremental), and the boundary-free MNIST-360
//! protocol (train and test sides).
//!
//! Bounded settings expose an ordered task list plus a lazy per-epoch batch
//! iterator; MNIST-360 is a single un-bounded batch iterator that never
//! signals task changes. Every stream records enough provenance (the
//! MNIST-360 stream keeps a full per-example manifest) for the conformance
//! suite to replay its protocol independently.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{apply_transform_into, Dataset, Transform, IMAGE_PIXELS};
use crate::error::DataError;
use crate::nn::DenseMatrix;
use crate::rng::ComponentRng;

/// Sequential MNIST: 5 tasks of 2 classes each.
pub const SEQ_MNIST_TASKS: usize = 5;
/// Sequential MNIST stream batch size.
pub const SEQ_MNIST_BATCH: usize = 10;
/// Permuted/Rotated MNIST: 20 tasks.
pub const DOMAIN_TASKS: usize = 20;
/// Permuted/Rotated MNIST stream batch size.
pub const DOMAIN_BATCH: usize = 128;
/// MNIST-360 rounds over the nine digit pairs.
pub const MNIST360_ROUNDS: usize = 3;
/// MNIST-360 default stream batch size.
pub const MNIST360_BATCH: usize = 16;
/// MNIST-360 label space: digits 0–8 (nines are excluded).
pub const MNIST360_CLASSES: usize = 9;
/// Number of consecutive digit pairs per round: (0,1), (1,2), …, (8,0).
pub const MNIST360_PAIRS: usize = 9;

/// One task of a bounded stream: its classes, input transform, and the
/// training-example rows it draws from, in dataset order.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_set: Vec<usize>,
    pub transform: Transform,
    pub epochs: usize,
    pub example_indices: Vec<u32>,
}

/// An ordered list of tasks with visible boundaries.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub batch_size: usize,
    pub boundary_visible: bool,
}

/// A training mini-batch as drawn from a stream.
///
/// `raw_inputs` is the representation eligible for buffer storage. None of
/// the MNIST settings apply train-time augmentation on top of the task
/// transform, so it always equals `inputs` here (rotated/permuted images are
/// stored as seen); the field exists so rehearsal code never has to guess.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub inputs: DenseMatrix<f64>,
    pub labels: Vec<usize>,
    pub raw_inputs: DenseMatrix<f64>,
    pub task_hint: Option<usize>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The boundary-free view handed to learners: no task identity.
    pub fn observed(&self) -> ObservedBatch<'_> {
        ObservedBatch {
            inputs: &self.inputs,
            raw_inputs: &self.raw_inputs,
            labels: &self.labels,
        }
    }
}

/// What a continual learner is allowed to see: inputs and labels, never the
/// task identity. Methods that need boundaries receive them through an
/// explicit harness-driven hook instead.
#[derive(Debug, Clone, Copy)]
pub struct ObservedBatch<'a> {
    pub inputs: &'a DenseMatrix<f64>,
    pub raw_inputs: &'a DenseMatrix<f64>,
    pub labels: &'a [usize],
}

impl ObservedBatch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sequential MNIST: 5 tasks × 2 classes in the fixed ascending order
/// (0,1), (2,3), …, (8,9); identity transform; batch size 10.
pub fn sequential_stream(ds: &Dataset, epochs_per_task: usize) -> TaskStream {
    let tasks = (0..SEQ_MNIST_TASKS)
        .map(|t| {
            let class_set = vec![2 * t, 2 * t + 1];
            let example_indices = ds.indices_of_classes(&class_set);
            TaskSpec {
                task_id: t,
                class_set,
                transform: Transform::Identity,
                epochs: epochs_per_task,
                example_indices,
            }
        })
        .collect();
    TaskStream {
        tasks,
        batch_size: SEQ_MNIST_BATCH,
        boundary_visible: true,
    }
}

/// Input-shift family for the domain-incremental streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Permuted,
    Rotated,
}

/// Permuted/Rotated MNIST: `t_count` tasks over all ten classes, each with a
/// fresh random pixel permutation or a fresh rotation angle drawn uniformly
/// from [0, π). Every task (including the first) draws its transform from
/// `rng`; batch size 128.
pub fn domain_stream(
    ds: &Dataset,
    kind: DomainKind,
    t_count: usize,
    epochs_per_task: usize,
    rng: &mut ComponentRng,
) -> TaskStream {
    let all: Vec<u32> = (0..ds.len() as u32).collect();
    let tasks = (0..t_count)
        .map(|t| {
            let transform = match kind {
                DomainKind::Permuted => Transform::random_permutation(rng),
                DomainKind::Rotated => Transform::Rotation(rng.random_range(0.0..std::f64::consts::PI)),
            };
            TaskSpec {
                task_id: t,
                class_set: (0..10).collect(),
                transform,
                epochs: epochs_per_task,
                example_indices: all.clone(),
            }
        })
        .collect();
    TaskStream {
        tasks,
        batch_size: DOMAIN_BATCH,
        boundary_visible: true,
    }
}

/// Materialize transformed rows `indices` of `ds` into a batch matrix.
pub fn materialize(
    ds: &Dataset,
    indices: &[u32],
    transform: &Transform,
) -> (DenseMatrix<f64>, Vec<usize>) {
    let mut inputs = DenseMatrix::zeros(indices.len(), IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(indices.len());
    for (r, &i) in indices.iter().enumerate() {
        apply_transform_into(ds.image(i as usize), transform, inputs.row_mut(r));
        labels.push(ds.labels[i as usize]);
    }
    (inputs, labels)
}

/// One epoch of shuffled batches over a task. The shuffle order comes from
/// `rng` at construction; batches are materialized lazily (transform applied
/// per batch) and the final batch may be short.
pub fn task_batches<'a>(
    ds: &'a Dataset,
    task: &'a TaskSpec,
    batch_size: usize,
    rng: &mut ComponentRng,
) -> TaskBatches<'a> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = task.example_indices.clone();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    TaskBatches {
        ds,
        task,
        order,
        batch_size,
        cursor: 0,
    }
}

/// Lazy batch iterator over one task epoch (see [`task_batches`]).
pub struct TaskBatches<'a> {
    ds: &'a Dataset,
    task: &'a TaskSpec,
    order: Vec<u32>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for TaskBatches<'_> {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let slice = &self.order[self.cursor..end];
        self.cursor = end;
        let (inputs, labels) = materialize(self.ds, slice, &self.task.transform);
        let raw_inputs = inputs.clone();
        Some(StreamBatch {
            inputs,
            labels,
            raw_inputs,
            task_hint: Some(self.task.task_id),
        })
    }
}

/// Digit-specific angular offset: `O_d = (d − 1)·π/(2R)` (so `O_0` is
/// negative, `O_1` is zero).
pub fn mnist360_offset(digit: usize, rounds: usize) -> f64 {
    (digit as f64 - 1.0) * std::f64::consts::PI / (2.0 * rounds as f64)
}

/// Provenance for one emitted MNIST-360 training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifestEntry {
    /// Row index into the backing training dataset.
    pub example: u32,
    pub digit: u8,
    /// Which of the 9·R pseudo-tasks emitted it.
    pub pseudo_task: u8,
    /// Value of the digit's never-reset counter when emitted.
    pub counter: u32,
    /// Stream-wide batch ordinal.
    pub batch: u32,
    /// Rotation applied before emission, in radians (not reduced mod 2π).
    pub angle: f64,
}

/// The MNIST-360 training stream.
///
/// Digit pairs (0,1), (1,2), …, (8,0) are visited for `R` rounds — 9·R
/// pseudo-tasks with no boundary signal. Each digit's examples (nines are
/// dropped) are shuffled once and split into 2R near-even groups, assigned to
/// the digit's 2R pseudo-task appearances chronologically. Batches balance
/// the two digits by their remaining counts: `N₁ = min(round(rem₁/(rem₁+rem₂)
/// ·B), rem₁)`, `N₂ = min(B − N₁, rem₂)`. Every emitted example is rotated by
/// `(2π/|d|)·C_d + O_d` where `C_d` is the digit's never-reset emission
/// counter and `|d|` its total training count, so each example is seen
/// exactly once and no two same-digit examples share an angle.
pub struct Mnist360Stream<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    /// Pseudo-task order: digit pairs, `rounds` times over.
    pairs: Vec<(usize, usize)>,
    /// Per digit: shuffled example rows, pre-split into 2R groups.
    groups: Vec<Vec<Vec<u32>>>,
    /// Per digit: next unconsumed group.
    group_cursor: Vec<usize>,
    /// Per digit: total training count |d|.
    totals: Vec<usize>,
    /// Per digit: never-reset emission counter C_d.
    counters: Vec<u32>,
    offsets: Vec<f64>,
    /// Remaining rows of the active pseudo-task, one queue per pair member.
    queue1: Vec<u32>,
    queue2: Vec<u32>,
    next_pair: usize,
    batch_id: u32,
    manifest: Vec<ManifestEntry>,
}

impl<'a> Mnist360Stream<'a> {
    pub fn new(ds: &'a Dataset, rounds: usize, batch_size: usize, rng: &mut ComponentRng) -> Self {
        assert!(rounds > 0 && batch_size > 0, "rounds and batch size positive");
        let mut groups = Vec::with_capacity(MNIST360_PAIRS);
        let mut totals = Vec::with_capacity(MNIST360_PAIRS);
        for d in 0..MNIST360_PAIRS {
            let mut idx = ds.indices_of_classes(&[d]);
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            totals.push(idx.len());
            // 2R near-even contiguous chunks (sizes differ by at most one).
            let g = 2 * rounds;
            let base = idx.len() / g;
            let extra = idx.len() % g;
            let mut chunks = Vec::with_capacity(g);
            let mut off = 0;
            for k in 0..g {
                let size = base + usize::from(k < extra);
                chunks.push(idx[off..off + size].to_vec());
                off += size;
            }
            groups.push(chunks);
        }
        let mut pairs = Vec::with_capacity(rounds * MNIST360_PAIRS);
        for _ in 0..rounds {
            for p in 0..MNIST360_PAIRS {
                pairs.push((p, (p + 1) % MNIST360_PAIRS));
            }
        }
        let offsets = (0..MNIST360_PAIRS)
            .map(|d| mnist360_offset(d, rounds))
            .collect();
        Mnist360Stream {
            ds,
            batch_size,
            pairs,
            groups,
            group_cursor: vec![0; MNIST360_PAIRS],
            totals,
            counters: vec![0; MNIST360_PAIRS],
            offsets,
            queue1: Vec::new(),
            queue2: Vec::new(),
            next_pair: 0,
            batch_id: 0,
            manifest: Vec::new(),
        }
    }

    /// Active pseudo-task index (the one the next batch will come from), or
    /// the total count once exhausted.
    fn active_pair(&self) -> usize {
        self.next_pair - 1
    }

    /// Pull the next pseudo-task's two groups into the live queues.
    fn advance_pair(&mut self) -> bool {
        while self.queue1.is_empty() && self.queue2.is_empty() {
            if self.next_pair >= self.pairs.len() {
                return false;
            }
            let (d1, d2) = self.pairs[self.next_pair];
            self.queue1 = std::mem::take(&mut self.groups[d1][self.group_cursor[d1]]);
            self.group_cursor[d1] += 1;
            self.queue2 = std::mem::take(&mut self.groups[d2][self.group_cursor[d2]]);
            self.group_cursor[d2] += 1;
            self.next_pair += 1;
        }
        true
    }

    /// Rotate and record one example of `digit`, appending to the batch.
    fn emit(
        &mut self,
        row: usize,
        example: u32,
        digit: usize,
        inputs: &mut DenseMatrix<f64>,
        labels: &mut Vec<usize>,
    ) {
        let angle = std::f64::consts::TAU / self.totals[digit] as f64
            * f64::from(self.counters[digit])
            + self.offsets[digit];
        apply_transform_into(
            self.ds.image(example as usize),
            &Transform::Rotation(angle),
            inputs.row_mut(row),
        );
        labels.push(self.ds.labels[example as usize]);
        self.manifest.push(ManifestEntry {
            example,
            digit: digit as u8,
            pseudo_task: self.active_pair() as u8,
            counter: self.counters[digit],
            batch: self.batch_id,
            angle,
        });
        self.counters[digit] += 1;
    }

    /// Per-example provenance for everything emitted so far.
    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn into_manifest(self) -> Vec<ManifestEntry> {
        self.manifest
    }
}

impl Iterator for Mnist360Stream<'_> {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        if !self.advance_pair() {
            return None;
        }
        let (d1, d2) = self.pairs[self.active_pair()];
        let (rem1, rem2) = (self.queue1.len(), self.queue2.len());
        let b = self.batch_size;
        let n1 = usize::min(
            (rem1 as f64 / (rem1 + rem2) as f64 * b as f64).round() as usize,
            rem1,
        );
        let n2 = usize::min(b - n1, rem2);
        let mut inputs = DenseMatrix::zeros(n1 + n2, IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n1 + n2);
        let take1: Vec<u32> = self.queue1.drain(..n1).collect();
        let take2: Vec<u32> = self.queue2.drain(..n2).collect();
        for (r, &e) in take1.iter().enumerate() {
            self.emit(r, e, d1, &mut inputs, &mut labels);
        }
        for (r, &e) in take2.iter().enumerate() {
            self.emit(n1 + r, e, d2, &mut inputs, &mut labels);
        }
        self.batch_id += 1;
        let raw_inputs = inputs.clone();
        Some(StreamBatch {
            inputs,
            labels,
            raw_inputs,
            task_hint: None,
        })
    }
}

/// The MNIST-360 test stream: every non-nine test digit once, in dataset
/// order, rotated by `(2π/|d|_test)·C_d` with no offset. Yields one
/// `(rotated image, label)` pair per step.
pub struct Mnist360TestStream<'a> {
    ds: &'a Dataset,
    totals: Vec<usize>,
    counters: Vec<u32>,
    cursor: usize,
}

pub fn mnist360_test_stream(test_ds: &Dataset) -> Mnist360TestStream<'_> {
    let totals = test_ds.class_counts(8);
    Mnist360TestStream {
        ds: test_ds,
        totals,
        counters: vec![0; MNIST360_PAIRS],
        cursor: 0,
    }
}

impl Iterator for Mnist360TestStream<'_> {
    type Item = (Vec<f64>, usize, f64);

    /// Yields `(rotated image, label, angle)`.
    fn next(&mut self) -> Option<Self::Item> {
        while self.cursor < self.ds.len() {
            let i = self.cursor;
            self.cursor += 1;
            let label = self.ds.labels[i];
            if label > 8 {
                continue;
            }
            let angle = std::f64::consts::TAU / self.totals[label] as f64
                * f64::from(self.counters[label]);
            self.counters[label] += 1;
            let mut out = vec![0.0; IMAGE_PIXELS];
            apply_transform_into(self.ds.image(i), &Transform::Rotation(angle), &mut out);
            return Some((out, label, angle));
        }
        None
    }
}

const MANIFEST_MAGIC: &[u8; 4] = b"DMAN";
const MANIFEST_VERSION: u32 = 1;

/// Write a stream manifest as a little-endian binary dump.
pub fn write_manifest<W: Write>(w: &mut W, entries: &[ManifestEntry]) -> std::io::Result<()> {
    w.write_all(MANIFEST_MAGIC)?;
    w.write_u32::<LittleEndian>(MANIFEST_VERSION)?;
    w.write_u64::<LittleEndian>(entries.len() as u64)?;
    for e in entries {
        w.write_u32::<LittleEndian>(e.example)?;
        w.write_u8(e.digit)?;
        w.write_u8(e.pseudo_task)?;
        w.write_u32::<LittleEndian>(e.counter)?;
        w.write_u32::<LittleEndian>(e.batch)?;
        w.write_f64::<LittleEndian>(e.angle)?;
    }
    Ok(())
}

/// Read back a manifest written by [`write_manifest`].
pub fn read_manifest<R: Read>(r: &mut R) -> Result<Vec<ManifestEntry>, DataError> {
    let path = Path::new("<manifest>");
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MANIFEST_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: u32::from_be_bytes(magic),
            expected: u32::from_be_bytes(*MANIFEST_MAGIC),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != MANIFEST_VERSION {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let n = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        entries.push(ManifestEntry {
            example: r.read_u32::<LittleEndian>().map_err(io_err)?,
            digit: r.read_u8().map_err(io_err)?,
            pseudo_task: r.read_u8().map_err(io_err)?,
            counter: r.read_u32::<LittleEndian>().map_err(io_err)?,
            batch: r.read_u32::<LittleEndian>().map_err(io_err)?,
            angle: r.read_f64::<LittleEndian>().map_err(io_err)?,
        });
    }
    Ok(entries)
}
