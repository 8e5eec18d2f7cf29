//! Fixed-capacity replay memory with reservoir insertion and uniform
//! sampling.
//!
//! The buffer never stores more than `capacity` entries no matter how long
//! the stream gets, and after `N ≥ capacity` insertions every stream item has
//! had the same `capacity/N` probability of being retained — the property
//! that lets rehearsal methods run without task boundaries.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use std::io::{Read, Write};
use thiserror::Error;

use crate::nn::DenseMatrix;
use crate::scalar::Elem;

/// One stored example.
///
/// `input` is the image exactly as the network saw it (post task transform,
/// pre augmentation — for MNIST streams there is no augmentation, so it is
/// the emitted pixel vector). Replay methods differ in which payloads they
/// *use*: logit-matching methods need `logits`, label-replay methods need
/// `label`; methods may store payloads beyond what they replay (the harness
/// keeps labels in snapshots so buffer probes can retrain from them).
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<E: Elem = f64> {
    pub input: Vec<E>,
    pub logits: Option<Vec<E>>,
    pub label: Option<usize>,
}

/// Index errors from [`MemoryBuffer::update_logits`].
#[derive(Debug, Error)]
pub enum BufferError {
    #[error("buffer index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Fixed-capacity reservoir memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer<E: Elem = f64> {
    capacity: usize,
    entries: Vec<BufferEntry<E>>,
    seen: u64,
}

impl<E: Elem> MemoryBuffer<E> {
    /// Panics if `capacity` is zero (bufferless methods simply hold no
    /// buffer).
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        MemoryBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of insertions ever attempted (the reservoir stream length `N`);
    /// never decreases.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry<E>] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &BufferEntry<E> {
        &self.entries[index]
    }

    /// Reservoir insertion: while the buffer has free room the entry is
    /// appended; afterwards it replaces a uniformly chosen victim with
    /// probability `capacity/(N+1)` (draw `j ~ U{0..N}` inclusive, replace
    /// slot `j` iff `j < capacity`). The seen-count advances either way.
    pub fn reservoir_insert(&mut self, entry: BufferEntry<E>, rng: &mut impl Rng) {
        if self.seen < self.capacity as u64 {
            self.entries.push(entry);
        } else {
            let j = rng.random_range(0..=self.seen);
            if j < self.capacity as u64 {
                self.entries[j as usize] = entry;
            }
        }
        self.seen += 1;
    }

    /// Indices of a uniform sample: without replacement when `k ≤ len`
    /// (a partial Fisher–Yates prefix), with replacement otherwise. `None`
    /// when the buffer is empty — callers skip their replay term.
    pub fn sample_indices(&self, k: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
        if self.entries.is_empty() {
            return None;
        }
        let len = self.entries.len();
        if k <= len {
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..k {
                let j = rng.random_range(i..len);
                idx.swap(i, j);
            }
            idx.truncate(k);
            Some(idx)
        } else {
            Some((0..k).map(|_| rng.random_range(0..len)).collect())
        }
    }

    /// Uniform sample of `k` entries, returned by copy; `None` when empty.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Option<Vec<BufferEntry<E>>> {
        let idx = self.sample_indices(k, rng)?;
        Some(idx.into_iter().map(|i| self.entries[i].clone()).collect())
    }

    /// Stack the inputs at `indices` into a `k×input_dim` batch.
    pub fn gather_inputs(&self, indices: &[usize]) -> DenseMatrix<E> {
        let dim = self.entries[indices[0]].input.len();
        let mut out = DenseMatrix::zeros(indices.len(), dim);
        for (r, &i) in indices.iter().enumerate() {
            out.set_row(r, &self.entries[i].input);
        }
        out
    }

    /// Stack stored logits at `indices`; `None` if any entry lacks logits.
    pub fn gather_logits(&self, indices: &[usize]) -> Option<DenseMatrix<E>> {
        let first = self.entries[indices[0]].logits.as_ref()?;
        let mut out = DenseMatrix::zeros(indices.len(), first.len());
        for (r, &i) in indices.iter().enumerate() {
            out.set_row(r, self.entries[i].logits.as_ref()?);
        }
        Some(out)
    }

    /// Collect stored labels at `indices`; `None` if any entry lacks one.
    pub fn gather_labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        indices.iter().map(|&i| self.entries[i].label).collect()
    }

    /// Replace only the logits of one entry (input and label untouched).
    pub fn update_logits(&mut self, index: usize, new_logits: Vec<E>) -> Result<(), BufferError> {
        let len = self.entries.len();
        let entry = self
            .entries
            .get_mut(index)
            .ok_or(BufferError::IndexOutOfRange { index, len })?;
        entry.logits = Some(new_logits);
        Ok(())
    }

    /// Serialize to a self-describing little-endian binary snapshot. Values
    /// are widened to `f64` on disk regardless of the in-memory scalar.
    ///
    /// Layout: magic `DBUF`, version u32, capacity u64, seen u64, entry count
    /// u32, then per entry: input length u32 + values f64, logits flag u8
    /// (+ length u32 + values f64), label flag u8 (+ label u64).
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"DBUF")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.capacity as u64)?;
        w.write_u64::<LittleEndian>(self.seen)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for e in &self.entries {
            w.write_u32::<LittleEndian>(e.input.len() as u32)?;
            for v in &e.input {
                w.write_f64::<LittleEndian>(v.to_f64_lossy())?;
            }
            match &e.logits {
                Some(z) => {
                    w.write_u8(1)?;
                    w.write_u32::<LittleEndian>(z.len() as u32)?;
                    for v in z {
                        w.write_f64::<LittleEndian>(v.to_f64_lossy())?;
                    }
                }
                None => w.write_u8(0)?,
            }
            match e.label {
                Some(y) => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(y as u64)?;
                }
                None => w.write_u8(0)?,
            }
        }
        Ok(())
    }

    /// Inverse of [`MemoryBuffer::write_snapshot`].
    pub fn read_snapshot<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DBUF" {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "not a buffer snapshot (bad magic)",
            ));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported buffer snapshot version {version}"),
            ));
        }
        let capacity = r.read_u64::<LittleEndian>()? as usize;
        let seen = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut input = Vec::with_capacity(n);
            for _ in 0..n {
                input.push(E::from_f64_lossy(r.read_f64::<LittleEndian>()?));
            }
            let logits = if r.read_u8()? == 1 {
                let n = r.read_u32::<LittleEndian>()? as usize;
                let mut z = Vec::with_capacity(n);
                for _ in 0..n {
                    z.push(E::from_f64_lossy(r.read_f64::<LittleEndian>()?));
                }
                Some(z)
            } else {
                None
            };
            let label = if r.read_u8()? == 1 {
                Some(r.read_u64::<LittleEndian>()? as usize)
            } else {
                None
            };
            entries.push(BufferEntry {
                input,
                logits,
                label,
            });
        }
        Ok(MemoryBuffer {
            capacity,
            entries,
            seen,
        })
    }
}
