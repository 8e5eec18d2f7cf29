//! Losses and their logit-space gradients.
//!
//! Every loss returns `(scalar loss, d loss / d logits)` so one backward pass
//! through the network serves any mixture of terms. Reductions are means over
//! the batch: cross-entropy averages per-example `−log softmax[label]`, and
//! the logit-matching loss averages per-example squared Euclidean distance
//! (summed over classes).

use super::matrix::DenseMatrix;
use super::model::{DenseModel, ForwardCache, GradientBundle};
use crate::scalar::Elem;

/// Which loss a composite backward pass should apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    LogitMse,
    /// `alpha · logit_mse + beta · cross_entropy` on the same batch.
    WeightedSum,
}

/// Loss selector plus the mixing weights used by [`LossKind::WeightedSum`].
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<E: Elem = f64> {
    pub kind: LossKind,
    pub alpha: E,
    pub beta: E,
}

impl<E: Elem> LossSpec<E> {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            alpha: E::zero(),
            beta: E::zero(),
        }
    }

    pub fn logit_mse() -> Self {
        LossSpec {
            kind: LossKind::LogitMse,
            alpha: E::zero(),
            beta: E::zero(),
        }
    }

    /// Panics if a weight is negative.
    pub fn weighted_sum(alpha: E, beta: E) -> Self {
        assert!(
            alpha >= E::zero() && beta >= E::zero(),
            "loss weights must be nonnegative"
        );
        LossSpec {
            kind: LossKind::WeightedSum,
            alpha,
            beta,
        }
    }
}

/// Targets for [`backward`]; which fields must be present depends on the loss
/// kind.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTargets<'a, E: Elem = f64> {
    pub labels: Option<&'a [usize]>,
    pub stored_logits: Option<&'a DenseMatrix<E>>,
    /// Restricts cross-entropy (softmax and argmax alike) to a class subset;
    /// the task-incremental evaluation path.
    pub class_mask: Option<&'a [usize]>,
}

/// Numerically stabilized softmax of one logit vector.
pub fn softmax<E: Elem>(logits: &[E]) -> Vec<E> {
    let mut out = vec![E::zero(); logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// In-place variant of [`softmax`]; stabilizes by subtracting the max logit.
pub fn softmax_into<E: Elem>(logits: &[E], out: &mut [E]) {
    assert_eq!(logits.len(), out.len(), "softmax buffer length");
    assert!(!logits.is_empty(), "softmax of empty vector");
    let mut m = logits[0];
    for &l in &logits[1..] {
        if l > m {
            m = l;
        }
    }
    let mut denom = E::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - m).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

/// Mean cross-entropy over a batch with its gradient w.r.t. the logits.
///
/// With a class mask, the softmax normalizes over the masked classes only and
/// gradients outside the mask are zero. Panics if a label is out of range or
/// outside the mask (contract violation: masks always contain the labels they
/// are evaluated against).
pub fn cross_entropy<E: Elem>(
    logits: &DenseMatrix<E>,
    labels: &[usize],
    mask: Option<&[usize]>,
) -> (E, DenseMatrix<E>) {
    let (b, c) = (logits.rows(), logits.cols());
    assert_eq!(labels.len(), b, "one label per batch row");
    assert!(b > 0, "cross_entropy of empty batch");
    if let Some(m) = mask {
        assert!(!m.is_empty(), "empty class mask");
        assert!(m.iter().all(|&cls| cls < c), "mask class out of range");
    }

    let inv_b = E::from_f64_lossy(1.0 / b as f64);
    let mut dlogits = DenseMatrix::zeros(b, c);
    let mut loss = E::zero();
    let full: Vec<usize> = (0..c).collect();
    let active: &[usize] = mask.unwrap_or(&full);

    for r in 0..b {
        let y = labels[r];
        assert!(y < c, "label {y} out of range for {c} classes");
        assert!(
            active.contains(&y),
            "label {y} not in the evaluation class mask"
        );
        let row = logits.row(r);
        let mut m = row[active[0]];
        for &cls in active {
            if row[cls] > m {
                m = row[cls];
            }
        }
        let mut denom = E::zero();
        for &cls in active {
            denom += (row[cls] - m).exp();
        }
        // −log softmax[y] = log Σ exp(l−m) − (l_y − m)
        loss += denom.ln() - (row[y] - m);
        let drow = dlogits.row_mut(r);
        for &cls in active {
            let p = (row[cls] - m).exp() / denom;
            let indicator = if cls == y { E::one() } else { E::zero() };
            drow[cls] = (p - indicator) * inv_b;
        }
    }
    (loss * inv_b, dlogits)
}

/// Mean (over the batch) squared Euclidean distance between stored and
/// current logits, with the gradient w.r.t. `current`:
/// `loss = (1/B)·Σ_b ‖stored_b − current_b‖²`, `∇ = 2(current − stored)/B`.
pub fn logit_mse<E: Elem>(
    stored: &DenseMatrix<E>,
    current: &DenseMatrix<E>,
) -> (E, DenseMatrix<E>) {
    assert_eq!(
        (stored.rows(), stored.cols()),
        (current.rows(), current.cols()),
        "logit_mse shape mismatch"
    );
    let b = current.rows();
    assert!(b > 0, "logit_mse of empty batch");
    let inv_b = E::from_f64_lossy(1.0 / b as f64);
    let two = E::from_f64_lossy(2.0);
    let mut dlogits = DenseMatrix::zeros(b, current.cols());
    let mut loss = E::zero();
    for ((d, &cur), &sto) in dlogits
        .data_mut()
        .iter_mut()
        .zip(current.data())
        .zip(stored.data())
    {
        let diff = cur - sto;
        loss += diff * diff;
        *d = two * diff * inv_b;
    }
    (loss * inv_b, dlogits)
}

/// Loss value and exact parameter gradients of the configured loss on one
/// batch: forward, logit-space gradient, backpropagation.
///
/// Target requirements: `CrossEntropy` needs `labels`; `LogitMse` needs
/// `stored_logits`; `WeightedSum` needs both and computes
/// `alpha·logit_mse + beta·cross_entropy`.
pub fn backward<E: Elem>(
    model: &DenseModel<E>,
    inputs: &DenseMatrix<E>,
    spec: &LossSpec<E>,
    targets: &LossTargets<'_, E>,
) -> (E, GradientBundle<E>) {
    let mut cache = ForwardCache::new();
    let mut grads = GradientBundle::zeros_like(model);
    let loss = backward_into(model, inputs, spec, targets, &mut cache, &mut grads);
    (loss, grads)
}

/// Scratch-reusing variant of [`backward`] for hot loops.
pub fn backward_into<E: Elem>(
    model: &DenseModel<E>,
    inputs: &DenseMatrix<E>,
    spec: &LossSpec<E>,
    targets: &LossTargets<'_, E>,
    cache: &mut ForwardCache<E>,
    grads: &mut GradientBundle<E>,
) -> E {
    model.forward_cached(inputs, cache);
    let (loss, dlogits) = match spec.kind {
        LossKind::CrossEntropy => {
            let labels = targets.labels.expect("cross_entropy needs labels");
            cross_entropy(cache.logits(), labels, targets.class_mask)
        }
        LossKind::LogitMse => {
            let stored = targets.stored_logits.expect("logit_mse needs stored logits");
            logit_mse(stored, cache.logits())
        }
        LossKind::WeightedSum => {
            let labels = targets.labels.expect("weighted_sum needs labels");
            let stored = targets.stored_logits.expect("weighted_sum needs stored logits");
            let (l_mse, d_mse) = logit_mse(stored, cache.logits());
            let (l_ce, d_ce) = cross_entropy(cache.logits(), labels, targets.class_mask);
            let mut d = d_mse;
            for (dv, cv) in d.data_mut().iter_mut().zip(d_ce.data()) {
                *dv = spec.alpha * *dv + spec.beta * *cv;
            }
            (spec.alpha * l_mse + spec.beta * l_ce, d)
        }
    };
    model.backward_from(inputs, cache, &dlogits, grads);
    loss
}
