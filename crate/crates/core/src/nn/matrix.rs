//! Dense row-major matrix, the only tensor type the engine needs.

use crate::scalar::Elem;

/// Dense row-major matrix of scalars.
///
/// Rows index examples in a batch (or input units of a layer), columns index
/// features (or output units). Storage is a single contiguous `Vec` of length
/// `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<E: Elem = f64> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Elem> DenseMatrix<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![E::zero(); rows * cols],
        }
    }

    /// Wrap an existing row-major buffer.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {rows}x{cols}",
            data.len()
        );
        DenseMatrix { rows, cols, data }
    }

    /// Build from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> E {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: E) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy `src` into row `r`.
    pub fn set_row(&mut self, r: usize, src: &[E]) {
        self.row_mut(r).copy_from_slice(src);
    }

    /// Reshape in place to `rows × cols` without touching storage.
    ///
    /// Used to reuse scratch buffers across batches of different height.
    /// Panics if the underlying buffer is too small.
    pub fn reshape(&mut self, rows: usize, cols: usize) {
        assert!(
            rows * cols <= self.data.capacity(),
            "reshape to {rows}x{cols} exceeds reserved capacity"
        );
        self.data.resize(rows * cols, E::zero());
        self.rows = rows;
        self.cols = cols;
    }

    pub fn fill(&mut self, v: E) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Vertical concatenation: `[self; other]`.
    ///
    /// Panics on column mismatch.
    pub fn vcat(&self, other: &DenseMatrix<E>) -> DenseMatrix<E> {
        assert_eq!(
            self.cols, other.cols,
            "vcat column mismatch: {} vs {}",
            self.cols, other.cols
        );
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        DenseMatrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }
}

/// `out ← alpha·op(A)·op(B) + beta·out`, with `op` an optional transpose.
///
/// Shapes after transposition must satisfy `(m×k)·(k×n) = (m×n)`; panics
/// otherwise. Backpropagation uses the transposed variants to form `XᵀδZ` and
/// `δZ·Wᵀ` without materializing transposed copies.
pub fn gemm_into<E: Elem>(
    alpha: E,
    a: &DenseMatrix<E>,
    trans_a: bool,
    b: &DenseMatrix<E>,
    trans_b: bool,
    beta: E,
    out: &mut DenseMatrix<E>,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch: {k} vs {kb}");
    assert_eq!(
        (out.rows, out.cols),
        (m, n),
        "gemm output shape mismatch: got {}x{}, need {m}x{n}",
        out.rows,
        out.cols
    );

    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };

    // Safety: shapes and strides were just validated against the buffers, and
    // `out` is a distinct &mut borrow so it cannot alias the inputs.
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Convenience allocating product `A·B`.
pub fn matmul<E: Elem>(a: &DenseMatrix<E>, b: &DenseMatrix<E>) -> DenseMatrix<E> {
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    gemm_into(E::one(), a, false, b, false, E::zero(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let a = DenseMatrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.25 - 1.0);
        let b = DenseMatrix::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.5);
        let got = matmul(&a, &b);
        for r in 0..3 {
            for c in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(r, k) * b.get(k, c);
                }
                assert!((got.get(r, c) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn transposed_gemm_agrees_with_explicit_transpose() {
        let a = DenseMatrix::from_fn(4, 3, |r, c| (r + 2 * c) as f64);
        let b = DenseMatrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64 * 0.1);
        // at: 3x4 explicit transpose of a
        let at = DenseMatrix::from_fn(3, 4, |r, c| a.get(c, r));
        let want = matmul(&at, &b);
        let mut got = DenseMatrix::zeros(3, 2);
        gemm_into(1.0, &a, true, &b, false, 0.0, &mut got);
        assert_eq!(got, want);
    }

    #[test]
    #[should_panic(expected = "inner dimension mismatch")]
    fn shape_mismatch_panics() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let b = DenseMatrix::<f64>::zeros(2, 3);
        matmul(&a, &b);
    }
}
