//! Dense row-major f64 matrices and the handful of kernels the LSTM needs.
//!
//! Kernels are single-threaded with a fixed operation order, so results
//! are bit-identical across runs and thread counts; parallelism happens at
//! a coarser level (independent batch-lane blocks).

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn copy_from(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.copy_from_slice(&other.data);
    }

    /// Copy of the given row range.
    pub fn row_block(&self, start: usize, count: usize) -> Mat {
        Mat::from_vec(count, self.cols, self.data[start * self.cols..(start + count) * self.cols].to_vec())
    }

    /// Write `block` back over rows [start, start + block.rows).
    pub fn set_row_block(&mut self, start: usize, block: &Mat) {
        assert_eq!(self.cols, block.cols);
        self.data[start * self.cols..(start + block.rows) * self.cols]
            .copy_from_slice(&block.data);
    }
}

/// Dot product with four independent accumulators. The fixed reassociation
/// breaks the add dependency chain without fast-math.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// y += a * x, elementwise.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// out[i][j] = dot(a.row(i), b.row(j)) + bias[j], i.e. out = a · bᵀ (+ bias).
pub fn matmul_nt_into(a: &Mat, b: &Mat, bias: Option<&[f64]>, out: &mut Mat) {
    assert_eq!(a.cols, b.cols);
    assert_eq!((out.rows, out.cols), (a.rows, b.rows));
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        match bias {
            Some(bias) => {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(arow, b.row(j)) + bias[j];
                }
            }
            None => {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(arow, b.row(j));
                }
            }
        }
    }
}

/// out += a · bᵀ.
pub fn matmul_nt_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.cols);
    assert_eq!((out.rows, out.cols), (a.rows, b.rows));
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, b.row(j));
        }
    }
}

/// out += a · b where a is m×k and b is k×n, accumulated row by row so the
/// inner loop is a contiguous axpy.
pub fn matmul_nn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            axpy(aik, b.row(k), orow);
        }
    }
}

/// out += aᵀ · b where a is k×m and b is k×n (gradient accumulation form).
pub fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.rows, b.rows);
    assert_eq!((out.rows, out.cols), (a.cols, b.cols));
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (m, &akm) in arow.iter().enumerate() {
            axpy(akm, brow, out.row_mut(m));
        }
    }
}
