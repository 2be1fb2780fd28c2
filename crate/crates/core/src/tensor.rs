//! Row-major dense matrices and the three GEMM shapes the network needs.

/// Row-major `rows x cols` matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn add_assign_scaled(&mut self, other: &Mat, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// `out = a * w^T` where `a` is `n x k` and `w` is stored `m x k`.
pub(crate) fn matmul_a_wt(a: &Mat, w: &[f64], m: usize, out: &mut Mat) {
    let (n, k) = (a.rows, a.cols);
    assert_eq!(w.len(), m * k);
    assert_eq!((out.rows, out.cols), (n, m));
    if n == 0 || m == 0 {
        return;
    }
    // SAFETY: all pointers cover the asserted extents with the given strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            0.0,
            out.data.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `out += g^T * h` where `g` is `n x m`, `h` is `n x k`, `out` is `m x k`.
pub(crate) fn acc_gt_h(g: &Mat, h: &Mat, out: &mut [f64]) {
    let (n, m, k) = (g.rows, g.cols, h.cols);
    assert_eq!(h.rows, n);
    assert_eq!(out.len(), m * k);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: see matmul_a_wt.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.data.as_ptr(),
            1,
            m as isize,
            h.data.as_ptr(),
            k as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `out = g * w` where `g` is `n x m` and `w` is stored `m x k`.
pub(crate) fn matmul_g_w(g: &Mat, w: &[f64], k: usize, out: &mut Mat) {
    let (n, m) = (g.rows, g.cols);
    assert_eq!(w.len(), m * k);
    assert_eq!((out.rows, out.cols), (n, k));
    if n == 0 || k == 0 {
        return;
    }
    // SAFETY: see matmul_a_wt.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.data.as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            0.0,
            out.data.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}
