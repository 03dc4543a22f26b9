//! Dense row-major matrices with the handful of products the network needs.
//!
//! Every kernel accumulates each output element in ascending index order, so
//! results are bitwise identical whether the `parallel` feature is on or off
//! and regardless of thread count.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Runs `op` over disjoint row chunks of `out`.
#[cfg(feature = "parallel")]
fn for_each_row_chunk<F: Fn(usize, &mut [f64]) + Sync>(out: &mut Mat, chunk_rows: usize, op: F) {
    use rayon::prelude::*;
    let cols = out.cols;
    out.data
        .par_chunks_mut(chunk_rows * cols)
        .enumerate()
        .for_each(|(ci, chunk)| op(ci * chunk_rows, chunk));
}

#[cfg(not(feature = "parallel"))]
fn for_each_row_chunk<F: Fn(usize, &mut [f64]) + Sync>(out: &mut Mat, chunk_rows: usize, op: F) {
    let cols = out.cols;
    for (ci, chunk) in out.data.chunks_mut(chunk_rows * cols).enumerate() {
        op(ci * chunk_rows, chunk);
    }
}

const CHUNK_ROWS: usize = 16;

/// C = A * B.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut c = Mat::zeros(a.rows, b.cols);
    let n = b.cols;
    for_each_row_chunk(&mut c, CHUNK_ROWS, |row0, chunk| {
        for (local, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + local;
            let arow = a.row(i);
            for (l, &ail) in arow.iter().enumerate() {
                let brow = b.row(l);
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += ail * bv;
                }
            }
        }
    });
    c
}

/// Sequential reference kernel, used by the benches to compare against the
/// feature-selected path.
pub fn matmul_seq(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (l, &ail) in arow.iter().enumerate() {
            let brow = b.row(l);
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ail * bv;
            }
        }
    }
    c
}

/// C = A^T * B.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let mut c = Mat::zeros(a.cols, b.cols);
    let n = b.cols;
    for_each_row_chunk(&mut c, CHUNK_ROWS, |row0, chunk| {
        for (local, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + local;
            // c[i, :] = sum_l a[l, i] * b[l, :]
            for l in 0..a.rows {
                let ali = a.get(l, i);
                let brow = b.row(l);
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += ali * bv;
                }
            }
        }
    });
    c
}

/// C = A * B^T.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut c = Mat::zeros(a.rows, b.rows);
    let n = b.rows;
    for_each_row_chunk(&mut c, CHUNK_ROWS, |row0, chunk| {
        for (local, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + local;
            let arow = a.row(i);
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = b.row(j);
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *cv = acc;
            }
        }
    });
    c
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted by descending
/// eigenvalue. Intended for the small covariance matrices PCA produces.
pub fn symmetric_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(m.rows, m.cols, "symmetric_eigen needs a square matrix");
    let n = m.rows;
    let mut a = m.clone();
    let mut v = Mat::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            sorted_vecs.set(k, new_col, v.get(k, old_col));
        }
    }
    (sorted_vals, sorted_vecs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_sequential() {
        let a = Mat::from_rows(&(0..37).map(|i| (0..11).map(|j| (i * 11 + j) as f64 * 0.1).collect()).collect::<Vec<_>>());
        let b = Mat::from_rows(&(0..11).map(|i| (0..5).map(|j| (i + j) as f64 * 0.3).collect()).collect::<Vec<_>>());
        let c = matmul(&a, &b);
        let cs = matmul_seq(&a, &b);
        assert_eq!(c.data, cs.data);
    }

    #[test]
    fn transposed_products() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        // A^T * B = A^T
        let c = matmul_tn(&a, &b);
        assert_eq!(c.rows, 3);
        assert_eq!(c.cols, 2);
        assert_eq!(c.get(2, 1), 6.0);
        // A * A^T
        let d = matmul_nt(&a, &a);
        assert_eq!(d.get(0, 0), 14.0);
        assert_eq!(d.get(0, 1), 32.0);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(3, 1) rotated by 45 degrees
        let m = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let (vals, vecs) = symmetric_eigen(&m);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // residual ||Mv - lambda v||
        for c in 0..2 {
            for r in 0..2 {
                let mv: f64 = (0..2).map(|k| m.get(r, k) * vecs.get(k, c)).sum();
                assert!((mv - vals[c] * vecs.get(r, c)).abs() < 1e-10);
            }
        }
    }
}
