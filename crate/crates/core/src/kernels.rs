//! Allocation-free small dense kernels on column-major storage.

use nalgebra::DMatrix;

/// `y += alpha * A x`
#[inline]
pub(crate) fn gemv_acc(y: &mut [f64], a: &DMatrix<f64>, x: &[f64], alpha: f64) {
    let rows = a.nrows();
    let data = a.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        let s = alpha * xj;
        if s == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (yi, &aij) in y.iter_mut().zip(col) {
            *yi += aij * s;
        }
    }
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x^T A y`
#[inline]
pub(crate) fn bilinear(x: &[f64], a: &DMatrix<f64>, y: &[f64]) -> f64 {
    let rows = a.nrows();
    let data = a.as_slice();
    let mut total = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        if yj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        let mut s = 0.0;
        for (xi, &aij) in x.iter().zip(col) {
            s += xi * aij;
        }
        total += s * yj;
    }
    total
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_match_nalgebra() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [1.0, -1.0, 0.5];
        let mut y = [1.0, 1.0];
        gemv_acc(&mut y, &a, &x, 2.0);
        let expect = nalgebra::DVector::from_vec(vec![1.0, 1.0]) + &a * nalgebra::DVector::from_row_slice(&x) * 2.0;
        assert_eq!(y.as_slice(), expect.as_slice());
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(bilinear(&[1.0, 2.0], &b, &[3.0, -1.0]), 1.0 * (2.0 * 3.0 - 1.0) + 2.0 * (3.0 - 3.0));
    }
}
