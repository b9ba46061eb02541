use crate::diff::Tensor;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

fn centered<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = x.rows_cols();
    let mut means = vec![T::zero(); n];
    for i in 0..m {
        for (a, &v) in means.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    let inv = T::one() / T::of(m as f64);
    means.iter_mut().for_each(|v| *v *= inv);
    let mut out = x.flatten_rows();
    for row in out.data_mut().chunks_mut(n) {
        for (v, &mu) in row.iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    out
}

/// Linear CKA: `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)`, on column-centered features when `center`.
pub fn linear_cka<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, center: bool) -> Result<T> {
    let (mx, _) = x.rows_cols();
    let (my, _) = y.rows_cols();
    if mx != my {
        return Err(shape_err(format!("CKA over {mx} and {my} samples")));
    }
    if mx < 2 {
        return Err(invalid("CKA needs at least two samples"));
    }
    let (xc, yc) = if center {
        (centered(x), centered(y))
    } else {
        (x.flatten_rows(), y.flatten_rows())
    };
    let cross = yc.t_matmul(&xc)?.sq_norm();
    let xx = xc.t_matmul(&xc)?.sq_norm().sqrt();
    let yy = yc.t_matmul(&yc)?.sq_norm().sqrt();
    if xx == T::zero() || yy == T::zero() {
        return Err(invalid("CKA input has zero variance"));
    }
    Ok(cross / (xx * yy))
}
