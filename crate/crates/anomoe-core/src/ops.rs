//! Forward operations and their hand-derived backward counterparts.
//!
//! Each `*_backward` takes the upstream gradient plus whatever the forward
//! pass produced and returns gradients with respect to the inputs. There is
//! no tape: the model composes these pairs explicitly, which keeps the
//! gradient of every trainable parameter auditable against finite
//! differences (see [`crate::gradcheck`]).

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

/// `a[m×k] · b[k×n] -> [m×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CoreError::Shape("matmul requires rank-2 tensors".into()));
    }
    if a.cols() != b.rows() {
        return Err(CoreError::Shape(format!(
            "matmul inner dimension mismatch: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            let b_row = b.row(p);
            for j in 0..n {
                out_row[j] = out_row[j] + a_ip * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Gradients of `c = a·b`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Real>(
    d_c: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d_a = matmul(d_c, &b.transpose()).expect("matmul_backward dA shapes");
    let d_b = matmul(&a.transpose(), d_c).expect("matmul_backward dB shapes");
    (d_a, d_b)
}

/// Temperature softmax along `axis` (0 or 1) of a rank-1 or rank-2 tensor.
///
/// Logits are divided by `temperature` before the usual max-shifted
/// exponentiation, so outputs are invariant to adding a constant.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize, temperature: T) -> Result<Tensor<T>> {
    if temperature <= T::zero() {
        return Err(CoreError::Param(format!(
            "softmax temperature must be positive, got {:?}",
            temperature
        )));
    }
    match x.rank() {
        1 => {
            if axis != 0 {
                return Err(CoreError::Param("axis out of range for rank-1".into()));
            }
            let mut out = x.clone();
            softmax_slice(out.data_mut(), temperature);
            Ok(out)
        }
        2 => {
            let mut out = x.clone();
            match axis {
                1 => {
                    for r in 0..out.rows() {
                        softmax_slice(out.row_mut(r), temperature);
                    }
                }
                0 => {
                    let mut t = out.transpose();
                    for r in 0..t.rows() {
                        softmax_slice(t.row_mut(r), temperature);
                    }
                    out = t.transpose();
                }
                _ => return Err(CoreError::Param("axis out of range for rank-2".into())),
            }
            Ok(out)
        }
        r => Err(CoreError::Shape(format!("softmax unsupported rank {r}"))),
    }
}

fn softmax_slice<T: Real>(v: &mut [T], temperature: T) {
    let mut max = T::neg_infinity();
    for x in v.iter_mut() {
        *x = *x / temperature;
        if *x > max {
            max = *x;
        }
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Backward of temperature softmax given its output `y`:
/// `dx_i = y_i (dy_i − Σ_j dy_j y_j) / temperature` per reduction slice.
pub fn softmax_backward<T: Real>(
    d_y: &Tensor<T>,
    y: &Tensor<T>,
    axis: usize,
    temperature: T,
) -> Tensor<T> {
    assert_eq!(d_y.shape(), y.shape());
    let mut d_x = Tensor::zeros(y.shape());
    let apply = |dy: &[T], yv: &[T], dx: &mut [T]| {
        let dot = dy
            .iter()
            .zip(yv.iter())
            .fold(T::zero(), |acc, (&g, &p)| acc + g * p);
        for i in 0..yv.len() {
            dx[i] = yv[i] * (dy[i] - dot) / temperature;
        }
    };
    match y.rank() {
        1 => apply(d_y.data(), y.data(), d_x.data_mut()),
        2 => match axis {
            1 => {
                for r in 0..y.rows() {
                    let c = y.cols();
                    apply(
                        d_y.row(r),
                        y.row(r),
                        &mut d_x.data_mut()[r * c..(r + 1) * c],
                    );
                }
            }
            0 => {
                let yt = y.transpose();
                let dyt = d_y.transpose();
                let mut dxt = Tensor::zeros(yt.shape());
                for r in 0..yt.rows() {
                    let c = yt.cols();
                    apply(
                        dyt.row(r),
                        yt.row(r),
                        &mut dxt.data_mut()[r * c..(r + 1) * c],
                    );
                }
                d_x = dxt.transpose();
            }
            _ => unreachable!("axis validated in forward"),
        },
        _ => unreachable!("rank validated in forward"),
    }
    d_x
}

/// Top-k selection with softmax-normalized gates over the selected logits.
///
/// Indices are ordered by descending logit; ties resolve to the lower index
/// so the selection is deterministic.
pub fn topk_select<T: Real>(logits: &Tensor<T>, k: usize) -> Result<(Vec<usize>, Tensor<T>)> {
    let e = logits.len();
    if k == 0 || k > e {
        return Err(CoreError::Param(format!(
            "top-k requires 1 <= k <= {e}, got {k}"
        )));
    }
    if !logits.is_finite() {
        return Err(CoreError::Eval("non-finite routing logits".into()));
    }
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&i, &j| {
        logits.data()[j]
            .partial_cmp(&logits.data()[i])
            .expect("finite logits")
            .then(i.cmp(&j))
    });
    let selected: Vec<usize> = order[..k].to_vec();
    let mut gate_data: Vec<T> = selected.iter().map(|&i| logits.data()[i]).collect();
    softmax_slice(&mut gate_data, T::one());
    Ok((selected, Tensor::from_vec(&[k], gate_data)?))
}

/// Backward of [`topk_select`]: gradient reaches only the selected logits,
/// through the softmax over them; unselected logits get zero.
pub fn topk_select_backward<T: Real>(
    d_gates: &Tensor<T>,
    gates: &Tensor<T>,
    selected: &[usize],
    num_logits: usize,
) -> Tensor<T> {
    let d_sel = softmax_backward(d_gates, gates, 0, T::one());
    let mut d_logits = Tensor::zeros(&[num_logits]);
    for (slot, &idx) in selected.iter().enumerate() {
        d_logits.data_mut()[idx] = d_sel.data()[slot];
    }
    d_logits
}

/// Elementwise rectifier.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] given the pre-activation input.
pub fn relu_backward<T: Real>(d_y: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    d_y.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
        .expect("relu_backward shapes")
}

/// L2-normalizes a vector, returning the unit vector and the original norm.
pub fn l2_normalize<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    let norm = x.dot(x)?.sqrt();
    if norm <= T::zero() {
        return Err(CoreError::Eval("cannot normalize zero vector".into()));
    }
    Ok((x.scale(T::one() / norm), norm))
}

/// Backward of [`l2_normalize`]: `dx = (dy − y (y·dy)) / norm`.
pub fn l2_normalize_backward<T: Real>(d_y: &Tensor<T>, y: &Tensor<T>, norm: T) -> Tensor<T> {
    let dot = y.dot(d_y).expect("l2_normalize_backward shapes");
    let mut d_x = d_y.clone();
    d_x.add_scaled(y, -dot).expect("same shape");
    d_x.scale(T::one() / norm)
}

/// Row-wise L2 normalization of a rank-2 tensor; returns per-row norms.
pub fn normalize_rows<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let norm = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt();
        if norm <= T::zero() {
            return Err(CoreError::Eval(format!("zero-norm row {r} in normalize")));
        }
        for v in row.iter_mut() {
            *v = *v / norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward of [`normalize_rows`].
pub fn normalize_rows_backward<T: Real>(
    d_y: &Tensor<T>,
    y: &Tensor<T>,
    norms: &[T],
) -> Tensor<T> {
    let mut d_x = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (dy, yv) = (d_y.row(r), y.row(r));
        let dot = dy
            .iter()
            .zip(yv.iter())
            .fold(T::zero(), |acc, (&g, &u)| acc + g * u);
        let c = y.cols();
        let dx = &mut d_x.data_mut()[r * c..(r + 1) * c];
        for i in 0..c {
            dx[i] = (dy[i] - yv[i] * dot) / norms[r];
        }
    }
    d_x
}

/// Mean over the rows of a rank-2 tensor -> rank-1 of length `cols`.
pub fn mean_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let inv = T::one() / real::<T>(r as f64);
    let mut out = Tensor::zeros(&[c]);
    for i in 0..r {
        for (j, &v) in x.row(i).iter().enumerate() {
            out.data_mut()[j] = out.data()[j] + v * inv;
        }
    }
    out
}

/// Backward of [`mean_rows`]: every row receives `d_y / rows`.
pub fn mean_rows_backward<T: Real>(d_y: &Tensor<T>, rows: usize) -> Tensor<T> {
    let c = d_y.len();
    let inv = T::one() / real::<T>(rows as f64);
    let mut out = Tensor::zeros(&[rows, c]);
    for r in 0..rows {
        for j in 0..c {
            out.data_mut()[r * c + j] = d_y.data()[j] * inv;
        }
    }
    out
}
