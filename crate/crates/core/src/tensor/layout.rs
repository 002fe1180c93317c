//! Pure data-movement helpers: channel concat/split, time padding/cropping,
//! and the `[B, C, L] <-> [B, L, C]` swap.

use super::{expect_axis, Real, Result, Tensor, TensorError};

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ta) = a.dims3("concat")?;
    let (bb, cb, tb) = b.dims3("concat")?;
    expect_axis("concat", "batch", ba, bb)?;
    expect_axis("concat", "time", ta, tb)?;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..ba {
        out.extend_from_slice(&a.data()[n * ca * ta..(n + 1) * ca * ta]);
        out.extend_from_slice(&b.data()[n * cb * tb..(n + 1) * cb * tb]);
    }
    Tensor::new(vec![ba, ca + cb, ta], out)
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, t) = x.dims3("split")?;
    if first == 0 || first >= c {
        return Err(TensorError::contract(
            "split",
            format!("cannot split {c} channels at {first}"),
        ));
    }
    let mut left = Vec::with_capacity(b * first * t);
    let mut right = Vec::with_capacity(b * (c - first) * t);
    for n in 0..b {
        let row = &x.data()[n * c * t..(n + 1) * c * t];
        left.extend_from_slice(&row[..first * t]);
        right.extend_from_slice(&row[first * t..]);
    }
    Ok((
        Tensor::new(vec![b, first, t], left)?,
        Tensor::new(vec![b, c - first, t], right)?,
    ))
}

/// Zero-pads the time axis with `left` and `right` samples.
pub fn pad_time<T: Real>(x: &Tensor<T>, left: usize, right: usize) -> Result<Tensor<T>> {
    let (b, c, t) = x.dims3("pad")?;
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let tp = t + left + right;
    let mut out = vec![T::zero(); b * c * tp];
    for row in 0..b * c {
        out[row * tp + left..row * tp + left + t].copy_from_slice(&x.data()[row * t..(row + 1) * t]);
    }
    Tensor::new(vec![b, c, tp], out)
}

/// Keeps time samples `[start, start + len)`.
pub fn crop_time<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (b, c, t) = x.dims3("crop")?;
    if start + len > t || len == 0 {
        return Err(TensorError::contract(
            "crop",
            format!("window [{start}, {}) outside time extent {t}", start + len),
        ));
    }
    if start == 0 && len == t {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(b * c * len);
    for row in 0..b * c {
        out.extend_from_slice(&x.data()[row * t + start..row * t + start + len]);
    }
    Tensor::new(vec![b, c, len], out)
}

/// `[B, X, Y] -> [B, Y, X]`.
pub fn swap_last_axes<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, m, n) = x.dims3("swap_last_axes")?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[bi * m * n + j * m + i] = src[bi * m * n + i * n + j];
            }
        }
    }
    Tensor::new(vec![b, n, m], out)
}
