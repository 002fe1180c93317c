use super::{expect_axis, Real, Result, Tensor, TensorError};

/// Flat input offsets of the maxima picked by [`maxpool1d`].
#[derive(Clone, Debug)]
pub struct MaxPoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Max pooling with window `k` and stride `k`. Ties resolve to the first
/// maximal position in the window.
pub fn maxpool1d<T: Real>(input: &Tensor<T>, k: usize) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let (b, c, t) = input.dims3("maxpool1d")?;
    if k == 0 || t % k != 0 {
        return Err(TensorError::contract(
            "maxpool1d",
            format!("time extent {t} is not divisible by the window {k}"),
        ));
    }
    let to = t / k;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * to);
    let mut argmax = Vec::with_capacity(b * c * to);
    for row in 0..b * c {
        for o in 0..to {
            let start = row * t + o * k;
            let mut best = start;
            for i in start + 1..start + k {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
    }
    Ok((
        Tensor::new(vec![b, c, to], out)?,
        MaxPoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool1d_backward<T: Real>(indices: &MaxPoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    expect_axis("maxpool1d backward", "pooled elements", indices.argmax.len(), grad_out.len())?;
    let mut dx = Tensor::zeros(&indices.input_shape);
    let d = dx.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

/// Average pooling with window `k` and stride `k`.
pub fn avgpool1d<T: Real>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (b, c, t) = input.dims3("avgpool1d")?;
    if k == 0 || t % k != 0 {
        return Err(TensorError::contract(
            "avgpool1d",
            format!("time extent {t} is not divisible by the window {k}"),
        ));
    }
    let inv = T::one() / T::of(k as f64);
    let out = input
        .data()
        .chunks_exact(k)
        .map(|w| w.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![b, c, t / k], out)
}

pub fn avgpool1d_backward<T: Real>(grad_out: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (b, c, to) = grad_out.dims3("avgpool1d backward")?;
    let inv = T::one() / T::of(k as f64);
    let dx = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, k))
        .collect();
    Tensor::new(vec![b, c, to * k], dx)
}

/// Nearest-neighbour upsampling: each sample repeated `factor` times.
pub fn upsample_nearest<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, t) = input.dims3("upsample_nearest")?;
    if factor == 0 {
        return Err(TensorError::contract("upsample_nearest", "factor must be at least 1"));
    }
    let out = input
        .data()
        .iter()
        .flat_map(|&x| std::iter::repeat_n(x, factor))
        .collect();
    Tensor::new(vec![b, c, t * factor], out)
}

pub fn upsample_nearest_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, t) = grad_out.dims3("upsample_nearest backward")?;
    if factor == 0 || t % factor != 0 {
        return Err(TensorError::contract(
            "upsample_nearest backward",
            format!("time extent {t} is not a multiple of factor {factor}"),
        ));
    }
    let dx = grad_out
        .data()
        .chunks_exact(factor)
        .map(|w| w.iter().copied().sum())
        .collect();
    Tensor::new(vec![b, c, t / factor], dx)
}
