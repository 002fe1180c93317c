use super::{Real, Result, Tensor, TensorError};

/// ELU with alpha = 1.
pub fn elu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v.exp_m1() })
}

/// Needs the forward input `x`.
pub fn elu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * v.exp() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Needs the forward output `y = tanh(x)`.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| g * (T::one() - v * v))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// Splits a shape around `axis` into (outer, axis extent, inner stride).
fn around(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::contract(
            "softmax",
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = around(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let m = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - m).exp();
                out[at(j)] = e;
                z = z + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Needs the forward output `y`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = around(y.shape(), axis)?;
    let (p, g) = (y.data(), grad_out.data());
    let mut dx = vec![T::zero(); p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot: T = (0..n).map(|j| p[at(j)] * g[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = p[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn elu_values() {
        let y = elu(&Tensor::<f64>::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.0);
        assert!((y.data()[2] - (-0.632_120_558_828_557_7)).abs() < 1e-15);
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let y = softmax(&Tensor::<f64>::new(vec![5], vec![3.3; 5]).unwrap(), 0).unwrap();
        for &p in y.data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let y = softmax(&Tensor::<f64>::new(vec![1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap(), 1).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        // loss = -log softmax(x)[target] over channel axis of [1, 4, 3]
        let x: Vec<f64> = (0..12).map(|i| ((i * 5 % 9) as f64 - 4.0) / 2.0).collect();
        let targets = [2usize, 0, 3];
        let loss = |v: &[f64]| -> f64 {
            let p = softmax(&Tensor::new(vec![1, 4, 3], v.to_vec()).unwrap(), 1).unwrap();
            targets.iter().enumerate().map(|(t, &c)| -p.data()[c * 3 + t].ln()).sum()
        };
        let xt = Tensor::new(vec![1, 4, 3], x.clone()).unwrap();
        let p = softmax(&xt, 1).unwrap();
        let mut g = Tensor::zeros(&[1, 4, 3]);
        for (t, &c) in targets.iter().enumerate() {
            g.data_mut()[c * 3 + t] = -1.0 / p.data()[c * 3 + t];
        }
        let dx = softmax_backward(&p, &g, 1).unwrap();
        assert!(grad_check(loss, dx.data(), &x, 1e-5) < 1e-4);
    }

    #[test]
    fn elu_tanh_gradients() {
        let x: Vec<f64> = vec![-2.0, -0.3, 0.4, 1.7, -0.9];
        let xt = Tensor::new(vec![5], x.clone()).unwrap();
        let ones = Tensor::full(&[5], 1.0);
        let de = elu_backward(&xt, &ones);
        assert!(grad_check(|v| elu(&Tensor::new(vec![5], v.to_vec()).unwrap()).sum(), de.data(), &x, 1e-5) < 1e-8);
        let dt = tanh_backward(&tanh(&xt), &ones);
        assert!(grad_check(|v| tanh(&Tensor::new(vec![5], v.to_vec()).unwrap()).sum(), dt.data(), &x, 1e-5) < 1e-8);
    }
}
