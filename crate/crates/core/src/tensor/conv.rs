//! 1-D convolution with stride 1 and zero "same" padding.
//!
//! Layout:
//! * input:  `[B, Cin, T]`
//! * kernel: `[Cout, Cin, k]`, `k` odd
//! * bias:   `[Cout]`
//! * output: `[B, Cout, T]`

use super::{expect_axis, for_each_chunk, Real, Result, Tensor, TensorError};

pub struct Conv1dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    time: usize,
    k: usize,
}

impl Geometry {
    fn check<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Self> {
        let (batch, c_in, time) = input.dims3("conv1d")?;
        let (c_out, kc_in, k) = match kernel.shape()[..] {
            [o, i, k] => (o, i, k),
            _ => {
                return Err(TensorError::Shape {
                    op: "conv1d",
                    axis: "kernel rank",
                    expected: 3,
                    found: kernel.rank(),
                })
            }
        };
        expect_axis("conv1d", "input channels", kc_in, c_in)?;
        if k % 2 == 0 {
            return Err(TensorError::contract(
                "conv1d",
                format!("kernel width must be odd, got {k}"),
            ));
        }
        if let Some(bias) = bias {
            expect_axis("conv1d", "bias rank", 1, bias.rank())?;
            expect_axis("conv1d", "output channels", c_out, bias.shape()[0])?;
        }
        Ok(Geometry {
            batch,
            c_in,
            c_out,
            time,
            k,
        })
    }

    /// Output positions `t` for which `t + j - pad` lands inside the input.
    #[inline]
    fn valid(&self, j: usize) -> (usize, usize) {
        let pad = (self.k - 1) / 2;
        let lo = pad.saturating_sub(j);
        let hi = (self.time + pad).saturating_sub(j).min(self.time);
        (lo, hi)
    }
}

pub fn conv1d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Geometry::check(input, kernel, Some(bias))?;
    let pad = (g.k - 1) / 2;
    let (x, w, bv) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![T::zero(); g.batch * g.c_out * g.time];
    for_each_chunk(&mut out, g.time, |row, y| {
        let (b, co) = (row / g.c_out, row % g.c_out);
        y.fill(bv[co]);
        for ci in 0..g.c_in {
            let xs = &x[(b * g.c_in + ci) * g.time..][..g.time];
            let ws = &w[(co * g.c_in + ci) * g.k..][..g.k];
            for (j, &wj) in ws.iter().enumerate() {
                let (lo, hi) = g.valid(j);
                if lo >= hi {
                    continue;
                }
                let src = &xs[lo + j - pad..hi + j - pad];
                for (yt, &xt) in y[lo..hi].iter_mut().zip(src) {
                    *yt = *yt + wj * xt;
                }
            }
        }
    });
    Tensor::new(vec![g.batch, g.c_out, g.time], out)
}

pub fn conv1d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv1dGrads<T>> {
    let g = Geometry::check(input, kernel, None)?;
    let (gb, gc, gt) = grad_out.dims3("conv1d backward")?;
    expect_axis("conv1d backward", "batch", g.batch, gb)?;
    expect_axis("conv1d backward", "output channels", g.c_out, gc)?;
    expect_axis("conv1d backward", "time", g.time, gt)?;
    let pad = (g.k - 1) / 2;
    let (x, w, dy) = (input.data(), kernel.data(), grad_out.data());

    let mut dx = vec![T::zero(); x.len()];
    for_each_chunk(&mut dx, g.time, |row, dxs| {
        let (b, ci) = (row / g.c_in, row % g.c_in);
        for co in 0..g.c_out {
            let dys = &dy[(b * g.c_out + co) * g.time..][..g.time];
            let ws = &w[(co * g.c_in + ci) * g.k..][..g.k];
            for (j, &wj) in ws.iter().enumerate() {
                let (lo, hi) = g.valid(j);
                if lo >= hi {
                    continue;
                }
                let dst = &mut dxs[lo + j - pad..hi + j - pad];
                for (d, &gy) in dst.iter_mut().zip(&dys[lo..hi]) {
                    *d = *d + wj * gy;
                }
            }
        }
    });

    let mut dw = vec![T::zero(); w.len()];
    for_each_chunk(&mut dw, g.c_in * g.k, |co, dws| {
        for b in 0..g.batch {
            let dys = &dy[(b * g.c_out + co) * g.time..][..g.time];
            for ci in 0..g.c_in {
                let xs = &x[(b * g.c_in + ci) * g.time..][..g.time];
                for j in 0..g.k {
                    let (lo, hi) = g.valid(j);
                    if lo >= hi {
                        continue;
                    }
                    let dot: T = dys[lo..hi]
                        .iter()
                        .zip(&xs[lo + j - pad..hi + j - pad])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    dws[ci * g.k + j] = dws[ci * g.k + j] + dot;
                }
            }
        }
    });

    let mut db = vec![T::zero(); g.c_out];
    for (co, d) in db.iter_mut().enumerate() {
        for b in 0..g.batch {
            *d = *d + dy[(b * g.c_out + co) * g.time..][..g.time].iter().copied().sum();
        }
    }

    Ok(Conv1dGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.c_out], db)?,
    })
}
