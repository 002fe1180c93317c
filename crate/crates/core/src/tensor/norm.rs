//! Batch normalization and its two conditional variants.
//!
//! All three share one normalization step: per channel, over the (batch,
//! time) axes in train mode or with the running estimates in eval mode.
//! They differ only in the affine transform applied afterwards:
//!
//! * vanilla:     `h = gamma * xhat + beta`
//! * categorical: `h = gamma[g] * xhat + beta[g]`
//! * sandwich:    `h = gamma[g] * (gamma_sa * xhat + beta_sa) + beta[g]`
//!
//! The group index `g` is given per batch element; a single index
//! broadcasts over the whole batch.

use super::{expect_axis, Real, Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> Affine<T> {
    pub fn identity(channels: usize) -> Self {
        Affine {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn new(gamma: Vec<T>, beta: Vec<T>) -> Result<Self> {
        expect_axis("affine", "channels", gamma.len(), beta.len())?;
        Ok(Affine {
            gamma: Tensor::new(vec![gamma.len()], gamma)?,
            beta: Tensor::new(vec![beta.len()], beta)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads<T = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> AffineGrads<T> {
    fn zeros(c: usize) -> Self {
        AffineGrads {
            gamma: Tensor::zeros(&[c]),
            beta: Tensor::zeros(&[c]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f64> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f64> {
    pub affine: Affine<T>,
    pub stats: RunningStats<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            affine: Affine::identity(channels),
            stats: RunningStats::new(channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalBNState<T = f64> {
    pub groups: Vec<Affine<T>>,
    pub stats: RunningStats<T>,
}

impl<T: Real> CategoricalBNState<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        CategoricalBNState {
            groups: vec![Affine::identity(channels); groups],
            stats: RunningStats::new(channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandwichBNState<T = f64> {
    pub shared: Affine<T>,
    pub groups: Vec<Affine<T>>,
    pub stats: RunningStats<T>,
}

impl<T: Real> SandwichBNState<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        SandwichBNState {
            shared: Affine::identity(channels),
            groups: vec![Affine::identity(channels); groups],
            stats: RunningStats::new(channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandwichGrads<T = f64> {
    pub shared: AffineGrads<T>,
    pub groups: Vec<AffineGrads<T>>,
}

/// What the backward pass needs from a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T = f64> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Real> NormCache<T> {
    pub fn normalized(&self) -> &Tensor<T> {
        &self.xhat
    }
}

fn normalize<T: Real>(
    input: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<NormCache<T>> {
    let (b, c, t) = input.dims3("batch_norm")?;
    expect_axis("batch_norm", "channels", stats.channels(), c)?;
    let x = input.data();
    let eps = T::of(stats.epsilon);
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        Mode::Train => {
            let n = b * t;
            let nf = T::of(n as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let rows = (0..b).map(|bi| &x[(bi * c + ch) * t..][..t]);
                let m = rows.clone().flatten().copied().sum::<T>() / nf;
                let v = rows.flatten().map(|&v| (v - m) * (v - m)).sum::<T>() / nf;
                mean[ch] = m;
                var[ch] = v;
            }
            let keep = T::of(stats.momentum);
            let take = T::one() - keep;
            let unbias = if n > 1 { nf / T::of((n - 1) as f64) } else { T::one() };
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = keep * *rm + take * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = keep * *rv + take * var[ch] * unbias;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for row in 0..b * c {
        let ch = row % c;
        for (o, &v) in xhat[row * t..(row + 1) * t].iter_mut().zip(&x[row * t..(row + 1) * t]) {
            *o = (v - mean[ch]) * inv_std[ch];
        }
    }
    Ok(NormCache {
        xhat: Tensor::new(input.shape().to_vec(), xhat)?,
        inv_std,
        mode,
    })
}

fn normalize_backward<T: Real>(cache: &NormCache<T>, dxhat: &[T]) -> Result<Tensor<T>> {
    let (b, c, t) = cache.xhat.dims3("batch_norm backward")?;
    let xh = cache.xhat.data();
    let mut dx = vec![T::zero(); xh.len()];
    match cache.mode {
        Mode::Eval => {
            for row in 0..b * c {
                let s = cache.inv_std[row % c];
                for i in row * t..(row + 1) * t {
                    dx[i] = dxhat[i] * s;
                }
            }
        }
        Mode::Train => {
            let nf = T::of((b * t) as f64);
            for ch in 0..c {
                let idx = (0..b).flat_map(|bi| (bi * c + ch) * t..(bi * c + ch + 1) * t);
                let sum_d: T = idx.clone().map(|i| dxhat[i]).sum();
                let sum_dx: T = idx.clone().map(|i| dxhat[i] * xh[i]).sum();
                let (md, mdx) = (sum_d / nf, sum_dx / nf);
                let s = cache.inv_std[ch];
                for i in idx {
                    dx[i] = s * (dxhat[i] - md - xh[i] * mdx);
                }
            }
        }
    }
    Tensor::new(cache.xhat.shape().to_vec(), dx)
}

fn resolve_groups(op: &'static str, groups: &[usize], batch: usize, count: usize) -> Result<Vec<usize>> {
    let resolved = match groups.len() {
        1 => vec![groups[0]; batch],
        n if n == batch => groups.to_vec(),
        n => {
            return Err(TensorError::Shape {
                op,
                axis: "group indices",
                expected: batch,
                found: n,
            })
        }
    };
    if let Some(&g) = resolved.iter().find(|&&g| g >= count) {
        return Err(TensorError::contract(
            op,
            format!("group index {g} out of range for {count} groups"),
        ));
    }
    Ok(resolved)
}

/// `out[b, c, t] = gamma_b[c] * x[b, c, t] + beta_b[c]` with the affine
/// picked per batch element.
fn apply_affine<T: Real>(x: &Tensor<T>, affine_of: impl Fn(usize) -> (Vec<T>, Vec<T>)) -> Tensor<T> {
    let (b, c, t) = x.dims3("affine").expect("rank checked by normalize");
    let mut out = x.data().to_vec();
    for bi in 0..b {
        let (g, be) = affine_of(bi);
        for ch in 0..c {
            for v in &mut out[(bi * c + ch) * t..][..t] {
                *v = g[ch] * *v + be[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Accumulates `(sum dh * u, sum dh)` per channel into `grads`, restricted
/// to the batch elements selected by `take`, and returns `dh * gamma`.
fn affine_backward<T: Real>(
    u: &Tensor<T>,
    dh: &[T],
    b: usize,
    take: impl Fn(usize) -> Option<usize>,
    gammas: &[&Tensor<T>],
    grads: &mut [AffineGrads<T>],
) -> Vec<T> {
    let (_, c, t) = u.dims3("affine").expect("rank checked");
    let mut du = vec![T::zero(); dh.len()];
    for bi in 0..b {
        let Some(k) = take(bi) else { continue };
        let gamma = gammas[k].data();
        for ch in 0..c {
            let off = (bi * c + ch) * t;
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for i in off..off + t {
                sg = sg + dh[i] * u.data()[i];
                sb = sb + dh[i];
                du[i] = dh[i] * gamma[ch];
            }
            let gr = &mut grads[k];
            gr.gamma.data_mut()[ch] = gr.gamma.data()[ch] + sg;
            gr.beta.data_mut()[ch] = gr.beta.data()[ch] + sb;
        }
    }
    du
}

pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    expect_axis("batch_norm", "affine channels", state.stats.channels(), state.affine.channels())?;
    let cache = normalize(input, &mut state.stats, mode)?;
    let (g, b) = (state.affine.gamma.data().to_vec(), state.affine.beta.data().to_vec());
    let out = apply_affine(&cache.xhat, |_| (g.clone(), b.clone()));
    Ok((out, cache))
}

pub fn batch_norm_backward<T: Real>(
    cache: &NormCache<T>,
    affine: &Affine<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, AffineGrads<T>)> {
    let (b, c, _) = cache.xhat.dims3("batch_norm backward")?;
    expect_axis("batch_norm backward", "elements", cache.xhat.len(), grad_out.len())?;
    let mut grads = vec![AffineGrads::zeros(c)];
    let dxhat = affine_backward(&cache.xhat, grad_out.data(), b, |_| Some(0), &[&affine.gamma], &mut grads);
    let dx = normalize_backward(cache, &dxhat)?;
    Ok((dx, grads.pop().expect("one group")))
}

pub fn categorical_bn<T: Real>(
    input: &Tensor<T>,
    state: &mut CategoricalBNState<T>,
    groups: &[usize],
    mode: Mode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, _, _) = input.dims3("categorical_bn")?;
    let idx = resolve_groups("categorical_bn", groups, b, state.groups.len())?;
    let cache = normalize(input, &mut state.stats, mode)?;
    let out = apply_affine(&cache.xhat, |bi| {
        let a = &state.groups[idx[bi]];
        (a.gamma.data().to_vec(), a.beta.data().to_vec())
    });
    Ok((out, cache))
}

pub fn categorical_bn_backward<T: Real>(
    cache: &NormCache<T>,
    state: &CategoricalBNState<T>,
    groups: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<AffineGrads<T>>)> {
    let (b, c, _) = cache.xhat.dims3("categorical_bn backward")?;
    expect_axis("categorical_bn backward", "elements", cache.xhat.len(), grad_out.len())?;
    let idx = resolve_groups("categorical_bn", groups, b, state.groups.len())?;
    let gammas: Vec<&Tensor<T>> = state.groups.iter().map(|a| &a.gamma).collect();
    let mut grads = vec![AffineGrads::zeros(c); state.groups.len()];
    let dxhat = affine_backward(&cache.xhat, grad_out.data(), b, |bi| Some(idx[bi]), &gammas, &mut grads);
    Ok((normalize_backward(cache, &dxhat)?, grads))
}

pub fn sandwich_bn<T: Real>(
    input: &Tensor<T>,
    state: &mut SandwichBNState<T>,
    groups: &[usize],
    mode: Mode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, _, _) = input.dims3("sandwich_bn")?;
    let idx = resolve_groups("sandwich_bn", groups, b, state.groups.len())?;
    let cache = normalize(input, &mut state.stats, mode)?;
    let (gs, bs) = (state.shared.gamma.data().to_vec(), state.shared.beta.data().to_vec());
    let shared = apply_affine(&cache.xhat, |_| (gs.clone(), bs.clone()));
    let out = apply_affine(&shared, |bi| {
        let a = &state.groups[idx[bi]];
        (a.gamma.data().to_vec(), a.beta.data().to_vec())
    });
    Ok((out, cache))
}

pub fn sandwich_bn_backward<T: Real>(
    cache: &NormCache<T>,
    state: &SandwichBNState<T>,
    groups: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, SandwichGrads<T>)> {
    let (b, c, _) = cache.xhat.dims3("sandwich_bn backward")?;
    expect_axis("sandwich_bn backward", "elements", cache.xhat.len(), grad_out.len())?;
    let idx = resolve_groups("sandwich_bn", groups, b, state.groups.len())?;
    let (gs, bs) = (state.shared.gamma.data().to_vec(), state.shared.beta.data().to_vec());
    let u = apply_affine(&cache.xhat, |_| (gs.clone(), bs.clone()));
    let gammas: Vec<&Tensor<T>> = state.groups.iter().map(|a| &a.gamma).collect();
    let mut group_grads = vec![AffineGrads::zeros(c); state.groups.len()];
    let du = affine_backward(&u, grad_out.data(), b, |bi| Some(idx[bi]), &gammas, &mut group_grads);
    let mut shared = vec![AffineGrads::zeros(c)];
    let dxhat = affine_backward(&cache.xhat, &du, b, |_| Some(0), &[&state.shared.gamma], &mut shared);
    Ok((
        normalize_backward(cache, &dxhat)?,
        SandwichGrads {
            shared: shared.pop().expect("one shared affine"),
            groups: group_grads,
        },
    ))
}
