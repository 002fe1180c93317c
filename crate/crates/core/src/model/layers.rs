use rand::Rng;

use super::BnVariant;
use crate::tensor::{
    batch_norm, batch_norm_backward, categorical_bn, categorical_bn_backward, conv1d, conv1d_backward, elu,
    elu_backward, sandwich_bn, sandwich_bn_backward, Affine, BatchNormState, CategoricalBNState, Mode, NormCache,
    Real, Result, RunningStats, SandwichBNState, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Parameter,
    /// Running statistics: saved and loaded, never optimized.
    Buffer,
}

pub(crate) type Named<'a, T> = Vec<(String, &'a Tensor<T>, TensorKind)>;
pub(crate) type NamedMut<'a, T> = Vec<(String, &'a mut Tensor<T>, TensorKind)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Real = f64> {
    /// `[out, in, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (c_in * k) as f64).sqrt();
        Conv {
            weight: Tensor::from_fn(&[c_out, c_in, k], |_| T::of(rng.random_range(-bound..bound))),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv1d(x, &self.weight, &self.bias)
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight, TensorKind::Parameter));
        out.push((format!("{prefix}.bias"), &self.bias, TensorKind::Parameter));
    }

    pub(crate) fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight, TensorKind::Parameter));
        out.push((format!("{prefix}.bias"), &mut self.bias, TensorKind::Parameter));
    }
}

/// One normalization layer of whichever variant the model uses.
#[derive(Clone, Debug, PartialEq)]
pub enum Norm<T: Real = f64> {
    Vanilla(BatchNormState<T>),
    Ccbn(CategoricalBNState<T>),
    Sabn(SandwichBNState<T>),
}

fn affine_named<'a, T: Real>(a: &'a Affine<T>, prefix: &str, suffix: &str, out: &mut Named<'a, T>) {
    out.push((format!("{prefix}.gamma{suffix}"), &a.gamma, TensorKind::Parameter));
    out.push((format!("{prefix}.beta{suffix}"), &a.beta, TensorKind::Parameter));
}

fn affine_named_mut<'a, T: Real>(a: &'a mut Affine<T>, prefix: &str, suffix: &str, out: &mut NamedMut<'a, T>) {
    out.push((format!("{prefix}.gamma{suffix}"), &mut a.gamma, TensorKind::Parameter));
    out.push((format!("{prefix}.beta{suffix}"), &mut a.beta, TensorKind::Parameter));
}

impl<T: Real> Norm<T> {
    pub fn new(variant: BnVariant, channels: usize, groups: usize) -> Self {
        match variant {
            BnVariant::Vanilla => Norm::Vanilla(BatchNormState::new(channels)),
            BnVariant::Ccbn => Norm::Ccbn(CategoricalBNState::new(channels, groups)),
            BnVariant::Sabn => Norm::Sabn(SandwichBNState::new(channels, groups)),
        }
    }

    pub fn stats(&self) -> &RunningStats<T> {
        match self {
            Norm::Vanilla(s) => &s.stats,
            Norm::Ccbn(s) => &s.stats,
            Norm::Sabn(s) => &s.stats,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, groups: &[usize], mode: Mode) -> Result<(Tensor<T>, NormCache<T>)> {
        match self {
            Norm::Vanilla(s) => batch_norm(x, s, mode),
            Norm::Ccbn(s) => categorical_bn(x, s, groups, mode),
            Norm::Sabn(s) => sandwich_bn(x, s, groups, mode),
        }
    }

    /// Returns the input gradient and `(name suffix, gradient)` pairs.
    pub fn backward(
        &self,
        cache: &NormCache<T>,
        groups: &[usize],
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
        let mut grads = Vec::new();
        let dx = match self {
            Norm::Vanilla(s) => {
                let (dx, g) = batch_norm_backward(cache, &s.affine, dy)?;
                grads.push(("gamma".to_string(), g.gamma));
                grads.push(("beta".to_string(), g.beta));
                dx
            }
            Norm::Ccbn(s) => {
                let (dx, gs) = categorical_bn_backward(cache, s, groups, dy)?;
                for (i, g) in gs.into_iter().enumerate() {
                    grads.push((format!("gamma.{i}"), g.gamma));
                    grads.push((format!("beta.{i}"), g.beta));
                }
                dx
            }
            Norm::Sabn(s) => {
                let (dx, g) = sandwich_bn_backward(cache, s, groups, dy)?;
                grads.push(("gamma_sa".to_string(), g.shared.gamma));
                grads.push(("beta_sa".to_string(), g.shared.beta));
                for (i, g) in g.groups.into_iter().enumerate() {
                    grads.push((format!("gamma.{i}"), g.gamma));
                    grads.push((format!("beta.{i}"), g.beta));
                }
                dx
            }
        };
        Ok((dx, grads))
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        let stats = match self {
            Norm::Vanilla(s) => {
                affine_named(&s.affine, prefix, "", out);
                &s.stats
            }
            Norm::Ccbn(s) => {
                for (i, a) in s.groups.iter().enumerate() {
                    affine_named(a, prefix, &format!(".{i}"), out);
                }
                &s.stats
            }
            Norm::Sabn(s) => {
                affine_named(&s.shared, prefix, "_sa", out);
                for (i, a) in s.groups.iter().enumerate() {
                    affine_named(a, prefix, &format!(".{i}"), out);
                }
                &s.stats
            }
        };
        out.push((format!("{prefix}.running_mean"), &stats.mean, TensorKind::Buffer));
        out.push((format!("{prefix}.running_var"), &stats.var, TensorKind::Buffer));
    }

    pub(crate) fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        let stats = match self {
            Norm::Vanilla(s) => {
                affine_named_mut(&mut s.affine, prefix, "", out);
                &mut s.stats
            }
            Norm::Ccbn(s) => {
                for (i, a) in s.groups.iter_mut().enumerate() {
                    affine_named_mut(a, prefix, &format!(".{i}"), out);
                }
                &mut s.stats
            }
            Norm::Sabn(s) => {
                affine_named_mut(&mut s.shared, prefix, "_sa", out);
                for (i, a) in s.groups.iter_mut().enumerate() {
                    affine_named_mut(a, prefix, &format!(".{i}"), out);
                }
                &mut s.stats
            }
        };
        out.push((format!("{prefix}.running_mean"), &mut stats.mean, TensorKind::Buffer));
        out.push((format!("{prefix}.running_var"), &mut stats.var, TensorKind::Buffer));
    }
}

/// conv -> ELU -> normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T: Real = f64> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
}

#[derive(Clone, Debug)]
pub struct UnitCache<T: Real = f64> {
    x: Tensor<T>,
    z: Tensor<T>,
    norm: NormCache<T>,
}

impl<T: Real> ConvUnit<T> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, variant: BnVariant, groups: usize, rng: &mut R) -> Self {
        ConvUnit { conv: Conv::init(c_in, c_out, k, rng), norm: Norm::new(variant, c_out, groups) }
    }

    pub fn forward(&mut self, x: Tensor<T>, groups: &[usize], mode: Mode) -> Result<(Tensor<T>, UnitCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (y, norm) = self.norm.forward(&elu(&z), groups, mode)?;
        Ok((y, UnitCache { x, z, norm }))
    }

    /// Appends `(full name, gradient)` pairs to `grads`.
    pub fn backward(
        &self,
        cache: &UnitCache<T>,
        groups: &[usize],
        dy: &Tensor<T>,
        prefix: &str,
        grads: &mut Vec<(String, Tensor<T>)>,
    ) -> Result<Tensor<T>> {
        let (da, norm_grads) = self.norm.backward(&cache.norm, groups, dy)?;
        let dz = elu_backward(&cache.z, &da);
        let g = conv1d_backward(&cache.x, &self.conv.weight, &dz)?;
        grads.push((format!("{prefix}.conv.weight"), g.kernel));
        grads.push((format!("{prefix}.conv.bias"), g.bias));
        grads.extend(norm_grads.into_iter().map(|(s, t)| (format!("{prefix}.norm.{s}"), t)));
        Ok(g.input)
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.conv.named(&format!("{prefix}.conv"), out);
        self.norm.named(&format!("{prefix}.norm"), out);
    }

    pub(crate) fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.conv.named_mut(&format!("{prefix}.conv"), out);
        self.norm.named_mut(&format!("{prefix}.norm"), out);
    }
}
