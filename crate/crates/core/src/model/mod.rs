//! The U-Sleep network: a 1-D U-Net encoder/decoder followed by a segment
//! classifier that pools the per-sample representation into one
//! probability row per 30 s epoch.
//!
//! ```text
//! encoder n:  conv -> ELU -> BN ----------------------+ skip
//!             maxpool 2                               |
//! decoder n:  upsample 2 -> conv -> ELU -> BN -> concat -> conv -> ELU -> BN
//! classifier: conv1 -> tanh -> avgpool(epoch) -> conv1 -> ELU -> conv1 -> softmax
//! ```
//!
//! Inputs are zero-padded symmetrically to a multiple of `2^depth` and the
//! decoder output is cropped back before the classifier.

mod checkpoint;
mod config;
mod layers;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointError};
pub use config::{ArchitectureConfig, BnVariant, ConfigError, N_CLASSES};
pub use layers::{Conv, ConvUnit, Norm, TensorKind, UnitCache};

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{
    avgpool1d, avgpool1d_backward, concat_channels, conv1d_backward, crop_time, elu, elu_backward, maxpool1d,
    maxpool1d_backward, pad_time, softmax, softmax_backward, split_channels, swap_last_axes, tanh, tanh_backward,
    upsample_nearest, upsample_nearest_backward, Affine, BatchNormState, MaxPoolIndices, Mode, Real, Result,
    SandwichBNState, Tensor, TensorError,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T: Real = f64> {
    pub up: ConvUnit<T>,
    pub merge: ConvUnit<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Real = f64> {
    pub dense: Conv<T>,
    pub hidden: Conv<T>,
    pub output: Conv<T>,
}

/// Named parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T: Real = f64> {
    config: ArchitectureConfig,
    pub encoder: Vec<ConvUnit<T>>,
    /// Indexed by resolution level; runs deepest first.
    pub decoder: Vec<DecoderBlock<T>>,
    pub classifier: Classifier<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real = f64> {
    groups: Vec<usize>,
    pad_left: usize,
    pad_right: usize,
    encoder: Vec<(UnitCache<T>, MaxPoolIndices)>,
    decoder: Vec<(UnitCache<T>, UnitCache<T>)>,
    features: Tensor<T>,
    dense_out: Tensor<T>,
    pooled: Tensor<T>,
    hidden_z: Tensor<T>,
    hidden_out: Tensor<T>,
    /// `[B, K, L]`
    probs: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Probabilities as `[B, L, K]`.
    pub fn probabilities(&self) -> Tensor<T> {
        swap_last_axes(&self.probs).expect("rank 3")
    }
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> UNet<T> {
    pub fn build<R: Rng + ?Sized>(config: &ArchitectureConfig, rng: &mut R) -> std::result::Result<Self, ConfigError> {
        config.validate()?;
        let (k, v, g) = (config.kernel_size, config.bn_variant, config.norm_groups());
        let f = config.filter_schedule();
        let mut encoder = Vec::with_capacity(config.depth);
        let mut c_in = config.in_channels;
        for &c in &f {
            encoder.push(ConvUnit::init(c_in, c, k, v, g, rng));
            c_in = c;
        }
        let mut decoder: Vec<DecoderBlock<T>> = Vec::with_capacity(config.depth);
        for n in (0..config.depth).rev() {
            let below = if n + 1 == config.depth { f[n] } else { f[n + 1] };
            let up = ConvUnit::init(below, f[n], k, v, g, rng);
            let merge = ConvUnit::init(2 * f[n], f[n], k, v, g, rng);
            decoder.push(DecoderBlock { up, merge });
        }
        decoder.reverse();
        let kc = config.n_classes;
        let classifier = Classifier {
            dense: Conv::init(f[0], kc, 1, rng),
            hidden: Conv::init(kc, kc, 1, rng),
            output: Conv::init(kc, kc, 1, rng),
        };
        Ok(UNet { config: config.clone(), encoder, decoder, classifier })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    /// Every parameter and buffer with its name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>, TensorKind)> {
        let mut out = Vec::new();
        for (n, u) in self.encoder.iter().enumerate() {
            u.named(&format!("encoder.{n}"), &mut out);
        }
        for (n, d) in self.decoder.iter().enumerate() {
            d.up.named(&format!("decoder.{n}.up"), &mut out);
            d.merge.named(&format!("decoder.{n}.merge"), &mut out);
        }
        self.classifier.dense.named("classifier.dense", &mut out);
        self.classifier.hidden.named("classifier.hidden", &mut out);
        self.classifier.output.named("classifier.output", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>, TensorKind)> {
        let mut out = Vec::new();
        for (n, u) in self.encoder.iter_mut().enumerate() {
            u.named_mut(&format!("encoder.{n}"), &mut out);
        }
        for (n, d) in self.decoder.iter_mut().enumerate() {
            d.up.named_mut(&format!("decoder.{n}.up"), &mut out);
            d.merge.named_mut(&format!("decoder.{n}.merge"), &mut out);
        }
        self.classifier.dense.named_mut("classifier.dense", &mut out);
        self.classifier.hidden.named_mut("classifier.hidden", &mut out);
        self.classifier.output.named_mut("classifier.output", &mut out);
        out
    }

    /// Trainable tensors only.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, _, k)| *k == TensorKind::Parameter)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, _, k)| *k == TensorKind::Parameter)
            .map(|(_, t, _)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t, _)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        let mut out = UNet::<U>::skeleton(&self.config);
        let src: BTreeMap<String, &Tensor<T>> = self.named_tensors().into_iter().map(|(n, t, _)| (n, t)).collect();
        for (name, t, _) in out.named_tensors_mut() {
            *t = src[&name].cast();
        }
        out
    }

    /// Same shapes as [`UNet::build`], deterministic contents.
    pub(crate) fn skeleton(config: &ArchitectureConfig) -> Self {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::build(config, &mut rng).expect("validated config")
    }

    fn check_input(&self, x: &Tensor<T>, groups: &[usize]) -> Result<(usize, usize, usize)> {
        let (b, c, t) = x.dims3("forward")?;
        crate::tensor::expect_axis("forward", "input channels", self.config.in_channels, c)?;
        let spe = self.config.samples_per_epoch();
        if t % spe != 0 {
            return Err(TensorError::contract(
                "forward",
                format!("time extent {t} is not a multiple of the {spe}-sample epoch"),
            ));
        }
        if self.config.bn_variant != BnVariant::Vanilla && groups.len() != 1 && groups.len() != b {
            return Err(TensorError::contract(
                "forward",
                format!("{} group indices for a batch of {b}", groups.len()),
            ));
        }
        let a = self.config.alignment();
        let padded = t.div_ceil(a) * a;
        let left = (padded - t) / 2;
        Ok((left, padded - t - left, t))
    }

    /// Forward pass keeping what backward needs. In train mode the
    /// normalization layers use and update batch statistics.
    pub fn forward_cached(&mut self, x: &Tensor<T>, groups: &[usize], mode: Mode) -> Result<ForwardCache<T>> {
        let (pad_left, pad_right, time) = self.check_input(x, groups)?;
        let groups: Vec<usize> = if self.config.bn_variant == BnVariant::Vanilla { vec![0] } else { groups.to_vec() };
        let mut h = pad_time(x, pad_left, pad_right)?;
        let mut enc_caches = Vec::with_capacity(self.config.depth);
        let mut skips = Vec::with_capacity(self.config.depth);
        for unit in &mut self.encoder {
            let (y, c) = unit.forward(h, &groups, mode)?;
            let (pooled, idx) = maxpool1d(&y, 2)?;
            skips.push(y);
            enc_caches.push((c, idx));
            h = pooled;
        }
        let mut dec_caches = Vec::with_capacity(self.config.depth);
        for n in (0..self.config.depth).rev() {
            let block = &mut self.decoder[n];
            let (u, cu) = block.up.forward(upsample_nearest(&h, 2)?, &groups, mode)?;
            let (m, cm) = block.merge.forward(concat_channels(&u, &skips[n])?, &groups, mode)?;
            dec_caches.push((cu, cm));
            h = m;
        }
        dec_caches.reverse();
        let features = crop_time(&h, pad_left, time)?;
        let cl = &self.classifier;
        let dense_out = tanh(&cl.dense.forward(&features)?);
        let pooled = avgpool1d(&dense_out, self.config.samples_per_epoch())?;
        let hidden_z = cl.hidden.forward(&pooled)?;
        let hidden_out = elu(&hidden_z);
        let probs = softmax(&cl.output.forward(&hidden_out)?, 1)?;
        Ok(ForwardCache {
            groups,
            pad_left,
            pad_right,
            encoder: enc_caches,
            decoder: dec_caches,
            features,
            dense_out,
            pooled,
            hidden_z,
            hidden_out,
            probs,
        })
    }

    /// Train-mode forward: `[B, L, K]` probabilities plus the cache.
    pub fn forward_train(&mut self, x: &Tensor<T>, groups: &[usize]) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cache = self.forward_cached(x, groups, Mode::Train)?;
        Ok((cache.probabilities(), cache))
    }

    /// Eval-mode forward with running statistics: `[B, L, K]`.
    pub fn forward(&self, x: &Tensor<T>, groups: &[usize]) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        Ok(scratch.forward_cached(x, groups, Mode::Eval)?.probabilities())
    }

    /// Gradients of a loss given `d loss / d probabilities` as `[B, L, K]`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_probs: &Tensor<T>) -> Result<Gradients<T>> {
        let g = swap_last_axes(grad_probs)?;
        let dlogits = softmax_backward(&cache.probs, &g, 1)?;
        self.backward_logits(cache, &dlogits)
    }

    /// Gradients given `d loss / d logits` as `[B, K, L]` (pre-softmax).
    pub fn backward_logits(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<(String, Tensor<T>)> = Vec::new();
        let cl = &self.classifier;
        let mut conv = |name: &str, input: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>| -> Result<Tensor<T>> {
            let g = conv1d_backward(input, w, dy)?;
            grads.push((format!("classifier.{name}.weight"), g.kernel));
            grads.push((format!("classifier.{name}.bias"), g.bias));
            Ok(g.input)
        };
        let d_hidden_out = conv("output", &cache.hidden_out, &cl.output.weight, dlogits)?;
        let d_hidden_z = elu_backward(&cache.hidden_z, &d_hidden_out);
        let d_pooled = conv("hidden", &cache.pooled, &cl.hidden.weight, &d_hidden_z)?;
        let d_dense_out = avgpool1d_backward(&d_pooled, self.config.samples_per_epoch())?;
        let d_dense_z = tanh_backward(&cache.dense_out, &d_dense_out);
        let d_features = conv("dense", &cache.features, &cl.dense.weight, &d_dense_z)?;

        let groups = &cache.groups;
        let mut dh = pad_time(&d_features, cache.pad_left, cache.pad_right)?;
        let mut d_skips = Vec::with_capacity(self.config.depth);
        for n in 0..self.config.depth {
            let block = &self.decoder[n];
            let (cu, cm) = &cache.decoder[n];
            let d_concat = block.merge.backward(cm, groups, &dh, &format!("decoder.{n}.merge"), &mut grads)?;
            let (d_up, d_skip) = split_channels(&d_concat, self.config.filters(n))?;
            d_skips.push(d_skip);
            let d_upsampled = block.up.backward(cu, groups, &d_up, &format!("decoder.{n}.up"), &mut grads)?;
            dh = upsample_nearest_backward(&d_upsampled, 2)?;
        }
        for n in (0..self.config.depth).rev() {
            let (cu, idx) = &cache.encoder[n];
            let mut dy = maxpool1d_backward(idx, &dh)?;
            dy.add_assign(&d_skips[n]);
            dh = self.encoder[n].backward(cu, groups, &dy, &format!("encoder.{n}"), &mut grads)?;
        }
        Ok(grads.into_iter().collect())
    }

    /// Turns every vanilla normalization into a sandwich layer with the
    /// trained affine as the shared pair and `groups` identity affines, so
    /// outputs are unchanged for every group.
    pub fn convert_to_sabn(&self, groups: usize) -> Result<UNet<T>> {
        if groups == 0 {
            return Err(TensorError::contract("convert_to_sabn", "G must be at least 1"));
        }
        if self.config.bn_variant != BnVariant::Vanilla {
            return Err(TensorError::contract(
                "convert_to_sabn",
                format!("source model uses {} normalization, expected vanilla", self.config.bn_variant),
            ));
        }
        let mut out = self.clone();
        out.config.bn_variant = BnVariant::Sabn;
        out.config.groups = groups;
        out.for_each_norm(|norm| {
            if let Norm::Vanilla(s) = norm {
                *norm = Norm::Sabn(SandwichBNState {
                    shared: s.affine.clone(),
                    groups: vec![Affine::identity(s.affine.channels()); groups],
                    stats: s.stats.clone(),
                });
            }
        });
        Ok(out)
    }

    /// Folds a single-group sandwich model back into vanilla
    /// normalization: `gamma = gamma_1 * gamma_sa`,
    /// `beta = gamma_1 * beta_sa + beta_1`.
    pub fn collapse(&self) -> Result<UNet<T>> {
        if self.config.bn_variant != BnVariant::Sabn || self.config.groups != 1 {
            return Err(TensorError::contract("collapse", "only a sandwich model with G = 1 can be collapsed"));
        }
        let mut out = self.clone();
        out.config.bn_variant = BnVariant::Vanilla;
        out.config.groups = 1;
        out.for_each_norm(|norm| {
            if let Norm::Sabn(s) = norm {
                let g1 = &s.groups[0];
                let gamma = Tensor::from_fn(&[g1.channels()], |c| g1.gamma.data()[c] * s.shared.gamma.data()[c]);
                let beta = Tensor::from_fn(&[g1.channels()], |c| {
                    g1.gamma.data()[c] * s.shared.beta.data()[c] + g1.beta.data()[c]
                });
                *norm = Norm::Vanilla(BatchNormState { affine: Affine { gamma, beta }, stats: s.stats.clone() });
            }
        });
        Ok(out)
    }

    fn for_each_norm(&mut self, mut f: impl FnMut(&mut Norm<T>)) {
        for u in &mut self.encoder {
            f(&mut u.norm);
        }
        for d in &mut self.decoder {
            f(&mut d.up.norm);
            f(&mut d.merge.norm);
        }
    }
}

#[cfg(test)]
mod tests;
