//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria run one after another so wall-clock budgets are
//! measured without interference.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use usleep::cohort::{age_group, split, split_counts, AgeGroupScheme, DatasetManifest, RecordingEntry, Split, AGE_GROUPS_7};
use usleep::model::{load_checkpoint, save_checkpoint, ArchitectureConfig, BnVariant, TensorKind, UNet};
use usleep::preprocess::{
    harmonize_stage, label_token, robust_scale_clip, EpochLabel, PreprocessedRecording, SleepClass, CLIP, MASK_TOKEN,
};
use usleep::psg::{parse_edf, write_edf, Channel, EdfFile, Modality, Stage};
use usleep::sampler::{
    dataset_probability, AugmentPlan, Sampler, SamplerConfig, SamplerDataset, SamplerRecording,
};
use usleep::synth::{prepare, synth_recording, SynthConfig};
use usleep::tensor::{
    avgpool1d, avgpool1d_backward, batch_norm, batch_norm_backward, categorical_bn, categorical_bn_backward,
    conv1d, conv1d_backward, elu, elu_backward, max_relative_error, maxpool1d, maxpool1d_backward,
    numeric_gradient, sandwich_bn, sandwich_bn_backward, softmax, softmax_backward, tanh, tanh_backward,
    upsample_nearest, upsample_nearest_backward, Affine, BatchNormState, CategoricalBNState, DType, Mode, Real,
    SandwichBNState, Tensor,
};
use usleep::train::{
    majority_vote, masked_cross_entropy, metrics, train, validation_f1, Confusion, EvalRecording, Regime,
    TrainConfig, TrainOutcome,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

// ---------------------------------------------------------------- criterion 1

/// A layer under test: forward on `inputs`, then the analytic gradients of
/// `sum(r * y)` with respect to every input.
type Layer<T> = fn(&[Tensor<T>], Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>);

fn weighted_sum<T: Real>(y: &Tensor<T>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b).sum()
}

fn conv_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let y = conv1d(&x[0], &x[1], &x[2]).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    let g = conv1d_backward(&x[0], &x[1], r).unwrap();
    (y, vec![g.input, g.kernel, g.bias])
}

fn maxpool_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let (y, idx) = maxpool1d(&x[0], 2).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    (y, vec![maxpool1d_backward(&idx, r).unwrap()])
}

fn avgpool_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let y = avgpool1d(&x[0], 2).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    (y, vec![avgpool1d_backward(r, 2).unwrap()])
}

fn upsample_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let y = upsample_nearest(&x[0], 2).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    (y, vec![upsample_nearest_backward(r, 2).unwrap()])
}

fn elu_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let y = elu(&x[0]);
    let Some(r) = r else { return (y, vec![]) };
    (y, vec![elu_backward(&x[0], r)])
}

fn tanh_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let y = tanh(&x[0]);
    let Some(r) = r else { return (y, vec![]) };
    let g = tanh_backward(&y, r);
    (y, vec![g])
}

fn softmax_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let y = softmax(&x[0], 1).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    let g = softmax_backward(&y, r, 1).unwrap();
    (y, vec![g])
}

fn affine<T: Real>(g: &Tensor<T>, b: &Tensor<T>) -> Affine<T> {
    Affine::new(g.data().to_vec(), b.data().to_vec()).unwrap()
}

fn bn_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let mut state = BatchNormState::new(x[1].len());
    state.affine = affine(&x[1], &x[2]);
    let (y, cache) = batch_norm(&x[0], &mut state, Mode::Train).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    let (dx, ga) = batch_norm_backward(&cache, &state.affine, r).unwrap();
    (y, vec![dx, ga.gamma, ga.beta])
}

const GROUPS: [usize; 3] = [1, 0, 1];

fn ccbn_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let mut state = CategoricalBNState::new(x[1].len(), 2);
    state.groups = vec![affine(&x[1], &x[2]), affine(&x[3], &x[4])];
    let (y, cache) = categorical_bn(&x[0], &mut state, &GROUPS, Mode::Train).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    let (dx, ga) = categorical_bn_backward(&cache, &state, &GROUPS, r).unwrap();
    let mut out = vec![dx];
    for g in ga {
        out.push(g.gamma);
        out.push(g.beta);
    }
    (y, out)
}

fn sabn_layer<T: Real>(x: &[Tensor<T>], r: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let mut state = SandwichBNState::new(x[1].len(), 2);
    state.shared = affine(&x[1], &x[2]);
    state.groups = vec![affine(&x[3], &x[4]), affine(&x[5], &x[6])];
    let (y, cache) = sandwich_bn(&x[0], &mut state, &GROUPS, Mode::Train).unwrap();
    let Some(r) = r else { return (y, vec![]) };
    let (dx, sg) = sandwich_bn_backward(&cache, &state, &GROUPS, r).unwrap();
    let mut out = vec![dx, sg.shared.gamma, sg.shared.beta];
    for g in sg.groups {
        out.push(g.gamma);
        out.push(g.beta);
    }
    (y, out)
}

/// Relative error of the analytic gradients at precision `T` against
/// 64-bit central differences.
fn check_layer<T: Real>(f64_layer: Layer<f64>, layer: Layer<T>, inputs: &[Tensor], seed: u64) -> f64 {
    let mut g = rng(seed ^ 0xA5A5);
    let (y, _) = f64_layer(inputs, None);
    let r = Tensor::from_fn(y.shape(), |_| g.random_range(-1.0..1.0));
    let cast: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let (_, analytic) = layer(&cast, Some(&r.cast()));
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let a: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
        let numeric = numeric_gradient(
            |v| {
                let mut probe = inputs.to_vec();
                probe[k].data_mut().copy_from_slice(v);
                weighted_sum(&f64_layer(&probe, None).0, &r)
            },
            inputs[k].data(),
            1e-6,
        );
        worst = worst.max(max_relative_error(&a, &numeric));
    }
    worst
}

fn norm_inputs(seed: u64, affines: usize) -> Vec<Tensor> {
    let mut g = rng(seed);
    let mut v = vec![random(&[3, 4, 6], &mut g)];
    for _ in 0..affines {
        v.push(Tensor::from_fn(&[4], |_| g.random_range(0.5..1.5)));
        v.push(Tensor::from_fn(&[4], |_| g.random_range(-0.5..0.5)));
    }
    v
}

type LayerPair = (&'static str, Layer<f64>, Layer<f32>, fn(u64) -> Vec<Tensor>);

fn layer_cases() -> Vec<LayerPair> {
    fn one(shape: &'static [usize]) -> impl Fn(u64) -> Vec<Tensor> {
        move |s| vec![random(shape, &mut rng(s))]
    }
    vec![
        ("conv1d", conv_layer::<f64>, conv_layer::<f32>, |s| {
            let mut g = rng(s);
            vec![random(&[2, 3, 11], &mut g), random(&[4, 3, 5], &mut g), random(&[4], &mut g)]
        }),
        ("maxpool1d", maxpool_layer::<f64>, maxpool_layer::<f32>, |s| one(&[2, 3, 8])(s)),
        ("avgpool1d", avgpool_layer::<f64>, avgpool_layer::<f32>, |s| one(&[2, 3, 8])(s)),
        ("upsample", upsample_layer::<f64>, upsample_layer::<f32>, |s| one(&[2, 3, 5])(s)),
        ("elu", elu_layer::<f64>, elu_layer::<f32>, |s| one(&[2, 3, 7])(s)),
        ("tanh", tanh_layer::<f64>, tanh_layer::<f32>, |s| one(&[2, 3, 7])(s)),
        ("softmax", softmax_layer::<f64>, softmax_layer::<f32>, |s| one(&[2, 5, 4])(s)),
        ("batch_norm", bn_layer::<f64>, bn_layer::<f32>, |s| norm_inputs(s, 1)),
        ("categorical_bn", ccbn_layer::<f64>, ccbn_layer::<f32>, |s| norm_inputs(s, 2)),
        ("sandwich_bn", sabn_layer::<f64>, sabn_layer::<f32>, |s| norm_inputs(s, 3)),
    ]
}

fn tiny_arch(variant: BnVariant, groups: usize) -> ArchitectureConfig {
    ArchitectureConfig { depth: 2, base_filters: 2.0, rate: 4.0, epoch_s: 2.0, bn_variant: variant, groups, ..Default::default() }
}

fn ce_loss(m: &UNet, x: &Tensor, groups: &[usize], targets: &[usize]) -> f64 {
    let mut m = m.clone();
    let (p, _) = m.forward_train(x, groups).unwrap();
    targets.iter().enumerate().map(|(i, &t)| -p.data()[i * 5 + t].ln()).sum()
}

/// Relative error with a 1e-6 denominator floor: biases feeding a norm
/// layer have identically zero gradient, where central differences of the
/// summed loss leave ~1e-10 of roundoff.
fn floored_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6)).fold(0.0, f64::max)
}

/// `|a - n| / max(|a|, |n|)` over a whole tensor, for 32-bit gradients whose
/// smallest entries sit at the f32 roundoff level.
fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Full-model check: analytic gradients at precision `T`, numeric at f64.
fn check_model<T: Real>(m: &UNet, x: &Tensor, groups: &[usize], targets: &[usize]) -> f64 {
    let mut mt = m.cast::<T>();
    let (p, cache) = mt.forward_train(&x.cast(), groups).unwrap();
    let mut dp = Tensor::<T>::zeros(p.shape());
    for (i, &t) in targets.iter().enumerate() {
        dp.data_mut()[i * 5 + t] = -T::one() / p.data()[i * 5 + t];
    }
    let grads = mt.backward(&cache, &dp).unwrap();
    let mut worst = 0.0f64;
    for (name, t, kind) in m.named_tensors() {
        if kind != TensorKind::Parameter {
            continue;
        }
        let analytic: Vec<f64> = grads[&name].data().iter().map(|v| v.as_f64()).collect();
        let numeric = numeric_gradient(
            |v| {
                let mut probe = m.clone();
                for (n, t, _) in probe.named_tensors_mut() {
                    if n == name {
                        t.data_mut().copy_from_slice(v);
                    }
                }
                ce_loss(&probe, x, groups, targets)
            },
            t.data(),
            1e-5,
        );
        let err = if std::mem::size_of::<T>() == 8 {
            floored_relative_error(&analytic, &numeric)
        } else {
            norm_relative_error(&analytic, &numeric)
        };
        worst = worst.max(err);
    }
    worst
}

fn model_case(seed: u64) -> (UNet, Tensor, Vec<usize>, Vec<usize>) {
    let variants = [(BnVariant::Vanilla, 1), (BnVariant::Ccbn, 2), (BnVariant::Sabn, 3)];
    let (variant, groups) = variants[seed as usize % 3];
    let mut m = UNet::build(&tiny_arch(variant, groups), &mut rng(seed)).unwrap();
    let mut g = rng(seed + 1000);
    for (name, t, _) in m.named_tensors_mut() {
        if name.contains("gamma") || name.contains("beta") || name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v += g.random_range(-0.3..0.3));
        }
    }
    let (b, l) = (2, 2);
    let x = random(&[b, 2, l * 8], &mut g);
    let gi: Vec<usize> = (0..b).map(|i| i % groups).collect();
    let targets: Vec<usize> = (0..b * l).map(|_| g.random_range(0..5)).collect();
    (m, x, gi, targets)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut worst64, mut worst32) = (BTreeMap::new(), BTreeMap::new());
    for seed in 0..20u64 {
        for (name, f64_layer, f32_layer, inputs) in layer_cases() {
            let x = inputs(seed);
            let e64 = check_layer::<f64>(f64_layer, f64_layer, &x, seed);
            let e32 = check_layer::<f32>(f64_layer, f32_layer, &x, seed);
            let w = worst64.entry(name).or_insert(0.0f64);
            *w = w.max(e64);
            let w = worst32.entry(name).or_insert(0.0f64);
            *w = w.max(e32);
        }
        let (m, x, g, t) = model_case(seed);
        let w = worst64.entry("depth-2 model").or_insert(0.0f64);
        *w = w.max(check_model::<f64>(&m, &x, &g, &t));
        let w = worst32.entry("depth-2 model").or_insert(0.0f64);
        *w = w.max(check_model::<f32>(&m, &x, &g, &t));
    }
    let elapsed = start.elapsed();
    let max64 = worst64.values().fold(0.0f64, |a, &b| a.max(b));
    let max32 = worst32.values().fold(0.0f64, |a, &b| a.max(b));
    for (name, e) in &worst64 {
        ensure(*e < 1e-4, || format!("{name}: 64-bit rel. error {e:.3e} >= 1e-4"))?;
    }
    for (name, e) in &worst32 {
        ensure(*e < 1e-2, || format!("{name}: 32-bit rel. error {e:.3e} >= 1e-2"))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?} (budget 2 min)"))?;
    Ok(format!(
        "{} checks x 20 seeds; worst rel. error {max64:.2e} (f64), {max32:.2e} (f32); {elapsed:.1?}",
        worst64.len()
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let arch = ArchitectureConfig::default();
    let m = UNet::<f64>::build(&arch, &mut rng(2)).map_err(|e| e.to_string())?;
    let spe = arch.samples_per_epoch();
    let b = 2;
    let mut worst = 0.0f64;
    for l in [1usize, 35, 70, 113] {
        let mut g = rng(l as u64);
        let x = Tensor::from_fn(&[b, 2, l * spe], |_| g.random_range(-3.0..3.0));
        let p = m.forward(&x, &[0]).map_err(|e| e.to_string())?;
        ensure(p.shape() == [b, l, 5], || format!("L={l}: shape {:?}", p.shape()))?;
        for row in p.data().chunks(5) {
            ensure(row.iter().all(|&v| (0.0..=1.0).contains(&v)), || format!("L={l}: row {row:?} off the simplex"))?;
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("row sum off by {worst:.3e}"))?;
    Ok(format!(
        "default architecture (depth {}, {} parameters), B={b}: [B, L, 5] for L in {{1, 35, 70, 113}}, max |row sum - 1| = {worst:.1e}",
        arch.depth,
        m.parameter_count()
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let arch = ArchitectureConfig { depth: 3, base_filters: 3.0, rate: 8.0, epoch_s: 2.0, ..Default::default() };
    let mut m = UNet::<f64>::build(&arch, &mut rng(3)).unwrap();
    let mut g = rng(33);
    for _ in 0..3 {
        m.forward_train(&random(&[3, 2, 64], &mut g), &[0]).unwrap();
    }
    let x = random(&[2, 2, 96], &mut g);
    let base = m.forward(&x, &[0]).unwrap();
    let groups = 7;
    let s = m.convert_to_sabn(groups).map_err(|e| e.to_string())?;
    let mut conv = 0.0f64;
    for gi in 0..groups {
        conv = conv.max(s.forward(&x, &[gi]).unwrap().max_abs_diff(&base));
    }
    ensure(conv <= 1e-12, || format!("conversion changed outputs by {conv:.3e}"))?;

    // an identity shared affine reduces the sandwich to categorical BN
    let mut ccbn = CategoricalBNState::<f64>::new(4, 3);
    let mut sabn = SandwichBNState::<f64>::new(4, 3);
    for (k, (a, b)) in ccbn.groups.iter_mut().zip(sabn.groups.iter_mut()).enumerate() {
        let gamma: Vec<f64> = (0..4).map(|c| 0.5 + 0.1 * (k * 4 + c) as f64).collect();
        let beta: Vec<f64> = (0..4).map(|c| -0.2 + 0.05 * (k + c) as f64).collect();
        *a = Affine::new(gamma.clone(), beta.clone()).unwrap();
        *b = Affine::new(gamma, beta).unwrap();
    }
    let xs = random(&[3, 4, 10], &mut g);
    let gi = [2, 0, 1];
    let mut sandwich_vs_ccbn = 0.0f64;
    for mode in [Mode::Train, Mode::Eval] {
        let (yc, _) = categorical_bn(&xs, &mut ccbn, &gi, mode).unwrap();
        let (ys, _) = sandwich_bn(&xs, &mut sabn, &gi, mode).unwrap();
        sandwich_vs_ccbn = sandwich_vs_ccbn.max(yc.max_abs_diff(&ys));
    }
    ensure(sandwich_vs_ccbn == 0.0, || format!("identity sandwich differs from CCBN by {sandwich_vs_ccbn:.3e}"))?;

    let before: Vec<Tensor> = (0..groups).map(|gi| s.forward(&x, &[gi]).unwrap()).collect();
    let target = 4;
    let mut p = s.clone();
    for (name, t, _) in p.named_tensors_mut() {
        if name.ends_with(&format!("norm.gamma.{target}")) {
            t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
        }
    }
    for (gi, want) in before.iter().enumerate() {
        let got = p.forward(&x, &[gi]).unwrap();
        if gi == target {
            ensure(got.max_abs_diff(want) > 1e-6, || "perturbing gamma_g left group g unchanged".into())?;
        } else {
            ensure(&got == want, || format!("perturbing group {target} changed group {gi}"))?;
        }
    }
    Ok(format!(
        "conversion max diff {conv:.1e} over {groups} groups; identity sandwich == CCBN exactly; group isolation holds"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn sampler_recording(id: &str, n_epochs: usize, classes: &[SleepClass]) -> PreprocessedRecording {
    use usleep::preprocess::{ChannelProvenance, PreprocessedChannel};
    use usleep::psg::{Derivation, SubjectMeta};
    let spe = 2;
    let ch = |m| PreprocessedChannel {
        derivation: Derivation { positive: format!("{m}"), negative: None, modality: m, recommended: true },
        samples: vec![0.0; n_epochs * spe],
        provenance: ChannelProvenance { original_rate: 1.0, scale: None },
        unusable: None,
    };
    PreprocessedRecording {
        id: id.into(),
        dataset_id: "d".into(),
        subject: SubjectMeta::new(id),
        rate: spe as f64 / 30.0,
        epoch_labels: (0..n_epochs).map(|i| Some(classes[(i * 7) % classes.len()])).collect(),
        channels: vec![ch(Modality::Eeg), ch(Modality::Eog)],
    }
}

fn criterion_4() -> Outcome {
    let rate = 2.0 / 30.0;
    let cfg = SamplerConfig { seq_len: 3, rate, batch_size: 1, ..Default::default() };
    let sizes = [2usize, 5, 13];
    let datasets: Vec<SamplerDataset> = sizes
        .iter()
        .enumerate()
        .map(|(d, &n)| SamplerDataset {
            id: format!("d{d}"),
            recordings: (0..n)
                .map(|r| SamplerRecording::new(Arc::new(sampler_recording(&format!("d{d}r{r}"), 10, &SleepClass::ALL)), 0))
                .collect(),
        })
        .collect();
    let sampler = Sampler::new(datasets, cfg.clone()).map_err(|e| e.to_string())?;
    let expected = dataset_probability(&sizes, 0.5).unwrap();
    let n = 100_000;
    let mut counts = [0usize; 3];
    let mut g = rng(4);
    for _ in 0..n {
        counts[sampler.draw(&mut g).unwrap().dataset] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&o, &p)| (o as f64 - n as f64 * p).powi(2) / (n as f64 * p))
        .sum();
    let p_value = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    ensure(p_value > 0.01, || format!("dataset draws chi2={chi2:.2}, p={p_value:.4}"))?;

    let mut anchor = BTreeMap::new();
    for (label, classes) in [("5-class", SleepClass::ALL.to_vec()), ("3-class", vec![SleepClass::W, SleepClass::N2, SleepClass::Rem])] {
        let ds = SamplerDataset {
            id: "a".into(),
            recordings: vec![SamplerRecording::new(Arc::new(sampler_recording("a", 40, &classes)), 0)],
        };
        let s = Sampler::new(vec![ds], cfg.clone()).unwrap();
        let draws = 50_000;
        let mut freq = BTreeMap::new();
        for _ in 0..draws {
            *freq.entry(s.draw(&mut g).unwrap().anchor_class).or_insert(0usize) += 1;
        }
        let want = 1.0 / classes.len() as f64;
        for c in &classes {
            let f = freq.get(c).copied().unwrap_or(0) as f64 / draws as f64;
            ensure((f - want).abs() <= 0.02, || format!("{label}: anchor {c} at {f:.4}, want {want:.3} +- 0.02"))?;
        }
        ensure(freq.len() == classes.len(), || format!("{label}: absent class drawn"))?;
        anchor.insert(label, freq.values().map(|&v| v as f64 / draws as f64).fold(0.0f64, |a, b| a.max((b - want).abs())));
    }

    let elements = 100_000;
    let (mut seg, mut chan) = (0usize, 0usize);
    for _ in 0..elements {
        let plan = AugmentPlan::draw(&cfg, &mut g);
        seg += plan.segment_fraction.is_some() as usize;
        chan += plan.channel.is_some() as usize;
    }
    let (fs, fc) = (seg as f64 / elements as f64, chan as f64 / elements as f64);
    ensure((fs - 0.1).abs() <= 0.005, || format!("segment augmentation rate {fs:.4}"))?;
    ensure((fc - 0.1).abs() <= 0.005, || format!("channel augmentation rate {fc:.4}"))?;
    Ok(format!(
        "dataset chi2={chi2:.2} (p={p_value:.3}); anchor max deviation {:.4} / {:.4}; augmentation rates {fs:.4} / {fc:.4}",
        anchor["5-class"], anchor["3-class"]
    ))
}

// ---------------------------------------------------------------- criterion 5

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] * (1.0 - (pos - i as f64)) + sorted[j] * (pos - i as f64)
}

fn scale_check(v: &[f64]) -> (f64, f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    (quantile(&s, 0.5).abs(), (quantile(&s, 0.75) - quantile(&s, 0.25) - 1.0).abs(), max)
}

fn criterion_5() -> Outcome {
    let mut g = rng(5);
    let (mut med, mut iqr, mut max) = (0.0f64, 0.0f64, 0.0f64);
    let mut track = |v: &[f64]| {
        let (a, b, c) = scale_check(v);
        med = med.max(a);
        iqr = iqr.max(b);
        max = max.max(c);
    };
    for trial in 0..50 {
        let n = 1001 + trial * 37;
        let offset = g.random_range(-1e3..1e3);
        let scale = 10f64.powf(g.random_range(-3.0..3.0));
        let mut x: Vec<f64> = (0..n).map(|_| offset + scale * g.random_range(-1.0..1.0f64).powi(3)).collect();
        for _ in 0..5 {
            let k = g.random_range(0..n);
            x[k] = offset + scale * 1e6;
        }
        let (y, _) = robust_scale_clip(&x).ok_or("unexpected flat signal")?;
        track(&y);
    }
    for seed in 0..3 {
        let rec = synth_recording(&format!("p{seed}"), "synth", &SynthConfig { n_epochs: 20, rate: 100.0, ..Default::default() }, seed);
        let p = prepare(&rec).map_err(|e| e.to_string())?;
        for c in &p.channels {
            track(&c.samples);
        }
    }
    ensure(med <= 1e-9, || format!("median {med:.3e}"))?;
    ensure(iqr <= 1e-6, || format!("IQR off by {iqr:.3e}"))?;
    ensure(max <= CLIP, || format!("max |value| {max}"))?;
    ensure(harmonize_stage(Stage::N4) == Some(SleepClass::N3), || "N4 must map to N3".into())?;
    for s in [Stage::Movement, Stage::Unknown] {
        let l: EpochLabel = harmonize_stage(s);
        ensure(l.is_none() && label_token(l) == MASK_TOKEN, || format!("{s:?} must map to MASK"))?;
    }
    Ok(format!("max |median| {med:.1e}, max |IQR - 1| {iqr:.1e}, max |value| {max:.2}; N4->N3, MOVEMENT/UNKNOWN->MASK"))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut g = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = 1000;
        let truth: Vec<usize> = (0..n).map(|_| g.random_range(0..5)).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if g.random::<f64>() < 0.6 { t } else { g.random_range(0..5) }).collect();
        let c = Confusion::from_pairs(
            &truth.iter().map(|&t| SleepClass::from_index(t)).collect::<Vec<_>>(),
            &pred.iter().map(|&p| SleepClass::from_index(p).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let m = metrics(&c).unwrap();
        let count = |f: &dyn Fn(usize, usize) -> bool| truth.iter().zip(&pred).filter(|(&t, &p)| f(t, p)).count() as f64;
        let mut f1 = [0.0; 5];
        let mut weighted = 0.0;
        let (mut agree, mut chance) = (0.0, 0.0);
        for k in 0..5 {
            let tp = count(&|t, p| t == k && p == k);
            let fp = count(&|t, p| t != k && p == k);
            let fnn = count(&|t, p| t == k && p != k);
            f1[k] = if tp + fp + fnn == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
            let support = count(&|t, _| t == k);
            weighted += f1[k] * support / n as f64;
            agree += tp / n as f64;
            chance += support * count(&|_, p| p == k) / (n * n) as f64;
        }
        let kappa = (agree - chance) / (1.0 - chance);
        let macro_f1 = f1.iter().sum::<f64>() / 5.0;
        for (a, b) in [(m.macro_f1, macro_f1), (m.weighted_f1, weighted), (m.kappa, kappa)] {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("metric mismatch {worst:.3e}"))?;
    let perfect: Vec<SleepClass> = (0..50).map(|i| SleepClass::from_index(i % 5).unwrap()).collect();
    let truth: Vec<EpochLabel> = perfect.iter().map(|&c| Some(c)).collect();
    let k = metrics(&Confusion::from_pairs(&truth, &perfect).unwrap()).unwrap().kappa;
    ensure(k == 1.0, || format!("kappa on perfect agreement {k}"))?;
    let uniform = Tensor::full(&[2, 3, 5], 0.2);
    let targets: Vec<EpochLabel> = (0..6).map(|i| SleepClass::from_index(i % 5)).collect();
    let ce = masked_cross_entropy(&uniform, &targets).unwrap();
    ensure((ce - 5f64.ln()).abs() <= 1e-9, || format!("uniform cross-entropy {ce}"))?;
    Ok(format!("max metric deviation {worst:.1e} over 20 x 1000 pairs; kappa(perfect)=1; CE(uniform)={ce:.10}"))
}

// ------------------------------------------------------------ criteria 7 and 8

const LR: f64 = 3e-3;

struct Cohort {
    sampler: Sampler,
    train_set: Vec<EvalRecording>,
}

fn cohort(shift: f64, seed_base: u64) -> Cohort {
    let cfg = SynthConfig { n_epochs: 40, n_eeg: 1, n_eog: 1, shift, ..Default::default() };
    let recs: Vec<Arc<PreprocessedRecording>> = (0..5)
        .map(|i| Arc::new(prepare(&synth_recording(&format!("s{}", seed_base + i), "synth", &cfg, seed_base + i)).unwrap()))
        .collect();
    let ds = SamplerDataset { id: "synth".into(), recordings: recs.iter().map(|r| SamplerRecording::new(r.clone(), 0)).collect() };
    let sampler = Sampler::new(vec![ds], SamplerConfig { seq_len: 5, batch_size: 4, seed: 1, ..Default::default() }).unwrap();
    let train_set = recs.into_iter().map(|r| EvalRecording::new(r, 0)).collect();
    Cohort { sampler, train_set }
}

fn overfit_arch() -> ArchitectureConfig {
    ArchitectureConfig { depth: 2, base_filters: 4.0, ..Default::default() }
}

fn overfit_config() -> TrainConfig {
    TrainConfig { lr: LR, patience: 200, max_iterations: 200, batches_per_iteration: 5, target_f1: Some(0.95), ..Default::default() }
}

struct Scratch {
    outcome: TrainOutcome,
    elapsed: Duration,
    cohort: Cohort,
}

fn criterion_7(scratch: &Scratch) -> Outcome {
    let out = &scratch.outcome;
    ensure(out.best_f1 >= 0.95, || format!("training macro F1 {:.4} after {} iterations", out.best_f1, out.iterations()))?;
    ensure(out.best_iteration <= 200, || format!("{} iterations", out.best_iteration))?;
    ensure(scratch.elapsed < Duration::from_secs(600), || format!("took {:.1?}", scratch.elapsed))?;
    let held = synth_recording("held-out", "synth", &SynthConfig { n_epochs: 40, ..Default::default() }, 999);
    let held = EvalRecording::new(Arc::new(prepare(&held).unwrap()), 0);
    let dt = validation_f1(&out.model, &[held]).unwrap();
    ensure(dt >= 0.80, || format!("direct transfer macro F1 {dt:.4}"))?;
    Ok(format!(
        "training macro F1 {:.4} at iteration {} ({:.1?}); held-out recording (2x2 derivations) macro F1 {dt:.4}",
        out.best_f1, out.best_iteration, scratch.elapsed
    ))
}

fn criterion_8(scratch: &Scratch) -> Outcome {
    let source = cohort(1.0, 100);
    let model = UNet::<f64>::build(&overfit_arch(), &mut rng(0)).unwrap();
    let pre = train(model, &source.sampler, &source.train_set, &overfit_config(), Regime::Scratch).map_err(|e| e.to_string())?;
    ensure(pre.best_f1 >= 0.95, || format!("pre-training reached only {:.4}", pre.best_f1))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(&pre.model, dir.path(), DType::F32).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint::<f64>(dir.path()).map_err(|e| e.to_string())?;
    let c = &scratch.cohort;
    let ft = train(loaded, &c.sampler, &c.train_set, &overfit_config(), Regime::Finetune).map_err(|e| e.to_string())?;
    ensure(ft.best_f1 >= 0.95, || format!("fine-tuning reached only {:.4}", ft.best_f1))?;
    let (f, s) = (ft.best_iteration, scratch.outcome.best_iteration);
    ensure(f < s, || format!("fine-tune needed {f} iterations, scratch {s}"))?;
    Ok(format!(
        "pre-trained on a shifted domain in {} iterations; FT = {f} < S = {s} iterations to macro F1 >= 0.95",
        pre.best_iteration
    ))
}

// ---------------------------------------------------------------- criterion 9

fn brute_force_vote(streams: &[Vec<f64>]) -> usize {
    let n = streams.len() as f64;
    let votes: Vec<usize> = streams
        .iter()
        .map(|s| {
            let mut best = 0;
            for k in 1..5 {
                if s[k] > s[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let count = |k: usize| votes.iter().filter(|&&v| v == k).count();
    let top = (0..5).map(count).max().unwrap();
    let mean = |k: usize| streams.iter().map(|s| s[k]).sum::<f64>() / n;
    let tied: Vec<usize> = (0..5).filter(|&k| count(k) == top).collect();
    let best_mean = tied.iter().map(|&k| mean(k)).fold(f64::NEG_INFINITY, f64::max);
    *tied.iter().find(|&&k| mean(k) == best_mean).unwrap()
}

fn criterion_9() -> Outcome {
    let mut g = rng(9);
    let mut files = 0;
    for trial in 0..10u64 {
        let channels: Vec<Channel> = (0..1 + trial as usize % 4)
            .map(|c| {
                let rate = [100.0, 128.0, 200.0, 256.0][c % 4];
                let n = (rate * 2.0) as usize * (3 + trial as usize);
                let amp = 10f64.powf(g.random_range(-1.0..3.0));
                Channel { label: format!("EEG X{c}"), sample_rate: rate, samples: (0..n).map(|_| amp * g.random_range(-1.0..1.0)).collect() }
            })
            .collect();
        let bytes = write_edf(&EdfFile::from_physical(&channels, 2.0, &format!("patient {trial}")));
        let parsed = parse_edf(&bytes).map_err(|e| e.to_string())?;
        let again = write_edf(&parsed);
        ensure(again == bytes, || format!("trial {trial}: write(parse(bytes)) != bytes"))?;
        ensure(parse_edf(&again).map_err(|e| e.to_string())? == parsed, || format!("trial {trial}: parse not stable"))?;
        files += 1;
    }

    let sets = 10_000;
    let mut ties = 0;
    for _ in 0..sets {
        let n_streams = g.random_range(1..=6);
        // dyadic probabilities make ties common and sums exact
        let streams: Vec<Vec<f64>> = (0..n_streams)
            .map(|_| {
                let raw: Vec<u32> = (0..5).map(|_| g.random_range(0..4)).collect();
                let total: u32 = raw.iter().sum::<u32>().max(1);
                let scale = if total.is_power_of_two() { total } else { total.next_power_of_two() };
                let mut p: Vec<f64> = raw.iter().map(|&r| r as f64 / scale as f64).collect();
                p[0] += 1.0 - p.iter().sum::<f64>();
                p
            })
            .collect();
        let want = brute_force_vote(&streams);
        let got = majority_vote(&streams).map_err(|e| e.to_string())?;
        ensure(got == vec![SleepClass::from_index(want).unwrap()], || format!("vote mismatch on {streams:?}"))?;
        let votes: Vec<usize> = streams.iter().map(|s| (0..5).fold(0, |b, k| if s[k] > s[b] { k } else { b })).collect();
        let top = (0..5).map(|k| votes.iter().filter(|&&v| v == k).count()).max().unwrap();
        ties += ((0..5).filter(|&k| votes.iter().filter(|&&v| v == k).count() == top).count() > 1) as usize;
    }
    Ok(format!("{files} EDF files round-trip bitwise; {sets} vote sets match the brute-force mode ({ties} with tied votes)"))
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let scheme = AgeGroupScheme::new(7).unwrap();
    let table = [
        (0.0, "B"), (3.0, "B"), (4.0, "C"), (12.0, "C"), (13.0, "A"), (18.0, "A"), (19.0, "YA"),
        (39.0, "YA"), (40.0, "MA"), (59.0, "MA"), (60.0, "E"), (69.0, "E"), (70.0, "OE"),
    ];
    for (age, want) in table {
        let g = age_group(Some(age), scheme, "r").map_err(|e| e.to_string())?;
        ensure(AGE_GROUPS_7[g] == want, || format!("age {age} -> {} (want {want})", AGE_GROUPS_7[g]))?;
    }
    ensure(split_counts(1000) == (50, 100), || format!("split_counts(1000) = {:?}", split_counts(1000)))?;
    let mut m = DatasetManifest::new("big");
    for s in 0..1000 {
        m.recordings.push(RecordingEntry {
            id: format!("r{s}"),
            path: format!("r{s}"),
            subject_id: format!("s{s}"),
            family_id: None,
            age_years: None,
            sex: None,
            split: None,
        });
    }
    let out = split(&m, &mut rng(10)).map_err(|e| e.to_string())?;
    let (val, test) = (out.in_split(Split::Val).count(), out.in_split(Split::Test).count());
    ensure((val, test) == (50, 100), || format!("split of 1000 subjects gave {val} val / {test} test"))?;
    Ok(format!("{} age boundaries exact; 1000 subjects -> {val} val / {test} test", table.len()))
}

// ------------------------------------------------------------------- harness

fn run(id: u32, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("criterion {id:>2} PASS  {title}: {detail} [{secs:.1}s]");
            true
        }
        Err(why) => {
            println!("criterion {id:>2} FAIL  {title}: {why} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| filter.is_empty() || filter.contains(&id);
    let mut ok = true;
    if wanted(1) {
        ok &= run(1, "gradient suite", criterion_1);
    }
    if wanted(2) {
        ok &= run(2, "shape/simplex contract", criterion_2);
    }
    if wanted(3) {
        ok &= run(3, "SaBN algebra", criterion_3);
    }
    if wanted(4) {
        ok &= run(4, "sampler statistics", criterion_4);
    }
    if wanted(5) {
        ok &= run(5, "preprocess invariants", criterion_5);
    }
    if wanted(6) {
        ok &= run(6, "metric oracle", criterion_6);
    }
    if wanted(7) || wanted(8) {
        let start = Instant::now();
        let scratch = catch_unwind(|| {
            let cohort = cohort(0.0, 0);
            let model = UNet::<f64>::build(&overfit_arch(), &mut rng(0)).unwrap();
            let outcome = train(model, &cohort.sampler, &cohort.train_set, &overfit_config(), Regime::Scratch).unwrap();
            Scratch { outcome, elapsed: start.elapsed(), cohort }
        });
        match scratch {
            Ok(s) => {
                if wanted(7) {
                    ok &= run(7, "overfit oracle", || criterion_7(&s));
                }
                if wanted(8) {
                    ok &= run(8, "regime mechanics", || criterion_8(&s));
                }
            }
            Err(_) => {
                for id in [7, 8].into_iter().filter(|&i| wanted(i)) {
                    ok &= run(id, "scratch training", || Err("scratch training panicked".into()));
                }
            }
        }
    }
    if wanted(9) {
        ok &= run(9, "EDF round-trip and majority vote", criterion_9);
    }
    if wanted(10) {
        ok &= run(10, "age groups and split caps", criterion_10);
    }
    if !ok {
        std::process::exit(1);
    }
}
