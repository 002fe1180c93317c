use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, DType};

fn tiny(variant: BnVariant, groups: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        depth: 2,
        base_filters: 2.0,
        rate: 4.0,
        epoch_s: 2.0,
        bn_variant: variant,
        groups,
        ..Default::default()
    }
}

fn input(b: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 2, t], |_| rng.random_range(-2.0..2.0))
}

fn model<T: Real>(config: &ArchitectureConfig, seed: u64) -> UNet<T> {
    UNet::build(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn assert_simplex(p: &Tensor, b: usize, l: usize) {
    assert_eq!(p.shape(), &[b, l, 5]);
    for row in p.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn depth_one_smoke() {
    let c = ArchitectureConfig { depth: 1, ..tiny(BnVariant::Vanilla, 1) };
    let m = model::<f64>(&c, 0);
    assert_eq!((m.encoder.len(), m.decoder.len()), (1, 1));
    let p = m.forward(&input(1, 8, 1), &[0]).unwrap();
    assert_simplex(&p, 1, 1);
}

#[test]
fn builds_are_seeded() {
    let c = tiny(BnVariant::Vanilla, 1);
    assert_eq!(model::<f64>(&c, 4), model::<f64>(&c, 4));
    assert_ne!(model::<f64>(&c, 4), model::<f64>(&c, 5));
}

#[test]
fn parameter_names() {
    let m = model::<f64>(&tiny(BnVariant::Sabn, 2), 0);
    let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    for want in [
        "encoder.0.conv.weight",
        "encoder.1.norm.gamma_sa",
        "encoder.1.norm.gamma.1",
        "encoder.0.norm.running_var",
        "decoder.0.merge.conv.bias",
        "decoder.1.up.norm.beta.0",
        "classifier.output.weight",
    ] {
        assert!(names.iter().any(|n| n == want), "{want} missing");
    }
}

#[test]
fn shapes_for_many_lengths() {
    let c = ArchitectureConfig { depth: 3, base_filters: 3.0, rate: 8.0, ..tiny(BnVariant::Vanilla, 1) };
    let m = model::<f64>(&c, 1);
    for l in [1, 35, 70, 113] {
        let p = m.forward(&input(2, l * 16, l as u64), &[0]).unwrap();
        assert_simplex(&p, 2, l);
    }
    assert!(m.forward(&input(1, 17, 0), &[0]).is_err());
}

#[test]
fn eval_forward_is_pure() {
    let m = model::<f64>(&tiny(BnVariant::Vanilla, 1), 2);
    let x = input(2, 24, 3);
    assert_eq!(m.forward(&x, &[0]).unwrap(), m.forward(&x, &[0]).unwrap());
}

/// Cross-entropy against fixed targets through a train-mode forward.
fn ce_loss(m: &UNet, x: &Tensor, groups: &[usize], targets: &[usize]) -> f64 {
    let mut m = m.clone();
    let (p, _) = m.forward_train(x, groups).unwrap();
    targets.iter().enumerate().map(|(i, &t)| -p.data()[i * 5 + t].ln()).sum()
}

fn full_gradcheck(variant: BnVariant, groups: usize, seed: u64) -> f64 {
    let cfg = tiny(variant, groups);
    let mut m = model::<f64>(&cfg, seed);
    // move the affines away from identity so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t, _) in m.named_tensors_mut() {
        if name.contains("gamma") || name.contains("beta") || name.ends_with("bias") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let (b, l) = (2, 2);
    let x = input(b, l * 8, seed);
    let g: Vec<usize> = (0..b).map(|i| i % groups).collect();
    let targets: Vec<usize> = (0..b * l).map(|i| (i * 3 + seed as usize) % 5).collect();
    let mut mm = m.clone();
    let (p, cache) = mm.forward_train(&x, &g).unwrap();
    let mut dp = Tensor::zeros(p.shape());
    for (i, &t) in targets.iter().enumerate() {
        dp.data_mut()[i * 5 + t] = -1.0 / p.data()[i * 5 + t];
    }
    let grads = m.backward(&cache, &dp).unwrap();
    let names: Vec<String> = m.parameters_mut().into_iter().map(|(n, _)| n).collect();
    assert_eq!(grads.len(), names.len());
    let mut worst = 0.0f64;
    for name in names {
        let x0: Vec<f64> = m.named_tensors().into_iter().find(|(n, _, _)| *n == name).unwrap().1.data().to_vec();
        let f = |v: &[f64]| {
            let mut probe = m.clone();
            for (n, t, _) in probe.named_tensors_mut() {
                if n == name {
                    t.data_mut().copy_from_slice(v);
                }
            }
            ce_loss(&probe, &x, &g, &targets)
        };
        let err = grad_check(f, grads[&name].data(), &x0, 1e-5);
        worst = worst.max(err);
        assert!(err < 1e-4, "{name}: {err}");
    }
    worst
}

#[test]
fn full_model_gradients() {
    full_gradcheck(BnVariant::Vanilla, 1, 0);
    full_gradcheck(BnVariant::Ccbn, 2, 1);
    full_gradcheck(BnVariant::Sabn, 3, 2);
}

#[test]
fn sabn_conversion_is_exact() {
    let cfg = ArchitectureConfig { depth: 3, rate: 8.0, ..tiny(BnVariant::Vanilla, 1) };
    let mut m = model::<f64>(&cfg, 7);
    // populate running stats
    for s in 0..3 {
        m.forward_train(&input(3, 32, s), &[0]).unwrap();
    }
    let x = input(2, 48, 9);
    let base = m.forward(&x, &[0]).unwrap();
    let s = m.convert_to_sabn(7).unwrap();
    for g in 0..7 {
        assert_eq!(s.forward(&x, &[g]).unwrap(), base);
    }
    let one = m.convert_to_sabn(1).unwrap().collapse().unwrap();
    assert_eq!(one, m);
    assert!(m.convert_to_sabn(0).is_err());
    assert!(s.convert_to_sabn(2).is_err());
}

#[test]
fn group_isolation() {
    let cfg = ArchitectureConfig { rate: 8.0, ..tiny(BnVariant::Vanilla, 1) };
    let m = model::<f64>(&cfg, 3).convert_to_sabn(3).unwrap();
    let x = input(1, 32, 4);
    let before: Vec<Tensor> = (0..3).map(|g| m.forward(&x, &[g]).unwrap()).collect();
    let mut p = m.clone();
    for (name, t, _) in p.named_tensors_mut() {
        if name.ends_with("norm.gamma.2") {
            t.data_mut().iter_mut().for_each(|v| *v *= 1.7);
        }
    }
    assert_eq!(p.forward(&x, &[0]).unwrap(), before[0]);
    assert_eq!(p.forward(&x, &[1]).unwrap(), before[1]);
    assert!(p.forward(&x, &[2]).unwrap().max_abs_diff(&before[2]) > 1e-6);
}

#[test]
fn concatenated_windows_agree_away_from_the_seam() {
    let cfg = ArchitectureConfig { depth: 2, base_filters: 4.0, rate: 16.0, epoch_s: 30.0, ..Default::default() };
    let mut m = model::<f64>(&cfg, 11);
    m.forward_train(&input(2, 480 * 4, 1), &[0]).unwrap();
    let (a, b) = (input(1, 480 * 3, 2), input(1, 480 * 3, 3));
    let joined = Tensor::new(vec![1, 2, 480 * 6], {
        let mut v = Vec::new();
        for c in 0..2 {
            v.extend_from_slice(&a.data()[c * 1440..(c + 1) * 1440]);
            v.extend_from_slice(&b.data()[c * 1440..(c + 1) * 1440]);
        }
        v
    })
    .unwrap();
    let pj = m.forward(&joined, &[0]).unwrap();
    let (pa, pb) = (m.forward(&a, &[0]).unwrap(), m.forward(&b, &[0]).unwrap());
    // epochs 0-1 and 4-5 lie far from the seam at epoch 3
    for e in [0, 1] {
        for k in 0..5 {
            assert!((pj.data()[e * 5 + k] - pa.data()[e * 5 + k]).abs() < 1e-5);
            assert!((pj.data()[(e + 4) * 5 + k] - pb.data()[(e + 1) * 5 + k]).abs() < 1e-5);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = model::<f64>(&tiny(BnVariant::Ccbn, 2), 5);
    m.forward_train(&input(2, 16, 0), &[0, 1]).unwrap();
    let dir = tmp.path().join("ck");
    save_checkpoint(&m, &dir, DType::F64).unwrap();
    assert_eq!(load_checkpoint::<f64>(&dir).unwrap(), m);

    let down = load_checkpoint::<f32>(&dir).unwrap();
    assert_eq!(down, m.cast::<f32>());
    let dir32 = tmp.path().join("ck32");
    save_checkpoint(&m, &dir32, DType::F32).unwrap();
    assert_eq!(load_checkpoint::<f32>(&dir32).unwrap(), down);

    let vanilla = model::<f64>(&tiny(BnVariant::Vanilla, 1), 5);
    let vdir = tmp.path().join("v");
    save_checkpoint(&vanilla, &vdir, DType::F64).unwrap();
    let err = load_checkpoint_as::<f64>(&vdir, &tiny(BnVariant::Sabn, 2)).unwrap_err();
    assert!(matches!(err, CheckpointError::MustConvert { .. }));
    assert!(err.to_string().contains("must convert"));

    let blob = dir.join("weights.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    let err = load_checkpoint::<f64>(&dir).unwrap_err().to_string();
    assert!(err.contains("classifier.output.bias"), "{err}");

    let manifest = vdir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("encoder.1.conv.weight f64 4,2,9", "encoder.1.conv.weight f64 4,2,7");
    std::fs::write(&manifest, text).unwrap();
    let err = load_checkpoint::<f64>(&vdir).unwrap_err().to_string();
    assert!(err.contains("encoder.1.conv.weight"), "{err}");
}
