use std::time::Instant;

use mfu_core::model::{argmax_channels, checkpoint, max_fuse, MfuNet, ModelConfig};
use mfu_core::nn::{Backbone, Forward};
use mfu_core::tensor::{NdTensor, Scalar, Tape, Var};
use mfu_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdTensor<T> {
    NdTensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(0.0..1.0)))
}

fn inputs<T: Scalar>(seed: u64, b: usize, size: usize) -> [NdTensor<T>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| random(&mut rng, &[b, 1, size, size]))
}

fn refs<T>(x: &[NdTensor<T>; 3]) -> [&NdTensor<T>; 3] {
    [&x[0], &x[1], &x[2]]
}

fn leaves<T: Scalar>(tape: &Tape<T>, x: &[NdTensor<T>; 3]) -> [Var; 3] {
    std::array::from_fn(|i| tape.leaf(&x[i]).unwrap())
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny()
    }
}

#[test]
fn encoder_levels_follow_the_size_bookkeeping() {
    let model = MfuNet::<f32>::new(ModelConfig {
        image_size: 96,
        ..ModelConfig::default()
    })
    .unwrap();
    let x = inputs::<f32>(1, 2, 96);
    let tape = Tape::new();
    let f = Forward::new(&tape, model.params(), false);
    let bundle = model.encode(&f, leaves(&tape, &x)).unwrap();
    assert_eq!(bundle.levels.len(), 4);
    for (level, (size, ch)) in bundle.levels.iter().zip([(96, 16), (48, 32), (24, 64), (12, 128)]) {
        let fused = level.fused.expect("fusion enabled");
        for v in level.modality.into_iter().chain([fused]) {
            assert_eq!(tape.shape(v), vec![2, ch, size, size]);
        }
    }
    assert_eq!(tape.shape(bundle.bottleneck_input), vec![2, 3 * 128, 12, 12]);
}

#[test]
fn fused_features_are_the_elementwise_max_at_every_level() {
    let model = MfuNet::<f64>::new(tiny(2)).unwrap();
    let x = inputs::<f64>(2, 2, 32);
    let tape = Tape::new();
    let f = Forward::new(&tape, model.params(), false);
    let bundle = model.encode(&f, leaves(&tape, &x)).unwrap();
    for level in &bundle.levels {
        let [a, b, c] = level.modality.map(|v| tape.data(v));
        let fused = tape.data(level.fused.unwrap());
        for i in 0..fused.len() {
            assert_eq!(fused[i], a[i].max(b[i]).max(c[i]));
        }
    }
}

#[test]
fn identical_encoders_on_identical_inputs_fuse_to_the_first() {
    let mut model = MfuNet::<f64>::new(tiny(3)).unwrap();
    let names: Vec<String> = model.params().names().iter().filter(|n| n.starts_with("enc.lge.")).cloned().collect();
    for name in names {
        let value = model.params().get(model.params().by_name(&name).unwrap()).clone();
        for m in ["t2", "bssfp"] {
            model.params_mut().set(&name.replacen("lge", m, 1), value.clone()).unwrap();
        }
    }
    let one = inputs::<f64>(3, 1, 32);
    let x = [one[0].clone(), one[0].clone(), one[0].clone()];
    let tape = Tape::new();
    let f = Forward::new(&tape, model.params(), false);
    let bundle = model.encode(&f, leaves(&tape, &x)).unwrap();
    for level in &bundle.levels {
        assert_eq!(tape.data(level.fused.unwrap()), tape.data(level.modality[0]));
    }
}

#[test]
fn a_suppressed_modality_does_not_affect_the_fused_features() {
    let model = MfuNet::<f64>::new(tiny(4)).unwrap();
    let mut x = inputs::<f64>(4, 1, 32);
    x[2].data_mut().iter_mut().for_each(|v| *v = -1e3);
    let tape = Tape::new();
    let f = Forward::new(&tape, model.params(), false);
    let bundle = model.encode(&f, leaves(&tape, &x)).unwrap();
    let level = bundle.levels[0];
    let [a, b, c] = level.modality.map(|v| tape.data(v));
    let fused = tape.data(level.fused.unwrap());
    let mut covered = 0;
    for i in 0..fused.len() {
        let others = a[i].max(b[i]);
        if others > 0.0 && others >= c[i] {
            assert_eq!(fused[i], others);
            covered += 1;
        }
        assert!(fused[i] >= a[i] && fused[i] >= b[i] && fused[i] >= c[i]);
    }
    assert!(covered > fused.len() / 4, "{covered} of {}", fused.len());
}

fn fuse(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let n = a.len();
    let v = |d: &[f64]| tape.constant([n], d.to_vec()).unwrap();
    let (va, vb, vc) = (v(a), v(b), v(c));
    tape.data(max_fuse(&tape, va, vb, vc).unwrap())
}

proptest! {
    #[test]
    fn max_fuse_is_idempotent_commutative_and_dominant(
        a in prop::collection::vec(-4.0f64..4.0, 1..30),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
        let c: Vec<f64> = a.iter().map(|v| if rng.random_bool(0.3) { *v } else { rng.random_range(-4.0..4.0) }).collect();
        prop_assert_eq!(fuse(&a, &a, &a), a.clone());
        let out = fuse(&a, &b, &c);
        for perm in [(&a, &c, &b), (&b, &a, &c), (&b, &c, &a), (&c, &a, &b), (&c, &b, &a)] {
            prop_assert_eq!(fuse(perm.0, perm.1, perm.2), out.clone());
        }
        for i in 0..a.len() {
            prop_assert!(out[i] >= a[i] && out[i] >= b[i] && out[i] >= c[i]);
            prop_assert!(out[i] == a[i] || out[i] == b[i] || out[i] == c[i]);
        }
    }
}

#[test]
fn max_fuse_rejects_mismatched_shapes_and_routes_ties_to_the_first() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(&NdTensor::new([2], vec![1.0, 2.0]).unwrap().with_requires_grad(true)).unwrap();
    let b = tape.leaf(&NdTensor::new([2], vec![1.0, 0.0]).unwrap().with_requires_grad(true)).unwrap();
    let c = tape.leaf(&NdTensor::new([2], vec![1.0, 2.0]).unwrap().with_requires_grad(true)).unwrap();
    let g = tape.backward(tape.sum(max_fuse(&tape, a, b, c).unwrap()).unwrap()).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.wrt(b).unwrap(), &[0.0, 0.0]);
    assert_eq!(g.wrt(c).unwrap(), &[0.0, 0.0]);
    let d = tape.constant([3], vec![0.0; 3]).unwrap();
    assert!(matches!(max_fuse(&tape, a, b, d).unwrap_err(), Error::Shape { .. }));
}

#[test]
fn misaligned_modalities_are_rejected() {
    let model = MfuNet::<f32>::new(tiny(5)).unwrap();
    let a = inputs::<f32>(5, 1, 32);
    let b = inputs::<f32>(5, 1, 16);
    let tape = Tape::new();
    let f = Forward::new(&tape, model.params(), false);
    let err = model.forward_tensors(&f, [&a[0], &b[1], &a[2]]).unwrap_err();
    assert!(matches!(err, Error::Alignment(_)), "{err}");
    let odd = inputs::<f32>(5, 1, 30);
    assert!(matches!(model.forward_tensors(&f, refs(&odd)).unwrap_err(), Error::Config(_)));
}

#[test]
fn heads_are_distributions_at_the_input_resolution() {
    for backbone in [Backbone::Residual, Backbone::Dilation, Backbone::SideConv] {
        for levels in [1, 2, 3] {
            let model = MfuNet::<f32>::new(ModelConfig {
                backbone,
                levels,
                ..tiny(6)
            })
            .unwrap();
            let x = inputs::<f32>(6, 2, 16);
            let p = model.predict(refs(&x)).unwrap();
            assert_eq!(p.anatomy.shape(), &[2, 4, 16, 16]);
            assert_eq!(p.pathology.shape(), &[2, 3, 16, 16]);
            for probs in [&p.anatomy, &p.pathology] {
                let c = probs.shape()[1];
                for b in 0..2 {
                    for px in 0..256 {
                        let s: f64 = (0..c).map(|k| f64::from(probs.data()[(b * c + k) * 256 + px])).sum();
                        assert!((s - 1.0).abs() < 1e-6);
                    }
                }
            }
            assert_eq!(p.attention_received.unwrap().shape(), &[2, 8, 8]);
        }
    }
}

#[test]
fn zero_inputs_give_spatially_constant_maps() {
    let model = MfuNet::<f64>::new(tiny(7)).unwrap();
    let zeros = NdTensor::<f64>::zeros(vec![1, 1, 32, 32]);
    let p = model.predict([&zeros, &zeros, &zeros]).unwrap();
    for probs in [&p.anatomy, &p.pathology] {
        for plane in probs.data().chunks(32 * 32) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }
}

#[test]
fn fusion_itself_is_parameter_free() {
    let with = MfuNet::<f32>::new(tiny(8)).unwrap();
    let without = MfuNet::<f32>::new(ModelConfig {
        max_fusion_enabled: false,
        ..tiny(8)
    })
    .unwrap();
    assert_eq!(with.params().names(), without.params().names());
    let mut extra = 0;
    for ((name, a), (_, b)) in with.params().iter().zip(without.params().iter()) {
        if a.shape() == b.shape() {
            continue;
        }
        // Only the decoder blocks that consume the skip concatenation widen.
        assert!(name.starts_with("dec.") && (name.ends_with("conv1.w") || name.ends_with("proj.w")), "{name}");
        assert_eq!(a.shape()[0], b.shape()[0]);
        let k: usize = name[4..5].parse().unwrap();
        assert_eq!(a.shape()[1] - b.shape()[1], tiny(8).channels(k));
        extra += a.numel() - b.numel();
    }
    assert_eq!(with.params().num_scalars() - without.params().num_scalars(), extra);
}

#[test]
fn without_fusion_the_skips_carry_three_modalities() {
    let cfg = ModelConfig {
        max_fusion_enabled: false,
        ..tiny(9)
    };
    let model = MfuNet::<f32>::new(cfg.clone()).unwrap();
    for k in 0..cfg.levels {
        let w = model.params().get(model.params().by_name(&format!("dec.{k}.block.conv1.w")).unwrap());
        assert_eq!(w.shape()[1], cfg.channels(k) * 4);
    }
    let x = inputs::<f32>(9, 1, 32);
    let tape = Tape::new();
    let f = Forward::new(&tape, model.params(), false);
    let bundle = model.encode(&f, leaves(&tape, &x)).unwrap();
    assert!(bundle.levels.iter().all(|l| l.fused.is_none()));
}

#[test]
fn attention_scale_does_not_change_the_parameter_count() {
    let mut model = MfuNet::<f32>::new(tiny(10)).unwrap();
    let before = model.params().num_scalars();
    let scale = model.attention_block().unwrap().scale;
    model.params_mut().get_mut(scale).data_mut()[0] = 0.5;
    assert_eq!(model.params().num_scalars(), before);
}

#[test]
fn zero_scale_attention_with_a_transparent_skeleton_matches_no_attention() {
    let mut with = MfuNet::<f64>::new(tiny(11)).unwrap();
    let mut without = MfuNet::<f64>::new(ModelConfig {
        attention_enabled: false,
        ..tiny(11)
    })
    .unwrap();
    for name in without.params().names().to_vec() {
        let v = with.params().get(with.params().by_name(&name).unwrap()).clone();
        without.params_mut().set(&name, v).unwrap();
    }
    for name in ["attention.up.w", "attention.up.b", "attention.down.b"] {
        let id = with.params().by_name(name).unwrap();
        with.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = inputs::<f64>(11, 2, 32);
    let a = with.predict(refs(&x)).unwrap();
    let b = without.predict(refs(&x)).unwrap();
    assert_eq!(a.anatomy.data(), b.anatomy.data());
    assert_eq!(a.pathology.data(), b.pathology.data());
    assert!(b.attention_received.is_none());
}

#[test]
fn tiny_forward_and_backward_take_under_a_second() {
    let model = MfuNet::<f32>::new(tiny(12)).unwrap();
    let x = inputs::<f32>(12, 2, 32);
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let start = Instant::now();
        let tape = Tape::new();
        let f = Forward::new(&tape, model.params(), true);
        let out = model.forward_tensors(&f, refs(&x)).unwrap();
        let a = tape.sum(tape.mul(out.anatomy, out.anatomy).unwrap()).unwrap();
        let p = tape.sum(tape.mul(out.pathology, out.pathology).unwrap()).unwrap();
        let grads = tape.backward(tape.add(a, p).unwrap()).unwrap();
        best = best.min(start.elapsed().as_secs_f64());
        assert_eq!(grads.param_grads().count(), model.params().len());
    }
    assert!(best < 1.0, "{best} s");
}

#[test]
fn inference_is_deterministic() {
    let model = MfuNet::<f32>::new(tiny(13)).unwrap();
    let x = inputs::<f32>(13, 2, 32);
    let a = model.predict(refs(&x)).unwrap();
    let b = model.predict(refs(&x)).unwrap();
    assert_eq!(a.anatomy.data(), b.anatomy.data());
    assert_eq!(MfuNet::<f32>::new(tiny(13)).unwrap().predict(refs(&x)).unwrap().pathology.data(), a.pathology.data());
}

#[test]
fn argmax_picks_the_most_probable_class() {
    let probs = NdTensor::new([1, 3, 1, 2], vec![0.2, 0.5, 0.7, 0.1, 0.1, 0.4]).unwrap();
    assert_eq!(argmax_channels(&probs), vec![1, 0]);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut model = MfuNet::<f64>::new(tiny(14)).unwrap();
    let scale = model.attention_block().unwrap().scale;
    model.params_mut().get_mut(scale).data_mut()[0] = 0.5;
    let x = inputs::<f64>(14, 1, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    // signed weights keep the objective small, and with it the difference round-off
    let mut signed = |shape: [usize; 4]| NdTensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    let wa = signed([1, 4, 16, 16]);
    let wp = signed([1, 3, 16, 16]);
    let frozen = model.clone();
    let report = model
        .params_mut()
        .finite_diff_check(
            |f| {
                let out = frozen.forward_tensors(f, refs(&x))?;
                let t = f.tape;
                let a = t.sum(t.mul(out.anatomy, t.leaf(&wa)?)?)?;
                let p = t.sum(t.mul(out.pathology, t.leaf(&wp)?)?)?;
                t.add(a, p)
            },
            1e-6,
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = MfuNet::<f32>::new(tiny(16)).unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    for path in [dir.path().to_path_buf(), dir.path().join("manifest.txt")] {
        let loaded = checkpoint::load::<f32>(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for ((na, a), (nb, b)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let line = manifest.lines().find(|l| l.starts_with("head.anatomy.w\t")).unwrap();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields[1], "4,4,1,1");
    let bytes = std::fs::read(dir.path().join(fields[2])).unwrap();
    assert_eq!(&bytes[..4], b"NDT1");
    assert_eq!(checkpoint::sha256_hex(&bytes), fields[3]);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = MfuNet::<f32>::new(tiny(17)).unwrap();
    checkpoint::save(&model, dir.path()).unwrap();
    let file = dir.path().join("params/head.pathology.w.ndt");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&file, &bytes).unwrap();
    let err = checkpoint::load::<f32>(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");

    std::fs::remove_file(&file).unwrap();
    let err = checkpoint::load::<f32>(dir.path()).unwrap_err();
    assert!(err.is_data_error(), "{err}");
}

#[test]
fn mismatched_checkpoints_name_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&MfuNet::<f32>::new(tiny(18)).unwrap(), dir.path()).unwrap();
    let mut wider = MfuNet::<f32>::new(ModelConfig {
        base_channels: 8,
        ..tiny(18)
    })
    .unwrap();
    let err = checkpoint::load_into(&mut wider, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
    assert!(err.to_string().contains("enc.lge.0"), "{err}");

    let mut plain = MfuNet::<f32>::new(ModelConfig {
        attention_enabled: false,
        ..tiny(18)
    })
    .unwrap();
    let err = checkpoint::load_into(&mut plain, dir.path()).unwrap_err();
    assert!(err.to_string().contains("attention."), "{err}");

    let plain_dir = tempfile::tempdir().unwrap();
    checkpoint::save(&plain, plain_dir.path()).unwrap();
    let mut full = MfuNet::<f32>::new(tiny(18)).unwrap();
    let err = checkpoint::load_into(&mut full, plain_dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}
