use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::{grad_check, GradCheckOptions};

fn tiny() -> SegNetConfig {
    SegNetConfig {
        feature_dim: 4,
        skip_dim: 3,
        maskprop_dim: 3,
        fusion_dim: 3,
        refine_dim: 3,
        seed: 1,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn census_is_reproducible() {
    let a = ParamStore::init(&SegNetConfig::default()).unwrap();
    let b = ParamStore::init(&SegNetConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.census(), b.census());
    assert_eq!(a.len(), 29);
    assert_eq!(a.names()[0], "enc1.w");
    assert_eq!(a.get("enc1.w").unwrap().shape(), &[3, 3, 3, 16]);
    assert_eq!(a.get("maskprop.in.w").unwrap().shape(), &[3, 3, 66, 32]);
    assert_eq!(a.get("fusion1.w").unwrap().shape(), &[3, 3, 36, 32]);
    assert_eq!(a.get("coarse.w").unwrap().shape(), &[1, 1, 32, 2]);
    assert_eq!(a.get("refine1.w").unwrap().shape(), &[3, 3, 48, 16]);
    assert_eq!(a.get(REGULARIZER_PARAM).unwrap().shape(), &[4, 32]);
    let other = ParamStore::init(&SegNetConfig {
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(other.census(), a.census());
    assert_ne!(other, a);
}

#[test]
fn init_is_fan_in_bounded_with_zero_bias() {
    let p = ParamStore::init(&SegNetConfig::default()).unwrap();
    for (name, t) in p.names().iter().zip(p.tensors()) {
        if name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        } else if name.ends_with(".w") {
            let s = t.shape();
            let bound = (6.0 / (s[0] * s[1] * s[2]) as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() < bound));
        }
    }
}

#[test]
fn bundle_round_trip_and_shape_errors() {
    let p = ParamStore::init(&tiny()).unwrap();
    let mut q = ParamStore::init(&SegNetConfig { seed: 5, ..tiny() }).unwrap();
    q.load_bundle(&p.to_bundle()).unwrap();
    assert_eq!(p, q);

    let mut wide = ParamStore::init(&SegNetConfig::default()).unwrap();
    match wide.load_bundle(&p.to_bundle()) {
        Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "enc1.w"),
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(q.load_bundle(&p.to_bundle()[1..]).is_err());
}

#[test]
fn bind_rejects_mismatched_store() {
    let p = ParamStore::init(&tiny()).unwrap();
    let mut tape = Tape::new();
    assert!(BoundParams::bind(&mut tape, &p, &SegNetConfig::default(), false).is_err());
}

#[test]
fn encoder_shape_contract() {
    let cfg = SegNetConfig::default();
    let p = ParamStore::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let net = BoundParams::bind(&mut tape, &p, &cfg, false).unwrap();
    let img = tape.constant(rand_tensor(&mut rng, &[64, 64, 3], 0.0, 1.0));
    let (x, skip) = encode(&mut tape, &net, img).unwrap();
    assert_eq!(tape.value(x).shape(), &[16, 16, 32]);
    assert_eq!(tape.value(skip).shape(), &[32, 32, 16]);

    let zero = tape.constant(Tensor::zeros(&[64, 64, 3]));
    let (x, skip) = encode(&mut tape, &net, zero).unwrap();
    assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(skip).data().iter().all(|&v| v == 0.0));

    let odd = tape.constant(Tensor::zeros(&[62, 64, 3]));
    assert!(encode(&mut tape, &net, odd).is_err());
}

#[test]
fn mask_propagation_contract() {
    let cfg = SegNetConfig::default();
    let p = ParamStore::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let net = BoundParams::bind(&mut tape, &p, &cfg, false).unwrap();
    let x = tape.constant(rand_tensor(&mut rng, &[16, 16, 32], -1.0, 1.0));
    let y = tape.constant(Tensor::from_fn(&[16, 16, 1], |i| (i % 16 > 8) as u8 as f64));
    let enc = mask_propagate(&mut tape, &net, x, y, x, y).unwrap();
    assert_eq!(tape.value(enc).shape(), &[16, 16, 32]);
    assert!(tape.value(enc).all_finite());

    let small = tape.constant(Tensor::zeros(&[8, 8, 1]));
    assert!(mask_propagate(&mut tape, &net, x, small, x, y).is_err());
}

#[test]
fn zero_fusion_weights_give_bias_logits() {
    let cfg = tiny();
    let mut p = ParamStore::init(&cfg).unwrap();
    for (name, t) in p.names.clone().iter().zip(p.tensors_mut()) {
        if name.starts_with("fusion") || name.starts_with("coarse") {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        if name == "coarse.b" {
            t.data_mut().copy_from_slice(&[0.3, -0.2]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let net = BoundParams::bind(&mut tape, &p, &cfg, false).unwrap();
    let s = tape.constant(rand_tensor(&mut rng, &[4, 4, 4], -5.0, 0.0));
    let m = tape.constant(rand_tensor(&mut rng, &[4, 4, 3], 0.0, 1.0));
    let (logits, enc) = fuse_and_predict(&mut tape, &net, s, m).unwrap();
    assert_eq!(tape.value(enc).shape(), &[4, 4, 3]);
    for px in tape.value(logits).data().chunks(2) {
        assert_eq!(px, &[0.3, -0.2]);
    }
    let fg = foreground_probability(&mut tape, logits).unwrap();
    let first = tape.value(fg).data()[0];
    assert!(tape.value(fg).data().iter().all(|&v| v == first));

    let bad = tape.constant(Tensor::zeros(&[2, 2, 3]));
    assert!(fuse_and_predict(&mut tape, &net, s, bad).is_err());
}

#[test]
fn refine_contract() {
    let cfg = SegNetConfig::default();
    let p = ParamStore::init(&SegNetConfig { seed: 8, ..cfg }).unwrap();
    let mut tape = Tape::new();
    let net = BoundParams::bind(&mut tape, &p, &cfg, false).unwrap();
    let enc = tape.constant(Tensor::full(&[16, 16, 32], 0.7));
    let skip = tape.constant(Tensor::full(&[32, 32, 16], 0.2));
    let logits = refine(&mut tape, &net, enc, skip).unwrap();
    let v = tape.value(logits);
    assert_eq!(v.shape(), &[64, 64, 2]);
    // Away from the zero-padded border the response to constant input is constant.
    let at = |r: usize, c: usize, k: usize| v.data()[(r * 64 + c) * 2 + k];
    for r in 8..56 {
        for c in 8..56 {
            for k in 0..2 {
                assert!((at(r, c, k) - at(32, 32, k)).abs() < 1e-12);
            }
        }
    }
    let fg = foreground_probability(&mut tape, logits).unwrap();
    assert!(tape.value(fg).data().iter().all(|v| (0.0..=1.0).contains(v)));

    let bad = tape.constant(Tensor::zeros(&[16, 16, 16]));
    assert!(refine(&mut tape, &net, enc, bad).is_err());
}

#[test]
fn encoder_passes_grad_check() {
    let cfg = tiny();
    let p = ParamStore::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = rand_tensor(&mut rng, &[8, 8, 3], 0.0, 1.0);
    let mut inputs = p.tensors()[..8].to_vec();
    for b in inputs.iter_mut().skip(1).step_by(2) {
        *b = rand_tensor(&mut rng, b.shape(), -0.1, 0.1);
    }
    let report = grad_check(
        |tape, ids| {
            let mut all: Vec<NodeId> = ids.to_vec();
            for t in &p.tensors()[8..] {
                all.push(tape.constant(t.clone()));
            }
            let net = BoundParams {
                ids: all,
                config: cfg,
                specs: layout(&cfg),
            };
            let image = tape.constant(img.clone());
            let (x, skip) = encode(tape, &net, image)?;
            let sx = tape.sum(x)?;
            let ss = tape.sum(skip)?;
            tape.add(sx, ss)
        },
        &inputs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:e}", report.max_rel_error());
}
