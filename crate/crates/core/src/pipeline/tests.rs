use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::appearance::GmmState;
use crate::graph::{grad_check, GradCheckOptions};
use crate::synthvos::{generate, GenConfig, SequenceSample, ShapeClass};

fn tiny_net() -> SegNetConfig {
    SegNetConfig {
        feature_dim: 4,
        skip_dim: 3,
        maskprop_dim: 3,
        fusion_dim: 3,
        refine_dim: 3,
        seed: 2,
    }
}

fn tiny_model(flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        net: tiny_net(),
        flags,
        ..Default::default()
    }
}

fn toy_sequence(seed: u64, frames: usize, objects: usize) -> SequenceSample {
    let cfg = GenConfig {
        height: 16,
        width: 16,
        frames,
        min_objects: objects,
        max_objects: objects,
        min_radius: 3.0,
        max_radius: 5.0,
        max_speed: 1.0,
        ..Default::default()
    };
    generate(seed, &cfg).unwrap()
}

fn rand_probs(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<Tensor> {
    (0..m).map(|_| Tensor::from_fn(&[n, 1, 1], |_| rng.gen_range(0.0..=1.0))).collect()
}

#[test]
fn aggregation_examples() {
    let out = aggregate_values(&[Tensor::full(&[1, 1, 1], 0.5)]).unwrap();
    assert!((out.data()[0] - 0.5).abs() < 1e-15 && (out.data()[1] - 0.5).abs() < 1e-15);

    let eps = AGGREGATION_EPS;
    let out = aggregate_values(&[Tensor::full(&[1, 1, 1], 1.0 - eps), Tensor::full(&[1, 1, 1], eps)]).unwrap();
    assert!(out.data()[1] > 1.0 - 1e-4);
    assert!(out.data()[0] < 1e-4 && out.data()[2] < 1e-4);
    assert!(aggregate_values(&[]).is_err());
}

#[test]
fn single_object_aggregation_depends_only_on_own_mask() {
    // With one object the background logit is the negated object logit.
    for q in [0.01, 0.2, 0.5, 0.7, 0.999] {
        let out = aggregate_values(&[Tensor::full(&[1, 1, 1], q)]).unwrap();
        let expected = q * q / (q * q + (1.0 - q) * (1.0 - q));
        assert!((out.data()[1] - expected).abs() < 1e-12);
        assert_eq!(out.data()[1] > 0.5, q > 0.5);
    }
}

proptest! {
    #[test]
    fn aggregation_sums_to_one(seed in any::<u64>(), pick in 0usize..4) {
        let m = [1, 2, 3, 5][pick];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = aggregate_values(&rand_probs(&mut rng, m, 20)).unwrap();
        for px in out.data().chunks(m + 1) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn aggregation_is_order_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rand_probs(&mut rng, 3, 10);
        let a = aggregate_values(&p).unwrap();
        let b = aggregate_values(&[p[2].clone(), p[0].clone(), p[1].clone()]).unwrap();
        for (x, y) in a.data().chunks(4).zip(b.data().chunks(4)) {
            prop_assert_eq!(x[0], y[0]);
            prop_assert_eq!(x[1], y[2]);
            prop_assert_eq!(x[2], y[3]);
            prop_assert_eq!(x[3], y[1]);
        }
    }
}

#[test]
fn argmax_maps_channels_to_ids() {
    let d = Tensor::new(vec![1, 3, 3], vec![0.5, 0.3, 0.2, 0.1, 0.2, 0.7, 0.4, 0.4, 0.2]).unwrap();
    let m = argmax_labels(&d, &[0, 4, 7]).unwrap();
    assert_eq!(m.labels, vec![0, 7, 0]);
    assert!(argmax_labels(&d, &[0, 1]).is_err());
}

#[test]
fn feature_masks_binarize_with_fallback() {
    let mut labels = vec![0u8; 64];
    for y in 0..4 {
        for x in 0..4 {
            labels[y * 8 + x] = 1;
        }
    }
    labels[7 * 8 + 7] = 2;
    let mask = IndexMask::new(8, 8, labels).unwrap();
    let (soft, bin) = feature_masks(&mask, 1).unwrap();
    assert_eq!(soft.data(), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(bin.data(), &[1.0, 0.0, 0.0, 0.0]);
    let (soft, bin) = feature_masks(&mask, 2).unwrap();
    assert_eq!(soft.data(), &[0.0, 0.0, 0.0, 1.0 / 16.0]);
    assert_eq!(bin.data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn relabel_keeps_visible_objects() {
    let a = IndexMask::new(1, 4, vec![0, 2, 3, 3]).unwrap();
    let b = IndexMask::new(1, 4, vec![1, 2, 0, 3]).unwrap();
    let (out, kept) = relabel_visible(&[a, b]);
    assert_eq!(kept, vec![2, 3]);
    assert_eq!(out[0].labels, vec![0, 1, 2, 2]);
    assert_eq!(out[1].labels, vec![0, 1, 0, 2]);
}

#[test]
fn ablation_flags_round_trip() {
    for name in AblationFlags::VARIANTS {
        let f = AblationFlags::from_variant(name).unwrap();
        assert_eq!(f.name(), name);
    }
    assert!(AblationFlags::from_variant("bogus").is_err());
    let f = AblationFlags::from_variant("no_end_to_end").unwrap();
    assert!(f.model_options().detach_estimation);
    assert_eq!(AblationFlags::from_variant("unimodal").unwrap().model_options().num_components(), 2);
}

fn init(model: &ModelConfig, s: &SequenceSample) -> (Tape, Runner, Vec<ObjectTrack>) {
    let params = ParamStore::init(&model.net).unwrap();
    let mut tape = Tape::new();
    let runner = Runner::new(&mut tape, &params, model, false).unwrap();
    let tracks = runner.init_sequence(&mut tape, &s.frames[0], &s.masks[0]).unwrap();
    (tape, runner, tracks)
}

#[test]
fn init_creates_one_track_per_object() {
    let model = tiny_model(AblationFlags::default());
    for m in [1, 3] {
        let s = toy_sequence(5, 2, m);
        let (tape, runner, tracks) = init(&model, &s);
        assert_eq!(tracks.len(), m);
        let params = ParamStore::init(&model.net).unwrap();
        let r_raw = params.get(crate::segnet::REGULARIZER_PARAM).unwrap();
        // Each model equals the single-object path on that object's binarized mask.
        let x0 = tape.value(tracks[0].x0).clone();
        for t in &tracks {
            let (_, bin) = feature_masks(&s.masks[0], t.id).unwrap();
            let alone = GmmState::init_first_frame(&x0, &bin, r_raw, &model.update, &model.flags.model_options()).unwrap();
            assert_eq!(t.gmm_state(&tape, r_raw).unwrap().unwrap(), alone);
        }
        assert_eq!(runner.config().flags, AblationFlags::default());
    }
}

#[test]
fn init_rejects_bad_annotations() {
    let model = tiny_model(AblationFlags::default());
    let params = ParamStore::init(&model.net).unwrap();
    let mut tape = Tape::new();
    let runner = Runner::new(&mut tape, &params, &model, false).unwrap();
    let frame = Tensor::zeros(&[16, 16, 3]);
    assert!(runner.init_sequence(&mut tape, &frame, &IndexMask::zeros(16, 16)).is_err());
    assert!(runner.init_sequence(&mut tape, &frame, &IndexMask::zeros(8, 16)).is_err());
    let mut gap = IndexMask::zeros(16, 16);
    gap.labels[0] = 2;
    assert!(runner.init_sequence(&mut tape, &frame, &gap).is_err());
}

#[test]
fn step_contracts() {
    let model = tiny_model(AblationFlags::default());
    let s = toy_sequence(7, 3, 2);
    let (mut tape, runner, mut tracks) = init(&model, &s);
    let out = runner.step(&mut tape, &s.frames[1], &mut tracks).unwrap();
    assert_eq!(out.objects.len(), 2);
    assert_eq!(tape.value(out.aggregated_coarse).shape(), &[4, 4, 3]);
    assert_eq!(tape.value(out.aggregated_fine).shape(), &[16, 16, 3]);
    assert_eq!((out.labels.height, out.labels.width), (16, 16));
    for t in &tracks {
        let y = tape.value(t.y_prev);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(runner.step(&mut tape, &Tensor::zeros(&[8, 8, 3]), &mut tracks).is_err());
    assert!(runner.step(&mut tape, &s.frames[2], &mut []).is_err());
}

#[test]
fn no_update_keeps_models_fixed() {
    let model = tiny_model(AblationFlags::from_variant("no_update").unwrap());
    let s = toy_sequence(8, 5, 2);
    let (mut tape, runner, mut tracks) = init(&model, &s);
    let before: Vec<Vec<Tensor>> = tracks
        .iter()
        .map(|t| t.theta.as_ref().unwrap().components.iter().map(|&c| tape.value(c).clone()).collect())
        .collect();
    for f in &s.frames[1..] {
        runner.step(&mut tape, f, &mut tracks).unwrap();
    }
    for (t, b) in tracks.iter().zip(&before) {
        let now: Vec<Tensor> = t.theta.as_ref().unwrap().components.iter().map(|&c| tape.value(c).clone()).collect();
        assert_eq!(&now, b);
    }
}

#[test]
fn ablations_run_and_keep_shapes() {
    let s = toy_sequence(9, 3, 2);
    for name in AblationFlags::VARIANTS {
        let model = tiny_model(AblationFlags::from_variant(name).unwrap());
        let (mut tape, runner, mut tracks) = init(&model, &s);
        let out = runner.step(&mut tape, &s.frames[1], &mut tracks).unwrap();
        for o in &out.objects {
            assert_eq!(tape.value(o.scores).shape(), &[4, 4, 4], "{name}");
            assert!(tape.value(o.fine_prob).all_finite(), "{name}");
        }
        if name == "no_appearance" {
            assert!(tracks.iter().all(|t| t.theta.is_none()));
        }
        if name == "appearance_softmax" {
            let sc = tape.value(out.objects[0].scores);
            for px in sc.data().chunks(4) {
                assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pre_aggregation_outputs_match_single_object_runs() {
    let model = tiny_model(AblationFlags::default());
    let s = toy_sequence(11, 2, 3);
    let (mut tape, runner, mut tracks) = init(&model, &s);
    let joint = runner.step(&mut tape, &s.frames[1], &mut tracks).unwrap();
    for (m, o) in joint.objects.iter().enumerate() {
        let id = (m + 1) as u8;
        let single: Vec<IndexMask> = s
            .masks
            .iter()
            .map(|mk| IndexMask::new(mk.height, mk.width, mk.labels.iter().map(|&l| u8::from(l == id)).collect()).unwrap())
            .collect();
        let alone = SequenceSample {
            masks: single,
            classes: vec![s.classes[m]],
            ..s.clone()
        };
        let (mut t2, r2, mut tr2) = init(&model, &alone);
        let out = r2.step(&mut t2, &alone.frames[1], &mut tr2).unwrap();
        let a = &out.objects[0];
        assert_eq!(tape.value(o.scores), t2.value(a.scores));
        assert_eq!(tape.value(o.coarse_logits), t2.value(a.coarse_logits));
        assert_eq!(tape.value(o.fine_logits), t2.value(a.fine_logits));
    }
}

#[test]
fn swapping_object_ids_swaps_outputs_bitwise() {
    let model = tiny_model(AblationFlags::default());
    let s = toy_sequence(13, 4, 2);
    let swapped = SequenceSample {
        masks: s
            .masks
            .iter()
            .map(|mk| IndexMask::new(mk.height, mk.width, mk.labels.iter().map(|&l| [0, 2, 1][l as usize]).collect()).unwrap())
            .collect(),
        classes: vec![s.classes[1], s.classes[0]],
        ..s.clone()
    };
    let (mut ta, ra, mut tra) = init(&model, &s);
    let (mut tb, rb, mut trb) = init(&model, &swapped);
    for f in &s.frames[1..] {
        let a = ra.step(&mut ta, f, &mut tra).unwrap();
        let b = rb.step(&mut tb, f, &mut trb).unwrap();
        for (m, n) in [(0, 1), (1, 0)] {
            assert_eq!(ta.value(a.objects[m].fine_prob), tb.value(b.objects[n].fine_prob));
            assert_eq!(ta.value(tra[m].y_prev), tb.value(trb[n].y_prev));
        }
        // Labels agree wherever the argmax is unique; exact ties go to the lower id.
        let dist = ta.value(a.aggregated_fine);
        for (p, px) in dist.data().chunks(3).enumerate() {
            let best = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if px.iter().filter(|&&v| v == best).count() == 1 {
                assert_eq!(a.labels.labels[p], [0, 2, 1][b.labels.labels[p] as usize]);
            }
        }
    }
}

#[test]
fn prediction_is_causal() {
    let model = tiny_model(AblationFlags::default());
    let params = ParamStore::init(&model.net).unwrap();
    let s = toy_sequence(17, 6, 2);
    let full = predict_sequence(&params, &model, &s.frames, &s.masks[0]).unwrap();
    assert_eq!(full.len(), 6);
    assert_eq!(full[0], s.masks[0]);
    for i in [2, 4] {
        let part = predict_sequence(&params, &model, &s.frames[..i], &s.masks[0]).unwrap();
        assert_eq!(part[..], full[..i]);
    }
    // Per-frame tapes reproduce the single-tape run.
    let mut tape = Tape::new();
    let runner = Runner::new(&mut tape, &params, &model, false).unwrap();
    let (_, steps) = runner.run(&mut tape, &s.frames, &s.masks[0]).unwrap();
    for (st, p) in steps.iter().zip(&full[1..]) {
        assert_eq!(&st.labels, p);
    }
}

fn constant_step(tape: &mut Tape, logit: f64, id: u8, h: usize, w: usize) -> StepOutput {
    let fine = tape.constant(Tensor::from_fn(&[h, w, 2], |i| if i % 2 == 0 { -logit } else { logit }));
    let coarse = tape.constant(Tensor::from_fn(&[h / 4, w / 4, 2], |i| if i % 2 == 0 { -logit } else { logit }));
    let fine_prob = segnet::foreground_probability(tape, fine).unwrap();
    let coarse_prob = segnet::foreground_probability(tape, coarse).unwrap();
    let agg = aggregate(tape, &[fine_prob]).unwrap();
    StepOutput {
        objects: vec![ObjectOutput {
            id,
            scores: fine,
            coarse_logits: coarse,
            fine_logits: fine,
            coarse_prob,
            fine_prob,
        }],
        aggregated_coarse: agg,
        aggregated_fine: agg,
        labels: IndexMask::zeros(h, w),
    }
}

#[test]
fn loss_closed_forms() {
    let gt = IndexMask::new(4, 4, (0..16).map(|i| u8::from(i % 3 == 0)).collect()).unwrap();
    let mut tape = Tape::new();
    let half = constant_step(&mut tape, 0.0, 1, 4, 4);
    let (_, r) = sequence_loss(&mut tape, &[half.clone(), half], &[gt.clone(), gt.clone()]).unwrap();
    assert!((r.fine - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((r.total - r.fine - r.coarse).abs() < 1e-15);
    assert_eq!(r.per_frame.len(), 2);
    assert_eq!(r.terms, 2);

    // Probabilities 1 - ε on the right class give an ε-level loss.
    let eps = AGGREGATION_EPS;
    let l = ((1.0 - eps) / eps).ln() / 2.0;
    let all_fg = IndexMask::new(4, 4, vec![1; 16]).unwrap();
    let sure = constant_step(&mut tape, l, 1, 4, 4);
    let (_, r) = sequence_loss(&mut tape, &[sure.clone()], &[all_fg]).unwrap();
    assert!(r.fine > 0.0 && r.fine < 2.0 * eps);

    assert!(sequence_loss(&mut tape, &[sure.clone()], &[]).is_err());
    assert!(sequence_loss(&mut tape, &[sure], &[IndexMask::zeros(8, 8)]).is_err());
}

fn toy_loss(tape: &mut Tape, ids: &[NodeId], model: &ModelConfig, s: &SequenceSample) -> Result<NodeId> {
    let net = BoundParams::from_nodes(tape, ids.to_vec(), &model.net)?;
    let runner = Runner::with_net(tape, net, model)?;
    let (_, steps) = runner.run(tape, &s.frames, &s.masks[0])?;
    let (loss, _) = sequence_loss(tape, &steps, &s.masks[1..])?;
    Ok(loss)
}

#[test]
fn sequence_loss_passes_grad_check() {
    let s = toy_sequence(19, 2, 2);
    // Detached variants differ from finite differences by construction.
    for name in ["full", "unimodal", "appearance_softmax"] {
        let model = tiny_model(AblationFlags::from_variant(name).unwrap());
        let params = ParamStore::init(&model.net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor> = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| if n.ends_with(".b") { Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.1..0.1)) } else { t.clone() })
            .collect();
        let report = grad_check(
            |tape, ids| toy_loss(tape, ids, &model, &s),
            &inputs,
            GradCheckOptions {
                max_coords: Some(6),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{name}: {:e}", report.max_rel_error());
    }
}

#[test]
fn detached_estimation_cuts_model_gradients_only() {
    let s = toy_sequence(23, 3, 2);
    let params = ParamStore::init(&tiny_net()).unwrap();
    let mut finals = Vec::new();
    for name in ["full", "no_end_to_end"] {
        let model = tiny_model(AblationFlags::from_variant(name).unwrap());
        let mut tape = Tape::new();
        let runner = Runner::new(&mut tape, &params, &model, true).unwrap();
        let (tracks, steps) = runner.run(&mut tape, &s.frames, &s.masks[0]).unwrap();
        let mut root = None;
        for t in &tracks {
            for &c in &t.theta.as_ref().unwrap().components {
                let sc = tape.sum(c).unwrap();
                root = Some(match root {
                    None => sc,
                    Some(r) => tape.add(r, sc).unwrap(),
                });
            }
        }
        let g = tape.backward(root.unwrap(), &Tensor::scalar(1.0)).unwrap();
        let ids = runner.net.ids();
        let feature_grads: f64 = ids[..ids.len() - 1].iter().map(|&id| g.get(id).unwrap().data().iter().map(|v| v.abs()).sum::<f64>()).sum();
        if name == "full" {
            assert!(feature_grads > 0.0);
        } else {
            assert_eq!(feature_grads, 0.0);
        }
        finals.push(steps.iter().map(|st| tape.value(st.aggregated_fine).clone()).collect::<Vec<_>>());
    }
    assert_eq!(finals[0], finals[1]);
}

#[test]
fn classes_are_carried_through() {
    let s = toy_sequence(29, 2, 1);
    assert!(ShapeClass::SEEN.contains(&s.classes[0]));
}
