use std::collections::BTreeMap;

use dewarp_core::geometry::{generate_sample, invert_forward_map, resample, DeformationField, ForwardMap, WarpParams};
use dewarp_core::model::{Mode, Model, ModelConfig};
use dewarp_core::rng;
use dewarp_core::training::{compute_losses, random_mask, AdamW, LossConfig, OptimConfig, Schedule};
use dewarp_core::{Tape, Tensor};
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(100.0), Just(-100.0), -100.0..100.0f64], len)
}

/// Gradients of the total loss of the toy model, keyed by parameter.
fn toy_gradients(seed: u64) -> (Tensor<f32>, BTreeMap<String, Tensor<f32>>) {
    let m = Model::<f32>::new(ModelConfig::toy(32, 8), seed).unwrap();
    let tape = Tape::new();
    let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng::seeded(seed + 1)).unwrap();
    let (fwd, bound) = m.forward(&tape.constant(x), Mode::Train).unwrap();
    let h = tape.constant(random_mask(&[2, 1, 32, 32], seed + 2));
    let v = tape.constant(random_mask(&[2, 1, 32, 32], seed + 3));
    let field = tape.constant(Tensor::uniform(&[2, 2, 32, 32], 0.1, 0.9, &mut rng::seeded(seed + 4)).unwrap());
    let report = compute_losses(&fwd.output, &h, &v, &field, &LossConfig::default()).unwrap();
    report.total.backward().unwrap();
    (fwd.output.field.value().clone(), bound.gradients())
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn softmax_and_sigmoid_stay_in_range(xs in values(12)) {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3, 4], xs).unwrap());
        let s = x.sigmoid().unwrap();
        prop_assert!(s.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let p = x.softmax(1).unwrap();
        prop_assert!(p.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        for row in p.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_undoes_concat(a in 1usize..4, b in 1usize..4, axis in 0usize..3, seed in any::<u64>()) {
        let mut sa = vec![2, 3, 2];
        let mut sb = sa.clone();
        sa[axis] = a;
        sb[axis] = b;
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(&sa, seed).unwrap());
        let y = tape.leaf(Tensor::randn(&sb, seed ^ 1).unwrap());
        let cat = dewarp_core::Var::concat(&[&x, &y], axis).unwrap();
        let parts = cat.split(axis, &[a, b]).unwrap();
        prop_assert_eq!(parts[0].value(), x.value());
        prop_assert_eq!(parts[1].value(), y.value());
    }

    #[test]
    fn double_transpose_is_exact(i in 0usize..3, j in 0usize..3, seed in any::<u64>()) {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(&[2, 3, 4], seed).unwrap());
        let back = x.transpose(i, j).unwrap().transpose(i, j).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }

    #[test]
    fn lr_schedule_shape(warmup in 1usize..50, extra in 1usize..500, lo in 1e-8..1e-5f64, hi in 1e-4..1e-2f64) {
        let s = Schedule { lr_max: hi, lr_min: lo, warmup, total: warmup + extra };
        prop_assert_eq!(s.lr_at(warmup), hi);
        // the cosine starts where the ramp ends
        let first_drop = (hi - lo) * (std::f64::consts::PI / extra as f64).powi(2) / 4.0;
        prop_assert!(hi - s.lr_at(warmup + 1) <= first_drop * 1.001 + 1e-18);
        for step in warmup..warmup + extra {
            prop_assert!(s.lr_at(step + 1) <= s.lr_at(step));
        }
        prop_assert_eq!(s.lr_at(warmup + extra), lo);
    }

    #[test]
    fn zero_lr_leaves_parameters_alone(seed in any::<u64>(), decay in 0.0..0.1f64) {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f32>::randn(&[7], seed).unwrap());
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::<f32>::randn(&[7], seed ^ 3).unwrap());
        let mut opt = AdamW::new(&OptimConfig { weight_decay: decay, ..OptimConfig::default() });
        opt.update(params.iter_mut(), &grads, 0.0).unwrap();
        prop_assert_eq!(params, before);
    }

    #[test]
    fn identity_field_resample_is_identity(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let img = Tensor::<f32>::uniform(&[3, h, w], 0.0, 1.0, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(resample(&img, &DeformationField::identity(h, w)).unwrap(), img);
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn losses_are_non_negative_and_sum_up(seed in any::<u64>(), alpha in 0.0..10.0f64, all in any::<bool>()) {
        let m = Model::<f64>::new(ModelConfig::toy(32, 8), seed).unwrap();
        let tape = Tape::no_grad();
        let x = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng::seeded(seed)).unwrap();
        let out = m.forward(&tape.constant(x), Mode::Train).unwrap().0.output;
        let h = tape.constant(random_mask(&[1, 1, 32, 32], seed ^ 1));
        let v = tape.constant(random_mask(&[1, 1, 32, 32], seed ^ 2));
        let field = tape.constant(Tensor::uniform(&[1, 2, 32, 32], 0.0, 1.0, &mut rng::seeded(seed ^ 4)).unwrap());
        let cfg = LossConfig { alpha, line_loss_all_layers: all };
        let r = compute_losses(&out, &h, &v, &field, &cfg).unwrap();
        let parts = r.bce_h.iter().chain(&r.bce_v).chain(&r.line_h).chain(&r.line_v);
        prop_assert!(parts.copied().chain([r.rec, r.line]).all(|t| t >= 0.0));
        let want = alpha * r.rec + r.line;
        prop_assert!((r.total_value() - want).abs() <= 1e-6 * want.abs().max(1e-12));
    }

    #[test]
    fn generated_fields_are_valid_and_repeatable(seed in any::<u64>()) {
        let s = generate_sample(24, seed).unwrap();
        s.field.validate().unwrap();
        prop_assert!(s.h_mask.data().iter().chain(s.v_mask.data()).all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(s.image.shape(), [3, 24, 24]);
        prop_assert_eq!(generate_sample(24, seed).unwrap(), s);
    }

    #[test]
    fn inverse_map_residual(seed in any::<u64>()) {
        let params = WarpParams::sample(seed);
        let field = invert_forward_map(&params, 20, 20, 1e-10, 200).unwrap();
        let map = ForwardMap::new(&params).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let (x, y) = field.at(i, j);
                let (fx, fy) = map.apply(x, y);
                let (gx, gy) = ((j as f64 + 0.5) / 20.0, (i as f64 + 0.5) / 20.0);
                // clamped source points sit on the page border
                if x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0 {
                    prop_assert!((fx - gx).hypot(fy - gy) < 1e-6);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(config(4))]

    #[test]
    fn identical_seeds_give_identical_passes(seed in 0u64..1000) {
        let (fa, ga) = toy_gradients(seed);
        let (fb, gb) = toy_gradients(seed);
        prop_assert_eq!(fa, fb);
        prop_assert_eq!(ga, gb);
    }
}
