use super::*;
use latefuse_tensor::gradcheck::check_param_gradients;
use latefuse_tensor::{no_grad, HasParams, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy(seed: u64) -> TemporalBranch<f64> {
    TemporalBranch::new(TemporalBranchConfig::toy(), 16, &mut rng(seed)).unwrap()
}

fn frames(b: usize, t: usize, s: usize, seed: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, t, SITS_BANDS, s, s], |i| (((i + seed) * 7919) % 211) as f64 / 105.0 - 1.0)
}

#[test]
fn level_sizes_halve() {
    let m = TemporalBranch::<f32>::new(TemporalBranchConfig::default(), 40, &mut rng(0)).unwrap();
    let x = Var::constant(Tensor::zeros(&[1, 2, SITS_BANDS, 40, 40]));
    let levels = no_grad(|| m.encode_frames(&x, Mode::Eval)).unwrap();
    let sizes: Vec<usize> = levels.iter().map(|l| l.dim(3)).collect();
    assert_eq!(sizes, vec![40, 20, 10, 5]);
    assert_eq!(levels[2].shape(), &[1, 2, 128, 10, 10]);
}

#[test]
fn toy_logits_match_input_size_and_are_finite() {
    let m = TemporalBranch::<f64>::new(TemporalBranchConfig::toy(), 8, &mut rng(0)).unwrap();
    let x = Var::constant(Tensor::zeros(&[2, 3, SITS_BANDS, 8, 8]));
    let out = no_grad(|| m.forward(&x, &[10, 40, 90, 10, 40, 90], &[true; 6], Mode::Eval)).unwrap();
    assert_eq!(out.logits.shape(), &[2, 13, 8, 8]);
    assert!(out.logits.value().all_finite());
}

#[test]
fn frames_share_weights() {
    let m = toy(1);
    let one = frames(1, 1, 16, 3);
    let both = Tensor::cat(&[&one, &one], 1).unwrap();
    let levels = no_grad(|| m.encode_frames(&Var::constant(both), Mode::Eval)).unwrap();
    for l in levels {
        let a = l.value().narrow(1, 0, 1).unwrap();
        let b = l.value().narrow(1, 1, 1).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn single_frame_gets_all_attention() {
    let m = toy(2);
    let x = Var::constant(frames(1, 1, 16, 1));
    let levels = no_grad(|| m.encode_frames(&x, Mode::Eval)).unwrap();
    let (maps, attn) = no_grad(|| m.collapse_temporal(&levels, &[100], &[true], Mode::Eval)).unwrap();
    assert!(attn.value().data().iter().all(|&a| a == 1.0));
    let l0 = levels[0].value().clone().reshape(maps[0].shape()).unwrap();
    assert!(l0.max_abs_diff(maps[0].value()) < 1e-12);
}

#[test]
fn padded_frames_do_not_leak() {
    let m = toy(3);
    let base = frames(2, 3, 16, 5);
    let mut noisy = base.clone();
    let plane = SITS_BANDS * 16 * 16;
    // series 0 has one padded frame at t=2, series 1 has two
    for (b, t) in [(0, 2), (1, 1), (1, 2)] {
        let start = (b * 3 + t) * plane;
        for (k, v) in noisy.data_mut()[start..start + plane].iter_mut().enumerate() {
            *v = 1e3 * ((k % 13) as f64 - 6.0);
        }
    }
    let mut zeroed = base.clone();
    for (b, t) in [(0, 2), (1, 1), (1, 2)] {
        let start = (b * 3 + t) * plane;
        zeroed.data_mut()[start..start + plane].fill(0.0);
    }
    let days = [20, 120, 1, 50, 1, 1];
    let valid = [true, true, false, true, false, false];
    let run = |x: &Tensor<f64>| no_grad(|| m.forward(&Var::constant(x.clone()), &days, &valid, Mode::Train)).unwrap();
    let a = run(&zeroed);
    let b = run(&noisy);
    assert_eq!(a.logits.value().data(), b.logits.value().data());
    let att = a.attention.value();
    let (heads, t, hw) = (att.dim(0), att.dim(2), att.dim(3) * att.dim(4));
    for h in 0..heads {
        for bi in 0..2 {
            for p in 0..hw {
                let sum: f64 = (0..t).map(|k| att.data()[((h * 2 + bi) * t + k) * hw + p]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                for k in 0..t {
                    if !valid[bi * t + k] {
                        assert_eq!(att.data()[((h * 2 + bi) * t + k) * hw + p], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn all_padding_is_an_error() {
    let m = toy(0);
    let x = Var::constant(frames(1, 2, 16, 0));
    assert!(m.forward(&x, &[1, 1], &[false, false], Mode::Eval).is_err());
    assert!(m.forward(&x, &[0, 5], &[true, true], Mode::Eval).is_err());
}

#[test]
fn reordering_frames_with_dates_is_harmless() {
    let m = toy(4);
    let x = frames(1, 3, 16, 8);
    let plane = SITS_BANDS * 16 * 16;
    let order = [2, 0, 1];
    let mut shuffled = Vec::with_capacity(x.numel());
    for &t in &order {
        shuffled.extend_from_slice(&x.data()[t * plane..(t + 1) * plane]);
    }
    let shuffled = Tensor::new(x.shape(), shuffled).unwrap();
    let days = [30u16, 150, 270];
    let sdays: Vec<u16> = order.iter().map(|&t| days[t]).collect();
    let a = no_grad(|| m.forward(&Var::constant(x.clone()), &days, &[true; 3], Mode::Eval)).unwrap();
    let b = no_grad(|| m.forward(&Var::constant(shuffled), &sdays, &[true; 3], Mode::Eval)).unwrap();
    assert!(a.logits.value().max_abs_diff(b.logits.value()) < 1e-5);
}

#[test]
fn parameter_counts() {
    let full = TemporalBranch::<f32>::new(TemporalBranchConfig::default(), 40, &mut rng(0)).unwrap().count_parameters();
    let half_cfg = TemporalBranchConfig {
        widths: vec![32, 32, 64, 64],
        ..TemporalBranchConfig::default()
    };
    let half = TemporalBranch::<f32>::new(half_cfg, 40, &mut rng(0)).unwrap().count_parameters();
    assert!(half < full);
    assert!(TemporalBranchConfig::default().validate(40).is_ok());
    assert!(TemporalBranchConfig::default().validate(42).is_err());
}

#[test]
fn alignment_shapes_and_constants() {
    let full = ScaleProfile::full();
    let x = Var::<f32>::constant(Tensor::full(&[1, 13, 40, 40], 0.25));
    let y = no_grad(|| align_to_aerial(&x, &full, false)).unwrap();
    assert_eq!(y.shape(), &[1, 13, 512, 512]);
    assert!(y.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-6));

    let toy = ScaleProfile::toy();
    let probs = Tensor::from_fn(&[2, 13, 16, 16], |i| 1.0 + (i % 13) as f64 + (i % 7) as f64);
    let sums = Var::constant(probs.clone()).sum_axis(1, true).unwrap();
    let probs = Var::constant(probs).div(&sums).unwrap();
    let y = align_to_aerial(&probs, &toy, true).unwrap();
    assert_eq!(y.shape(), &[2, 13, 64, 64]);
    let s = y.sum_axis(1, false).unwrap();
    assert!(s.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
    assert!(align_to_aerial(&Var::<f64>::constant(Tensor::zeros(&[1, 13, 8, 8])), &toy, false).is_err());
}

#[test]
fn alignment_reads_only_the_center() {
    let toy = ScaleProfile::toy();
    let mut t = Tensor::<f64>::zeros(&[1, 1, 16, 16]);
    t.data_mut()[0] = 100.0;
    let y = align_to_aerial(&Var::constant(t), &toy, false).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn majority_downsampling() {
    let m = LabelMask::new(4, 4, vec![1, 1, 2, 3, 1, 2, 3, 2, 0, 0, 5, 5, 4, 4, 5, 5]).unwrap();
    let d = downsample_mask(&m, 2).unwrap();
    assert_eq!(d.labels(), &[1, 2, 0, 5]);
    assert!(downsample_mask(&m, 3).is_err());
}

#[test]
fn positional_encoding_layout() {
    let pe = positional_encoding::<f64>(&[0, 10], 4, 1000.0, 2);
    assert_eq!(pe.shape(), &[2, 8]);
    assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!(&pe.data()[8..12], &pe.data()[12..16]);
    assert!((pe.at(&[1, 0]) - 10f64.sin()).abs() < 1e-12);
    assert!((pe.at(&[1, 3]) - (10.0 / 1000f64.sqrt()).cos()).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let m = toy(7);
    let x = Var::constant(frames(1, 3, 16, 2));
    let target = Var::constant(Tensor::from_fn(&[1, 13, 16, 16], |i| ((i * 13) % 7) as f64 / 7.0));
    let params: Vec<_> = m.named_params().into_iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| p).collect();
    let mut r = rng(8);
    let coords: Vec<(usize, usize)> = (0..20)
        .map(|_| {
            let i = r.random_range(0..params.len());
            (i, r.random_range(0..params[i].numel()))
        })
        .collect();
    let days = [5, 100, 300];
    let report = check_param_gradients(&params, &coords, 1e-6, 1e-6, || {
        m.forward(&x, &days, &[true, true, false], Mode::Train)
            .expect("forward")
            .logits
            .mul(&target)?
            .mean_all()
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn aggregation_weights_sum_to_one(seed in 0u64..1000, valid_mask in 1u8..16) {
        let m = TemporalBranch::<f64>::new(TemporalBranchConfig::toy(), 8, &mut rng(seed)).unwrap();
        let valid: Vec<bool> = (0..4).map(|k| valid_mask >> k & 1 == 1).collect();
        let days: Vec<u16> = (0..4).map(|k| 1 + 90 * k as u16).collect();
        let x = Var::constant(frames(1, 4, 8, seed as usize));
        let out = no_grad(|| m.forward(&x, &days, &valid, Mode::Eval)).unwrap();
        let att = out.attention.value();
        let hw = att.dim(3) * att.dim(4);
        for h in 0..att.dim(0) {
            for p in 0..hw {
                let s: f64 = (0..4).map(|k| att.data()[(h * 4 + k) * hw + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
