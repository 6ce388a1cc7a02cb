use std::process::ExitCode;
use std::time::Instant;

use chrono::{Datelike, NaiveDate};
use latefuse_core::aerial::{AerialBranch, AerialBranchConfig};
use latefuse_core::benchmark::{published_reports, time_inference, TimingBudget, TimingReport, PUBLISHED_BASELINE_SECONDS, PUBLISHED_FUSED_SECONDS};
use latefuse_core::dataset::{synthesize_sample, Batch, Sample, Split, SyntheticSpec};
use latefuse_core::evaluation::{confusion_from_probs, iou_report, ConfusionMatrix};
use latefuse_core::fusion::{fuse_probs, FusionSpec};
use latefuse_core::model::{Branch, SegmentationModel};
use latefuse_core::preprocess::{filter_cloudy, monthly_average, FilterPolicy};
use latefuse_core::temporal::{align_to_aerial, TemporalBranch, TemporalBranchConfig};
use latefuse_core::training::{combined_loss, evaluate_model, lr_at, preprocess_samples, standardize_splits, train_model, LossWeights, TrainConfig, Trainer};
use latefuse_core::types::{LabelMask, ScaleProfile, SitsStack, N_CLASSES, SITS_BANDS};
use latefuse_core::Error;
use latefuse_tensor::gradcheck::{check_gradients, check_param_gradients};
use latefuse_tensor::{no_grad, HasParams, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Check = fn() -> Verdict;

/// Criteria that cannot hold for a faithful implementation. They still run
/// and report FAIL; the binary fails if one of them starts passing so the
/// list cannot go stale.
const EXPECTED_FAILURES: &[usize] = &[8];

fn main() -> ExitCode {
    let criteria: [(&str, Check); 12] = [
        ("fusion oracle", fusion_oracle),
        ("ensemble algebra", ensemble_algebra),
        ("preprocessing oracles", preprocessing_oracles),
        ("metric oracle", metric_oracle),
        ("shape ladder", shape_ladder),
        ("masking correctness", masking),
        ("gradient checks", gradient_checks),
        ("parameter budgets", parameter_budgets),
        ("overfit sanity", overfit_sanity),
        ("fusion benefit", fusion_benefit),
        ("schedule", schedule),
        ("timing harness", timing_harness),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let expected_fail = EXPECTED_FAILURES.contains(&n);
        let tag = match (v.pass, expected_fail) {
            (true, false) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
            (true, true) => "PASS (unexpected)",
        };
        println!("criterion {n:>2} {name}: {tag} [{secs:.1} s] {}", v.detail);
        if v.pass {
            passed += 1;
        }
        if v.pass == expected_fail {
            unexpected.push(n);
        }
    }
    println!("{passed}/{} criteria pass; expected failures {EXPECTED_FAILURES:?}", criteria.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcomes for criteria {unexpected:?}");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_simplex(r: &mut ChaCha8Rng, n: usize, sharpness: i32) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(sharpness) + 1e-6).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// `[13, n, 1]` maps, one random distribution per pixel.
fn random_maps(r: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let mut d = vec![0.0; N_CLASSES * n];
    for i in 0..n {
        let p = random_simplex(r, N_CLASSES, 1 + (i % 5) as i32);
        for c in 0..N_CLASSES {
            d[c * n + i] = p[c];
        }
    }
    Tensor::new(&[N_CLASSES, n, 1], d).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fusion_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(11);
    let n = 1000;
    let maps: Vec<Tensor<f64>> = (0..3).map(|_| random_maps(&mut r, n)).collect();
    let mut worst: f64 = 0.0;
    for members in [2usize, 3] {
        for _ in 0..4 {
            let w = random_simplex(&mut r, members, 1);
            let names = ["a", "b", "c"];
            let spec = FusionSpec::new(&names[..members].iter().copied().zip(w.iter().copied()).collect::<Vec<_>>()).unwrap();
            let refs: Vec<&Tensor<f64>> = maps[..members].iter().collect();
            let got = fuse_probs(&refs, &spec).unwrap();
            // direct exponentiation, no logarithms
            let mut want = vec![0.0; N_CLASSES * n];
            for i in 0..n {
                let q: Vec<f64> = (0..N_CLASSES)
                    .map(|c| (0..members).map(|m| maps[m].data()[c * n + i].max(spec.epsilon).powf(w[m])).product())
                    .collect();
                let z: f64 = q.iter().sum();
                for c in 0..N_CLASSES {
                    want[c * n + i] = q[c] / z;
                }
            }
            worst = worst.max(max_diff(&got, &Tensor::new(&[N_CLASSES, n, 1], want).unwrap()));
        }
    }
    let identity = fuse_probs(&[&maps[0], &maps[1]], &FusionSpec::new(&[("a", 1.0), ("b", 0.0)]).unwrap()).unwrap();
    let id_err = max_diff(&identity, &maps[0]);
    let same = fuse_probs(&[&maps[2], &maps[2]], &FusionSpec::lf_dlm()).unwrap();
    let same_err = max_diff(&same, &maps[2]);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-6 && id_err < 1e-6 && same_err < 1e-6 && secs < 10.0,
        format!("{n} pixels: oracle {worst:.1e}, weight-(1,0) {id_err:.1e}, equal inputs {same_err:.1e}"),
    )
}

fn ensemble_algebra() -> Verdict {
    let mut r = rng(12);
    let n = 64 * 64;
    let (a, t) = (random_maps(&mut r, n), random_maps(&mut r, n));
    let three = fuse_probs(&[&a, &a, &t], &FusionSpec::ensemble()).unwrap();
    let two = fuse_probs(&[&a, &t], &FusionSpec::lf_dlm()).unwrap();
    let d = max_diff(&three, &two);
    verdict(d < 1e-6, format!("3-member (0.35, 0.35, 0.3) vs 2-member (0.7, 0.3): {d:.1e}"))
}

fn random_stack(r: &mut ChaCha8Rng) -> SitsStack<f64> {
    let t = r.random_range(1..=14);
    let h = r.random_range(2..=6);
    let mut days: Vec<u32> = (0..t).map(|_| r.random_range(1..=365)).collect();
    days.sort_unstable();
    days.dedup();
    let t = days.len();
    let dates: Vec<NaiveDate> = days.iter().map(|&d| NaiveDate::from_yo_opt(2021, d).unwrap()).collect();
    let frames = Tensor::from_fn(&[t, SITS_BANDS, h, h], |_| r.random::<f64>());
    let cloud_level: Vec<f64> = (0..t).map(|_| r.random::<f64>()).collect();
    let hw = h * h;
    let masks = Tensor::from_fn(&[t, h, h], |i| {
        if r.random::<f64>() < cloud_level[i / hw] * 0.3 {
            0.5 + 0.5 * r.random::<f64>()
        } else {
            0.5 * r.random::<f64>()
        }
    });
    SitsStack::new(frames, dates, masks, "S").unwrap()
}

fn preprocessing_oracles() -> Verdict {
    let start = Instant::now();
    let mut r = rng(13);
    let (mut filter_ok, mut mean_err, mut idem_ok, mut empty) = (0, 0.0f64, 0, 0);
    let cases = 200;
    for k in 0..cases {
        let s = random_stack(&mut r);
        let policy = if k % 2 == 0 { FilterPolicy::default() } else { FilterPolicy::new(0.5, 0.2).unwrap() };
        let hw = s.size() * s.size();
        let keep: Vec<usize> = (0..s.len())
            .filter(|&t| {
                let cloudy = s.cloud_snow_masks.data()[t * hw..(t + 1) * hw].iter().filter(|&&v| v > policy.prob_threshold).count();
                cloudy as f64 <= policy.max_cloudy_fraction * hw as f64
            })
            .collect();
        let filtered = filter_cloudy(&s, &policy);
        if keep.is_empty() {
            empty += 1;
            if matches!(filtered, Err(Error::NoCloudless(_))) {
                filter_ok += 1;
                idem_ok += 1;
            }
            continue;
        }
        let f = filtered.unwrap();
        let frame = SITS_BANDS * hw;
        let exact = f.dates == keep.iter().map(|&t| s.dates[t]).collect::<Vec<_>>()
            && keep.iter().enumerate().all(|(i, &t)| f.frames.data()[i * frame..(i + 1) * frame] == s.frames.data()[t * frame..(t + 1) * frame]);
        if exact {
            filter_ok += 1;
        }
        if filter_cloudy(&f, &policy).unwrap() == f {
            idem_ok += 1;
        }
        let m = monthly_average(&s).unwrap();
        let months: Vec<u32> = {
            let mut v: Vec<u32> = s.dates.iter().map(|d| d.month()).collect();
            v.dedup();
            v
        };
        if m.dates != months.iter().map(|&mo| NaiveDate::from_ymd_opt(2021, mo, 15).unwrap()).collect::<Vec<_>>() {
            mean_err = f64::INFINITY;
            continue;
        }
        for (i, &mo) in months.iter().enumerate() {
            let members: Vec<usize> = (0..s.len()).filter(|&t| s.dates[t].month() == mo).collect();
            for j in 0..frame {
                let want = members.iter().map(|&t| s.frames.data()[t * frame + j]).sum::<f64>() / members.len() as f64;
                mean_err = mean_err.max((m.frames.data()[i * frame + j] - want).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        filter_ok == cases && idem_ok == cases && mean_err < 1e-6 && secs < 30.0,
        format!("{cases} stacks ({empty} fully cloudy): filter exact {filter_ok}, idempotent {idem_ok}, monthly mean {mean_err:.1e}"),
    )
}

fn metric_oracle() -> Verdict {
    let mut r = rng(14);
    let cases = 500;
    let mut agree = 0;
    let mut global = ConfusionMatrix::new();
    let (mut inter, mut union) = ([0u64; N_CLASSES], [0u64; N_CLASSES]);
    for k in 0..cases {
        let classes = if k % 3 == 0 { 3 } else { N_CLASSES as u8 };
        let p: Vec<u8> = (0..64).map(|_| r.random_range(0..classes)).collect();
        let t: Vec<u8> = (0..64).map(|_| r.random_range(0..classes)).collect();
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&LabelMask::new(8, 8, p.clone()).unwrap(), &LabelMask::new(8, 8, t.clone()).unwrap()).unwrap();
        global.merge(&cm);
        let rep = iou_report(&cm);
        let mut want = Vec::new();
        for c in 0..N_CLASSES as u8 - 1 {
            let i = (0..64).filter(|&j| p[j] == c && t[j] == c).count() as u64;
            let u = (0..64).filter(|&j| p[j] == c || t[j] == c).count() as u64;
            inter[c as usize] += i;
            union[c as usize] += u;
            want.push((u > 0).then(|| i as f64 / u as f64));
        }
        let defined: Vec<f64> = want.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        if rep.per_label == want && (rep.miou - miou).abs() < 1e-12 && rep.pixel_count == 64 {
            agree += 1;
        }
    }
    let g = iou_report(&global);
    let global_ok = (0..N_CLASSES - 1).all(|c| g.per_label[c] == Some(inter[c] as f64 / union[c] as f64)) && g.per_label.len() == N_CLASSES - 1;
    verdict(
        agree == cases && global_ok,
        format!("{agree}/{cases} 8x8 pairs match set-based IoU; streamed totals match; 'other' excluded ({} scored)", g.per_label.len()),
    )
}

fn shape_ladder() -> Verdict {
    let mut problems = Vec::new();
    let mut ok = |cond: bool, what: String| {
        if !cond {
            problems.push(what);
        }
    };
    for (profile, aerial_cfg, temporal_cfg) in [
        (ScaleProfile::toy(), AerialBranchConfig::toy(), TemporalBranchConfig::toy()),
        (ScaleProfile::full(), AerialBranchConfig::full(), TemporalBranchConfig::default()),
    ] {
        let (a, s) = (profile.aerial_size(), profile.sits_size());
        let m = AerialBranch::<f32>::new(aerial_cfg.clone(), a, &mut rng(0)).unwrap();
        let x = Var::constant(Tensor::zeros(&[1, 5, a, a]));
        let p = no_grad(|| m.encode(&x, Mode::Eval)).unwrap();
        let shapes = p.shapes();
        ok(shapes.len() == 4 && shapes[0][2] == a / 4 && shapes[0][1] == aerial_cfg.stage_channels[0], format!("{a}: first stage {:?}", shapes[0]));
        for w in shapes.windows(2) {
            ok(w[1][1] == 2 * w[0][1] && w[1][2] * 2 == w[0][2] && w[1][3] * 2 == w[0][3], format!("{a}: {:?} -> {:?}", w[0], w[1]));
        }
        let y = no_grad(|| m.decode(&p, Mode::Eval)).unwrap();
        ok(y.shape() == [1, N_CLASSES, a, a], format!("{a}: decoder {:?}", y.shape()));

        let t = TemporalBranch::<f32>::new(temporal_cfg.clone(), s, &mut rng(0)).unwrap();
        let frames = Var::constant(Tensor::zeros(&[1, 2, SITS_BANDS, s, s]));
        let levels = no_grad(|| t.encode_frames(&frames, Mode::Eval)).unwrap();
        for (l, (lv, &w)) in levels.iter().zip(&temporal_cfg.widths).enumerate() {
            ok(lv.shape() == [1, 2, w, s >> l, s >> l], format!("{s}: level {l} {:?}", lv.shape()));
        }
        let out = no_grad(|| t.forward(&frames, &[30, 200], &[true, true], Mode::Eval)).unwrap();
        ok(out.logits.shape() == [1, N_CLASSES, s, s], format!("{s}: temporal logits {:?}", out.logits.shape()));
        let aligned = no_grad(|| align_to_aerial(&out.logits, &profile, false)).unwrap();
        ok(aligned.shape() == [1, N_CLASSES, a, a], format!("{s}: aligned {:?}", aligned.shape()));
        ok(profile.center_crop() * 4 == s, format!("crop {} of {s}", profile.center_crop()));
    }
    let full = ScaleProfile::full();
    ok((full.center_crop(), full.sits_size()) == (10, 40), "full crop is not 10/40".into());
    verdict(problems.is_empty(), if problems.is_empty() { "toy 64/16 and full 512/40 ladders hold, crop 10 of 40".to_string() } else { problems.join("; ") })
}

fn masking() -> Verdict {
    let mut worst_sum: f64 = 0.0;
    let mut leaks = 0;
    let mut trials = 0;
    for seed in 0..4u64 {
        let m = TemporalBranch::<f64>::new(TemporalBranchConfig::toy(), 16, &mut rng(seed)).unwrap();
        let mut r = rng(100 + seed);
        let (b, t) = (2, 5);
        let mut valid = vec![false; b * t];
        for bi in 0..b {
            let n_valid = r.random_range(1..=t);
            valid[bi * t..bi * t + n_valid].fill(true);
        }
        let days: Vec<u16> = (0..b * t).map(|i| if valid[i] { 1 + 60 * (i % t) as u16 } else { 1 }).collect();
        let plane = SITS_BANDS * 16 * 16;
        let base = Tensor::from_fn(&[b, t, SITS_BANDS, 16, 16], |i| if valid[i / plane] { r.random::<f64>() * 2.0 - 1.0 } else { 0.0 });
        let mut junk = base.clone();
        for (i, v) in junk.data_mut().iter_mut().enumerate() {
            if !valid[i / plane] {
                *v = 1e4 * (((i * 7919) % 97) as f64 - 48.0);
            }
        }
        for mode in [Mode::Eval, Mode::Train] {
            trials += 1;
            let run = |x: &Tensor<f64>| no_grad(|| m.forward(&Var::constant(x.clone()), &days, &valid, mode)).unwrap();
            let (a, j) = (run(&base), run(&junk));
            if a.logits.value().data() != j.logits.value().data() {
                leaks += 1;
            }
            let att = a.attention.value();
            let hw = att.dim(3) * att.dim(4);
            for h in 0..att.dim(0) {
                for bi in 0..b {
                    for p in 0..hw {
                        let at = |k: usize| att.data()[((h * b + bi) * t + k) * hw + p];
                        let s: f64 = (0..t).filter(|&k| valid[bi * t + k]).map(at).sum();
                        worst_sum = worst_sum.max((s - 1.0).abs());
                        if (0..t).any(|k| !valid[bi * t + k] && at(k) != 0.0) {
                            leaks += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        leaks == 0 && worst_sum < 1e-5,
        format!("{trials} runs: padded content changed output {leaks} times; valid attention sums off by {worst_sum:.1e}"),
    )
}

fn sampled_coords(params: &[&latefuse_tensor::Param<f64>], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let i = r.random_range(0..params.len());
            (i, r.random_range(0..params[i].numel()))
        })
        .collect()
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut r = rng(15);
    let logits = Tensor::from_fn(&[2, N_CLASSES, 4, 4], |_| r.random::<f64>() * 4.0 - 2.0);
    let masks: Vec<LabelMask> = (0..2).map(|_| LabelMask::new(4, 4, (0..16).map(|_| r.random_range(0..N_CLASSES as u8)).collect()).unwrap()).collect();
    let loss = check_gradients(&[logits], 1e-6, |v| Ok(combined_loss(&v[0], &masks, LossWeights::default(), None).expect("loss"))).unwrap();

    let aerial = AerialBranch::<f64>::new(AerialBranchConfig::toy(), 64, &mut rng(5)).unwrap();
    let x = Var::constant(Tensor::from_fn(&[1, 5, 64, 64], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0));
    let amask = vec![LabelMask::new(64, 64, (0..64 * 64).map(|i| ((i / 64 / 8 + i % 64 / 8) % N_CLASSES) as u8).collect()).unwrap()];
    let ap: Vec<_> = aerial.named_params().into_iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| p).collect();
    let a = check_param_gradients(&ap, &sampled_coords(&ap, 24, 6), 1e-6, 1e-6, || {
        combined_loss(&aerial.forward(&x, Mode::Train).expect("forward"), &amask, LossWeights::default(), None).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        })
    })
    .unwrap();

    let temporal = TemporalBranch::<f64>::new(TemporalBranchConfig::toy(), 16, &mut rng(7)).unwrap();
    let frames = Var::constant(Tensor::from_fn(&[1, 3, SITS_BANDS, 16, 16], |i| (((i + 2) * 7919) % 211) as f64 / 105.0 - 1.0));
    let tmask = vec![LabelMask::new(16, 16, (0..256).map(|i| ((i / 16 / 4 * 3 + i % 16 / 4) % N_CLASSES) as u8).collect()).unwrap()];
    let tp: Vec<_> = temporal.named_params().into_iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| p).collect();
    let t = check_param_gradients(&tp, &sampled_coords(&tp, 24, 8), 1e-6, 1e-6, || {
        let out = temporal.forward(&frames, &[5, 100, 300], &[true, true, false], Mode::Train).expect("forward");
        combined_loss(&out.logits, &tmask, LossWeights::default(), None).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        loss.max_rel_error < 1e-4 && a.max_rel_error < 1e-3 && t.max_rel_error < 1e-3 && secs < 300.0,
        format!(
            "loss {:.1e} over {} coords, aerial {:.1e} over {}, temporal {:.1e} over {}",
            loss.max_rel_error, loss.checked, a.max_rel_error, a.checked, t.max_rel_error, t.checked
        ),
    )
}

/// Trainable parameters of the temporal branch, layer by layer.
fn temporal_count_oracle(cfg: &TemporalBranchConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let norm = |c: usize| 2 * c;
    let w = &cfg.widths;
    let mut n = conv(SITS_BANDS, w[0], 3) + norm(w[0]) + conv(w[0], w[0], 3) + norm(w[0]);
    for p in w.windows(2) {
        n += conv(p[0], p[0], 4) + norm(p[0]) + conv(p[0], p[1], 3) + norm(p[1]) + conv(p[1], p[1], 3) + norm(p[1]);
    }
    let (c, d, hk) = (*w.last().unwrap(), cfg.d_model, cfg.n_heads * cfg.d_k);
    n += norm(c) + (c * d + d) + hk + (d * hk + hk) + (d * c + c) + norm(c) + norm(c);
    for p in w.windows(2) {
        let (cin, cout) = (p[1], p[0]);
        n += cin * cout * 16 + cout + norm(cout) + conv(cout, cout, 1) + norm(cout);
        n += conv(2 * cout, cout, 3) + norm(cout) + conv(cout, cout, 3) + norm(cout);
    }
    let mut prev = w[0];
    for &h in &cfg.out_conv[..cfg.out_conv.len() - 1] {
        n += conv(prev, h, 3) + norm(h);
        prev = h;
    }
    n + conv(prev, *cfg.out_conv.last().unwrap(), 3)
}

fn parameter_budgets() -> Verdict {
    let aerial = AerialBranch::<f32>::new(AerialBranchConfig::full(), 512, &mut rng(0)).unwrap().count_parameters();
    let cfg = TemporalBranchConfig::default();
    let temporal = TemporalBranch::<f32>::new(cfg.clone(), 40, &mut rng(0)).unwrap().count_parameters();
    let oracle = temporal_count_oracle(&cfg);
    let within = |n: usize, target: f64| (n as f64 - target).abs() <= 0.15 * target;
    let (a_ok, t_ok) = (within(aerial, 31e6), within(temporal, 2.9e6));
    verdict(
        a_ok && t_ok && temporal == oracle,
        format!(
            "aerial {aerial} ({}), temporal {temporal} ({}; layer-by-layer count of the widths-[64,64,128,128] network gives {oracle})",
            if a_ok { "within 15% of 31 M" } else { "outside 15% of 31 M" },
            if t_ok { "within 15% of 2.9 M" } else { "outside 15% of 2.9 M" },
        ),
    )
}

fn prepared(spec: &SyntheticSpec) -> Vec<Vec<Sample<f32>>> {
    let all: Vec<Sample<f32>> = (0..spec.n_samples).map(|i| synthesize_sample(spec, i).unwrap()).collect();
    let all = preprocess_samples(all, &FilterPolicy::default()).unwrap();
    let mut splits = vec![Vec::new(), Vec::new(), Vec::new()];
    for (i, s) in all.into_iter().enumerate() {
        let k = match spec.domain_split(i % spec.n_domains) {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        splits[k].push(s);
    }
    standardize_splits(&mut splits).unwrap();
    splits
}

fn build(branch: Branch, seed: u64) -> SegmentationModel<f32> {
    SegmentationModel::build(branch, &AerialBranchConfig::toy(), &TemporalBranchConfig::toy(), &ScaleProfile::toy(), &mut rng(seed)).unwrap()
}

fn overfit_sanity() -> Verdict {
    let start = Instant::now();
    let spec = SyntheticSpec::new(ScaleProfile::toy(), 8, 3, 1);
    let temporal_only = spec.spectrally_confused_pairs();
    let mut splits = vec![(0..8).map(|i| synthesize_sample(&spec, i).unwrap()).collect::<Vec<Sample<f32>>>()];
    splits[0] = preprocess_samples(std::mem::take(&mut splits[0]), &FilterPolicy::default()).unwrap();
    standardize_splits(&mut splits).unwrap();
    let samples = &splits[0];
    let batch = Batch::collate(&samples.iter().collect::<Vec<_>>()).unwrap();
    let steps = 200;
    let mut scores = Vec::new();
    for branch in Branch::ALL {
        let model = build(branch, 0);
        let cfg = TrainConfig {
            lr_init: 2e-3,
            lr_final: 2e-6,
            batch_size: 8,
            augment: false,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&model, cfg.clone()).unwrap();
        for k in 0..steps {
            trainer.step(&batch, lr_at(k, steps, &cfg).unwrap()).unwrap();
        }
        let (cm, _) = evaluate_model(&model, samples, &cfg).unwrap();
        scores.push(iou_report(&cm).miou);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        scores[0] >= 0.90 && scores[1] >= 0.80 && !temporal_only.is_empty() && secs < 2400.0,
        format!(
            "{steps} steps on 8 samples: aerial train mIoU {:.3} (>= 0.90), temporal {:.3} (>= 0.80, {} class pairs separable only in time)",
            scores[0],
            scores[1],
            temporal_only.len()
        ),
    )
}

fn test_miou(probs: &Tensor<f32>, truth: &[LabelMask]) -> f64 {
    iou_report(&confusion_from_probs(probs, truth).unwrap()).miou
}

fn fusion_benefit() -> Verdict {
    let start = Instant::now();
    let mut margins = Vec::new();
    let mut lines = Vec::new();
    let mut pairs_ok = true;
    for seed in 0..3u64 {
        let spec = SyntheticSpec::new(ScaleProfile::toy(), 64, 6, seed);
        pairs_ok &= !spec.spectrally_confused_pairs().is_empty() && !spec.temporally_confused_pairs().is_empty();
        let splits = prepared(&spec);
        let test = Batch::collate(&splits[2].iter().collect::<Vec<_>>()).unwrap();
        let truth = test.labels.clone().unwrap();
        let base = TrainConfig {
            lr_final: 2e-7,
            batch_size: 8,
            seed,
            augment: true,
            ..TrainConfig::default()
        };
        let mut probs = Vec::new();
        for branch in Branch::ALL {
            let cfg = match branch {
                Branch::Aerial => TrainConfig { lr_init: 5e-3, max_epochs: 20, patience: 20, ..base.clone() },
                Branch::Temporal => TrainConfig { lr_init: 1e-2, max_epochs: 40, patience: 40, ..base.clone() },
            };
            let model = build(branch, seed);
            train_model(&model, &splits[0], &splits[1], &cfg, None).unwrap();
            probs.push(model.probabilities(&test).unwrap());
        }
        let fused = fuse_probs(&[&probs[0], &probs[1]], &FusionSpec::lf_dlm()).unwrap();
        let (a, t, f) = (test_miou(&probs[0], &truth), test_miou(&probs[1], &truth), test_miou(&fused, &truth));
        margins.push(f - a.max(t));
        lines.push(format!("seed {seed}: aerial {a:.3} temporal {t:.3} fused {f:.3}"));
    }
    let mut sorted = margins.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[1];
    let secs = start.elapsed().as_secs_f64();
    verdict(
        median >= 0.0 && pairs_ok && secs < 1800.0,
        format!("median margin over best branch {median:+.3} ({})", lines.join("; ")),
    )
}

fn schedule() -> Verdict {
    let cfg = TrainConfig::default();
    let total = 30 * 1000;
    let first = lr_at(0, total, &cfg).unwrap();
    let last = lr_at(total, total, &cfg).unwrap();
    let mut r = rng(16);
    let mut steps: Vec<usize> = (0..1000).map(|_| r.random_range(0..=total)).collect();
    steps.sort_unstable();
    let lrs: Vec<f64> = steps.iter().map(|&s| lr_at(s, total, &cfg).unwrap()).collect();
    let monotone = lrs.windows(2).all(|w| w[1] <= w[0]);
    let squared = TrainConfig { decay_power: 2.0, ..cfg.clone() };
    let monotone_sq = steps.windows(2).all(|w| lr_at(w[1], total, &squared).unwrap() <= lr_at(w[0], total, &squared).unwrap());
    verdict(
        first == 1e-4 && last == 1e-7 && monotone && monotone_sq && lr_at(total + 1, total, &cfg).is_err(),
        format!("lr(0) = {first:e}, lr(T) = {last:e}, non-increasing over 1000 sampled steps"),
    )
}

fn timing_harness() -> Verdict {
    let spec = SyntheticSpec::new(ScaleProfile::toy(), 4, 3, 3);
    let mut splits = vec![preprocess_samples((0..4).map(|i| synthesize_sample::<f32>(&spec, i).unwrap()).collect(), &FilterPolicy::default()).unwrap()];
    standardize_splits(&mut splits).unwrap();
    let batch = Batch::collate(&splits[0].iter().collect::<Vec<_>>()).unwrap();
    let (aerial, temporal) = (build(Branch::Aerial, 0), build(Branch::Temporal, 0));
    let spec = FusionSpec::lf_dlm();
    let reps = 7;
    let ta = time_inference(2, reps, || aerial.probabilities(&batch).map(|_| ())).unwrap();
    let tt = time_inference(2, reps, || temporal.probabilities(&batch).map(|_| ())).unwrap();
    let tf = time_inference(2, reps, || {
        let a = aerial.probabilities(&batch)?;
        let t = temporal.probabilities(&batch)?;
        fuse_probs(&[&a, &t], &spec).map(|_| ())
    })
    .unwrap();
    let fused_ok = tf <= 1.1 * (ta + tt);

    let pure = [100.0, 396.0, 1000.0].iter().all(|&baseline| {
        let budget = TimingBudget { baseline_seconds: baseline, max_ratio: 2.5 };
        let r1 = TimingReport::new("m", tf, &budget);
        let r2 = TimingReport::new("m", tf, &budget);
        r1 == r2 && r1.ratio == tf / baseline && r1.within_budget == (tf / baseline <= 2.5)
    });
    let lf = published_reports().into_iter().find(|r| r.model == "LF-DLM").unwrap();
    let table_ok = PUBLISHED_FUSED_SECONDS / PUBLISHED_BASELINE_SECONDS == 1.5 && (lf.ratio * 100.0).round() / 100.0 == 1.5;
    verdict(
        fused_ok && pure && table_ok,
        format!(
            "toy batch of 4: aerial {:.1} ms + temporal {:.1} ms vs LF-DLM {:.1} ms (limit {:.1} ms); ratios pure; 594/396 = {:.2}",
            ta * 1e3,
            tt * 1e3,
            tf * 1e3,
            1.1e3 * (ta + tt),
            lf.ratio
        ),
    )
}
