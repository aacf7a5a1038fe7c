//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs sequentially so timed criteria measure a quiet CPU. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test -p tatl-cli --test acceptance -- 5 6`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tatl_core::data::{generate, Dataset, GenConfig, Preset};
use tatl_core::losses::{combined_loss, jaccard_loss, tversky_loss, LossConfig};
use tatl_core::maskops::{union_mask, Attribute, AttributeMaskSet, BinaryMask};
use tatl_core::metrics::{dice, jaccard, summarize, Score, ScoreTable};
use tatl_core::nnet::ops::{
    conv2d_bwd, conv2d_fwd, maxpool2_bwd, maxpool2_fwd, merge_bwd, merge_fwd, relu_bwd, relu_fwd, upsample2_bwd,
    upsample2_fwd, MergeMode,
};
use tatl_core::nnet::{init_params, NetConfig, ParamSet, Segmenter, Tag};
use tatl_core::stability::{bound_score, compare_inits, hessian_vec, spectral_norm, BoundInputs};
use tatl_core::training::{
    accumulate_batch, attribute_items, evaluate, run_pipeline, sgd_step, train_pretext, transfer_init, FoldSplit,
    OptState, Predictor, Stages, TrainPlan,
};
use tatl_core::TensorF;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn tensor(shape: &[usize], data: Vec<f64>) -> TensorF {
    TensorF::from_vec(shape, data).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorF {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density: f64 = rng.gen_range(0.0..1.0);
    let bits = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
    BinaryMask::from_bits(h, w, bits).unwrap()
}

// ---------------------------------------------------------------- 1

fn loss_oracles() -> Outcome {
    let cfg = LossConfig::default();
    let mask = |bits: &[u8]| BinaryMask::from_bits(1, bits.len(), bits.to_vec()).unwrap();
    let cases: [(&str, f64, f64); 5] = [
        ("tversky [1] vs [0]", tversky_loss(&tensor(&[1], vec![1.0]), &mask(&[0]), &cfg).unwrap().value, 1.0 - 1.0 / 1.4),
        (
            "tversky [.5,.5] vs [1,0]",
            tversky_loss(&tensor(&[2], vec![0.5, 0.5]), &mask(&[1, 0]), &cfg).unwrap().value,
            0.25,
        ),
        (
            "jaccard 0.5x4 vs ones",
            jaccard_loss(&tensor(&[4], vec![0.5; 4]), &mask(&[1; 4]), &cfg).unwrap().value,
            0.4,
        ),
        ("jaccard [1] vs [0]", jaccard_loss(&tensor(&[1], vec![1.0]), &mask(&[0]), &cfg).unwrap().value, 0.5),
        (
            "combined [1] vs [0]",
            combined_loss(&tensor(&[1], vec![1.0]), &mask(&[0]), &cfg).unwrap().value,
            0.5 * (1.0 - 1.0 / 1.4) + 0.25,
        ),
    ];
    for (name, got, want) in cases {
        ensure((got - want).abs() <= 1e-9, || format!("{name}: {got} vs {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let m = rand_mask(&mut rng, 4, 6);
        let p = m.to_tensor();
        for f in [tversky_loss, jaccard_loss, combined_loss] {
            let v = f(&p, &m, &cfg).unwrap().value;
            ensure(v == 0.0, || format!("pred = target gave {v}"))?;
        }
    }
    Ok("5 hand values within 1e-9; 150 identity cases exactly 0".into())
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;

fn dot(a: &TensorF, b: &TensorF) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error of `grad` against central differences of `f`;
/// coordinates where both are below `floor` in absolute difference count as exact.
fn fd_worst(x: &TensorF, grad: &TensorF, f: impl Fn(&TensorF) -> f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let fd = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        if (grad.data()[i] - fd).abs() > floor {
            worst = worst.max(rel_err(grad.data()[i], fd));
        }
    }
    worst
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = LossConfig::default();
    let mut prim: f64 = 0.0;
    let mut trials = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=128);
        let pred = tensor(&[n], (0..n).map(|_| rng.gen_range(0.01..0.99)).collect());
        let target = rand_mask(&mut rng, 1, n);
        for f in [tversky_loss, jaccard_loss] {
            let g = f(&pred, &target, &cfg).unwrap().grad;
            prim = prim.max(fd_worst(&pred, &g, |p| f(p, &target, &cfg).unwrap().value, 0.0));
        }
        trials += 1;
    }
    for trial in 0..100 {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (2 * rng.gen_range(1..4), 2 * rng.gen_range(1..4));
        let k = if trial % 3 == 0 { 1 } else { 3 };
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let kern = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let bias = rand_tensor(&mut rng, &[cout]);
        let probe = rand_tensor(&mut rng, &[cout, h, w]);
        let g = conv2d_bwd(&x, &kern, &probe, true).unwrap();
        prim = prim.max(fd_worst(&x, g.dx.as_ref().unwrap(), |x| dot(&conv2d_fwd(x, &kern, &bias).unwrap(), &probe), 1e-9));
        prim = prim.max(fd_worst(&kern, &g.dkernel, |k| dot(&conv2d_fwd(&x, k, &bias).unwrap(), &probe), 1e-9));
        prim = prim.max(fd_worst(&bias, &g.dbias, |b| dot(&conv2d_fwd(&x, &kern, b).unwrap(), &probe), 1e-9));

        // keep inputs away from the ReLU kink
        let xr = x.map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let probe = rand_tensor(&mut rng, xr.shape());
        let dr = relu_bwd(&xr, &probe);
        prim = prim.max(fd_worst(&xr, &dr, |x| dot(&relu_fwd(x), &probe), 1e-9));

        let (y, arg) = maxpool2_fwd(&x).unwrap();
        let probe = rand_tensor(&mut rng, y.shape());
        let dp = maxpool2_bwd(&probe, &arg, x.shape()).unwrap();
        prim = prim.max(fd_worst(&x, &dp, |x| dot(&maxpool2_fwd(x).unwrap().0, &probe), 1e-9));

        let probe = rand_tensor(&mut rng, &[cin, 2 * h, 2 * w]);
        let du = upsample2_bwd(&probe).unwrap();
        prim = prim.max(fd_worst(&x, &du, |x| dot(&upsample2_fwd(x).unwrap(), &probe), 1e-9));

        let other = rand_tensor(&mut rng, &[cin, h, w]);
        for mode in [MergeMode::Add, MergeMode::Concat] {
            let m = merge_fwd(&x, &other, mode).unwrap();
            let probe = rand_tensor(&mut rng, m.shape());
            let (ds, dup) = merge_bwd(&probe, mode, cin).unwrap();
            prim = prim.max(fd_worst(&x, &ds, |s| dot(&merge_fwd(s, &other, mode).unwrap(), &probe), 1e-9));
            prim = prim.max(fd_worst(&other, &dup, |u| dot(&merge_fwd(&x, u, mode).unwrap(), &probe), 1e-9));
        }
        trials += 1;
    }
    ensure(prim <= 1e-4, || format!("primitive max relative error {prim:.2e}"))?;

    let mut e2e: f64 = 0.0;
    for trial in 0..4u64 {
        let mode = if trial % 2 == 0 { MergeMode::Concat } else { MergeMode::Add };
        let net = Segmenter::new(NetConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 2,
            merge_mode: mode,
            seed: trial,
        })
        .unwrap();
        let mut params = net.init_params();
        for p in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
        let x = rand_tensor(&mut rng, &[1, 8, 8]);
        let target = rand_mask(&mut rng, 8, 8);
        let trace = net.forward_trace(&params, &x).unwrap();
        let loss = combined_loss(trace.output(), &target, &cfg).unwrap();
        net.backward(&mut params, &trace, &loss.grad).unwrap();
        let flat = tensor(&[params.numel()], params.flat_values());
        let grads = tensor(&[params.numel()], params.flat_grads());
        let f = |w: &TensorF| {
            let mut p = params.clone();
            p.set_flat_values(w.data()).unwrap();
            combined_loss(&net.forward(&p, &x).unwrap(), &target, &cfg).unwrap().value
        };
        e2e = e2e.max(fd_worst(&flat, &grads, f, 0.0));
        trials += 1;
    }
    ensure(e2e <= 1e-3, || format!("end-to-end max relative error {e2e:.2e}"))?;
    Ok(format!("{trials} trials; primitives {prim:.1e} (<= 1e-4), end-to-end {e2e:.1e} (<= 1e-3)"))
}

// ---------------------------------------------------------------- 3

fn or_oracle(masks: &[&BinaryMask], h: usize, w: usize) -> BinaryMask {
    let mut out = BinaryMask::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, masks.iter().any(|m| m.get(r, c)));
        }
    }
    out
}

fn union_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let mut set = AttributeMaskSet::new();
        let mut present = Vec::new();
        for a in Attribute::ALL {
            if rng.gen_bool(0.6) {
                let m = rand_mask(&mut rng, h, w);
                set.insert(a, m.clone()).unwrap();
                present.push(m);
            }
        }
        let refs: Vec<&BinaryMask> = present.iter().collect();
        let u = union_mask(&set, h, w).unwrap();
        ensure(u == or_oracle(&refs, h, w), || format!("set {i}: union differs from OR fold"))?;

        // idempotence
        if let Some(m) = present.first() {
            let mut single = AttributeMaskSet::new();
            single.insert(Attribute::G, m.clone()).unwrap();
            ensure(union_mask(&single, h, w).unwrap() == *m, || format!("set {i}: union of {{m}} != m"))?;
        }
        // commutativity under key permutation
        let mut keys = Attribute::ALL.to_vec();
        for k in (1..keys.len()).rev() {
            keys.swap(k, rng.gen_range(0..=k));
        }
        let mut permuted = AttributeMaskSet::new();
        for (m, &a) in present.iter().zip(&keys) {
            permuted.insert(a, m.clone()).unwrap();
        }
        ensure(union_mask(&permuted, h, w).unwrap() == u, || format!("set {i}: key permutation changed union"))?;
        // monotonicity
        if let Some(&a) = Attribute::ALL.iter().find(|a| set.get(**a).is_none()) {
            let mut bigger = set.clone();
            bigger.insert(a, rand_mask(&mut rng, h, w)).unwrap();
            let ub = union_mask(&bigger, h, w).unwrap();
            let lost = (0..h).any(|r| (0..w).any(|c| u.get(r, c) && !ub.get(r, c)));
            ensure(!lost, || format!("set {i}: adding a mask cleared a pixel"))?;
        }
    }
    Ok("1000 random sets match the OR fold; idempotent, commutative, monotone".into())
}

// ---------------------------------------------------------------- 4

fn small_plan(stages: &str, epochs: usize, seed: u64) -> TrainPlan {
    let mut plan = TrainPlan::default();
    plan.stages = stages.parse::<Stages>().unwrap();
    plan.net = NetConfig {
        base_channels: 4,
        depth: 2,
        seed,
        ..NetConfig::default()
    };
    plan.opt.max_epochs = epochs;
    plan.opt.patience = 0;
    plan.opt.seed = seed;
    plan.opt.learning_rate = 0.003;
    plan.opt.batch_size = 4;
    plan
}

fn encoder_bits(p: &ParamSet) -> Vec<(String, Vec<u64>)> {
    p.iter()
        .filter(|x| x.tag == Tag::Encoder)
        .map(|x| (x.name.clone(), x.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn all_bits(p: &ParamSet) -> Vec<u64> {
    p.flat_values().iter().map(|v| v.to_bits()).collect()
}

fn transfer_invariants() -> Outcome {
    let ds = generate(&GenConfig::preset(Preset::Uniform, 24, 16, 3)).unwrap();

    // (a) exact copy at initialization
    let plan = small_plan("2,3", 2, 3);
    let net = Segmenter::new(plan.net).unwrap();
    let (wu, _) = train_pretext(&ds, &init_params(&plan.net).unwrap(), &plan).unwrap();
    ensure(all_bits(&transfer_init(&net, &wu).unwrap()) == all_bits(&wu), || "transfer_init differs from W_U".into())?;
    let out = run_pipeline(&ds, &plan, None).unwrap();
    let pre = out.pretext.as_ref().unwrap();
    for a in Attribute::ALL {
        let h = &out.histories[&format!("downstream_{a}")];
        ensure(
            h.init_encoder_checksum == pre.checksum(Tag::Encoder) && h.init_decoder_checksum == pre.checksum(Tag::Decoder),
            || format!("downstream {a} did not start from W_U"),
        )?;
    }

    // (b) frozen encoder over 5 epochs
    let mut plan = small_plan("2,3", 5, 4);
    plan.freeze_encoder = true;
    let out = run_pipeline(&ds, &plan, None).unwrap();
    let pre = out.pretext.as_ref().unwrap();
    let mut decoder_moved = false;
    for (a, w) in &out.downstream {
        let h = &out.histories[&format!("downstream_{a}")];
        ensure(h.epochs.len() == 5, || format!("{a}: ran {} epochs", h.epochs.len()))?;
        ensure(encoder_bits(w) == encoder_bits(pre), || format!("{a}: frozen encoder changed"))?;
        ensure(
            h.epochs.iter().all(|e| e.encoder_checksum == pre.checksum(Tag::Encoder)),
            || format!("{a}: encoder changed during training"),
        )?;
        decoder_moved |= w.checksum(Tag::Decoder) != pre.checksum(Tag::Decoder);
    }
    ensure(decoder_moved, || "no decoder parameter moved while frozen".into())?;

    // (c) one non-frozen step moves the encoder
    let items = attribute_items(&ds, Attribute::P).unwrap();
    let batch: Vec<_> = items.iter().take(4).collect();
    let mut params = wu.clone();
    accumulate_batch(&net, &mut params, &batch, &LossConfig::default()).unwrap();
    ensure(params.flat_grads().iter().any(|g| *g != 0.0), || "zero gradient".into())?;
    sgd_step(&mut params, &mut OptState::default(), 1, &plan.opt, None).unwrap();
    ensure(encoder_bits(&params) != encoder_bits(&wu), || "non-frozen step left encoder unchanged".into())?;
    Ok("init == W_U bitwise; frozen encoder unchanged after 5 epochs; one free step moves it".into())
}

// ---------------------------------------------------------------- 5

fn power_iteration_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = rng.gen_range(1..=64);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = (&b + b.transpose()) * 0.5;
        let exact = a.clone().symmetric_eigen().eigenvalues.iter().fold(0.0f64, |m, v: &f64| m.max(v.abs()));
        let matvec = |v: &[f64]| Ok((&a * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec());
        let est = spectral_norm(matvec, n, 100_000, 1e-14, i).unwrap();
        worst = worst.max(rel_err(est, exact));
    }
    ensure(worst <= 1e-6, || format!("spectral norm relative error {worst:.2e}"))?;

    let mut hv_worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=32);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
        let a = &b + b.transpose();
        let c = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        // loss 0.5 w'Aw + c'w has gradient Aw + c and Hessian A
        let grad = |w: &[f64]| Ok((&a * nalgebra::DVector::from_column_slice(w) + &c).as_slice().to_vec());
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv = hessian_vec(grad, &w, &v, 1e-4).unwrap();
        let exact = &a * nalgebra::DVector::from_column_slice(&v);
        for (x, y) in hv.iter().zip(exact.iter()) {
            hv_worst = hv_worst.max((x - y).abs() / exact.amax().max(1e-12));
        }
    }
    ensure(hv_worst <= 1e-6, || format!("Hessian-vector relative error {hv_worst:.2e}"))?;
    Ok(format!("spectral norm {worst:.1e}, Hessian-vector {hv_worst:.1e} (<= 1e-6)"))
}

// ---------------------------------------------------------------- 6

fn bound_arithmetic() -> Outcome {
    let (risk, h, m, c, k) = (0.5f64, 1.0f64, 10_000usize, 0.01f64, 4usize);
    // independent evaluation in log space
    let g = h + risk.sqrt();
    let spread = (m as f64).powf(-0.25);
    let (gp, gm) = (g + spread, g - spread);
    let log_score = (1.0 + 1.0 / (c * gm)).ln() + (c * gp / (1.0 + c * gp)) * risk.ln() + 0.5 * (k as f64).ln().ln()
        - (m as f64).ln() / (1.0 + c * gp);
    let oracle = log_score.exp();
    let got = bound_score(gp, gm, risk, m, k, c).unwrap();
    ensure(rel_err(got, oracle) <= 1e-6, || format!("worked example {got} vs oracle {oracle}"))?;
    ensure((got - 8.66e-3).abs() < 5e-5, || format!("worked example {got} is not ~8.66e-3"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for i in 0..1000 {
        let gm = rng.gen_range(0.01..50.0);
        let gp = gm + rng.gen_range(0.0..2.0);
        let m = rng.gen_range(1..100_000);
        let k = rng.gen_range(2..10);
        let c = rng.gen_range(1e-3..1.0);
        let r1 = rng.gen_range(0.0..1.0);
        let r2 = r1 + rng.gen_range(1e-6..1.0);
        let (s1, s2) = (bound_score(gp, gm, r1, m, k, c).unwrap(), bound_score(gp, gm, r2, m, k, c).unwrap());
        ensure(s1 < s2, || format!("draw {i}: score not increasing in risk ({s1} vs {s2})"))?;
    }
    Ok(format!("worked example {got:.6e} matches oracle; 1000 draws increasing in risk"))
}

// ---------------------------------------------------------------- 7

const DIRECTIONAL_SEEDS: u64 = 5;

/// Settings shared by the directional experiments: n=200, 32x32, depth 3, base 8.
fn directional_plan(stages: &str, seed: u64) -> TrainPlan {
    let mut plan = TrainPlan::default();
    plan.stages = stages.parse::<Stages>().unwrap();
    plan.net.seed = seed;
    plan.opt.seed = seed;
    plan.opt.learning_rate = 0.003;
    plan.opt.batch_size = 4;
    plan.opt.max_epochs = 15;
    plan.opt.patience = 10;
    plan
}

fn preset_data(n: usize, seed: u64) -> Dataset {
    generate(&GenConfig::preset(Preset::Isic2018, n, 32, seed)).unwrap()
}

fn all_samples(ds: &Dataset) -> FoldSplit {
    FoldSplit {
        folds: vec![(0..ds.len()).collect()],
    }
}

fn mean_dice(train: &Dataset, test: &Dataset, plan: &TrainPlan, attribute: Option<Attribute>) -> f64 {
    let out = run_pipeline(train, plan, None).unwrap();
    let predictor = Predictor::from_output(&out, plan).unwrap();
    let summary = summarize(&evaluate(test, &predictor, &all_samples(test)).unwrap()).unwrap();
    match attribute {
        Some(a) => summary.rows[&a].dice.mean,
        None => summary.average.dice.mean,
    }
}

fn transfer_benefit() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 0..DIRECTIONAL_SEEDS {
        let train = preset_data(200, seed);
        let test = preset_data(200, seed + 1000);
        let rare = train.rarest_attribute().unwrap();
        let mut plan = directional_plan("3", seed);
        plan.attributes = vec![rare];
        let scratch = mean_dice(&train, &test, &plan, Some(rare));
        plan.stages = "2,3".parse().unwrap();
        let transfer = mean_dice(&train, &test, &plan, Some(rare));
        wins += usize::from(transfer > scratch);
        log.push(format!("s{seed} {rare} {{3}}={scratch:.4} {{2,3}}={transfer:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{wins}/5 seeds {{2,3}} > {{3}}, {secs:.0}s; {}", log.join(", "));
    ensure(wins >= 4 && secs <= 600.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn bound_direction() -> Outcome {
    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 0..DIRECTIONAL_SEEDS {
        let ds = preset_data(200, seed);
        let rare = ds.rarest_attribute().unwrap();
        let plan = directional_plan("2", seed);
        let net = Segmenter::new(plan.net).unwrap();
        let random = init_params(&plan.net).unwrap();
        let (pretext, _) = train_pretext(&ds, &random, &plan).unwrap();
        let items = attribute_items(&ds.subset(&(0..40).collect::<Vec<_>>()), rare).unwrap();
        let inputs = BoundInputs {
            c: 0.01,
            k: 2,
            power_iters: 10,
            seed,
            ..BoundInputs::default()
        };
        let report = compare_inits(
            &net,
            &[("pretext".into(), pretext), ("random".into(), random)],
            &items,
            &plan.loss,
            &inputs,
        )
        .unwrap();
        let (p, r) = (report.entry("pretext").unwrap(), report.entry("random").unwrap());
        wins += usize::from(p.bound_score < r.bound_score);
        log.push(format!(
            "s{seed} {rare} pretext {:.3e} (H {:.2}) random {:.3e} (H {:.2})",
            p.bound_score, p.mean_hessian_norm, r.bound_score, r.mean_hessian_norm
        ));
    }
    let detail = format!("{wins}/5 seeds pretext < random; {}", log.join(", "));
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn offset_direction() -> Outcome {
    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 0..DIRECTIONAL_SEEDS {
        let train = preset_data(100, seed);
        let test = preset_data(100, seed + 1000);
        let mut plan = directional_plan("1,2,3", seed);
        plan.opt.max_epochs = 10;
        plan.crop_offset = 40;
        let wide = mean_dice(&train, &test, &plan, None);
        plan.crop_offset = 0;
        let tight = mean_dice(&train, &test, &plan, None);
        wins += usize::from(wide >= tight);
        log.push(format!("s{seed} offset40={wide:.4} offset0={tight:.4}"));
    }
    let detail = format!("{wins}/5 seeds offset 40 >= offset 0; {}", log.join(", "));
    ensure(wins >= 3, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn tatl(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_tatl"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("tatl {}: {}", args.join(" "), String::from_utf8_lossy(&status.stderr))
    })
}

fn output_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "tatlw" || x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let data = root.join("data");
    tatl(&["--seed", "5", "--out-dir", data.to_str().unwrap(), "synth", "--n", "16", "--size", "16"])?;
    let manifest = data.join("manifest.jsonl");
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        tatl(&[
            "--seed", "5", "--out-dir", out.to_str().unwrap(), "train", "--manifest", manifest.to_str().unwrap(),
            "--stages", "1,2,3", "--epochs", "2", "--patience", "1", "--depth", "2", "--base-channels", "4",
        ])?;
        runs.push(output_files(&out));
    }
    ensure(runs[0].len() == 8, || format!("expected 7 weight files and metrics.csv, got {:?}", runs[0].keys()))?;
    ensure(runs[0] == runs[1], || "outputs differ between identical runs".into())?;
    Ok(format!("{} files byte-identical across two runs", runs[0].len()))
}

// ---------------------------------------------------------------- 11

fn metric_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let (a, b) = (rand_mask(&mut rng, h, w), rand_mask(&mut rng, h, w));
        let (d, j) = (dice(&a, &b).unwrap(), jaccard(&a, &b).unwrap());
        // the identity is exact in rationals: |A|+|B| = |A u B| + |A n B|
        let inter = (0..h * w).filter(|&k| a.bits()[k] & b.bits()[k] == 1).count();
        let union = (0..h * w).filter(|&k| a.bits()[k] | b.bits()[k] == 1).count();
        ensure(a.count_ones() + b.count_ones() == union + inter, || format!("pair {i}: counting identity"))?;
        let err = (d - 2.0 * j / (1.0 + j)).abs();
        worst = worst.max(err);
        ensure(err <= 4.0 * f64::EPSILON, || format!("pair {i}: dice {d} vs 2j/(1+j) = {}", 2.0 * j / (1.0 + j)))?;
    }

    let score = |v: f64| Score { dice: v, jaccard: v };
    let mut table = ScoreTable::new();
    table.entry(Attribute::G).or_default().insert(0, vec![score(0.7)]);
    let s = summarize(&table).unwrap();
    ensure(s.rows[&Attribute::G].dice.mean == 0.7 && s.rows[&Attribute::G].dice.std == 0.0, || "one sample".into())?;

    let mut table = ScoreTable::new();
    let folds = table.entry(Attribute::M).or_default();
    folds.insert(0, vec![score(0.1), score(0.3)]);
    folds.insert(1, vec![score(0.4)]);
    let m = summarize(&table).unwrap().rows[&Attribute::M].dice;
    ensure((m.mean - 0.3).abs() <= 1e-12 && (m.std - 0.1).abs() <= 1e-12, || format!("fold means {{0.2, 0.4}}: {m:?}"))?;

    let mut table = ScoreTable::new();
    for (a, v) in Attribute::ALL.into_iter().zip([0.5, 0.7, 0.3, 0.1, 0.4]) {
        table.entry(a).or_default().insert(0, vec![score(v)]);
    }
    let avg = summarize(&table).unwrap().average.dice.mean;
    ensure((avg - 0.4).abs() <= 1e-12, || format!("average row {avg}"))?;
    Ok(format!("10000 pairs, max |dice - 2j/(1+j)| = {worst:.1e}; summarize examples within 1e-12"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "loss oracle exactness", loss_oracles),
        (2, "gradient suite", gradient_suite),
        (3, "union-mask oracle", union_oracle),
        (4, "transfer invariants", transfer_invariants),
        (5, "power-iteration oracle", power_iteration_oracle),
        (6, "bound-score arithmetic", bound_arithmetic),
        (7, "directional transfer benefit", transfer_benefit),
        (8, "directional bound comparison", bound_direction),
        (9, "offset ablation direction", offset_direction),
        (10, "CLI determinism", cli_determinism),
        (11, "metric identity", metric_identity),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL {name} [{secs:.1}s]: {detail}");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("all selected criteria passed");
        return;
    }
    println!("failed criteria: {failed:?}");
    if std::env::var_os("TATL_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
