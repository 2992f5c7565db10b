//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Training runs use a reduced backbone (32 px input, narrow channels) and
//! 40 epochs so the whole suite fits a single CPU core. Set
//! `ACCEPTANCE_ONLY=1,4` to run a subset while iterating.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bonenet::data::augment::{crop, prepare, CropParams};
use bonenet::data::{crop_region, generate_samples, split, GenParams, Gender, Region, Sample};
use bonenet::explain::{channel_sensitivity, grad_cam, region_mass, DEFAULT_LAYER};
use bonenet::fusion::late_fuse;
use bonenet::gradcheck::{run_suite, TOLERANCE};
use bonenet::model::connection_param_count;
use bonenet::train::{
    history_csv, mae, plateau_step, predict_set, train, Checkpoint, PlateauState, PreparedSet, TrainConfig,
};
use bonenet::{Arch, Model, ModelConfig, Tensor};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EPOCHS: usize = 40;

struct Report {
    failed: usize,
    only: Option<BTreeSet<u32>>,
}

impl Report {
    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(&id))
    }

    fn line(&mut self, label: &str, pass: bool, detail: String) {
        println!("[{}] {label}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.failed += usize::from(!pass);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn acceptance_model(arch: Arch) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        block_channels: [8, 16, 32, 32, 32],
        convs_per_block: 1,
        n_units: 32,
        head_dims: [64, 32],
        dropout_rate: 0.1,
        ..ModelConfig::default()
    }
    .with_arch(arch)
}

fn acceptance_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

fn c1(r: &mut Report) {
    let t = Instant::now();
    match run_suite(10, 0) {
        Ok(reports) => {
            let worst = reports.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            let failing: Vec<&str> = reports.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
            let elapsed = t.elapsed();
            r.line(
                "C1 gradient suite",
                failing.is_empty() && elapsed < Duration::from_secs(60),
                format!(
                    "{} families x 10 cases, max rel err {worst:.2e} (< {TOLERANCE:e}), failing {failing:?}, {}",
                    reports.len(),
                    secs(elapsed)
                ),
            );
        }
        Err(e) => r.line("C1 gradient suite", false, format!("error: {e}")),
    }
}

fn c2(r: &mut Report) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, cfg) in [("desk", ModelConfig::default()), ("vgg16", ModelConfig::vgg16_scale())] {
        for spec in cfg.registry() {
            let Some(rest) = spec.name.strip_prefix("conn.block") else { continue };
            if !rest.ends_with(".fc.weight") {
                continue;
            }
            let b: usize = rest[..1].parse().unwrap();
            let bias = format!("conn.block{b}.fc.bias");
            let bias_len = cfg.registry().iter().find(|p| p.name == bias).map_or(0, |p| p.numel());
            let (c, h, w) = cfg.pool_shape(b);
            let n = connection_param_count(c, h, w, cfg.n_units);
            ok &= spec.numel() + bias_len == n;
            parts.push(format!("{name} block{b} {}", spec.numel() + bias_len));
        }
    }
    let vgg = ModelConfig::vgg16_scale();
    let expected = [51_380_480, 25_690_368];
    let got: Vec<usize> = [3, 4]
        .iter()
        .map(|&b| {
            let (c, h, w) = vgg.pool_shape(b);
            connection_param_count(c, h, w, vgg.n_units)
        })
        .collect();
    ok &= got == expected;
    ok &= parts.len() == 4;
    r.line("C2 connection parameter counts", ok, parts.join(", "));
}

fn c3(r: &mut Report) {
    let cfg = TrainConfig::default().plateau();
    let mut s = PlateauState::new(TrainConfig::default().lr0);
    let mut trace = vec![s.current_lr];
    // One improvement, then a flat metric for the rest of the run.
    let mut metrics = vec![1.0];
    metrics.extend(std::iter::repeat_n(0.9, 400));
    for m in metrics {
        s = plateau_step(s, m, &cfg).unwrap();
        trace.push(s.current_lr);
    }
    let mut ok = trace[..12].iter().all(|&lr| lr == 3e-4) && (trace[12] - 2.4e-4).abs() < 1e-18;
    let mut steps = 0;
    for w in trace.windows(2) {
        if w[1] != w[0] {
            steps += 1;
            ok &= w[1] == (w[0] * 0.8).max(1e-7);
        }
    }
    let drops: Vec<usize> = (1..trace.len()).filter(|&i| trace[i] != trace[i - 1]).collect();
    ok &= drops.windows(2).all(|w| w[1] - w[0] == 10);
    ok &= *trace.last().unwrap() == 1e-7;
    let items: Vec<u32> = (0..813).collect();
    let (tr, te) = split(&items, 0.7, 0).unwrap();
    ok &= (tr.len(), te.len()) == (569, 244);
    r.line(
        "C3 recipe fidelity",
        ok,
        format!(
            "lr {:e} -> {:e} at call 12, {steps} x0.8 steps 10 epochs apart, floor {:e}; split 813 -> {}/{}",
            trace[0],
            trace[12],
            trace.last().unwrap(),
            tr.len(),
            te.len()
        ),
    );
}

fn c4(r: &mut Report) {
    let t = Instant::now();
    let samples = generate_samples(&GenParams { n: 16, seed: 7, ..GenParams::default() }).unwrap();
    let set = PreparedSet::new(&samples, 32, Region::Full);
    let cfg = ModelConfig { dropout_rate: 0.0, ..acceptance_model(Arch::Hier) };
    let train_cfg = TrainConfig {
        epochs: 300,
        batch_size: 16,
        augment: false,
        seed: 7,
        ..TrainConfig::default()
    };
    match train(Model::build(&cfg, 7).unwrap(), &set, &set, &train_cfg) {
        Ok(out) => {
            let final_mae = out.history.last().unwrap().val_mae;
            let (l1, l300) = (out.history[0].train_loss, out.history.last().unwrap().train_loss);
            let elapsed = t.elapsed();
            r.line(
                "C4 overfit smoke",
                final_mae < 0.5 && l300 < 0.05 * l1 && elapsed < Duration::from_secs(300),
                format!(
                    "16 samples, 300 epochs: train MAE {final_mae:.4} years (best {:.4}), loss {l1:.3} -> {l300:.4}, {}",
                    out.best_val_mae,
                    secs(elapsed)
                ),
            );
        }
        Err(e) => r.line("C4 overfit smoke", false, format!("error: {e}")),
    }
}

/// One trained model with what the later criteria need.
struct Run {
    model: Model,
    history: String,
    checkpoint: Vec<u8>,
    test_pred: Vec<f64>,
}

fn fit(arch: Arch, region: Region, seed: u64, train_s: &[Sample], test_s: &[Sample]) -> Run {
    let cfg = acceptance_model(arch);
    let tr = PreparedSet::new(train_s, cfg.input_size, region);
    let te = PreparedSet::new(test_s, cfg.input_size, region);
    let tcfg = acceptance_train(seed);
    let out = train(Model::build(&cfg, seed).unwrap(), &tr, &te, &tcfg).expect("training run");
    let meta = serde_json::json!({ "kind": "model", "model": cfg, "train": tcfg, "region": region });
    let ckpt = Checkpoint::from_regressor(
        &out.best,
        bonenet::config::training_fingerprint(&cfg, &tcfg),
        out.history.len() as u32,
        out.final_lr,
        meta,
    );
    Run {
        test_pred: predict_set(&out.best, &te).unwrap(),
        model: out.best,
        history: history_csv(&out.history),
        checkpoint: ckpt.to_bytes(),
    }
}

struct SeedRuns {
    test: Vec<Sample>,
    plain: Run,
    hier: Run,
    upper: Option<Run>,
    lower: Option<Run>,
}

fn subset_mae(pred: &[f64], test: &[Sample], keep: impl Fn(&Sample) -> bool) -> f64 {
    let (p, t): (Vec<f64>, Vec<f64>) =
        pred.iter().zip(test).filter(|(_, s)| keep(s)).map(|(p, s)| (*p, s.age_years)).unzip();
    mae(&p, &t)
}

fn c5(r: &mut Report, runs: &[SeedRuns], elapsed: Duration) {
    let maes = |pick: fn(&SeedRuns) -> &Run| -> Vec<f64> {
        runs.iter().map(|s| subset_mae(&pick(s).test_pred, &s.test, |_| true)).collect()
    };
    let (hier, plain) = (maes(|s| &s.hier), maes(|s| &s.plain));
    let (mh, mp) = (median(hier.clone()), median(plain.clone()));
    r.line(
        "C5 hierarchical vs plain",
        mh <= mp && elapsed < Duration::from_secs(1800),
        format!("median test MAE hier {mh:.3} <= plain {mp:.3} (hier {hier:.3?}, plain {plain:.3?}), {}", secs(elapsed)),
    );
    let f: Vec<f64> = runs.iter().map(|s| subset_mae(&s.hier.test_pred, &s.test, |x| x.gender == Gender::Female)).collect();
    let m: Vec<f64> = runs.iter().map(|s| subset_mae(&s.hier.test_pred, &s.test, |x| x.gender == Gender::Male)).collect();
    let (mf, mm) = (median(f), median(m));
    r.line("gender asymmetry", mf <= mm, format!("median hier test MAE female {mf:.3} <= male {mm:.3}"));
}

fn c6(r: &mut Report, runs: &[SeedRuns]) {
    let mut ok = true;
    let mut count = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for s in runs {
        let mut members = vec![&s.plain, &s.hier];
        members.extend(s.upper.iter().chain(&s.lower));
        for group in [None, Some(Gender::Female), Some(Gender::Male)] {
            let idx: Vec<usize> =
                (0..s.test.len()).filter(|&i| group.is_none_or(|g| s.test[i].gender == g)).collect();
            if idx.is_empty() {
                continue;
            }
            let ages: Vec<f64> = idx.iter().map(|&i| s.test[i].age_years).collect();
            let preds: Vec<Tensor> = members
                .iter()
                .map(|m| Tensor::from_vec(&[idx.len(), 1], idx.iter().map(|&i| m.test_pred[i]).collect()).unwrap())
                .collect();
            let fused = mae(late_fuse(&preds).unwrap().data(), &ages);
            let mean_member = preds.iter().map(|p| mae(p.data(), &ages)).sum::<f64>() / preds.len() as f64;
            ok &= fused <= mean_member + 1e-9;
            worst_gap = worst_gap.max(fused - mean_member);
            count += 1;
        }
    }
    r.line(
        "C6 late-fusion convexity",
        ok && count > 0,
        format!("{count} evaluations, max(fused - mean member MAE) = {worst_gap:.4}"),
    );
}

fn c7(r: &mut Report, runs: &[SeedRuns]) {
    let upper: Vec<f64> = runs.iter().map(|s| subset_mae(&s.upper.as_ref().unwrap().test_pred, &s.test, |_| true)).collect();
    let lower: Vec<f64> = runs.iter().map(|s| subset_mae(&s.lower.as_ref().unwrap().test_pred, &s.test, |_| true)).collect();
    let (mu, ml) = (median(upper.clone()), median(lower.clone()));
    r.line(
        "C7 upper vs lower body",
        mu < ml,
        format!("median test MAE upper {mu:.3} < lower {ml:.3} (upper {upper:.3?}, lower {lower:.3?})"),
    );
}

fn input_of(model: &Model, s: &Sample) -> Tensor {
    let side = model.input_size();
    crop(&prepare(&crop_region(&s.image, Region::Full), side), side, CropParams::center())
}

fn c8(r: &mut Report, run: &SeedRuns) {
    let model = &run.hier.model;
    let mut zeroed = model.clone();
    for layer in zeroed.head_mut() {
        layer.weight.data_mut().fill(0.0);
        layer.bias.data_mut().fill(0.0);
    }
    let x0 = input_of(model, &run.test[0]);
    let zero_ok = grad_cam(&zeroed, &x0, DEFAULT_LAYER).unwrap().is_zero();

    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for s in run.test.iter().take(3) {
        let x = input_of(model, s);
        let h = grad_cam(model, &x, DEFAULT_LAYER).unwrap();
        for (k, &a) in h.alphas.iter().enumerate() {
            let fd = channel_sensitivity(model, &x, DEFAULT_LAYER, k, 1e-6).unwrap();
            let scale = a.abs().max(fd.abs());
            if scale > 1e-9 {
                worst = worst.max((a - fd).abs() / scale);
            }
            compared += 1;
        }
    }

    let uppers: Vec<f64> = run
        .test
        .iter()
        .filter_map(|s| region_mass(&grad_cam(model, &input_of(model, s), DEFAULT_LAYER).unwrap(), Region::Upper).ok())
        .collect();
    let defined = uppers.len();
    let med = median(uppers);
    r.line(
        "C8 grad-cam sanity",
        zero_ok && worst < 1e-3 && compared > 0 && med > 0.5,
        format!(
            "zero head -> zero map: {zero_ok}; alpha vs FD max rel err {worst:.2e} over {compared} channels; \
             median upper mass {med:.3} over {defined} test images ({} identically zero maps excluded)",
            run.test.len() - defined
        ),
    );
}

fn c9(r: &mut Report, first: &SeedRuns, train_s: &[Sample]) {
    let again_plain = fit(Arch::Plain, Region::Full, SEEDS[0], train_s, &first.test);
    let again_hier = fit(Arch::Hier, Region::Full, SEEDS[0], train_s, &first.test);
    let same = |a: &Run, b: &Run| a.history == b.history && a.checkpoint == b.checkpoint;
    let (p, h) = (same(&first.plain, &again_plain), same(&first.hier, &again_hier));
    r.line(
        "C9 determinism",
        p && h,
        format!(
            "seed {} rerun: plain identical {p}, hier identical {h} ({} checkpoint bytes)",
            SEEDS[0],
            first.hier.checkpoint.len()
        ),
    );
}

fn main() -> ExitCode {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut r = Report { failed: 0, only };
    let start = Instant::now();

    if r.wants(1) {
        c1(&mut r);
    }
    if r.wants(2) {
        c2(&mut r);
    }
    if r.wants(3) {
        c3(&mut r);
    }
    if r.wants(4) {
        c4(&mut r);
    }

    let needs_runs = [5, 6, 7, 8, 9].iter().any(|&i| r.wants(i));
    if needs_runs {
        let samples = generate_samples(&GenParams::default()).unwrap();
        let regions = r.wants(6) || r.wants(7);
        let t = Instant::now();
        let mut full_time = Duration::ZERO;
        let mut runs = Vec::new();
        let mut first_train = Vec::new();
        for &seed in &SEEDS {
            let (train_s, test_s) = split(&samples, 0.7, seed).unwrap();
            let t_full = Instant::now();
            let plain = fit(Arch::Plain, Region::Full, seed, &train_s, &test_s);
            let hier = fit(Arch::Hier, Region::Full, seed, &train_s, &test_s);
            full_time += t_full.elapsed();
            let (upper, lower) = if regions {
                (
                    Some(fit(Arch::Hier, Region::Upper, seed, &train_s, &test_s)),
                    Some(fit(Arch::Hier, Region::Lower, seed, &train_s, &test_s)),
                )
            } else {
                (None, None)
            };
            eprintln!("seed {seed} trained ({} so far)", secs(t.elapsed()));
            if seed == SEEDS[0] {
                first_train = train_s;
            }
            runs.push(SeedRuns { test: test_s, plain, hier, upper, lower });
        }
        if r.wants(5) {
            c5(&mut r, &runs, full_time);
        }
        if r.wants(6) {
            c6(&mut r, &runs);
        }
        if r.wants(7) {
            c7(&mut r, &runs);
        }
        if r.wants(8) {
            c8(&mut r, &runs[0]);
        }
        if r.wants(9) {
            c9(&mut r, &runs[0], &first_train);
        }
    }

    println!("acceptance: {} failing line(s), {}", r.failed, secs(start.elapsed()));
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
