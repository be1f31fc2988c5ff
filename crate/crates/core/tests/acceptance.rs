//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Criteria 7 to 9 train the full default
//! sweeps (three seeds each) and take several minutes.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use fmatch::det_loss::{assign_targets, det_distill_loss, det_supervised_loss, giou_pair, DetField, LevelSpec};
use fmatch::metrics::{accumulate_confusion, coco_ap_suite, miou, ConfusionMatrix, Detection};
use fmatch::nn::{NetworkSpec, ParamSet, Role};
use fmatch::optim::{poly_lr, sgd_step, SgdConfig, SgdState};
use fmatch::rng::Rng;
use fmatch::seg_loss::{pixelwise_ce_loss, pixelwise_kl_loss, LabelMap, ProbMap};
use fmatch::tensor::softmax_channels;
use fmatch::trainer::{sweep, RunConfig, RunReport, Strategy, Task, DEFAULT_BUDGETS};
use fmatch::DenseMap;

const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_labels(r: &mut fmatch::rng::FmRng, h: usize, w: usize, c: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..c as u8)).collect()).unwrap()
}

fn c1_loss_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let (c, h, w) = (r.random_range(2..=5), r.random_range(1..=6), r.random_range(1..=6));
        let t = random_probs(&mut r, c, h, w);
        let s = random_map(&mut r, c, h, w, -4.0, 4.0);
        let (kl, _) = pixelwise_kl_loss(&ProbMap::new(t.clone()).unwrap(), &s).unwrap();
        let o = kl_oracle(&t, &s);
        // KL can be exactly representable near zero; compare absolutely there
        let e = if o.abs() < 1e-15 { (kl - o).abs() } else { rel(kl, o) };
        worst = worst.max(e);

        let labels = random_labels(&mut r, h, w, c);
        let (ce, _) = pixelwise_ce_loss(&s, &labels).unwrap();
        worst = worst.max(rel(ce, ce_oracle(&s, &labels)));

        let levels = [LevelSpec::new(4, 0.0, f64::INFINITY)];
        let (gh, gw) = (r.random_range(1..=6), r.random_range(1..=6));
        let tf = random_field(&mut r, &levels, c, 4 * gh, 4 * gw);
        let sf = random_field(&mut r, &levels, c, 4 * gh, 4 * gw);
        let l = det_distill_loss(&tf, &sf).unwrap();
        let (oc, or, oq) = det_distill_oracle(&tf, &sf);
        for (a, b) in [(l.cls, oc), (l.reg, or), (l.center, oq), (l.total, oc + or + oq)] {
            worst = worst.max(rel(a, b));
        }
    }
    let dt = t0.elapsed();
    check(worst <= 1e-10, || format!("max rel err {worst:.3e}"))?;
    check(dt < Duration::from_secs(5), || format!("took {dt:.2?}"))?;
    Ok(format!("max rel err {worst:.1e}, {dt:.2?}"))
}

fn c2_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut loss_worst: f64 = 0.0;
    let mut nn_worst: f64 = 0.0;
    let levels = [LevelSpec::new(4, 0.0, f64::INFINITY)];
    let net = NetworkSpec::conv_stack(Role::Student, 2, &[3], 2, 0);
    for seed in 0..100 {
        let mut r = rng(seed);
        let t = random_probs(&mut r, 3, 4, 4);
        let s = random_map(&mut r, 3, 4, 4, -3.0, 3.0);
        let at = |v: &[f64]| DenseMap::from_vec(3, 4, 4, v.to_vec()).unwrap();
        let (_, g) = pixelwise_kl_loss(&ProbMap::new(t.clone()).unwrap(), &s).unwrap();
        let n = numeric_grad(s.values(), 1e-5, |v| kl_oracle(&t, &at(v)));
        loss_worst = loss_worst.max(grad_rel_err(g.values(), &n));

        let labels = random_labels(&mut r, 4, 4, 3);
        let (_, g) = pixelwise_ce_loss(&s, &labels).unwrap();
        let n = numeric_grad(s.values(), 1e-5, |v| ce_oracle(&at(v), &labels));
        loss_worst = loss_worst.max(grad_rel_err(g.values(), &n));

        let c = r.random_range(1..=3);
        let tf = random_field(&mut r, &levels, c, 16, 16);
        let raw = random_raw(&mut r, &levels, c, 16, 16);
        let sf = DetField::from_raw(&raw, &levels, c).unwrap();
        let g = det_distill_loss(&tf, &sf).unwrap().grads.to_raw().unwrap();
        let shape = raw[0].shape();
        let num = numeric_grad(raw[0].values(), 1e-5, |v| {
            let m = DenseMap::from_vec(shape.0, shape.1, shape.2, v.to_vec()).unwrap();
            let sf = DetField::from_raw(&[m], &levels, c).unwrap();
            let (a, b, q) = det_distill_oracle(&tf, &sf);
            a + b + q
        });
        let n = shape.1 * shape.2;
        for (lo, hi) in [(0, c), (c, c + 4), (c + 4, c + 5)] {
            loss_worst = loss_worst.max(grad_rel_err(&g[0].values()[lo * n..hi * n], &num[lo * n..hi * n]));
        }

        let a: [f64; 4] = std::array::from_fn(|_| r.random_range(0.5..10.0));
        let b: [f64; 4] = std::array::from_fn(|_| r.random_range(0.5..10.0));
        let (_, d) = giou_pair(a, b).unwrap();
        let num = numeric_grad(&b, 1e-5, |v| giou_corners(ltrb_box(a), ltrb_box([v[0], v[1], v[2], v[3]])));
        loss_worst = loss_worst.max(grad_rel_err(&d, &num));

        nn_worst = nn_worst.max(check_network(&net, seed, 4, 4));
    }
    let dt = t0.elapsed();
    check(loss_worst <= 1e-5, || format!("loss gradient rel err {loss_worst:.3e}"))?;
    check(nn_worst <= 1e-6, || format!("network gradient rel err {nn_worst:.3e}"))?;
    check(dt < Duration::from_secs(60), || format!("took {dt:.2?}"))?;
    Ok(format!("losses {loss_worst:.1e}, network {nn_worst:.1e}, {dt:.2?}"))
}

fn c3_hard_label() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let (c, h, w) = (r.random_range(2..=5), r.random_range(1..=6), r.random_range(1..=6));
        let s = random_map(&mut r, c, h, w, -5.0, 5.0);
        let labels = random_labels(&mut r, h, w, c);
        let (kl, _) = pixelwise_kl_loss(&ProbMap::one_hot(&labels, c).unwrap(), &s).unwrap();
        let (ce, _) = pixelwise_ce_loss(&s, &labels).unwrap();
        worst = worst.max((kl - ce).abs());

        let levels = [LevelSpec::new(2, 0.0, 4.0), LevelSpec::new(4, 4.0, f64::INFINITY)];
        let c = r.random_range(1..=4);
        let (h, w) = (r.random_range(8..=24), r.random_range(8..=24));
        let k = r.random_range(0..=4);
        let gt = random_boxes(&mut r, k, c as u8, h as f64, w as f64);
        let sf = random_field(&mut r, &levels, c, h, w);
        let sup = det_supervised_loss(&sf, &assign_targets(&gt, &levels, h, w)).unwrap();
        let dis = det_distill_loss(&one_hot_teacher(&gt, &levels, c, h, w), &sf).unwrap();
        for (a, b) in [(sup.cls, dis.cls), (sup.reg, dis.reg), (sup.center, dis.center)] {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    check(worst <= 1e-12, || format!("max err {worst:.3e}"))?;
    Ok(format!("max err {worst:.1e}"))
}

fn c4_kl_properties() -> Outcome {
    let mut min_kl = f64::INFINITY;
    for seed in 0..1000 {
        let mut r = rng(10_000 + seed);
        let (c, h, w) = (r.random_range(2..=5), r.random_range(1..=6), r.random_range(1..=6));
        let t = random_probs(&mut r, c, h, w);
        let s = random_map(&mut r, c, h, w, -8.0, 8.0);
        min_kl = min_kl.min(pixelwise_kl_loss(&ProbMap::new(t).unwrap(), &s).unwrap().0);
    }
    check(min_kl >= 0.0, || format!("negative KL {min_kl:e}"))?;
    let (mut loss, mut grad): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let s = random_map(&mut rng(seed), 4, 5, 5, -6.0, 6.0);
        let (l, g) = pixelwise_kl_loss(&ProbMap::new(softmax_channels(&s)).unwrap(), &s).unwrap();
        loss = loss.max(l.abs());
        grad = grad.max(g.values().iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    check(loss <= 1e-12 && grad <= 1e-12, || format!("at the minimizer loss {loss:e}, grad {grad:e}"))?;
    Ok(format!("min KL {min_kl:.3e}; minimizer loss {loss:.1e}, grad {grad:.1e}"))
}

fn c5_schedule() -> Outcome {
    let cfg = SgdConfig {
        max_iter: 2000,
        ..SgdConfig::default()
    };
    let (a, b, m) = (
        poly_lr(0, &cfg).unwrap(),
        poly_lr(2000, &cfg).unwrap(),
        poly_lr(1000, &cfg).unwrap(),
    );
    check(a == 0.01 && b == 0.0, || format!("endpoints {a}, {b}"))?;
    check((m - 0.0053589).abs() <= 1e-7, || format!("midpoint {m}"))?;

    let cfg = SgdConfig {
        momentum: 0.9,
        weight_decay: 1e-4,
        base_lr: 0.1,
        power: 0.9,
        max_iter: 4,
    };
    let one = |v: f64| ParamSet::new(vec![("w".into(), vec![v])]);
    let mut w = one(1.0);
    let mut st = SgdState::new(&w);
    // by hand: g' = g + wd*w, v = mu*v + g', w -= lr_i * v
    let (mut hw, mut hv) = (1.0f64, 0.0f64);
    for (i, g) in [0.5f64, -0.25].into_iter().enumerate() {
        sgd_step(&mut w, &one(g), &mut st, &cfg).unwrap();
        let lr = 0.1 * (1.0 - i as f64 / 4.0).powf(0.9);
        hv = 0.9 * hv + (g + 1e-4 * hw);
        hw -= lr * hv;
        let (gw, gv) = (w.get("w").unwrap()[0], st.velocity.get("w").unwrap()[0]);
        check(gw.to_bits() == hw.to_bits() && gv.to_bits() == hv.to_bits(), || {
            format!("step {}: w {gw} vs {hw}, v {gv} vs {hv}", i + 1)
        })?;
    }
    Ok(format!("lr(1000) = {m:.7}; two steps bitwise equal"))
}

fn c6_metrics() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..300 {
        let mut r = rng(seed);
        let c = r.random_range(2..=6);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let n = r.random_range(1..=5);
        let preds: Vec<LabelMap> = (0..n).map(|_| random_labels(&mut r, h, w, c)).collect();
        let gts: Vec<LabelMap> = (0..n).map(|_| random_labels(&mut r, h, w, c)).collect();
        let mut cm = ConfusionMatrix::new(c);
        for (p, g) in preds.iter().zip(&gts) {
            accumulate_confusion(p, g, &mut cm).unwrap();
        }
        let (_, om) = miou_oracle(&preds, &gts, c);
        let m = miou(&cm).map(|x| x.1).ok();
        match (m, om) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            (a, b) => return Err(format!("miou seed {seed}: {a:?} vs {b:?}")),
        }
    }
    let mut cases: Vec<(Vec<Vec<Detection>>, Vec<fmatch::det_loss::GroundTruth>, u8)> = Vec::new();
    for seed in 0..500 {
        let mut r = rng(seed);
        let classes = r.random_range(1..=3u8);
        let n = r.random_range(1..=5);
        let gts: Vec<_> = (0..n)
            .map(|_| {
                let k = r.random_range(0..=6);
                random_boxes(&mut r, k, classes, 160.0, 160.0)
            })
            .collect();
        let dets = gts
            .iter()
            .map(|g| {
                let extra = r.random_range(0..=3);
                random_dets(&mut r, g, classes, extra)
            })
            .collect();
        cases.push((dets, gts, classes));
    }
    // two ground-truth boxes, one perfect detection: AP50 = 51/101
    let gt = |x: f64| fmatch::det_loss::BoxLabel {
        x1: x,
        y1: x,
        x2: x + 10.0,
        y2: x + 10.0,
        class: 0,
    };
    let two = fmatch::det_loss::GroundTruth {
        boxes: vec![gt(0.0), gt(50.0)],
    };
    let hit = Detection {
        x1: 0.0,
        y1: 0.0,
        x2: 10.0,
        y2: 10.0,
        class: 0,
        score: 0.9,
    };
    cases.push((vec![vec![hit]], vec![two], 1));
    for (i, (dets, gts, classes)) in cases.iter().enumerate() {
        let got = coco_ap_suite(dets, gts).unwrap();
        let want = ap_suite_oracle(dets, gts, *classes);
        for ((name, a), b) in got.named().iter().zip(want) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(format!("AP case {i} {name}: {a:?} vs {b:?}")),
            }
        }
    }
    let last = coco_ap_suite(&cases.last().unwrap().0, &cases.last().unwrap().1).unwrap();
    let ap50 = last.ap50.unwrap_or(f64::NAN);
    check((ap50 - 51.0 / 101.0).abs() <= 1e-10, || format!("two-gt AP50 {ap50}"))?;
    check(worst <= 1e-10, || format!("max abs err {worst:.3e}"))?;
    Ok(format!("max abs err {worst:.1e}; two-gt AP50 = {ap50:.5}"))
}

/// Three-seed default sweeps, shared by the qualitative criteria.
struct SweepStats {
    reports: Vec<RunReport>,
    elapsed: Duration,
}

impl SweepStats {
    fn run(task: Task) -> Result<Self, String> {
        let t0 = Instant::now();
        let mut reports = Vec::new();
        for seed in SEEDS {
            let cfg = RunConfig {
                seed,
                ..RunConfig::for_task(task)
            };
            let out = sweep(&cfg, &DEFAULT_BUDGETS).map_err(|e| format!("seed {seed}: {e}"))?;
            eprintln!("{task} seed {seed} ({:.0?} so far)\n{}", t0.elapsed(), out.report.to_table());
            reports.push(out.report);
        }
        Ok(SweepStats {
            reports,
            elapsed: t0.elapsed(),
        })
    }

    /// Mean over seeds of `metric` at each model's best budget.
    fn mean_best(&self, model: &str, metric: &str) -> f64 {
        let v: Vec<f64> = self
            .reports
            .iter()
            .map(|r| r.best_value(model, metric).unwrap_or(f64::NAN))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn strategy_means(s: &SweepStats, metric: &str) -> [f64; 3] {
    Strategy::ALL.map(|st| s.mean_best(st.name(), metric))
}

fn c7_segmentation(s: &SweepStats) -> Outcome {
    let [sup, dis, aux] = strategy_means(s, "mIoU");
    let teacher = s.mean_best("teacher", "mIoU");
    let detail = format!(
        "mean best mIoU teacher {:.2}, supervised {:.2}, distill {:.2}, distill-aux {:.2}; {:.0?}",
        100.0 * teacher,
        100.0 * sup,
        100.0 * dis,
        100.0 * aux,
        s.elapsed
    );
    check(aux >= dis && dis >= sup, || format!("ordering violated: {detail}"))?;
    check(aux - sup >= 0.02, || format!("distill-aux gain {:.2} < 2 points: {detail}", 100.0 * (aux - sup)))?;
    check(s.elapsed <= Duration::from_secs(30 * 60), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn c8_agreement(s: &SweepStats) -> Outcome {
    let [sup, dis, aux] = strategy_means(s, "agreement");
    let detail = format!(
        "mean agreement supervised {:.4}, distill {:.4}, distill-aux {:.4}",
        100.0 * sup,
        100.0 * dis,
        100.0 * aux
    );
    check(aux > dis && dis > sup, || format!("ordering violated: {detail}"))?;
    Ok(detail)
}

fn c9_detection(s: &SweepStats) -> Outcome {
    let [sup, dis, aux] = strategy_means(s, "mAP");
    let teacher = s.mean_best("teacher", "mAP");
    let detail = format!(
        "mean best mAP teacher {:.2}, supervised {:.2}, distill {:.2}, distill-aux {:.2} ({:.1}% of teacher); {:.0?}",
        100.0 * teacher,
        100.0 * sup,
        100.0 * dis,
        100.0 * aux,
        100.0 * aux / teacher,
        s.elapsed
    );
    check(aux >= dis && dis >= sup, || format!("ordering violated: {detail}"))?;
    check(aux >= 0.9 * teacher, || format!("below 90% of the teacher: {detail}"))?;
    check(s.elapsed <= Duration::from_secs(45 * 60), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for task in [Task::Segmentation, Task::Detection] {
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{task}-{run}"));
            let cfg = RunConfig {
                teacher_steps: 30,
                seed: 5,
                out_dir: Some(out.clone()),
                ..RunConfig::for_task(task)
            };
            sweep(&cfg, &[10, 20]).map_err(|e| e.to_string())?;
            let mut entries: Vec<_> = std::fs::read_dir(&out)
                .map_err(|e| e.to_string())?
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            let contents: Vec<(String, Vec<u8>)> = entries
                .iter()
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
                .collect();
            outputs.push(contents);
        }
        check(outputs[0] == outputs[1], || format!("{task}: outputs differ between runs"))?;
        check(outputs[0].iter().any(|(n, _)| n == "report.csv"), || format!("{task}: no report"))?;
        files += outputs[0].len();
    }
    Ok(format!("{files} checkpoint and report files identical across repeated runs"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS  {id:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {id:>2} {name}: {d}")
            }
        }
    };
    report(1, "loss oracles", c1_loss_oracles());
    report(2, "gradient suite", c2_gradients());
    report(3, "hard-label reduction", c3_hard_label());
    report(4, "KL properties", c4_kl_properties());
    report(5, "schedule and optimizer", c5_schedule());
    report(6, "metric oracles", c6_metrics());
    match SweepStats::run(Task::Segmentation) {
        Ok(s) => {
            report(7, "segmentation sweep", c7_segmentation(&s));
            report(8, "teacher agreement", c8_agreement(&s));
        }
        Err(e) => {
            report(7, "segmentation sweep", Err(e.clone()));
            report(8, "teacher agreement", Err(e));
        }
    }
    report(
        9,
        "detection sweep",
        SweepStats::run(Task::Detection).and_then(|s| c9_detection(&s)),
    );
    report(10, "determinism", c10_determinism());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
