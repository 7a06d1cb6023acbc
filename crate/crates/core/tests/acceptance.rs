//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `UDFA_ACCEPTANCE_SKIP_EXPERIMENT=1`
//! skips the two end-to-end experiment runs (criteria 9 and 10).

mod common;

use std::time::Instant;

use common::*;
use ndarray::Array4;
use rand::Rng;
use udfa::align::{alignment_loss, decoupled_level_loss_grad, lp_distance, make_masks, AlignConfig, PNorm};
use udfa::attack::{generate_adversarial, AttackConfig};
use udfa::data::Dataset;
use udfa::detcore::{detection_losses, BoxSet, DetectionSet, Detector, DetectorConfig, FeaturePyramid, NormMode, Phase, Want};
use udfa::eval::{ap_per_threshold, average_precision, coco_thresholds, mpc};
use udfa::experiment::{run_experiment, ExperimentConfig};
use udfa::train::{Mode, TrainConfig, TrainLogRecord, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-6;
const FD_COORDS: usize = 6;

/// Random coordinates plus the one with the largest analytic gradient.
fn probe_coords(rng: &mut rand_chacha::ChaCha8Rng, g: &Array4<f64>) -> Vec<(usize, usize, usize, usize)> {
    let (n, c, h, w) = g.dim();
    let mut out: Vec<_> = (0..FD_COORDS)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w)))
        .collect();
    let argmax = g.indexed_iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
    out.push(argmax);
    out
}

fn fd_error(rng: &mut rand_chacha::ChaCha8Rng, x: &Array4<f64>, g: &Array4<f64>, f: impl Fn(&Array4<f64>) -> f64) -> f64 {
    let coords = probe_coords(rng, g);
    let analytic: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
    let numeric: Vec<f64> = coords.iter().map(|&i| central_difference(x, i, FD_STEP, &f)).collect();
    relative_error(&analytic, &numeric)
}

fn level_loss(s: &FeaturePyramid<f64>, t: &FeaturePyramid<f64>, masks: &udfa::align::ForegroundMaskSet, cfg: &AlignConfig) -> (f64, Vec<Array4<f64>>) {
    let mut total = 0.0;
    let mut grads = Vec::new();
    for ((sl, tl), m) in s.levels.iter().zip(&t.levels).zip(&masks.masks) {
        let (v, g) = decoupled_level_loss_grad(sl.view(), tl.view(), m.view(), cfg).unwrap();
        total += v;
        grads.push(g);
    }
    (total, grads)
}

fn criterion_1() -> Outcome {
    let mut rng = rng(101);
    let (h, w) = (16, 16);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for case in 0..20u64 {
        let cfg = DetectorConfig::default();
        let det = Detector::<f64>::new(cfg.clone(), 1000 + case).unwrap();
        let teacher = Detector::<f64>::new(cfg.clone(), 2000 + case).unwrap();
        let count = rng.random_range(1..4);
        let targets = vec![random_boxes(&mut rng, count, h, w, cfg.num_classes)];
        let x = random_image(&mut rng, 1, h, w);
        let phase = if case % 2 == 0 { Phase::Eval } else { Phase::Train };

        // detection loss
        let pass = det.forward(x.view(), NormMode::Main, phase).unwrap();
        let losses = detection_losses(pass.head(), &targets, cfg.focal_gamma).unwrap();
        let g = det.backward(&pass, Some(&losses.grads), None, Want::INPUT).unwrap().input.unwrap();
        let loss = |z: &Array4<f64>| {
            let p = det.forward(z.view(), NormMode::Main, phase).unwrap();
            detection_losses(p.head(), &targets, cfg.focal_gamma).unwrap().total()
        };
        worst = worst.max(fd_error(&mut rng, &x, &g, loss));
        cases += 1;

        // alignment branches: the student input moves, the other side is held fixed
        let align = AlignConfig {
            p_norm: if case % 4 < 2 { PNorm::L2 } else { PNorm::L1 },
            ..AlignConfig::default()
        };
        let clean = random_image(&mut rng, 1, h, w);
        let x_adv = (&clean + &random_image(&mut rng, 1, h, w).mapv(|v| (v - 0.5) * 0.06)).mapv(|v| v.clamp(0.0, 1.0));
        let t_clean = teacher.forward(clean.view(), NormMode::Main, Phase::Train).unwrap().pyramid();
        let s_clean_pass = det.forward(clean.view(), NormMode::Main, Phase::Train).unwrap();
        let s_clean = s_clean_pass.pyramid();
        let masks = make_masks(&targets, &s_clean.shapes(), &s_clean.strides).unwrap();
        let student = |z: &Array4<f64>| det.forward(z.view(), NormMode::Main, Phase::Train).unwrap().pyramid();
        let input_grad = |at: &Array4<f64>, fg: &[Array4<f64>]| {
            let pass = det.forward(at.view(), NormMode::Main, Phase::Train).unwrap();
            det.backward(&pass, None, Some(fg), Want::INPUT).unwrap().input.unwrap()
        };
        // fea1: adversarial student vs teacher clean
        let (_, g1) = level_loss(&student(&x_adv), &t_clean, &masks, &align);
        let e1 = fd_error(&mut rng, &x_adv, &input_grad(&x_adv, &g1), |z| level_loss(&student(z), &t_clean, &masks, &align).0);
        // fea2: adversarial student vs detached clean student
        let (_, g2) = level_loss(&student(&x_adv), &s_clean, &masks, &align);
        let e2 = fd_error(&mut rng, &x_adv, &input_grad(&x_adv, &g2), |z| level_loss(&student(z), &s_clean, &masks, &align).0);
        // fea3: clean student vs teacher clean
        let (_, g3) = level_loss(&s_clean, &t_clean, &masks, &align);
        let e3 = fd_error(&mut rng, &clean, &input_grad(&clean, &g3), |z| level_loss(&student(z), &t_clean, &masks, &align).0);
        // composed loss through both student inputs
        let s_adv = student(&x_adv);
        let out = alignment_loss(&s_adv, &s_clean, &t_clean, &masks, &align).unwrap();
        let ea = fd_error(&mut rng, &x_adv, &input_grad(&x_adv, &out.grad_adv), |z| {
            let o = alignment_loss(&student(z), &s_clean, &t_clean, &masks, &align).unwrap();
            o.fea1 + o.fea2
        });
        let ec = fd_error(&mut rng, &clean, &input_grad(&clean, &out.grad_clean), |z| {
            align.lambda * level_loss(&student(z), &t_clean, &masks, &align).0
        });
        worst = worst.max(e1).max(e2).max(e3).max(ea).max(ec);
        cases += 5;
    }
    outcome(worst <= 1e-4, format!("{cases} gradient checks over 20 random 1-image cases, max relative error {worst:.2e} (tol 1e-4)"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = rng(202);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for i in 0..10_000 {
        let p = if i % 2 == 0 { PNorm::L1 } else { PNorm::L2 };
        let dim = rng.random_range(1..64);
        let scale = 10f64.powi(rng.random_range(-3..3));
        let mut v = || (0..dim).map(|_| rng.random_range(-1.0..1.0) * scale).collect::<Vec<f64>>();
        let (a, b, c) = (v(), v(), v());
        let slack = lp_distance(&a, &b, p) + lp_distance(&b, &c, p) - lp_distance(&a, &c, p);
        tightest = tightest.min(slack);
        if slack < -1e-9 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 triples, p in {{1,2}}: {violations} violations, smallest slack {tightest:.3e}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let cfg = DetectorConfig::default();
    let det = Detector::<f64>::new(cfg.clone(), 31).unwrap();
    let teacher = Detector::<f64>::new(cfg.clone(), 32).unwrap();
    let mut rng = rng(303);
    let clean = random_image(&mut rng, 2, 32, 32);
    let targets = vec![random_boxes(&mut rng, 2, 32, 32, 6), random_boxes(&mut rng, 1, 32, 32, 6)];
    let pass = det.forward(clean.view(), NormMode::Main, Phase::Train).unwrap();
    let s_clean = pass.pyramid();
    let t_clean = teacher.forward(clean.view(), NormMode::Main, Phase::Train).unwrap().pyramid();
    // the adversarial pyramid is a constant: only the clean path depends on parameters
    let s_adv = FeaturePyramid {
        levels: s_clean.levels.iter().map(|l| l.mapv(|v| v + 0.25 * (v * 7.0).sin())).collect(),
        strides: s_clean.strides.clone(),
    };
    let masks = make_masks(&targets, &s_clean.shapes(), &s_clean.strides).unwrap();

    // lambda = 0: fea2 is the only term touching the clean path
    let no_kd = AlignConfig { lambda: 0.0, ..AlignConfig::default() };
    let out = alignment_loss(&s_adv, &s_clean, &t_clean, &masks, &no_kd).unwrap();
    let g = det.backward(&pass, None, Some(&out.grad_clean), Want::PARAMS).unwrap();
    let nonzero = g.params.iter().flat_map(|p| p.iter()).filter(|v| v.to_bits() != 0).count();
    // without the stop-gradient the same term would move the parameters
    let (_, undetached) = level_loss(&s_clean, &s_adv, &masks, &no_kd);
    let g_und = det.backward(&pass, None, Some(&undetached), Want::PARAMS).unwrap();
    let und_norm: f64 = g_und.params.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>().sqrt();

    // lambda = 1: the clean-path gradient is exactly lambda * d fea3
    let kd = AlignConfig::default();
    let out = alignment_loss(&s_adv, &s_clean, &t_clean, &masks, &kd).unwrap();
    let (_, g3) = level_loss(&s_clean, &t_clean, &masks, &kd);
    let same = out.grad_clean.iter().zip(&g3).all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

    outcome(
        nonzero == 0 && same && und_norm > 0.0 && out.fea2 > 0.0,
        format!(
            "fea2 = {:.4}: {nonzero} nonzero parameter-gradient entries through the clean path (undetached would give norm {und_norm:.3e}); lambda=1 clean gradient equals fea3 gradient bitwise: {same}",
            out.fea2
        ),
    )
}

// ---------------------------------------------------------------- 4

fn main_stat_bits(det: &Detector<f32>, key: &str) -> Vec<u32> {
    det.buffers()
        .into_iter()
        .filter(|(n, _)| n.contains(&format!(".{key}.")))
        .flat_map(|(_, v)| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn batches(data: &Dataset, size: usize, count: usize) -> Vec<udfa::detcore::ImageBatch<f32>> {
    (0..count)
        .map(|i| {
            let idx: Vec<usize> = (0..size).map(|j| (i * size + j) % data.len()).collect();
            data.batch(&idx)
        })
        .collect()
}

struct AdvpropRun {
    det: Detector<f32>,
    trajectory: Vec<Vec<ndarray::Array1<f32>>>,
}

fn advprop_run(teacher: &Detector<f32>, data: &[udfa::detcore::ImageBatch<f32>], eps_255: f32, lr: f64) -> AdvpropRun {
    let mut cfg = TrainConfig::for_mode(Mode::UdfaAdvprop);
    cfg.attack.epsilon = eps_255 / 255.0;
    cfg.attack.step_size = Some(eps_255 / 4.0 / 255.0);
    let student = Detector::initialized_from(teacher, true).unwrap();
    let mut trainer = Trainer::new(cfg, student, Some(teacher)).unwrap();
    let mut trajectory = Vec::new();
    for b in data {
        trajectory.push(trainer.student.params().values().to_vec());
        trainer.step(b, 1, lr).unwrap();
    }
    AdvpropRun { det: trainer.student, trajectory }
}

fn criterion_4() -> Outcome {
    let data = dataset(4, 64, 0);
    let bs = batches(&data, 8, 50);
    let teacher = Detector::<f32>::new(DetectorConfig::default(), 4).unwrap();

    // frozen parameters: MAIN may only see clean batches, so the budget cannot matter
    let a = advprop_run(&teacher, &bs, 8.0, 0.0);
    let b = advprop_run(&teacher, &bs, 2.0, 0.0);
    let main_equal = main_stat_bits(&a.det, "main") == main_stat_bits(&b.det, "main");
    let aux_differs = main_stat_bits(&a.det, "main") != main_stat_bits(&a.det, "aux");
    let aux_paired_differs = main_stat_bits(&a.det, "aux") != main_stat_bits(&b.det, "aux");

    // learning run: MAIN equals a replay of clean batches along the recorded parameters
    let run = advprop_run(&teacher, &bs, 8.0, 1e-2);
    let mut replay = Detector::initialized_from(&teacher, true).unwrap();
    for (params, batch) in run.trajectory.iter().zip(&bs) {
        for (dst, src) in replay.params_mut().values_mut().iter_mut().zip(params) {
            dst.assign(src);
        }
        let pass = replay.forward(batch.pixels.view(), NormMode::Main, Phase::Train).unwrap();
        let stats = pass.batch_stats().to_vec();
        replay.absorb_batch_stats(NormMode::Main, &stats).unwrap();
    }
    let replay_equal = main_stat_bits(&replay, "main") == main_stat_bits(&run.det, "main");

    // literal paired comparison with learning enabled, reported for information
    let other = advprop_run(&teacher, &bs, 2.0, 1e-2);
    let gap = run
        .det
        .buffers()
        .iter()
        .zip(other.det.buffers())
        .filter(|(x, _)| x.0.contains(".main."))
        .flat_map(|(x, y)| x.1.iter().zip(y.1.iter()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0f32, f32::max);
    println!("INFO criterion 4: with lr=1e-2 the eps=8/255 and eps=2/255 runs drift apart through their parameters; max |MAIN difference| = {gap:.3e}");

    outcome(
        main_equal && aux_differs && aux_paired_differs && replay_equal,
        format!(
            "50 UDFA_ADVPROP steps at lr=0, eps 8/255 vs 2/255: MAIN bitwise equal {main_equal}, MAIN != AUX {aux_differs}, AUX budget-dependent {aux_paired_differs}; lr=1e-2 MAIN equals clean replay bitwise {replay_equal}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn run_records(cfg: TrainConfig, teacher: &Detector<f32>, data: &[udfa::detcore::ImageBatch<f32>]) -> (Vec<TrainLogRecord>, Detector<f32>) {
    let student = Detector::initialized_from(teacher, false).unwrap();
    let t = cfg.mode.needs_teacher().then_some(teacher);
    let mut trainer = Trainer::new(cfg, student, t).unwrap();
    let recs = data.iter().map(|b| trainer.step(b, 1, 1e-2).unwrap()).collect();
    (recs, trainer.student)
}

fn same_bits(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn same_detector(a: &Detector<f32>, b: &Detector<f32>) -> bool {
    let bits = |d: &Detector<f32>| -> Vec<u32> {
        d.params().values().iter().flat_map(|v| v.iter().map(|x| x.to_bits())).chain(main_stat_bits(d, "main")).collect()
    };
    bits(a) == bits(b)
}

fn criterion_5() -> Outcome {
    let data = dataset(5, 100, 0);
    let bs = batches(&data, 4, 100);
    let teacher = Detector::<f32>::new(DetectorConfig::default(), 5).unwrap();

    let std_cfg = TrainConfig::for_mode(Mode::Std);
    let reduced = TrainConfig { alpha: 1.0, beta: 0.0, ..TrainConfig::for_mode(Mode::Udfa) };
    let (r_std, d_std) = run_records(std_cfg, &teacher, &bs);
    let (r_red, d_red) = run_records(reduced, &teacher, &bs);
    let ok_std = r_std.len() == 100
        && r_std.iter().zip(&r_red).all(|(a, b)| {
            same_bits(a.terms.clean_cls, b.terms.clean_cls) && same_bits(a.terms.clean_loc, b.terms.clean_loc) && same_bits(a.terms.total, b.terms.total)
        })
        && same_detector(&d_std, &d_red);

    let fa_cfg = TrainConfig::for_mode(Mode::VanillaFa);
    let mut no_lambda = TrainConfig::for_mode(Mode::Udfa);
    no_lambda.align.lambda = 0.0;
    let (r_fa, d_fa) = run_records(fa_cfg, &teacher, &bs);
    let (r_nl, d_nl) = run_records(no_lambda, &teacher, &bs);
    let opt = |a: Option<f64>, b: Option<f64>| a.map(f64::to_bits) == b.map(f64::to_bits);
    let ok_fa = r_fa.iter().zip(&r_nl).all(|(a, b)| {
        let (x, y) = (&a.terms, &b.terms);
        same_bits(x.clean_cls, y.clean_cls)
            && same_bits(x.clean_loc, y.clean_loc)
            && opt(x.adv_cls, y.adv_cls)
            && opt(x.adv_loc, y.adv_loc)
            && opt(x.fea1, y.fea1)
            && opt(x.fea2, y.fea2)
            && same_bits(x.total, y.total)
    }) && same_detector(&d_fa, &d_nl);

    outcome(
        ok_std && ok_fa,
        format!("100 seeded iterations: (alpha=1, beta=0) vs STD bitwise {ok_std}; (lambda=0) vs VANILLA_FA bitwise {ok_fa}"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let data = dataset(6, 1000, 0);
    let det = Detector::<f32>::new(DetectorConfig::default(), 6).unwrap();
    let mut rng = rng(606);
    let mut violations = 0usize;
    let mut changed = 0usize;
    for chunk in (0..1000).collect::<Vec<_>>().chunks(20) {
        let eps = [2.0f32, 4.0, 8.0][rng.random_range(0..3)] / 255.0;
        let k = [1usize, 2, 4][rng.random_range(0..3)];
        let batch = data.batch(chunk);
        let cfg = AttackConfig { epsilon: eps, ..AttackConfig::evaluation(k) };
        let (adv, _) = generate_adversarial(&det, &batch, &cfg, Phase::Eval).unwrap();
        for (a, c) in adv.pixels.iter().zip(batch.pixels.iter()) {
            if !(*a >= c - eps && *a <= c + eps && (0.0..=1.0).contains(a)) {
                violations += 1;
            }
            changed += usize::from(a != c);
        }
    }
    outcome(violations == 0 && changed > 0, format!("1000 images, random eps in {{2,4,8}}/255 and k in {{1,2,4}}: {violations} violations ({changed} pixels moved)"))
}

// ---------------------------------------------------------------- 7

fn random_instance(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<DetectionSet>, Vec<BoxSet>) {
    let images = rng.random_range(1..5);
    let classes = rng.random_range(1..4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let count = rng.random_range(0..5);
        let g = random_boxes(rng, count, 32, 32, classes);
        let mut d = DetectionSet::default();
        for _ in 0..rng.random_range(0..9) {
            let (b, l) = if !g.is_empty() && rng.random_bool(0.7) {
                let j = rng.random_range(0..g.len());
                let mut jitter = |v: f32| (v + rng.random_range(-2.0..2.0)).clamp(0.0, 32.0);
                let b = g.boxes[j];
                let mut nb = [jitter(b[0]), jitter(b[1]), jitter(b[2]), jitter(b[3])];
                nb[2] = nb[2].max(nb[0] + 1.0);
                nb[3] = nb[3].max(nb[1] + 1.0);
                let l = if rng.random_bool(0.85) { g.labels[j] } else { rng.random_range(0..classes) };
                (nb, l)
            } else {
                (random_boxes(rng, 1, 32, 32, classes).boxes[0], rng.random_range(0..classes))
            };
            d.boxes.push(b);
            d.labels.push(l);
            d.scores.push(rng.random_range(0.0..1.0f32));
        }
        dets.push(d);
        gts.push(g);
    }
    if gts.iter().all(|g| g.is_empty()) {
        gts[0] = random_boxes(rng, 1, 32, 32, classes);
    }
    (dets, gts)
}

fn criterion_7() -> Outcome {
    let mut rng = rng(707);
    let thresholds = coco_thresholds();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (dets, gts) = random_instance(&mut rng);
        let ours = ap_per_threshold(&dets, &gts, &thresholds).unwrap();
        for (&thr, v) in thresholds.iter().zip(&ours) {
            worst = worst.max((v - oracle_ap(&dets, &gts, thr).unwrap()).abs());
        }
    }
    let gt = vec![BoxSet::new(vec![[0.0, 0.0, 10.0, 10.0]], vec![0]).unwrap()];
    let det = vec![DetectionSet { boxes: vec![[0.0, 0.0, 10.0, 6.0]], scores: vec![0.9], labels: vec![0] }];
    let hand = average_precision(&det, &gt).unwrap();
    let hand_ok = hand.ap50 == 100.0 && hand.ap75 == 0.0;
    outcome(
        worst <= 1e-9 && hand_ok,
        format!("500 random instances x 10 thresholds, max |AP - oracle| = {worst:.1e}; IoU-0.6 hand case AP50={}, AP75={}", hand.ap50, hand.ap75),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let exact = mpc(&[vec![40.0, 20.0], vec![30.0, 10.0]]).unwrap();
    let mut rng = rng(808);
    let mut worst: f64 = 0.0;
    let mut grand: f64 = 0.0;
    for _ in 0..2000 {
        let (nc, ns) = (rng.random_range(1..20), rng.random_range(1..8));
        let c: f64 = (rng.random_range(0.0..100.0f64) * 100.0).round() / 100.0;
        let v = mpc(&vec![vec![c; ns]; nc]).unwrap();
        worst = worst.max((v - c).abs() / c.max(1.0));
        let m: Vec<Vec<f64>> = (0..nc).map(|_| (0..ns).map(|_| rng.random_range(0.0..100.0)).collect()).collect();
        let flat = m.iter().flatten().sum::<f64>() / (nc * ns) as f64;
        grand = grand.max((mpc(&m).unwrap() - flat).abs());
    }
    outcome(
        exact == 25.0 && worst <= 1e-14 && grand <= 1e-9,
        format!("[[40,20],[30,10]] -> {exact}; 2000 fuzzed constant matrices max rel error {worst:.1e}; grand-mean identity max error {grand:.1e}"),
    )
}

// ---------------------------------------------------------------- 9 and 10

fn adv_ap50(r: &udfa::eval::MetricReport) -> f64 {
    r.adv_per_step.get(&1).map_or(f64::NAN, |a| a.ap50)
}

fn criteria_9_10() -> (Outcome, Outcome) {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let first = run_experiment(&cfg, dir.path().join("a")).unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    println!("INFO reference experiment:\n{}", first.table);
    let row = |label: &str| first.reports.iter().find(|r| r.label == label).unwrap();
    let (pre, std, udfa) = (row("PRE"), row("STD"), row("UDFA"));
    let a = udfa.clean.ap50 >= std.clean.ap50 - 0.5;
    let b = adv_ap50(udfa) >= adv_ap50(std) + 2.0;
    let c = adv_ap50(udfa) >= adv_ap50(pre) + 2.0;
    let fast = minutes <= 45.0;
    let nine = outcome(
        a && b && c && fast,
        format!(
            "(a) clean AP50 UDFA {:.2} vs STD {:.2} - 0.5: {a}; (b) PGD-1 adv AP50 UDFA {:.2} vs STD {:.2} + 2: {b}; (c) vs teacher {:.2} + 2: {c}; runtime {minutes:.1} min (limit 45)",
            udfa.clean.ap50,
            std.clean.ap50,
            adv_ap50(udfa),
            adv_ap50(std),
            adv_ap50(pre)
        ),
    );

    let second = run_experiment(&cfg, dir.path().join("b")).unwrap();
    let bytes = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same_jsonl = bytes(&first.dir, "reports.jsonl") == bytes(&second.dir, "reports.jsonl");
    let same_table = bytes(&first.dir, "report.txt") == bytes(&second.dir, "report.txt");
    let ten = outcome(
        same_jsonl && same_table,
        format!("two reference runs: reports.jsonl identical {same_jsonl}, report.txt identical {same_table}"),
    );
    (nine, ten)
}

fn main() {
    // libtest-style flags (e.g. --nocapture, filters) are accepted and ignored
    let skip_experiment = std::env::var_os("UDFA_ACCEPTANCE_SKIP_EXPERIMENT").is_some_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} criterion {id} ({name}): {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };
    run(1, "gradient correctness", &criterion_1);
    run(2, "triangle inequality", &criterion_2);
    run(3, "stop-gradient", &criterion_3);
    run(4, "AdvProp isolation", &criterion_4);
    run(5, "loss reductions", &criterion_5);
    run(6, "PGD containment", &criterion_6);
    run(7, "AP oracle", &criterion_7);
    run(8, "mPC arithmetic", &criterion_8);
    if skip_experiment {
        println!("SKIP criterion 9 (desk-scale experiment)");
        println!("SKIP criterion 10 (determinism)");
    } else {
        let t = Instant::now();
        let (nine, ten) = criteria_9_10();
        let secs = t.elapsed().as_secs_f64();
        for (id, name, o) in [(9, "desk-scale experiment", nine), (10, "determinism", ten)] {
            println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((id, name, o, secs));
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
