//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Thresholds are fixed; a failing criterion
//! is reported, never relaxed.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture` to see
//! the report even when everything passes.

mod common;

use std::fmt::Write as _;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use subgoal_core::citest::{partial_corr_pvalue, run_ci_suite, stratified_ci_pvalue, CiConfig, Protocol};
use subgoal_core::datagen::{
    build_data_matrix, gen_color10, gen_color3, gen_driving, Color, ColorMode, Course, DataMatrix, Dataset,
    GeneratorKind, TaskPath, COLOR10_TEMPLATES,
};
use subgoal_core::policy::{execute_task, ExecutionConfig};
use subgoal_core::seqnmf::{fit_masked, renormalize, update_h, update_o, FitResult, SeqNmfConfig};
use subgoal_core::subgoals::{block_coverage, color_signature, evaluate_fit, BoundaryRule, FitEval};
use subgoal_core::tensorops::{conv_forward, conv_transpose};
use subgoal_core::{Matrix, Tensor3};

// Dataset sizes used by `subgoal generate` without flags.
const N_SEQ: usize = 100;
const T: usize = 300;
const NOISE_SD: f64 = 0.1;
const N_PER_TASK: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

struct Fitted {
    ds: Dataset,
    dm: DataMatrix,
    fit: FitResult,
    cfg: SeqNmfConfig,
    elapsed: Duration,
}

fn fit_dataset(ds: Dataset, seed: u64) -> Fitted {
    let dm = build_data_matrix(&ds).unwrap();
    let cfg = SeqNmfConfig {
        seed,
        ..SeqNmfConfig::for_generator(ds.meta.generator)
    };
    let start = Instant::now();
    let fit = fit_masked(&dm.x, Some(&dm.mask()), &cfg).unwrap();
    let elapsed = start.elapsed();
    Fitted {
        ds,
        dm,
        fit,
        cfg,
        elapsed,
    }
}

impl Fitted {
    fn eval(&self, tol: usize) -> FitEval {
        let rule = BoundaryRule::for_generator(self.ds.meta.generator, self.cfg.l);
        evaluate_fit(&self.ds, &self.dm, &self.fit.o, &self.fit.h, rule, tol).unwrap()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criterion 1: Color-3 boundary F1 over 5 seeds, both modes, and fit time.
fn color3_boundaries(fits: &[(ColorMode, Vec<Fitted>)]) -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for (mode, runs) in fits {
        let f1: Vec<f64> = runs.iter().map(|r| r.eval(1).pooled.f1).collect();
        let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
        let m = mean(&f1);
        pass &= m >= 0.95 && slowest < Duration::from_secs(120);
        let _ = write!(
            detail,
            "{mode:?}: mean F1 {m:.3} (per seed {}), slowest fit {:.1}s; ",
            f1.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "),
            slowest.as_secs_f64()
        );
    }
    Outcome::new(pass, format!("{detail}need mean F1 >= 0.95 and < 120 s per fit"))
}

/// Criterion 2: Color-10 template signatures and block coverage.
fn color10_patterns(run: &Fitted) -> Outcome {
    let sigs: Vec<Vec<Color>> = (0..run.fit.o.factors())
        .map(|j| color_signature(&run.fit.o, j, &run.dm.norm, 2))
        .collect();
    let templates: Vec<Vec<Color>> = COLOR10_TEMPLATES
        .iter()
        .map(|t| {
            let mut v = t.to_vec();
            v.dedup();
            v
        })
        .collect();
    let matched = sigs.len() == templates.len() && templates.iter().all(|t| sigs.contains(t));
    let ev = run.eval(1);
    let covered: usize = run
        .ds
        .trajectories
        .iter()
        .zip(&ev.trajectories)
        .map(|(tr, te)| block_coverage(&te.predicted, tr.len(), 10, 1))
        .sum();
    let coverage = covered as f64 / run.ds.total_steps() as f64;
    Outcome::new(
        matched && coverage >= 0.9,
        format!(
            "signatures {sigs:?} vs templates {templates:?} (matched: {matched}); \
             blocks of 10±1 cover {:.1}% of steps (need >= 90%)",
            100.0 * coverage
        ),
    )
}

/// Criterion 3: selection confirmed on every color dataset at alpha 0.01.
fn color_ci() -> Outcome {
    let cfg = CiConfig::default();
    assert_eq!((cfg.alpha, cfg.independence_floor), (0.01, 0.1));
    let datasets = [
        (
            "color3-simple",
            gen_color3(ColorMode::Simple, N_SEQ, T, NOISE_SD, 0).unwrap(),
        ),
        (
            "color3-conditional",
            gen_color3(ColorMode::Conditional, N_SEQ, T, NOISE_SD, 0).unwrap(),
        ),
        ("color10", gen_color10(N_SEQ, T, NOISE_SD, 0).unwrap()),
    ];
    let mut pass = true;
    let mut detail = String::new();
    for (name, ds) in &datasets {
        let report = run_ci_suite(ds, &cfg).unwrap();
        pass &= report.selection_confirmed;
        let ps: Vec<String> = report
            .records
            .iter()
            .map(|r| format!("({}){}={:.3}", r.condition, &r.protocol.name()[..1], r.mean_p))
            .collect();
        let _ = write!(detail, "{name}: {} [{}]; ", report.selection_confirmed, ps.join(" "));
    }
    Outcome::new(pass, format!("{detail}need (1),(2) p < 0.01 and (3) p > 0.1"))
}

/// Criterion 4: the Driving thresholds, per condition and protocol.
fn driving_ci(ds: &Dataset) -> Outcome {
    let cfg = CiConfig {
        alpha: 0.05,
        ..CiConfig::default()
    };
    let report = run_ci_suite(ds, &cfg).unwrap();
    let p = |c: u8, pr: Protocol| report.record(c, pr).unwrap().mean_p;
    let checks = [
        (
            "(1) single < 0.01",
            p(1, Protocol::SingleStep),
            p(1, Protocol::SingleStep) < 0.01,
        ),
        (
            "(2) single < 0.05",
            p(2, Protocol::SingleStep),
            p(2, Protocol::SingleStep) < 0.05,
        ),
        (
            "(2) multi < 0.05",
            p(2, Protocol::MultiStep),
            p(2, Protocol::MultiStep) < 0.05,
        ),
        (
            "(3) single > 0.05",
            p(3, Protocol::SingleStep),
            p(3, Protocol::SingleStep) > 0.05,
        ),
        (
            "(3) multi > 0.1",
            p(3, Protocol::MultiStep),
            p(3, Protocol::MultiStep) > 0.1,
        ),
    ];
    Outcome::new(
        checks.iter().all(|c| c.2),
        checks
            .iter()
            .map(|(what, p, ok)| format!("{what}: {p:.2e} {}", if *ok { "ok" } else { "MISS" }))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Criterion 5: Driving trajectories split into exactly three labeled runs.
fn driving_segments(run: &Fitted) -> Outcome {
    let ev = run.eval(1);
    let frac = ev.fraction_with_runs(3);
    let mut runs = std::collections::BTreeMap::new();
    for t in &ev.trajectories {
        *runs.entry(t.labeled_runs).or_insert(0usize) += 1;
    }
    Outcome::new(
        frac >= 0.9,
        format!(
            "{:.0}% of {} trajectories have exactly 3 labeled runs (need >= 90%); runs histogram {runs:?}; dead factors {:?}",
            100.0 * frac,
            ev.trajectories.len(),
            run.fit.dead_factors
        ),
    )
}

/// Criterion 6: kernels and L = 1 updates against the oracles.
fn oracle_equivalence() -> Outcome {
    let (mut conv, mut adj, mut nmf) = (0.0f64, 0.0f64, 0.0f64);
    let mut rng = common::rng(606);
    for _ in 0..100 {
        let (d, j, l, t) = (
            rng.random_range(1..=12),
            rng.random_range(1..=6),
            rng.random_range(1..=12),
            rng.random_range(1..=40),
        );
        let o = common::random_tensor(&mut rng, d, j, l);
        let h = common::random_matrix(&mut rng, j, t);
        let x = common::random_matrix(&mut rng, d, t);
        let fwd = conv_forward(&o, &h).unwrap();
        let tr = conv_transpose(&o, &x).unwrap();
        conv = conv
            .max(common::rel_err(&common::to_rows(&fwd), &common::conv_forward(&o, &h)))
            .max(common::rel_err(&common::to_rows(&tr), &common::conv_transpose(&o, &x)));
        let (lhs, rhs) = (fwd.inner(&x).unwrap(), h.inner(&tr).unwrap());
        adj = adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));

        let w = common::random_matrix(&mut rng, d, j);
        let o1 = Tensor3::from_lag_slices(std::slice::from_ref(&w)).unwrap();
        let cfg = SeqNmfConfig {
            j,
            l: 1,
            ..SeqNmfConfig::default()
        }
        .unregularized();
        let h1 = update_h(&x, &o1, &h, &cfg, 1).unwrap();
        let o2 = update_o(&x, &o1, &h1, &cfg).unwrap();
        let (w_ref, h_ref) = common::lee_seung_step(&x, &w, &h, cfg.epsilon_div);
        nmf = nmf
            .max(common::rel_err_m(&h1, &h_ref))
            .max(common::rel_err_m(&o2.lag_slice(0), &w_ref));
    }
    Outcome::new(
        conv <= 1e-12 && adj <= 1e-10 && nmf <= 1e-10,
        format!(
            "100 instances: conv max rel err {conv:.1e} (<= 1e-12), adjointness {adj:.1e} (<= 1e-10), \
             L=1 vs classic NMF {nmf:.1e} (<= 1e-10)"
        ),
    )
}

/// One step of the fit loop through the public update functions.
fn step(x: &Matrix, o: &Tensor3, h: &Matrix, cfg: &SeqNmfConfig, iter: usize) -> (Tensor3, Matrix) {
    let mut h = update_h(x, o, h, cfg, iter).unwrap();
    let mut o = o.clone();
    renormalize(&mut o, &mut h);
    let o = update_o(x, &o, &h, cfg).unwrap();
    (o, h)
}

/// Criterion 7: nonnegativity, unregularized descent and planted recovery.
fn optimization_invariants(all_fits: &[&FitResult]) -> Outcome {
    let mut rng = common::rng(707);
    let mut negative = 0usize;
    let mut worst_rise = f64::NEG_INFINITY;
    for instance in 0..100 {
        let (d, j, l, t) = (
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(1..=12),
        );
        let x = common::random_matrix(&mut rng, d, t);
        let mut o = common::random_tensor(&mut rng, d, j, l);
        let mut h = common::random_matrix(&mut rng, j, t);
        let plain = SeqNmfConfig {
            j,
            l,
            ..SeqNmfConfig::default()
        }
        .unregularized();
        // Odd instances run with the penalties, for nonnegativity only.
        let regularized = SeqNmfConfig {
            j,
            l,
            start_bin_loss_iter: 5,
            ..SeqNmfConfig::default()
        };
        let cfg = if instance % 2 == 0 { plain } else { regularized };
        let mut prev = common::frob_sq(&x.zip_map(&conv_forward(&o, &h).unwrap(), |a, b| a - b).unwrap());
        for iter in 1..=50 {
            (o, h) = step(&x, &o, &h, &cfg, iter);
            if o.min() < 0.0 || h.min() < 0.0 || !o.is_finite() || !h.is_finite() {
                negative += 1;
            }
            let rec = common::frob_sq(&x.zip_map(&conv_forward(&o, &h).unwrap(), |a, b| a - b).unwrap());
            if instance % 2 == 0 {
                worst_rise = worst_rise.max(rec - prev);
            }
            prev = rec;
        }
    }
    negative += all_fits.iter().filter(|f| f.o.min() < 0.0 || f.h.min() < 0.0).count();

    // Planted: binary H*, random O*, X = O* ∗ H* scaled into [0, 1].
    let (d, j, l, t) = (6, 3, 8, 400);
    let o_star = common::random_tensor(&mut rng, d, j, l);
    let h_star = Matrix::from_fn(j, t, |_, _| if rng.random::<f64>() < 0.03 { 1.0 } else { 0.0 });
    let x = conv_forward(&o_star, &h_star).unwrap();
    let x = x.scale(1.0 / x.max());
    let cfg = SeqNmfConfig {
        j,
        l,
        seed: 7,
        ..SeqNmfConfig::default()
    };
    let planted = fit_masked(&x, None, &cfg).unwrap();
    let ratio = planted.final_loss.reconstruction / common::frob_sq(&x);

    Outcome::new(
        negative == 0 && worst_rise <= 1e-10 && ratio < 1e-4,
        format!(
            "negative/non-finite iterates: {negative}; largest unregularized rise over 50 instances x 50 iterations: \
             {worst_rise:.1e} (<= 1e-10); planted recovery loss/||X||^2 = {ratio:.1e} (< 1e-4)"
        ),
    )
}

/// Criterion 8: false rejections on conditionally independent data.
fn ci_calibration() -> Outcome {
    let mut rejections = [[0usize; 2]; 2];
    let n = 300;
    for seed in 0..200u64 {
        let mut rng = common::rng(10_000 + seed);
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let z: Vec<f64> = (0..n).map(|_| normal()).collect();
        let g: Vec<usize> = z.iter().map(|&v| usize::from(v > 0.0)).collect();
        // x and y both depend on z (and on g through it) but not on each other.
        let x: Vec<f64> = z.iter().map(|&v| 0.8 * v + normal()).collect();
        let y: Vec<f64> = z.iter().map(|&v| -0.5 * v + normal()).collect();
        let p_plain = partial_corr_pvalue(&x, &y, std::slice::from_ref(&z)).unwrap();
        let p_strat = stratified_ci_pvalue(&x, &y, &g, std::slice::from_ref(&z)).unwrap();
        for (k, alpha) in [0.01, 0.05].into_iter().enumerate() {
            rejections[0][k] += usize::from(p_plain < alpha);
            rejections[1][k] += usize::from(p_strat < alpha);
        }
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, row) in ["partial correlation", "stratified"].iter().zip(rejections) {
        for (alpha, count) in [0.01, 0.05].into_iter().zip(row) {
            let rate = count as f64 / 200.0;
            pass &= (rate - alpha).abs() <= 0.03;
            detail.push(format!("{name} at {alpha}: {rate:.3}"));
        }
    }
    Outcome::new(pass, format!("{} (need alpha ± 0.03, 200 seeds)", detail.join(", ")))
}

/// Criterion 9: playback finishes both Driving tasks.
fn rollouts(run: &Fitted) -> Outcome {
    let course = Course::default();
    let exec = ExecutionConfig::for_pattern_length(run.cfg.l);
    assert_eq!(exec.max_steps, 200);
    let mut pass = true;
    let mut detail = Vec::new();
    for task in 0..2 {
        let path = TaskPath::from_task(task).unwrap();
        let r = execute_task(course.start_state(path), &run.fit.o, &run.dm.norm, &course, &exec).unwrap();
        let s = r.summary();
        pass &= s.terminated && s.steps <= 200 && s.switches >= 2;
        detail.push(format!(
            "task {task}: terminated {} after {} steps, {} switches, final x {:.2}",
            s.terminated, s.steps, s.switches, s.final_state[0]
        ));
    }
    Outcome::new(
        pass,
        format!(
            "{} (need terminated within 200 steps, >= 2 switches)",
            detail.join("; ")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let color3 = |mode: ColorMode| -> Vec<Fitted> {
        thread::scope(|s| {
            let handles: Vec<_> = (0..5u64)
                .map(|seed| s.spawn(move || fit_dataset(gen_color3(mode, N_SEQ, T, NOISE_SD, seed).unwrap(), seed)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    };
    let (c3, c10, drive, driving_ds) = thread::scope(|s| {
        let c10 = s.spawn(|| fit_dataset(gen_color10(N_SEQ, T, NOISE_SD, 0).unwrap(), 0));
        let drive = s.spawn(|| {
            let ds = gen_driving(N_PER_TASK, 0).unwrap();
            (fit_dataset(ds.clone(), 0), ds)
        });
        let c3 = vec![
            (ColorMode::Simple, color3(ColorMode::Simple)),
            (ColorMode::Conditional, color3(ColorMode::Conditional)),
        ];
        let (drive, ds) = drive.join().unwrap();
        (c3, c10.join().unwrap(), drive, ds)
    });
    assert_eq!(drive.ds.meta.generator, GeneratorKind::Driving);

    let mut all_fits: Vec<&FitResult> = c3.iter().flat_map(|(_, v)| v.iter().map(|r| &r.fit)).collect();
    all_fits.extend([&c10.fit, &drive.fit]);

    let results = [
        color3_boundaries(&c3),
        color10_patterns(&c10),
        color_ci(),
        driving_ci(&driving_ds),
        driving_segments(&drive),
        oracle_equivalence(),
        optimization_invariants(&all_fits),
        ci_calibration(),
        rollouts(&drive),
    ];

    let mut report = String::from("\nacceptance report\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(
            report,
            "criterion {}: {} - {}",
            i + 1,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    report.push_str(
        "criterion 10: NOT CLAIMED - Kitchen transfer returns need MuJoCo and adversarial RL training; \
         the playback logic they rely on is exercised by criterion 9\n",
    );
    println!("{report}");
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.pass)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
