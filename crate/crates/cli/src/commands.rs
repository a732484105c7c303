use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use subgoal_core::citest::{run_ci_suite, CiConfig};
use subgoal_core::datagen::{
    build_data_matrix, gen_color10, gen_color3, gen_driving, load_dataset, save_dataset, Color, ColorMode, Course,
    DataMatrix, Dataset, GeneratorKind, NormalizationInfo, TaskPath, COLOR10_TEMPLATES,
};
use subgoal_core::policy::{execute_task, ExecutionConfig};
use subgoal_core::seqnmf::{fit_masked, load_fit, save_fit, FitResult, SeqNmfConfig};
use subgoal_core::subgoals::{block_coverage, color_signature, evaluate_fit, to_subgoal_matrix, BoundaryRule, FitEval};
use subgoal_core::tensorops::conv_forward;

use crate::config::{resolve, ConfigFile, Overrides, RunManifest};
use crate::plot;
use crate::{CitestArgs, Cli, Command, EvalArgs, FitArgs, GenerateArgs, NmfArgs, RolloutArgs};

/// Written next to the factors by `fit`; lets `eval` and `rollout` map the
/// normalized patterns back to environment units.
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub generator: GeneratorKind,
    pub dataset: PathBuf,
    pub normalization: NormalizationInfo,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct DatasetConfig {
    n_seq: usize,
    t: usize,
    noise_sd: f64,
    n_per_task: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_seq: 100,
            t: 300,
            noise_sd: 0.1,
            n_per_task: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct EvalConfig {
    seeds: usize,
    tol: usize,
    rule: BoundaryRule,
    plots: usize,
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    file: ConfigFile,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli.out,
        file,
    };
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Citest(a) => citest(&ctx, a),
        Command::Fit(a) => fit(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Rollout(a) => rollout(&ctx, a),
    }
}

fn write_file(out: &Path, manifest: &mut RunManifest, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn load(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let kind: GeneratorKind = a.generator.parse()?;
    let mut flags = Overrides::default();
    flags
        .set("n_seq", a.n_seq)
        .set("t", a.t)
        .set("noise_sd", a.noise_sd)
        .set("n_per_task", a.n_per_task);
    let cfg: DatasetConfig = resolve(DatasetConfig::default(), ctx.file.dataset.as_ref(), &flags)?;
    let ds = match kind {
        GeneratorKind::Color3Simple => gen_color3(ColorMode::Simple, cfg.n_seq, cfg.t, cfg.noise_sd, ctx.seed)?,
        GeneratorKind::Color3Conditional => {
            gen_color3(ColorMode::Conditional, cfg.n_seq, cfg.t, cfg.noise_sd, ctx.seed)?
        }
        GeneratorKind::Color10 => gen_color10(cfg.n_seq, cfg.t, cfg.noise_sd, ctx.seed)?,
        GeneratorKind::Driving => gen_driving(cfg.n_per_task, ctx.seed)?,
    };
    let manifest_path = save_dataset(&ds, &ctx.out)?;
    let mut run = RunManifest::new("generate", ctx.seed, json!({ "generator": kind, "dataset": cfg }));
    run.outputs.extend(fs::read_dir(&ctx.out)?.filter_map(|e| {
        let name = e.ok()?.file_name().into_string().ok()?;
        (name != crate::config::RUN_MANIFEST_FILE).then_some(name)
    }));
    run.write(&ctx.out)?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn citest(ctx: &Ctx, a: CitestArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let mut flags = Overrides::default();
    flags
        .set("alpha", a.alpha)
        .set("independence_floor", a.independence_floor)
        .set("subsets", a.subsets)
        .set("subset_fraction", a.subset_fraction)
        .set("seed", Some(ctx.seed));
    let cfg: CiConfig = resolve(CiConfig::default(), ctx.file.ci.as_ref(), &flags)?;
    let report = run_ci_suite(&ds, &cfg)?;
    let mut run = RunManifest::new("citest", ctx.seed, serde_json::to_value(cfg)?);
    run.inputs.push(a.dataset.clone());
    write_file(
        &ctx.out,
        &mut run,
        "ci_report.json",
        serde_json::to_string_pretty(&report)?,
    )?;
    let table = report.table();
    write_file(&ctx.out, &mut run, "ci_table.txt", &table)?;
    run.write(&ctx.out)?;
    println!("Dataset: {} ({} trajectories)", ds.meta.generator, ds.len());
    print!("{table}");
    if report.selection_confirmed {
        println!("selection confirmed");
    } else {
        println!("note: selection not confirmed");
    }
    Ok(())
}

fn nmf_overrides(n: &NmfArgs, seed: u64) -> Overrides {
    let mut flags = Overrides::default();
    flags
        .set("j", n.j)
        .set("l", n.l)
        .set("lambda_bin", n.lambda_bin)
        .set("lambda_1", n.lambda_1)
        .set("lambda_sim", n.lambda_sim)
        .set("max_iter", n.max_iter)
        .set("start_bin_loss_iter", n.start_bin_loss_iter)
        .set("tolerance", n.tolerance)
        .set("l1_gradient", n.l1_gradient.map(subgoal_core::seqnmf::L1Gradient::from))
        .set("seed", Some(seed));
    flags
}

fn nmf_config(ctx: &Ctx, kind: GeneratorKind, n: &NmfArgs) -> Result<SeqNmfConfig> {
    let cfg: SeqNmfConfig = resolve(
        SeqNmfConfig::for_generator(kind),
        ctx.file.seqnmf.as_ref(),
        &nmf_overrides(n, ctx.seed),
    )?;
    cfg.validate()?;
    Ok(cfg)
}

fn model_info(ds: &Dataset, dm: &DataMatrix, dataset: &Path) -> ModelInfo {
    ModelInfo {
        generator: ds.meta.generator,
        dataset: dataset.to_path_buf(),
        normalization: dm.norm.clone(),
        state_dim: dm.state_dim,
        action_dim: dm.action_dim,
    }
}

fn loss_svg(fit: &FitResult) -> String {
    let col = |f: fn(&subgoal_core::seqnmf::LossBreakdown) -> f64| fit.loss_trace.iter().map(f).collect::<Vec<_>>();
    plot::line_chart(
        "Loss trace",
        &[
            ("total", col(|l| l.total)),
            ("reconstruction", col(|l| l.reconstruction)),
            ("r_bin", col(|l| l.r_bin)),
            ("r_1", col(|l| l.r_1)),
            ("r_sim", col(|l| l.r_sim)),
        ],
        true,
    )
}

fn fit(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let cfg = nmf_config(ctx, ds.meta.generator, &a.nmf)?;
    let dm = build_data_matrix(&ds)?;
    let result = fit_masked(&dm.x, Some(&dm.mask()), &cfg).context("fitting")?;
    save_fit(&result, &cfg, &ctx.out)?;
    let mut run = RunManifest::new("fit", ctx.seed, serde_json::to_value(cfg)?);
    run.inputs.push(a.dataset.clone());
    run.outputs.extend(
        [
            subgoal_core::seqnmf::O_FILE,
            subgoal_core::seqnmf::H_FILE,
            subgoal_core::seqnmf::LOSS_TRACE_FILE,
            subgoal_core::seqnmf::FIT_CONFIG_FILE,
        ]
        .map(String::from),
    );
    let info = model_info(&ds, &dm, &a.dataset);
    write_file(&ctx.out, &mut run, MODEL_FILE, serde_json::to_string_pretty(&info)?)?;
    write_file(&ctx.out, &mut run, "loss_trace.svg", loss_svg(&result))?;
    run.write(&ctx.out)?;
    println!(
        "fit: {} iterations (converged: {}), final reconstruction {:.6}, dead factors {:?}",
        result.iterations_run, result.converged, result.final_loss.reconstruction, result.dead_factors
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunMetrics {
    seed: u64,
    precision: f64,
    recall: f64,
    f1: f64,
    f1_tol0: f64,
    n_pred: usize,
    n_truth: usize,
    boundary_count_histogram: BTreeMap<usize, usize>,
    fraction_three_runs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    color10: Option<Color10Summary>,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    iterations_run: usize,
    converged: bool,
    reconstruction_reduction: f64,
    h_binary_fraction: f64,
}

#[derive(Debug, Serialize)]
struct Color10Summary {
    signatures: Vec<Vec<Color>>,
    templates_matched: bool,
    block_coverage: f64,
}

/// Fraction of `H` entries within 0.1 of 0 or 1 (above 1 allowed up to 1.1).
pub fn binary_fraction(h: &subgoal_core::Matrix) -> f64 {
    let s = h.as_slice();
    s.iter().filter(|&&v| v <= 0.1 || (0.9..=1.1).contains(&v)).count() as f64 / s.len().max(1) as f64
}

fn template_signature(t: &[Color; 10]) -> Vec<Color> {
    let mut v: Vec<Color> = t.to_vec();
    v.dedup();
    v
}

fn color10_summary(ds: &Dataset, dm: &DataMatrix, fit: &FitResult, ev: &FitEval) -> Color10Summary {
    let signatures: Vec<Vec<Color>> = (0..fit.o.factors())
        .map(|j| color_signature(&fit.o, j, &dm.norm, 2))
        .collect();
    let templates: Vec<Vec<Color>> = COLOR10_TEMPLATES.iter().map(template_signature).collect();
    let templates_matched = templates.iter().all(|t| signatures.contains(t)) && signatures.len() == templates.len();
    let covered: usize = ds
        .trajectories
        .iter()
        .zip(&ev.trajectories)
        .map(|(tr, te)| block_coverage(&te.predicted, tr.len(), 10, 1))
        .sum();
    Color10Summary {
        signatures,
        templates_matched,
        block_coverage: covered as f64 / ds.total_steps().max(1) as f64,
    }
}

fn metrics_for(seed: u64, ds: &Dataset, dm: &DataMatrix, fit: &FitResult, ev: &FitEval, ev0: &FitEval) -> RunMetrics {
    let initial = fit.loss_trace[0].reconstruction;
    RunMetrics {
        seed,
        precision: ev.pooled.precision,
        recall: ev.pooled.recall,
        f1: ev.pooled.f1,
        f1_tol0: ev0.pooled.f1,
        n_pred: ev.pooled.n_pred,
        n_truth: ev.pooled.n_truth,
        boundary_count_histogram: ev.boundary_count_histogram(),
        fraction_three_runs: ev.fraction_with_runs(3),
        fit: Some(FitSummary {
            iterations_run: fit.iterations_run,
            converged: fit.converged,
            reconstruction_reduction: if initial > 0.0 {
                1.0 - fit.final_loss.reconstruction / initial
            } else {
                0.0
            },
            h_binary_fraction: binary_fraction(&fit.h),
        }),
        color10: (ds.meta.generator == GeneratorKind::Color10).then(|| color10_summary(ds, dm, fit, ev)),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let kind = ds.meta.generator;
    let cfg = nmf_config(ctx, kind, &a.nmf)?;
    let mut flags = Overrides::default();
    flags.set("seeds", a.seeds).set("tol", a.tol).set("plots", a.plots);
    let defaults = EvalConfig {
        seeds: 1,
        tol: 1,
        rule: BoundaryRule::for_generator(kind, cfg.l),
        plots: 5,
    };
    let ecfg: EvalConfig = resolve(defaults, ctx.file.eval.as_ref(), &flags)?;
    if ecfg.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut run = RunManifest::new(
        "eval",
        ctx.seed,
        json!({ "seqnmf": cfg, "eval": ecfg, "self_eval": a.self_eval }),
    );
    run.inputs.push(a.dataset.clone());

    if a.self_eval {
        let parts: Vec<_> = ds
            .trajectories
            .iter()
            .map(|t| subgoal_core::subgoals::boundary_metrics(&t.boundaries, &t.boundaries, ecfg.tol))
            .collect();
        let pooled = subgoal_core::subgoals::BoundaryMetrics::pooled(&parts);
        let metrics = json!({
            "self_eval": true, "tol": ecfg.tol, "seed": ctx.seed,
            "precision": pooled.precision, "recall": pooled.recall, "f1": pooled.f1,
        });
        write_file(
            &ctx.out,
            &mut run,
            "metrics.json",
            serde_json::to_string_pretty(&metrics)?,
        )?;
        run.write(&ctx.out)?;
        println!(
            "self-eval: precision {:.3} recall {:.3} F1 {:.3}",
            pooled.precision, pooled.recall, pooled.f1
        );
        return Ok(());
    }

    let dm = build_data_matrix(&ds)?;
    let fits: Vec<(u64, FitResult)> = match &a.fit {
        Some(dir) => {
            let (fit, fit_cfg) = load_fit(dir).with_context(|| format!("loading fit {}", dir.display()))?;
            if let Some(j) = a.nmf.j.or_else(|| {
                ctx.file
                    .seqnmf
                    .as_ref()
                    .and_then(|v| v.get("j")?.as_u64())
                    .map(|j| j as usize)
            }) {
                if j != fit.o.factors() {
                    bail!(
                        "J mismatch: eval requested J = {j} but the fit has J = {}",
                        fit.o.factors()
                    );
                }
            }
            if fit.h.cols() != dm.x.cols() {
                bail!(
                    "fit has {} columns but the dataset matrix has {}; was it fitted on this dataset?",
                    fit.h.cols(),
                    dm.x.cols()
                );
            }
            run.inputs.push(dir.clone());
            vec![(fit_cfg.seed, fit)]
        }
        None => {
            let seeds: Vec<u64> = (0..ecfg.seeds as u64).map(|k| ctx.seed + k).collect();
            let mask = dm.mask();
            std::thread::scope(|s| {
                let handles: Vec<_> = seeds
                    .iter()
                    .map(|&seed| {
                        let (x, mask) = (&dm.x, &mask);
                        s.spawn(move || fit_masked(x, Some(mask), &SeqNmfConfig { seed, ..cfg }).map(|f| (seed, f)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("fit thread panicked"))
                    .collect::<subgoal_core::Result<Vec<_>>>()
            })?
        }
    };

    let mut runs = Vec::with_capacity(fits.len());
    for (seed, fit) in &fits {
        let ev = evaluate_fit(&ds, &dm, &fit.o, &fit.h, ecfg.rule, ecfg.tol)?;
        let ev0 = evaluate_fit(&ds, &dm, &fit.o, &fit.h, ecfg.rule, 0)?;
        runs.push(metrics_for(*seed, &ds, &dm, fit, &ev, &ev0));
    }
    let f1s: Vec<f64> = runs.iter().map(|r| r.f1).collect();
    let (mean, std) = mean_std(&f1s);
    let metrics = json!({
        "generator": kind, "tol": ecfg.tol, "rule": ecfg.rule,
        "mean_f1": mean, "std_f1": std, "runs": runs,
    });
    write_file(
        &ctx.out,
        &mut run,
        "metrics.json",
        serde_json::to_string_pretty(&metrics)?,
    )?;

    // Plots for the first fit.
    let (seed0, fit0) = &fits[0];
    let ev = evaluate_fit(&ds, &dm, &fit0.o, &fit0.h, ecfg.rule, ecfg.tol)?;
    let g = to_subgoal_matrix(&fit0.o, &fit0.h)?;
    let ranges = dm.trajectory_ranges();
    for (i, r) in ranges.iter().enumerate().take(ecfg.plots) {
        let svg = plot::dominance(
            &format!("trajectory {i} (seed {seed0})"),
            &g.slice(r.clone()).g,
            &ds.trajectories[i].boundaries,
            &ev.trajectories[i].predicted,
        );
        write_file(&ctx.out, &mut run, &format!("dominance/traj_{i:04}.svg"), svg)?;
    }
    if let Some(r) = ranges.first() {
        let xt = conv_forward(&fit0.o, &fit0.h)?;
        let svg = plot::composite(
            &format!("H, O and reconstruction, trajectory 0 (seed {seed0})"),
            &fit0.h.columns(r.start, r.end),
            &fit0.o,
            &dm.x.columns(r.start, r.end),
            &xt.columns(r.start, r.end),
        );
        write_file(&ctx.out, &mut run, "composite.svg", svg)?;
    }
    run.write(&ctx.out)?;

    println!(
        "{kind}: F1 {mean:.3} ± {std:.3} over {} fit(s) (tol = {})",
        runs.len(),
        ecfg.tol
    );
    for r in &runs {
        println!(
            "  seed {}: precision {:.3} recall {:.3} F1 {:.3} (tol 0: {:.3})",
            r.seed, r.precision, r.recall, r.f1, r.f1_tol0
        );
    }
    if kind == GeneratorKind::Driving {
        println!(
            "  boundary counts per trajectory: {:?}",
            runs[0].boundary_count_histogram
        );
    }
    Ok(())
}

fn rollout(ctx: &Ctx, a: RolloutArgs) -> Result<()> {
    let model_path = a.fit.join(MODEL_FILE);
    let info: ModelInfo = serde_json::from_str(
        &fs::read_to_string(&model_path).with_context(|| format!("reading {}", model_path.display()))?,
    )?;
    if info.generator != GeneratorKind::Driving {
        bail!(
            "rollout needs a driving fit, but {} was fitted on {}",
            a.fit.display(),
            info.generator
        );
    }
    let (fit, fit_cfg) = load_fit(&a.fit)?;
    let mut flags = Overrides::default();
    flags
        .set("max_steps", a.max_steps)
        .set("epsilon", a.epsilon)
        .set("max_subtask_steps", a.max_subtask_steps);
    let cfg: ExecutionConfig = resolve(
        ExecutionConfig::for_pattern_length(fit_cfg.l),
        ctx.file.execution.as_ref(),
        &flags,
    )?;
    cfg.validate()?;
    let course = Course::default();
    let mut run = RunManifest::new("rollout", ctx.seed, serde_json::to_value(cfg)?);
    run.inputs.push(a.fit.clone());
    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    for path in [TaskPath::Yellow, TaskPath::Blue] {
        let task = path.task_id();
        let r = execute_task(course.start_state(path), &fit.o, &info.normalization, &course, &cfg)?;
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        write_file(&ctx.out, &mut run, &format!("rollout_task{task}.csv"), buf)?;
        let s = r.summary();
        println!(
            "task {task}: terminated {} after {} steps, {} subgoal switches",
            s.terminated, s.steps, s.switches
        );
        summaries.push(json!({ "task": task, "summary": s }));
        traces.push((format!("task {task}"), r.states));
    }
    let named: Vec<(&str, &[[f64; 3]])> = traces.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    write_file(&ctx.out, &mut run, "course.svg", plot::course_overlay(&course, &named))?;
    write_file(
        &ctx.out,
        &mut run,
        "summary.json",
        serde_json::to_string_pretty(&Value::Array(summaries))?,
    )?;
    run.write(&ctx.out)?;
    Ok(())
}
