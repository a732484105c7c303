//! Library-level pipeline beneath the CLI: generate, fit, score, replay.

use subgoal_core::datagen::{
    build_data_matrix, gen_color3, gen_driving, load_dataset, save_dataset, ColorMode, Course, GeneratorKind, TaskPath,
};
use subgoal_core::policy::{execute_task, ExecutionConfig};
use subgoal_core::seqnmf::{fit_masked, load_fit, save_fit, SeqNmfConfig};
use subgoal_core::subgoals::{evaluate_fit, BoundaryRule};

#[test]
fn color3_dataset_to_scores() {
    let ds = gen_color3(ColorMode::Conditional, 12, 60, 0.1, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();

    let dm = build_data_matrix(&ds).unwrap();
    assert_eq!(dm.x.cols(), 12 * 60 + 11);
    let cfg = SeqNmfConfig {
        max_iter: 60,
        seed: 2,
        ..SeqNmfConfig::for_generator(GeneratorKind::Color3Conditional)
    };
    let mask = dm.mask();
    let fit = fit_masked(&dm.x, Some(&mask), &cfg).unwrap();
    assert_eq!(fit, fit_masked(&dm.x, Some(&mask), &cfg).unwrap());
    let first = fit.loss_trace[0].reconstruction;
    assert!(fit.final_loss.reconstruction < first);

    // Separator columns contribute nothing to the fitted objective.
    let mut x = dm.x.clone();
    for (c, keep) in mask.iter().enumerate() {
        if !keep {
            (0..x.rows()).for_each(|r| x[(r, c)] = 0.5);
        }
    }
    assert_eq!(fit_masked(&x, Some(&mask), &cfg).unwrap().loss_trace, fit.loss_trace);

    let rule = BoundaryRule::for_generator(GeneratorKind::Color3Conditional, cfg.l);
    let eval = evaluate_fit(&ds, &dm, &fit.o, &fit.h, rule, 1).unwrap();
    assert_eq!(eval.trajectories.len(), 12);
    assert_eq!(eval.boundary_count_histogram().values().sum::<usize>(), 12);
    assert_eq!(eval.pooled.n_truth, 12 * 19);
    assert!((0.0..=1.0).contains(&eval.pooled.f1));

    let out = tempfile::tempdir().unwrap();
    save_fit(&fit, &cfg, out.path()).unwrap();
    let (back, back_cfg) = load_fit(out.path()).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_eq!(evaluate_fit(&ds, &dm, &back.o, &back.h, rule, 1).unwrap(), eval);
}

#[test]
fn driving_fit_drives_both_tasks_within_budget() {
    let ds = gen_driving(4, 11).unwrap();
    let dm = build_data_matrix(&ds).unwrap();
    assert_eq!(dm.x.rows(), 4);
    let cfg = SeqNmfConfig {
        max_iter: 20,
        ..SeqNmfConfig::for_generator(GeneratorKind::Driving)
    };
    let fit = fit_masked(&dm.x, Some(&dm.mask()), &cfg).unwrap();
    let course = Course::default();
    let exec = ExecutionConfig::for_pattern_length(cfg.l);
    for path in [TaskPath::from_task(0).unwrap(), TaskPath::from_task(1).unwrap()] {
        let rollout = execute_task(course.start_state(path), &fit.o, &dm.norm, &course, &exec).unwrap();
        assert!(rollout.steps <= exec.max_steps);
        assert_eq!(rollout.states.len(), rollout.steps + 1);
        assert_eq!(rollout.actions.len(), rollout.steps);
        assert!(rollout.subgoals.iter().all(|&j| j < cfg.j));
        // Replayed steering stays inside the demonstrated action range.
        let (lo, hi) = (dm.norm.min[3], dm.norm.max[3]);
        assert!(rollout.actions.iter().all(|a| (lo - 1e-12..=hi + 1e-12).contains(a)));
    }
}
