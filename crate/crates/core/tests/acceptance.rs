//! Acceptance run: one PASS/FAIL line per criterion, on the default
//! configuration with seeds 1..5.
//!
//! The toy-model comparison (criterion 8) is reported but does not fail the
//! process; every other criterion does. See the README for why it fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use alignlab::checks::{counting_suite, degeneracy_suite, gradient_suite, bellman_suite, GRADIENT_LOSSES, GRADIENT_TOLERANCE};
use alignlab::frozen_lake::{
    make_trajectories, run_grid_experiment, runs_to_csv, shipped_map, value_iteration, GridRun, OrderingVerdict,
    RewardSpec, CONVERGENCE_TOLERANCE,
};
use alignlab::reporting::load_config;
use alignlab::toy_lm::{run_toy_experiment, toy_runs_to_csv, ToyRun, ToyVerdict};

const NON_GATING: [usize; 1] = [8];

struct Line {
    id: usize,
    ok: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id} {tag}: {detail}");
    lines.push(Line { id, ok, detail });
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn main() -> ExitCode {
    let cfg = load_config("", &[], None).expect("defaults resolve");
    let seeds: Vec<u64> = (1..=5).collect();
    let spec = shipped_map();
    let mut lines = Vec::new();

    // 7 first: everything else trains against this oracle.
    let oracle = value_iteration(&spec, cfg.discount, RewardSpec::default()).expect("oracle");
    let residual = oracle.fixed_point_residual(&spec);
    let (optimal, _) = make_trajectories(&spec, &oracle).expect("trajectories");
    let bfs = spec.shortest_path().expect("gift reachable");
    let follows = optimal.visited(&spec) == bfs;
    report(
        &mut lines,
        7,
        oracle.sweeps < 1000 && residual < CONVERGENCE_TOLERANCE && follows,
        format!("{} sweeps, residual {residual:.2e}, greedy rollout equals bfs path: {follows}", oracle.sweeps),
    );

    let t = Instant::now();
    let grid: Vec<GridRun> =
        run_grid_experiment(&spec, &oracle, &cfg.grid_methods, &seeds, &cfg.grid).expect("grid runs");
    let grid_time = t.elapsed();
    let verdict = OrderingVerdict::from_runs(&grid);
    report(
        &mut lines,
        1,
        verdict.passed() && grid_time < Duration::from_secs(300),
        format!("{} ({:.1}s)", verdict.line(), secs(grid_time)),
    );

    let t = Instant::now();
    let cases = gradient_suite(6, 2024).expect("gradient suite");
    let grad_time = t.elapsed();
    let per_loss = GRADIENT_LOSSES.map(|l| cases.iter().filter(|c| c.loss == l).count());
    let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let largest = cases.iter().map(|c| c.params).max().unwrap_or(0);
    report(
        &mut lines,
        2,
        cases.iter().all(|c| c.passed)
            && per_loss.iter().all(|&n| n >= 3)
            && largest <= 2000
            && grad_time < Duration::from_secs(60),
        format!(
            "{} cases over {} losses, worst relative error {worst:.2e} (tol {GRADIENT_TOLERANCE:.0e}), \
             largest model {largest} params ({:.2}s)",
            cases.len(),
            GRADIENT_LOSSES.len(),
            secs(grad_time)
        ),
    );

    let s = degeneracy_suite(100, 7).expect("degeneracy");
    report(&mut lines, 3, s.passed(), format!("{} cases, worst gap {:.2e} (tol {:.0e})", s.cases, s.worst, s.tolerance));

    let s = counting_suite(16).expect("counting");
    report(&mut lines, 4, s.passed(), format!("N = 1..{}, worst error {}", s.cases, s.worst));

    let t = Instant::now();
    let toy: Vec<ToyRun> = run_toy_experiment(&cfg.toy, &cfg.toy_methods, &seeds).expect("toy runs");
    let toy_time = t.elapsed();

    let fixtures = bellman_suite(100, 13).expect("bellman");
    let bellman = grid
        .iter()
        .map(|r| r.max_bellman_residual)
        .chain(toy.iter().map(|r| r.max_bellman_residual))
        .fold(fixtures.worst, f64::max);
    report(
        &mut lines,
        5,
        bellman <= 1e-9,
        format!("{} grid runs, {} toy runs, {} fixtures; worst residual {bellman:.2e}", grid.len(), toy.len(), fixtures.cases),
    );

    let checked: usize = grid.iter().map(|r| r.corollary_checked).sum::<usize>()
        + toy.iter().map(|r| r.corollary_checked).sum::<usize>();
    let failures: usize = grid.iter().map(|r| r.corollary_failures).sum::<usize>()
        + toy.iter().map(|r| r.corollary_failures).sum::<usize>();
    let gaps_finite = grid.iter().map(|r| r.max_corollary_gap).chain(toy.iter().map(|r| r.max_corollary_gap)).all(f64::is_finite);
    let losses_finite = grid.iter().all(|r| r.loss_history.iter().all(|l| l.is_finite()))
        && toy.iter().all(|r| r.records.iter().all(|l| l.total.is_finite()));
    report(
        &mut lines,
        6,
        checked > 0 && failures == 0 && gaps_finite && losses_finite,
        format!("{checked} states checked, {failures} failures, gaps finite: {gaps_finite}, losses finite: {losses_finite}"),
    );

    let toy_verdict = ToyVerdict::from_runs(&toy);
    report(&mut lines, 8, toy_verdict.passed(), format!("{} ({:.1}s)", toy_verdict.line(), secs(toy_time)));

    let grid_again = run_grid_experiment(&spec, &oracle, &cfg.grid_methods, &seeds, &cfg.grid).expect("grid rerun");
    let toy_again = run_toy_experiment(&cfg.toy, &cfg.toy_methods, &seeds).expect("toy rerun");
    let same_grid = runs_to_csv(&grid) == runs_to_csv(&grid_again);
    let same_toy = toy_runs_to_csv(&toy) == toy_runs_to_csv(&toy_again);
    let same_records = toy.iter().zip(&toy_again).all(|(a, b)| a.records == b.records);
    report(
        &mut lines,
        9,
        same_grid && same_toy && same_records,
        format!("frozen lake csv identical: {same_grid}, toy csv identical: {same_toy}, loss records identical: {same_records}"),
    );

    lines.sort_by_key(|l| l.id);
    let gating: Vec<&Line> = lines.iter().filter(|l| !l.ok && !NON_GATING.contains(&l.id)).collect();
    let known: Vec<&Line> = lines.iter().filter(|l| !l.ok && NON_GATING.contains(&l.id)).collect();
    let passed = lines.iter().filter(|l| l.ok).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    for l in &known {
        println!("known failure, criterion {}: {}", l.id, l.detail);
    }
    if gating.is_empty() {
        ExitCode::SUCCESS
    } else {
        for l in gating {
            eprintln!("criterion {} failed: {}", l.id, l.detail);
        }
        ExitCode::FAILURE
    }
}
