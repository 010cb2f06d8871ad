//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! `cargo test --test acceptance` (about 20 minutes on one core).

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forestlens::dataset::{compute_score_changes, ChangeBaseline, Cohort};
use forestlens::metrics::{gini, roc_auc, r2_to_auc, weighted_split_gini, ClassCounts};
use forestlens::pipeline::{
    run_baselines, run_change_pipeline, run_sweep, search_fold_plan, FeatureSet, SweepConfig,
};
use forestlens::synth::{generate_cohort, structure_recovery_score, CohortSpec};
use forestlens::tree::{fit_tree, FeatureMatrix, Mtry, Target, TrainingData, TreeParams};
use forestlens::Label;

const MASTER_SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn label(b: bool) -> Label {
    if b {
        Label::High
    } else {
        Label::Low
    }
}

fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        if !li.is_high() {
            continue;
        }
        for (j, lj) in labels.iter().enumerate() {
            if lj.is_high() {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        let labels: Vec<Label> = (0..n).map(|_| label(rng.random_bool(0.4))).collect();
        if labels.iter().all(|l| l.is_high()) || labels.iter().all(|l| !l.is_high()) {
            continue;
        }
        // coarse grid for roughly half the instances so ties are common
        let grid = if rng.random_bool(0.5) { Some(rng.random_range(2..10)) } else { None };
        let scores: Vec<f64> = (0..n)
            .map(|_| match grid {
                Some(g) => f64::from(rng.random_range(0..g)) / f64::from(g),
                None => rng.random::<f64>(),
            })
            .collect();
        let got = roc_auc(&scores, &labels).unwrap();
        worst = worst.max((got - pairwise_auc(&scores, &labels)).abs());
        done += 1;
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(10),
        format!("max |auc - pairwise| = {worst:.1e} over 1000 instances in {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut ok = gini(ClassCounts::new(3, 1)).unwrap() == 0.375;
    for k in 1..100u64 {
        ok &= gini(ClassCounts::new(k, k)).unwrap() == 0.5;
        ok &= gini(ClassCounts::new(k, 0)).unwrap() == 0.0;
        ok &= gini(ClassCounts::new(0, k)).unwrap() == 0.0;
    }
    let exact = ok;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let (lh, ll, rh, rl) = (
            rng.random_range(0..60u64),
            rng.random_range(0..60u64),
            rng.random_range(0..60u64),
            rng.random_range(0..60u64),
        );
        if lh + ll == 0 || rh + rl == 0 {
            continue;
        }
        let parent = gini(ClassCounts::new(lh + rh, ll + rl)).unwrap();
        let split = weighted_split_gini(ClassCounts::new(lh, ll), ClassCounts::new(rh, rl)).unwrap();
        if split > parent + 1e-12 {
            violations += 1;
        }
    }
    outcome(
        exact && violations == 0,
        format!("exact values {}, {violations} splits above parent impurity", if exact { "ok" } else { "WRONG" }),
    )
}

/// Weighted Gini sum (not normalized) of one leaf.
fn leaf_cost(labels: &[Label], rows: &[usize]) -> f64 {
    let h = rows.iter().filter(|&&r| labels[r].is_high()).count() as f64;
    let n = rows.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let l = n - h;
    n * (1.0 - (h / n).powi(2) - (l / n).powi(2))
}

/// Every split of `rows` with both sides non-empty.
fn all_splits(x: &[Vec<f64>], rows: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for f in 0..x[0].len() {
        let vals: BTreeSet<u64> = rows.iter().map(|&r| x[r][f].to_bits()).collect();
        let mut vals: Vec<f64> = vals.into_iter().map(f64::from_bits).collect();
        vals.sort_by(f64::total_cmp);
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x[r][f] <= t);
            out.push((l, r));
        }
    }
    out
}

fn best_depth1(x: &[Vec<f64>], labels: &[Label], rows: &[usize]) -> f64 {
    all_splits(x, rows)
        .iter()
        .map(|(l, r)| leaf_cost(labels, l) + leaf_cost(labels, r))
        .fold(leaf_cost(labels, rows), f64::min)
}

/// Global optimum over all trees of depth at most 2.
fn exhaustive_depth2(x: &[Vec<f64>], labels: &[Label]) -> f64 {
    let rows: Vec<usize> = (0..x.len()).collect();
    let best = all_splits(x, &rows)
        .iter()
        .map(|(l, r)| best_depth1(x, labels, l) + best_depth1(x, labels, r))
        .fold(leaf_cost(labels, &rows), f64::min);
    best / x.len() as f64
}

/// Root chosen as the best single split, children optimized independently.
fn per_node_depth2(x: &[Vec<f64>], labels: &[Label]) -> f64 {
    let rows: Vec<usize> = (0..x.len()).collect();
    let splits = all_splits(x, &rows);
    let mut root: Option<(f64, &(Vec<usize>, Vec<usize>))> = None;
    for s in &splits {
        let c = leaf_cost(labels, &s.0) + leaf_cost(labels, &s.1);
        if root.is_none_or(|(b, _)| c < b - 1e-12) {
            root = Some((c, s));
        }
    }
    match root {
        Some((c, (l, r))) if c < leaf_cost(labels, &rows) - 1e-12 => {
            (best_depth1(x, labels, l) + best_depth1(x, labels, r)) / x.len() as f64
        }
        _ => leaf_cost(labels, &rows) / x.len() as f64,
    }
}

fn criterion_3() -> (Outcome, Outcome) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = TreeParams {
        max_depth: 2,
        min_leaf: 1,
        mtry: Mtry::All,
        ..TreeParams::default()
    };
    let (mut global_miss, mut node_miss) = (0, 0);
    let mut worst_gap = 0.0f64;
    for draw in 0..1000u64 {
        let n = rng.random_range(2..=8);
        let p = rng.random_range(1..=3);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| f64::from(rng.random_range(0..4u8))).collect())
            .collect();
        let labels: Vec<Label> = (0..n).map(|_| label(rng.random_bool(0.5))).collect();
        let m = FeatureMatrix::from_rows(x.iter().map(Vec::as_slice)).unwrap();
        let raw = vec![0.0; n];
        let data = TrainingData::new(&m, Target::Labels(&labels), &raw).unwrap();
        let tree = fit_tree(&data, &params, &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
        let got = tree.training_impurity();
        let global = exhaustive_depth2(&x, &labels);
        if (got - global).abs() > 1e-12 {
            global_miss += 1;
            worst_gap = worst_gap.max(got - global);
        }
        if (got - per_node_depth2(&x, &labels)).abs() > 1e-12 {
            node_miss += 1;
        }
    }
    let elapsed = t.elapsed();
    (
        outcome(
            global_miss == 0 && elapsed < Duration::from_secs(60),
            format!(
                "{global_miss}/1000 draws above the global depth-2 optimum (largest gap {worst_gap:.4}) in {elapsed:.2?}"
            ),
        ),
        outcome(
            node_miss == 0,
            format!("{node_miss}/1000 draws differ from the per-node exhaustive split oracle"),
        ),
    )
}

fn criterion_4() -> Outcome {
    let a = r2_to_auc(0.018).unwrap();
    let z = r2_to_auc(0.0).unwrap();
    outcome(
        (0.575..=0.585).contains(&a) && z == 0.5,
        format!("r2_to_auc(0.018) = {a:.4}, r2_to_auc(0) = {z}"),
    )
}

fn criterion_5(cohort: &Cohort) -> Outcome {
    let plan = search_fold_plan(cohort, 1000, &mut forestlens::rng::stream(0, 1)).unwrap();
    let total = cohort.students().len() as f64;
    let shares: Vec<f64> = plan.folds.iter().map(|f| f.students.len() as f64 / total).collect();
    let in_range = shares.iter().all(|s| (0.15..=0.25).contains(s));
    let mut fold_of = BTreeMap::new();
    let mut spans = 0;
    for (k, f) in plan.folds.iter().enumerate() {
        for s in &f.students {
            if fold_of.insert(s.clone(), k).is_some() {
                spans += 1;
            }
        }
    }
    let eps = cohort.evaluation_periods();
    for (k, f) in plan.folds.iter().enumerate() {
        spans += f.ep_indices.iter().filter(|&&i| fold_of.get(&eps[i].student_id) != Some(&k)).count();
    }
    let covered = fold_of.len() == cohort.students().len();
    outcome(
        in_range && plan.sse <= 0.01 && spans == 0 && covered,
        format!(
            "student shares {:?}, SSE {:.4}, {spans} students or EPs outside their fold",
            shares.iter().map(|s| format!("{:.3}", s)).collect::<Vec<_>>(),
            plan.sse
        ),
    )
}

struct ScoreRun {
    root: Option<usize>,
    recovery: f64,
    whole_auc: f64,
    elapsed: Duration,
}

fn score_runs() -> Vec<ScoreRun> {
    (0..MASTER_SEEDS)
        .map(|s| {
            let t = Instant::now();
            let cohort = generate_cohort(&CohortSpec {
                seed: s,
                ..CohortSpec::default()
            })
            .unwrap();
            let cfg = SweepConfig {
                master_seed: s,
                baselines: false,
                ..SweepConfig::default()
            };
            let r = run_sweep(&cohort.cohort, &cfg).unwrap();
            let run = ScoreRun {
                root: r.final_model.tree.root_feature(),
                recovery: structure_recovery_score(&r.final_model.tree, &cohort.rule),
                whole_auc: r.whole_dataset_auc,
                elapsed: t.elapsed(),
            };
            eprintln!(
                "  seed {s}: recovery {:.2}, whole-dataset AUC {:.3}, {:.1?}",
                run.recovery, run.whole_auc, run.elapsed
            );
            run
        })
        .collect()
}

fn criterion_6(runs: &[ScoreRun]) -> Outcome {
    let mean = runs.iter().map(|r| r.recovery).sum::<f64>() / runs.len() as f64;
    let min_auc = runs.iter().map(|r| r.whole_auc).fold(f64::INFINITY, f64::min);
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
    outcome(
        mean >= 0.8 && min_auc >= 0.75 && slowest < Duration::from_secs(300),
        format!(
            "mean recovery {mean:.3} over {} seeds, min whole-dataset AUC {min_auc:.3}, slowest seed {slowest:.1?}",
            runs.len()
        ),
    )
}

fn criterion_7(cohort: &Cohort) -> Outcome {
    let (table, _) = run_baselines(cohort, &SweepConfig::default()).unwrap();
    let row = |fs| table.row(fs).unwrap();
    let (c, talk, its) = (row(FeatureSet::Combined), row(FeatureSet::Talk), row(FeatureSet::Its));
    eprint!("{}", table.to_csv());
    outcome(
        c.extracted_dt - c.dt >= 0.03 && c.extracted_dt > talk.extracted_dt && c.extracted_dt > its.extracted_dt,
        format!(
            "extracted DT combined {:.3} vs plain DT {:.3}, talk-only {:.3}, ITS-only {:.3}",
            c.extracted_dt, c.dt, talk.extracted_dt, its.extracted_dt
        ),
    )
}

fn criterion_8(runs: &[ScoreRun], default_cohort: &Cohort) -> Outcome {
    let mut same = 0;
    for (s, run) in runs.iter().enumerate() {
        let cohort = generate_cohort(&CohortSpec {
            seed: s as u64,
            ..CohortSpec::default()
        })
        .unwrap();
        let cfg = SweepConfig {
            master_seed: s as u64,
            baselines: false,
            ..SweepConfig::for_changes()
        };
        let r = run_change_pipeline(&cohort.cohort, &cfg, ChangeBaseline::Zero).unwrap();
        let root = r.final_model.tree.root_feature();
        eprintln!("  seed {s}: change root {root:?}, score root {:?}", run.root);
        if root == run.root {
            same += 1;
        }
    }
    let changes = compute_score_changes(default_cohort, ChangeBaseline::Zero);
    let (students, eps) = (changes.students().len(), changes.len());
    outcome(
        same >= 16 && students == 968 && eps == 4012,
        format!("{same}/{} roots agree; change cohort {students} students / {eps} EPs", runs.len()),
    )
}

fn criterion_9() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_forestlens");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let run = |args: &[&std::ffi::OsStr]| {
        let status = Command::new(bin).args(args).env("RUST_LOG", "warn").status().unwrap();
        assert!(status.success(), "forestlens {args:?} failed");
    };
    run(&["synth".as_ref(), "--seed".as_ref(), "7".as_ref(), "--out".as_ref(), data.as_os_str()]);
    let outs: Vec<_> = ["r1", "r2"].iter().map(|r| dir.path().join(r)).collect();
    for out in &outs {
        run(&["run".as_ref(), "--cohort".as_ref(), data.as_os_str(), "--out".as_ref(), out.as_os_str()]);
    }
    let mut differing = Vec::new();
    for f in ["manifest.json", "report.json", "table3.csv", "final_tree.dot"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        if a != b {
            differing.push(f);
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "two full CLI runs: manifest, report.json, table3.csv and final_tree.dot byte-identical".to_string()
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

fn main() {
    // `cargo test -- --list` and filters from the test harness land here too.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let mut report = |name: &str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name.to_string());
        }
    };

    report("1 (AUC oracle)", criterion_1());
    report("2 (Gini exactness)", criterion_2());
    let (global, per_node) = criterion_3();
    report("3 (tree vs exhaustive depth-2 optimum)", global);
    println!(
        "{} diagnostic 3b (tree vs per-node exhaustive split): {}",
        if per_node.pass { "PASS" } else { "FAIL" },
        per_node.detail
    );
    report("4 (R² to AUC anchor)", criterion_4());
    let default_cohort = generate_cohort(&CohortSpec::default()).unwrap().cohort;
    report("5 (fold search)", criterion_5(&default_cohort));
    let runs = score_runs();
    report("6 (structure recovery)", criterion_6(&runs));
    report("7 (method ordering)", criterion_7(&default_cohort));
    report("8 (change pipeline)", criterion_8(&runs, &default_cohort));
    report("9 (determinism)", criterion_9());

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
