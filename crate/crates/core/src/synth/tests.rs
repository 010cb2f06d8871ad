use super::*;
use crate::dataset::{binarize, Feature};
use crate::metrics::{roc_auc, Label};

fn default_cohort() -> SyntheticCohort {
    generate_cohort(&CohortSpec::default()).unwrap()
}

#[test]
fn table_one_totals() {
    let s = default_cohort();
    assert_eq!(s.cohort.students().len(), 1080);
    assert_eq!(s.cohort.len(), 4124);
    assert_eq!(s.cohort.tutors().len(), 46);
    let mut per_student: BTreeMap<&StudentId, usize> = BTreeMap::new();
    for ep in s.cohort.evaluation_periods() {
        *per_student.entry(&ep.student_id).or_default() += 1;
        assert!((0.0..=30.0).contains(&ep.outcome));
        assert_eq!(ep.outcome.fract(), 0.0);
    }
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for n in per_student.values() {
        *hist.entry(*n).or_default() += 1;
    }
    assert_eq!(hist, BTreeMap::from([(1, 112), (2, 65), (3, 127), (4, 379), (5, 397)]));
}

#[test]
fn group_sizes_within_range() {
    let s = default_cohort();
    let mut by_session_group: BTreeMap<(String, NaiveDate), usize> = BTreeMap::new();
    for sess in &s.logs.sessions {
        let n = by_session_group.entry((sess.tutor_id.0.clone(), sess.date)).or_default();
        *n = (*n).max(sess.attendees.len());
        assert!(sess.attendees.len() <= 6);
    }
    let ratios: Vec<f64> = s.logs.roster.iter().map(|r| r.attendance_ratio).collect();
    assert!(ratios.iter().all(|r| *r >= 0.5 && *r <= 1.0));
}

#[test]
fn regeneration_is_identical_and_reassembles() {
    let a = default_cohort();
    let b = default_cohort();
    assert_eq!(a.cohort, b.cohort);
    assert_eq!(a.logs, b.logs);
    let other = generate_cohort(&CohortSpec { seed: 1, ..CohortSpec::default() }).unwrap();
    assert_ne!(a.cohort, other.cohort);

    let dir = tempfile::tempdir().unwrap();
    a.write_dir(dir.path()).unwrap();
    let logs = RawLogs::load_dir(dir.path()).unwrap();
    let cohort =
        assemble_evaluation_periods(&logs.sessions, &logs.its, &logs.assessments, &logs.roster, &AssemblyConfig::default())
            .unwrap();
    assert_eq!(cohort, a.cohort);
    assert_eq!(read_planted_rule(dir.path().join(PLANTED_RULE_FILE)).unwrap(), a.rule);
}

#[test]
fn noiseless_real_outcomes_equal_leaf_means() {
    let spec = CohortSpec {
        noise_sd: 0.0,
        outcome_mode: OutcomeMode::Real,
        ..CohortSpec::default()
    };
    let s = generate_cohort(&spec).unwrap();
    for ep in s.cohort.evaluation_periods() {
        assert_eq!(ep.outcome, s.rule.mean_of(&ep.features));
    }
}

#[test]
fn leaf_means_converge() {
    let s = default_cohort();
    let mut by_leaf: [Vec<f64>; 4] = Default::default();
    for ep in s.cohort.evaluation_periods() {
        by_leaf[s.rule.leaf_of(&ep.features)].push(ep.outcome);
    }
    for (leaf, ys) in by_leaf.iter().enumerate() {
        let n = ys.len() as f64;
        assert!(n > 100.0, "leaf {leaf} has {n} rows");
        let mean = ys.iter().sum::<f64>() / n;
        let planted = s.rule.leaf_means()[leaf];
        assert!((mean - planted).abs() <= 2.0 * 4.0 / n.sqrt(), "leaf {leaf}: {mean} vs {planted}");
    }
}

#[test]
fn planted_tree_is_a_strong_oracle() {
    let s = default_cohort();
    let b = binarize(&s.cohort, 20.0).unwrap();
    let scores: Vec<f64> = s.cohort.evaluation_periods().iter().map(|ep| s.rule.mean_of(&ep.features)).collect();
    let auc = roc_auc(&scores, &b.labels).unwrap();
    assert!(auc >= 0.78, "{auc}");
    assert!(b.labels.contains(&Label::Low));
}

#[test]
fn planted_routing_trace() {
    let rule = PlantedRule::default();
    let mut x = [0.0; 11];
    x[Feature::OpportunitiesToMaster.index()] = 6.0;
    x[Feature::Revoicing.index()] = 4.5;
    assert_eq!(rule.leaf_of(&x), 3);
    assert_eq!(rule.mean_of(&x), 22.8);
    let tree = rule.as_tree();
    assert_eq!(tree.leaf_index(&x).unwrap(), 3);
    assert_eq!(tree.predict_value(&x).unwrap(), 22.8);
}

#[test]
fn recovery_scores() {
    let rule = PlantedRule::default();
    assert_eq!(structure_recovery_score(&rule.as_tree(), &rule), 1.0);
    let leaf = || Box::new(TreeNode::Leaf { value: LeafValue::Mean(0.0), annotation: RawAnnotation { n: 0, mean: 0.0, sd: 0.0 } });
    let wrong_children = TreeNode::Split {
        feature: rule.root_feature,
        threshold: 4.6,
        left: Box::new(TreeNode::Split { feature: 0, threshold: 2.0, left: leaf(), right: leaf() }),
        right: leaf(),
    };
    assert!((structure_recovery_score(&wrong_children, &rule) - 1.0 / 3.0).abs() < 1e-12);
    let off_threshold = TreeNode::Split { feature: rule.root_feature, threshold: 5.5, left: leaf(), right: leaf() };
    assert_eq!(structure_recovery_score(&off_threshold, &rule), 0.0);
    assert_eq!(structure_recovery_score(&leaf(), &rule), 0.0);
}

#[test]
fn infeasible_specs() {
    let spec = CohortSpec {
        n_tutors: 600,
        ..CohortSpec::default()
    };
    assert!(matches!(generate_cohort(&spec), Err(Error::InfeasibleSpec(_))));
    let spec = CohortSpec {
        group_size_weights: vec![1.0],
        ..CohortSpec::default()
    };
    assert!(generate_cohort(&spec).is_err());
    let spec = CohortSpec {
        assessment_counts: BTreeMap::from([(6, 10)]),
        ..CohortSpec::default()
    };
    assert!(generate_cohort(&spec).is_err());
}

#[test]
fn feature_marginals_match_calibration() {
    let s = default_cohort();
    let eps = s.cohort.evaluation_periods();
    let share = |f: Feature, t: f64| eps.iter().filter(|ep| ep.features[f.index()] > t).count() as f64 / eps.len() as f64;
    let opp = share(Feature::OpportunitiesToMaster, 4.0);
    let press = share(Feature::PressForReasoning, 2.0);
    let revoice = share(Feature::Revoicing, 3.0);
    assert!((0.4..0.6).contains(&opp), "{opp}");
    assert!((0.7..0.9).contains(&press), "{press}");
    assert!((0.1..0.3).contains(&revoice), "{revoice}");
}
