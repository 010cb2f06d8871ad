//! Synthetic cohorts with a planted depth-2 interaction rule.
//!
//! The generator writes raw logs (sessions, ITS snapshots, assessments,
//! roster), assembles them with the dataset module and only then draws
//! outcomes from the planted rule applied to the assembled features. Loading
//! the written CSVs and assembling them again therefore reproduces the
//! cohort exactly in score mode.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    assemble_evaluation_periods, AssemblyConfig, AssessmentRecord, Cohort, Feature, ItsSnapshot, RawLogs,
    RosterEntry, SessionLog, StudentId, TutorId, FEATURE_NAMES, ITS_FEATURE_COUNT, MAX_SCORE, TALK_MOVE_COUNT,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tree::{LeafValue, RawAnnotation, TreeNode};

pub const PLANTED_RULE_FILE: &str = "planted_rule.json";
pub const COHORT_FILE: &str = "cohort.csv";

/// Assessment dates of the five rounds.
pub fn default_assessment_dates() -> [NaiveDate; 5] {
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
    [d(2022, 8, 29), d(2022, 10, 24), d(2023, 1, 23), d(2023, 3, 20), d(2023, 5, 22)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSplit {
    pub feature: usize,
    pub threshold: f64,
    /// Outcome means of the ≤ and > leaves below this split.
    pub leaf_means: [f64; 2],
}

/// Root split with one child split on each side; x ≤ threshold goes left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub root_feature: usize,
    pub root_threshold: f64,
    pub left: PlantedSplit,
    pub right: PlantedSplit,
}

impl Default for PlantedRule {
    /// Few opportunities (high mastery) split on press for reasoning; many
    /// opportunities split on revoicing.
    fn default() -> Self {
        Self {
            root_feature: Feature::OpportunitiesToMaster.index(),
            root_threshold: 4.0,
            left: PlantedSplit {
                feature: Feature::PressForReasoning.index(),
                threshold: 2.0,
                leaf_means: [15.7, 22.7],
            },
            right: PlantedSplit {
                feature: Feature::Revoicing.index(),
                threshold: 3.0,
                leaf_means: [15.2, 22.8],
            },
        }
    }
}

impl PlantedRule {
    pub fn validate(&self) -> Result<()> {
        for s in [&self.left, &self.right] {
            if s.feature >= FEATURE_NAMES.len() {
                return Err(Error::InfeasibleSpec(format!("feature index {} out of range", s.feature)));
            }
            if s.leaf_means.iter().any(|m| !(0.0..=f64::from(MAX_SCORE)).contains(m)) {
                return Err(Error::InfeasibleSpec("leaf means must lie in [0, 30]".into()));
            }
        }
        if self.root_feature >= FEATURE_NAMES.len() {
            return Err(Error::InfeasibleSpec("root feature out of range".into()));
        }
        Ok(())
    }

    /// Leaf index 0..4 in left-to-right order.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let (split, base) = if x[self.root_feature] <= self.root_threshold {
            (&self.left, 0)
        } else {
            (&self.right, 2)
        };
        base + usize::from(x[split.feature] > split.threshold)
    }

    pub fn leaf_means(&self) -> [f64; 4] {
        [
            self.left.leaf_means[0],
            self.left.leaf_means[1],
            self.right.leaf_means[0],
            self.right.leaf_means[1],
        ]
    }

    pub fn mean_of(&self, x: &[f64]) -> f64 {
        self.leaf_means()[self.leaf_of(x)]
    }

    /// The rule as a regression tree predicting the leaf means.
    pub fn as_tree(&self) -> TreeNode {
        let leaf = |m: f64| {
            Box::new(TreeNode::Leaf {
                value: LeafValue::Mean(m),
                annotation: RawAnnotation { n: 0, mean: m, sd: 0.0 },
            })
        };
        let child = |s: &PlantedSplit| {
            Box::new(TreeNode::Split {
                feature: s.feature,
                threshold: s.threshold,
                left: leaf(s.leaf_means[0]),
                right: leaf(s.leaf_means[1]),
            })
        };
        TreeNode::Split {
            feature: self.root_feature,
            threshold: self.root_threshold,
            left: child(&self.left),
            right: child(&self.right),
        }
    }
}

/// Share of `tree`'s three split positions (root, ≤ child, > child) that
/// match the rule's feature with a threshold within ±1. Children only count
/// under a matching root.
pub fn structure_recovery_score(tree: &TreeNode, rule: &PlantedRule) -> f64 {
    const TOLERANCE: f64 = 1.0;
    let matches = |node: &TreeNode, feature: usize, threshold: f64| match node {
        TreeNode::Split {
            feature: f,
            threshold: t,
            ..
        } => *f == feature && (t - threshold).abs() <= TOLERANCE,
        TreeNode::Leaf { .. } => false,
    };
    if !matches(tree, rule.root_feature, rule.root_threshold) {
        return 0.0;
    }
    let TreeNode::Split { left, right, .. } = tree else {
        unreachable!()
    };
    let mut score = 1.0;
    if matches(left, rule.left.feature, rule.left.threshold) {
        score += 1.0;
    }
    if matches(right, rule.right.feature, rule.right.threshold) {
        score += 1.0;
    }
    score / 3.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    /// Clamped to [0, 30] and rounded, as recorded in assessments.
    #[default]
    Score,
    /// Clamped but not rounded. The cohort then differs from what the
    /// written assessment file reassembles to.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_tutors: usize,
    /// Number of completed assessments → number of students.
    pub assessment_counts: BTreeMap<u8, usize>,
    pub group_size_min: usize,
    pub group_size_max: usize,
    /// Relative frequency of each group size from min to max.
    pub group_size_weights: Vec<f64>,
    pub planted_rule: PlantedRule,
    /// Total outcome noise SD around the planted leaf mean.
    pub noise_sd: f64,
    /// Fraction of the noise variance that is a per-student intercept.
    pub student_effect_share: f64,
    pub outcome_mode: OutcomeMode,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_tutors: 46,
            assessment_counts: BTreeMap::from([(1, 112), (2, 65), (3, 127), (4, 379), (5, 397)]),
            group_size_min: 2,
            group_size_max: 6,
            group_size_weights: vec![0.35, 0.35, 0.15, 0.10, 0.05],
            planted_rule: PlantedRule::default(),
            noise_sd: 4.0,
            student_effect_share: 0.25,
            outcome_mode: OutcomeMode::Score,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn n_students(&self) -> usize {
        self.assessment_counts.values().sum()
    }

    pub fn n_evaluation_periods(&self) -> usize {
        self.assessment_counts.iter().map(|(k, n)| usize::from(*k) * n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_tutors == 0 {
            return bad("at least one tutor is required".into());
        }
        if let Some(k) = self.assessment_counts.keys().find(|k| !(1..=5).contains(*k)) {
            return bad(format!("assessment count {k} outside 1..=5"));
        }
        if self.group_size_min == 0 || self.group_size_min > self.group_size_max {
            return bad(format!(
                "group size range {}..={} is empty",
                self.group_size_min, self.group_size_max
            ));
        }
        if self.group_size_weights.len() != self.group_size_max - self.group_size_min + 1
            || self.group_size_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.group_size_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("one non-negative weight per group size is required".into());
        }
        let n = self.n_students();
        if n < self.n_tutors * self.group_size_min {
            return bad(format!(
                "{n} students cannot give {} tutors a group of at least {}",
                self.n_tutors, self.group_size_min
            ));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.student_effect_share) {
            return bad("student_effect_share must lie in [0, 1]".into());
        }
        self.planted_rule.validate()
    }
}

/// Generated raw logs, the assembled cohort and the ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub logs: RawLogs,
    pub cohort: Cohort,
    pub rule: PlantedRule,
    pub spec: CohortSpec,
}

impl SyntheticCohort {
    /// Raw CSVs, the assembled `cohort.csv` and the rule sidecar.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.logs.write_dir(dir)?;
        self.cohort.write_csv(dir.join(COHORT_FILE))?;
        let path = dir.join(PLANTED_RULE_FILE);
        let text = serde_json::to_string_pretty(&self.rule)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn read_planted_rule(path: impl AsRef<Path>) -> Result<PlantedRule> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// Sub-streams of the spec seed.
const GROUPS: u64 = 1;
const TALK: u64 = 2;
const ITS: u64 = 3;
const OUTCOMES: u64 = 4;

/// Median per-session rate of each talk move. Press for reasoning sits
/// above its planted cut-off for about 80% of windows, revoicing above its
/// cut-off for about 20%.
const TALK_MEDIANS: [f64; TALK_MOVE_COUNT] = [1.5, 1.2, 2.5, 1.0, 2.8, 2.14];
const TALK_GROUP_SD: f64 = 0.2;
const TALK_PERIOD_SD: f64 = 0.35;

/// (centre, student SD, period SD, snapshot SD) of each ITS feature.
const ITS_LEVELS: [(f64, f64, f64, f64); ITS_FEATURE_COUNT] = [
    (5.0, 1.0, 1.0, 0.5),
    (4.0, 0.5, 1.0, 0.3),
    (30.0, 6.0, 5.0, 4.0),
    (70.0, 8.0, 6.0, 5.0),
    (0.6, 0.1, 0.08, 0.05),
];

struct Student {
    id: StudentId,
    tutor: usize,
    group: usize,
    n_assessments: u8,
    attendance: f64,
}

fn draw_group_sizes<R: Rng>(spec: &CohortSpec, n_students: usize, rng: &mut R) -> Result<Vec<usize>> {
    let total_w: f64 = spec.group_size_weights.iter().sum();
    let mut sizes = Vec::new();
    let mut left = n_students;
    while left > 0 {
        let mut u = rng.random::<f64>() * total_w;
        let mut size = spec.group_size_max;
        for (i, w) in spec.group_size_weights.iter().enumerate() {
            if u < *w {
                size = spec.group_size_min + i;
                break;
            }
            u -= w;
        }
        if size > left {
            size = left;
        }
        sizes.push(size);
        left -= size;
    }
    // A short last group is spread over groups with room.
    if let Some(&last) = sizes.last() {
        if last < spec.group_size_min {
            sizes.pop();
            for _ in 0..last {
                let open: Vec<usize> = (0..sizes.len()).filter(|&g| sizes[g] < spec.group_size_max).collect();
                let Some(&g) = open.get(rng.random_range(0..open.len().max(1))) else {
                    return Err(Error::InfeasibleSpec("groups cannot absorb the remaining students".into()));
                };
                sizes[g] += 1;
            }
        }
    }
    if sizes.len() < spec.n_tutors {
        return Err(Error::InfeasibleSpec(format!(
            "{} groups for {} tutors",
            sizes.len(),
            spec.n_tutors
        )));
    }
    Ok(sizes)
}

fn weekdays(from: NaiveDate, to: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = from;
    while d <= to {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Window index of a date: 0 for `[year_start, d1]`, i for `(d_i, d_{i+1}]`.
fn period_of(date: NaiveDate, dates: &[NaiveDate]) -> Option<usize> {
    dates.iter().position(|&d| date <= d)
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let assembly = AssemblyConfig::default();
    let dates = default_assessment_dates();
    let n_students = spec.n_students();

    // Tutors, groups and students.
    let mut rng_groups = rng::stream(spec.seed, GROUPS);
    let sizes = draw_group_sizes(spec, n_students, &mut rng_groups)?;
    let mut group_tutor: Vec<usize> = (0..sizes.len())
        .map(|g| if g < spec.n_tutors { g } else { rng_groups.random_range(0..spec.n_tutors) })
        .collect();
    group_tutor.shuffle(&mut rng_groups);
    let mut counts: Vec<u8> = spec
        .assessment_counts
        .iter()
        .flat_map(|(&k, &n)| std::iter::repeat_n(k, n))
        .collect();
    counts.shuffle(&mut rng_groups);
    let mut students = Vec::with_capacity(n_students);
    for (g, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let i = students.len();
            students.push(Student {
                id: StudentId(format!("S{:04}", i + 1)),
                tutor: group_tutor[g],
                group: g,
                n_assessments: counts[i],
                attendance: rng_groups.random_range(0.7..0.98),
            });
        }
    }
    let tutor_id = |t: usize| TutorId(format!("T{:02}", t + 1));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    for (i, s) in students.iter().enumerate() {
        members[s.group].push(i);
    }

    // Sessions: each group meets on alternate weekdays.
    let mut rng_talk = rng::stream(spec.seed, TALK);
    let days = weekdays(assembly.year_start, dates[4]);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut sessions = Vec::new();
    let mut offered = vec![0u32; n_students];
    let mut attended = vec![0u32; n_students];
    for (g, group) in members.iter().enumerate() {
        let group_effect: [f64; TALK_MOVE_COUNT] =
            std::array::from_fn(|_| TALK_GROUP_SD * unit.sample(&mut rng_talk));
        let rates: Vec<[f64; TALK_MOVE_COUNT]> = (0..dates.len())
            .map(|_| {
                std::array::from_fn(|m| {
                    TALK_MEDIANS[m] * (group_effect[m] + TALK_PERIOD_SD * unit.sample(&mut rng_talk)).exp()
                })
            })
            .collect();
        for (i, &day) in days.iter().enumerate() {
            if (i + g) % 2 == 1 {
                continue;
            }
            let period = period_of(day, &dates).expect("day within the year");
            let mut attendees = BTreeSet::new();
            for &s in group {
                offered[s] += 1;
                if rng_talk.random::<f64>() < students[s].attendance {
                    attended[s] += 1;
                    attendees.insert(students[s].id.clone());
                }
            }
            let talk_move_counts: [u32; TALK_MOVE_COUNT] = std::array::from_fn(|m| {
                Poisson::new(rates[period][m]).expect("positive rate").sample(&mut rng_talk) as u32
            });
            if attendees.is_empty() {
                continue;
            }
            sessions.push(SessionLog {
                tutor_id: tutor_id(students[group[0]].tutor),
                date: day,
                talk_move_counts,
                attendees,
            });
        }
    }

    // Weekly ITS snapshots until the student's last assessment.
    let mut rng_its = rng::stream(spec.seed, ITS);
    let mut its = Vec::new();
    for s in &students {
        let last = dates[usize::from(s.n_assessments) - 1];
        let latent: [f64; ITS_FEATURE_COUNT] =
            std::array::from_fn(|f| ITS_LEVELS[f].0 + ITS_LEVELS[f].1 * unit.sample(&mut rng_its));
        let levels: Vec<[f64; ITS_FEATURE_COUNT]> = (0..dates.len())
            .map(|_| std::array::from_fn(|f| latent[f] + ITS_LEVELS[f].2 * unit.sample(&mut rng_its)))
            .collect();
        let mut day = assembly.year_start + Duration::days(4);
        while day <= last {
            let period = period_of(day, &dates).expect("day within the year");
            let values: [f64; ITS_FEATURE_COUNT] = std::array::from_fn(|f| {
                let v = levels[period][f] + ITS_LEVELS[f].3 * unit.sample(&mut rng_its);
                // two decimals keep the CSV exact
                (v.max(0.0) * 100.0).round() / 100.0
            });
            its.push(ItsSnapshot {
                student_id: s.id.clone(),
                as_of: day,
                values,
            });
            day += Duration::days(7);
        }
    }

    let roster: Vec<RosterEntry> = students
        .iter()
        .enumerate()
        .map(|(i, s)| RosterEntry {
            student_id: s.id.clone(),
            tutor_id: tutor_id(s.tutor),
            attendance_ratio: f64::from(attended[i]) / f64::from(offered[i].max(1)),
        })
        .collect();
    let mut assessments: Vec<AssessmentRecord> = students
        .iter()
        .flat_map(|s| {
            (1..=s.n_assessments).map(|round| AssessmentRecord {
                student_id: s.id.clone(),
                round,
                date: dates[usize::from(round) - 1],
                score: 0,
            })
        })
        .collect();

    // Outcomes from the assembled features.
    let placeholder = assemble_evaluation_periods(&sessions, &its, &assessments, &roster, &assembly)?;
    if placeholder.students().len() != n_students {
        return Err(Error::InfeasibleSpec(format!(
            "{} of {n_students} students survive assembly",
            placeholder.students().len()
        )));
    }
    let mut rng_out = rng::stream(spec.seed, OUTCOMES);
    let student_sd = spec.noise_sd * spec.student_effect_share.sqrt();
    let ep_sd = spec.noise_sd * (1.0 - spec.student_effect_share).sqrt();
    let intercepts: BTreeMap<&StudentId, f64> = students
        .iter()
        .map(|s| (&s.id, student_sd * unit.sample(&mut rng_out)))
        .collect();
    let mut outcomes: BTreeMap<(StudentId, u8), f64> = BTreeMap::new();
    let mut periods = placeholder.evaluation_periods().to_vec();
    for ep in &mut periods {
        let y = spec.planted_rule.mean_of(&ep.features)
            + intercepts[&ep.student_id]
            + ep_sd * unit.sample(&mut rng_out);
        let y = y.clamp(0.0, f64::from(MAX_SCORE));
        ep.outcome = match spec.outcome_mode {
            OutcomeMode::Score => y.round(),
            OutcomeMode::Real => y,
        };
        outcomes.insert((ep.student_id.clone(), ep.round), y.round());
    }
    for a in &mut assessments {
        a.score = outcomes[&(a.student_id.clone(), a.round)] as u8;
    }
    let cohort = Cohort::from_periods(periods, placeholder.exclusions())?;

    Ok(SyntheticCohort {
        logs: RawLogs {
            sessions,
            its,
            assessments,
            roster,
        },
        cohort,
        rule: spec.planted_rule,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests;
