//! Evaluation-period data model.
//!
//! Raw inputs are per-session tutor talk-move counts, ITS snapshots and
//! assessment records. [`assemble_evaluation_periods`] turns them into one
//! [`EvaluationPeriod`] per completed assessment, aggregating only the
//! activity that happened since the student's previous assessment.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ClassCounts, Label};
use crate::tree::FeatureMatrix;

pub use io::{load_assessments, load_inputs, load_its, load_roster, load_sessions};

pub const TALK_MOVE_COUNT: usize = 6;
pub const ITS_FEATURE_COUNT: usize = 5;
pub const FEATURE_COUNT: usize = TALK_MOVE_COUNT + ITS_FEATURE_COUNT;

pub const MAX_SCORE: u8 = 30;

/// The eleven model inputs in schema order: six tutor talk moves, then five
/// ITS aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    KeepingStudentsTogether,
    GettingStudentsToRelate,
    Restating,
    PressForAccuracy,
    PressForReasoning,
    Revoicing,
    MasteredSkills,
    OpportunitiesToMaster,
    WorkspaceTime,
    WorkspaceScore,
    Apls,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::KeepingStudentsTogether,
        Feature::GettingStudentsToRelate,
        Feature::Restating,
        Feature::PressForAccuracy,
        Feature::PressForReasoning,
        Feature::Revoicing,
        Feature::MasteredSkills,
        Feature::OpportunitiesToMaster,
        Feature::WorkspaceTime,
        Feature::WorkspaceScore,
        Feature::Apls,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Feature> {
        Self::ALL.get(index).copied()
    }

    /// Column name used in CSV files and tree exports.
    pub fn name(self) -> &'static str {
        FEATURE_NAMES[self.index()]
    }

    pub fn is_talk_move(self) -> bool {
        self.index() < TALK_MOVE_COUNT
    }
}

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "keeping_students_together",
    "getting_students_to_relate",
    "restating",
    "press_for_accuracy",
    "press_for_reasoning",
    "revoicing",
    "mastered_skills_avg",
    "opportunities_avg",
    "workspace_time_avg",
    "workspace_score_avg",
    "apls_avg",
];

pub fn talk_move_names() -> &'static [&'static str] {
    &FEATURE_NAMES[..TALK_MOVE_COUNT]
}

pub fn its_feature_names() -> &'static [&'static str] {
    &FEATURE_NAMES[TALK_MOVE_COUNT..]
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(StudentId);
string_id!(TutorId);

/// One tutorial: the tutor's coded talk-move counts and who attended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub tutor_id: TutorId,
    pub date: NaiveDate,
    /// Counts in [`FEATURE_NAMES`] order (first six entries).
    pub talk_move_counts: [u32; TALK_MOVE_COUNT],
    pub attendees: BTreeSet<StudentId>,
}

/// A student's cumulative ITS aggregates as of a date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItsSnapshot {
    pub student_id: StudentId,
    pub as_of: NaiveDate,
    /// mastered skills, opportunities to master, workspace time (min),
    /// workspace score, APLS.
    pub values: [f64; ITS_FEATURE_COUNT],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub student_id: StudentId,
    pub round: u8,
    pub date: NaiveDate,
    pub score: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub student_id: StudentId,
    pub tutor_id: TutorId,
    pub attendance_ratio: f64,
}

/// All raw inputs of one school year.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawLogs {
    pub sessions: Vec<SessionLog>,
    pub its: Vec<ItsSnapshot>,
    pub assessments: Vec<AssessmentRecord>,
    pub roster: Vec<RosterEntry>,
}

pub const SESSIONS_FILE: &str = "sessions.csv";
pub const ITS_FILE: &str = "its.csv";
pub const ASSESSMENTS_FILE: &str = "assessments.csv";
pub const ROSTER_FILE: &str = "roster.csv";

impl RawLogs {
    /// Loads `sessions.csv`, `its.csv`, `assessments.csv` and `roster.csv`.
    pub fn load_dir(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (sessions, its, assessments) = load_inputs(
            dir.join(SESSIONS_FILE),
            dir.join(ITS_FILE),
            dir.join(ASSESSMENTS_FILE),
        )?;
        let roster = load_roster(dir.join(ROSTER_FILE))?;
        Ok(Self {
            sessions,
            its,
            assessments,
            roster,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        io::write_raw_logs(self, dir.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    /// Start of the first evaluation period's window (inclusive).
    pub year_start: NaiveDate,
    /// Students below this tutorial attendance ratio are excluded.
    pub min_attendance: f64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            year_start: NaiveDate::from_ymd_opt(2022, 8, 1).expect("valid date"),
            min_attendance: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpFlags {
    /// No attended session in the window; talk-move features are zero.
    pub no_sessions: bool,
    /// No ITS snapshot in the window; the latest earlier one was reused.
    pub its_carried_forward: bool,
    /// No ITS snapshot in or before the window; ITS features are zero.
    pub no_its: bool,
    /// First retained round of a score-change cohort (outcome fixed at 0).
    pub change_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPeriod {
    pub student_id: StudentId,
    pub tutor_id: TutorId,
    pub round: u8,
    pub date: NaiveDate,
    pub features: [f64; FEATURE_COUNT],
    /// Raw score, or score change in a change cohort.
    pub outcome: f64,
    #[serde(default)]
    pub flags: EpFlags,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    /// Rostered students without a single completed assessment.
    pub no_assessment: usize,
    /// Students below the attendance cut-off.
    pub low_attendance: usize,
    /// Students dropped from a change cohort for having one assessment.
    pub single_assessment: usize,
}

/// The assembled dataset. Immutable once built; share it freely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    evaluation_periods: Vec<EvaluationPeriod>,
    feature_names: Vec<String>,
    students: BTreeSet<StudentId>,
    tutors: BTreeSet<TutorId>,
    tutor_of: BTreeMap<StudentId, TutorId>,
    exclusions: ExclusionReport,
}

impl Cohort {
    /// Builds a cohort from finished evaluation periods, checking that every
    /// feature is finite and that each student has exactly one tutor.
    pub fn from_periods(
        evaluation_periods: Vec<EvaluationPeriod>,
        exclusions: ExclusionReport,
    ) -> Result<Self> {
        let mut tutor_of: BTreeMap<StudentId, TutorId> = BTreeMap::new();
        for ep in &evaluation_periods {
            if let Some(i) = ep.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "feature `{}` of student {} round {}",
                    FEATURE_NAMES[i], ep.student_id, ep.round
                )));
            }
            if !ep.outcome.is_finite() {
                return Err(Error::NonFinite(format!(
                    "outcome of student {} round {}",
                    ep.student_id, ep.round
                )));
            }
            match tutor_of.get(&ep.student_id) {
                Some(t) if *t != ep.tutor_id => {
                    return Err(Error::Inconsistent(format!(
                        "student {} appears under tutors {} and {}",
                        ep.student_id, t, ep.tutor_id
                    )))
                }
                Some(_) => {}
                None => {
                    tutor_of.insert(ep.student_id.clone(), ep.tutor_id.clone());
                }
            }
        }
        Ok(Self {
            students: tutor_of.keys().cloned().collect(),
            tutors: tutor_of.values().cloned().collect(),
            tutor_of,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            evaluation_periods,
            exclusions,
        })
    }

    pub fn evaluation_periods(&self) -> &[EvaluationPeriod] {
        &self.evaluation_periods
    }

    pub fn len(&self) -> usize {
        self.evaluation_periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evaluation_periods.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn students(&self) -> &BTreeSet<StudentId> {
        &self.students
    }

    pub fn tutors(&self) -> &BTreeSet<TutorId> {
        &self.tutors
    }

    pub fn tutor_of(&self) -> &BTreeMap<StudentId, TutorId> {
        &self.tutor_of
    }

    pub fn exclusions(&self) -> ExclusionReport {
        self.exclusions
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.evaluation_periods.iter().map(|ep| ep.outcome).collect()
    }

    pub fn feature_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::from_rows(self.evaluation_periods.iter().map(|ep| &ep.features[..]))
            .expect("cohort rows all have the full feature schema")
    }

    /// Students per tutor, in tutor order.
    pub fn students_by_tutor(&self) -> BTreeMap<TutorId, Vec<StudentId>> {
        let mut map: BTreeMap<TutorId, Vec<StudentId>> = BTreeMap::new();
        for (s, t) in &self.tutor_of {
            map.entry(t.clone()).or_default().push(s.clone());
        }
        map
    }

    /// Writes the flat evaluation-period table.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        io::write_cohort_csv(self, path.as_ref())
    }

    pub fn read_csv(path: impl AsRef<std::path::Path>) -> Result<Self> {
        io::read_cohort_csv(path.as_ref())
    }
}

/// Talk moves per session over the window: total count / number of sessions.
/// `None` when the window holds no session.
pub fn micro_average_talk_moves(sessions: &[&SessionLog]) -> Option<[f64; TALK_MOVE_COUNT]> {
    if sessions.is_empty() {
        return None;
    }
    let mut totals = [0u64; TALK_MOVE_COUNT];
    for s in sessions {
        for (t, c) in totals.iter_mut().zip(s.talk_move_counts) {
            *t += u64::from(c);
        }
    }
    let n = sessions.len() as f64;
    Some(totals.map(|t| t as f64 / n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItsAggregate {
    pub values: [f64; ITS_FEATURE_COUNT],
    pub carried_forward: bool,
    pub missing: bool,
}

/// Per-feature mean of the snapshots in the window. An empty window reuses
/// the most recent earlier snapshot; with none, the result is zeros.
pub fn aggregate_its_features(
    in_window: &[&ItsSnapshot],
    prior: Option<&ItsSnapshot>,
) -> ItsAggregate {
    if !in_window.is_empty() {
        let mut sums = [0.0; ITS_FEATURE_COUNT];
        for s in in_window {
            for (acc, v) in sums.iter_mut().zip(s.values) {
                *acc += v;
            }
        }
        let n = in_window.len() as f64;
        return ItsAggregate {
            values: sums.map(|s| s / n),
            carried_forward: false,
            missing: false,
        };
    }
    match prior {
        Some(p) => ItsAggregate {
            values: p.values,
            carried_forward: true,
            missing: false,
        },
        None => ItsAggregate {
            values: [0.0; ITS_FEATURE_COUNT],
            carried_forward: false,
            missing: true,
        },
    }
}

/// Builds one evaluation period per completed assessment.
///
/// A period's window is `(previous assessment date, assessment date]`, and
/// `[year_start, first assessment date]` for a student's first assessment.
/// Only sessions the student attended count toward the talk-move features.
pub fn assemble_evaluation_periods(
    sessions: &[SessionLog],
    its: &[ItsSnapshot],
    assessments: &[AssessmentRecord],
    roster: &[RosterEntry],
    config: &AssemblyConfig,
) -> Result<Cohort> {
    let mut roster_by_student: BTreeMap<&StudentId, &RosterEntry> = BTreeMap::new();
    for entry in roster {
        if roster_by_student.insert(&entry.student_id, entry).is_some() {
            return Err(Error::Inconsistent(format!(
                "student {} listed twice in roster",
                entry.student_id
            )));
        }
    }

    let mut by_student: BTreeMap<&StudentId, Vec<&AssessmentRecord>> = BTreeMap::new();
    for a in assessments {
        by_student.entry(&a.student_id).or_default().push(a);
    }
    for (student, records) in by_student.iter_mut() {
        records.sort_by_key(|a| a.round);
        for pair in records.windows(2) {
            if pair[0].round == pair[1].round {
                return Err(Error::Inconsistent(format!(
                    "student {student} has round {} twice",
                    pair[0].round
                )));
            }
            if pair[0].date >= pair[1].date {
                return Err(Error::Inconsistent(format!(
                    "student {student}: round {} ({}) is not before round {} ({})",
                    pair[0].round, pair[0].date, pair[1].round, pair[1].date
                )));
            }
        }
    }

    let mut exclusions = ExclusionReport {
        no_assessment: roster_by_student
            .keys()
            .filter(|s| !by_student.contains_key(*s))
            .count(),
        ..Default::default()
    };
    let mut included: BTreeMap<&StudentId, &RosterEntry> = BTreeMap::new();
    for student in by_student.keys() {
        let entry = roster_by_student
            .get(student)
            .ok_or_else(|| Error::MissingTutor(student.to_string()))?;
        if entry.attendance_ratio < config.min_attendance {
            exclusions.low_attendance += 1;
        } else {
            included.insert(student, entry);
        }
    }
    if exclusions.no_assessment + exclusions.low_attendance > 0 {
        log::info!(
            "excluded {} students without assessments and {} below {:.0}% attendance",
            exclusions.no_assessment,
            exclusions.low_attendance,
            config.min_attendance * 100.0
        );
    }

    let mut sessions_of: BTreeMap<&StudentId, Vec<&SessionLog>> = BTreeMap::new();
    for s in sessions {
        for student in &s.attendees {
            if included.contains_key(student) {
                sessions_of.entry(student).or_default().push(s);
            }
        }
    }
    for list in sessions_of.values_mut() {
        list.sort_by_key(|s| s.date);
    }
    let mut its_of: BTreeMap<&StudentId, Vec<&ItsSnapshot>> = BTreeMap::new();
    for snap in its {
        if included.contains_key(&snap.student_id) {
            its_of.entry(&snap.student_id).or_default().push(snap);
        }
    }
    for list in its_of.values_mut() {
        list.sort_by_key(|s| s.as_of);
    }

    let no_sessions: Vec<&SessionLog> = Vec::new();
    let no_its: Vec<&ItsSnapshot> = Vec::new();
    let mut periods = Vec::new();
    for (student, entry) in &included {
        let student_sessions = sessions_of.get(student).unwrap_or(&no_sessions);
        let student_its = its_of.get(student).unwrap_or(&no_its);
        // exclusive lower bound of the current window
        let mut after = config.year_start.pred_opt().expect("date in range");
        for record in &by_student[*student] {
            let until = record.date;
            let in_window = |d: NaiveDate| d > after && d <= until;

            let window_sessions: Vec<&SessionLog> = student_sessions
                .iter()
                .copied()
                .filter(|s| in_window(s.date))
                .collect();
            let talk = micro_average_talk_moves(&window_sessions);

            let window_its: Vec<&ItsSnapshot> = student_its
                .iter()
                .copied()
                .filter(|s| in_window(s.as_of))
                .collect();
            let prior = student_its.iter().copied().rfind(|s| s.as_of <= after);
            let its_agg = aggregate_its_features(&window_its, prior);

            let mut features = [0.0; FEATURE_COUNT];
            features[..TALK_MOVE_COUNT].copy_from_slice(&talk.unwrap_or([0.0; TALK_MOVE_COUNT]));
            features[TALK_MOVE_COUNT..].copy_from_slice(&its_agg.values);

            periods.push(EvaluationPeriod {
                student_id: (*student).clone(),
                tutor_id: entry.tutor_id.clone(),
                round: record.round,
                date: record.date,
                features,
                outcome: f64::from(record.score),
                flags: EpFlags {
                    no_sessions: talk.is_none(),
                    its_carried_forward: its_agg.carried_forward,
                    no_its: its_agg.missing,
                    change_baseline: false,
                },
            });
            after = until;
        }
    }
    Cohort::from_periods(periods, exclusions)
}

/// Binary view of a cohort at one threshold. Raw outcomes stay reachable
/// through [`BinarizedCohort::raw_outcomes`] for leaf annotation.
#[derive(Clone, Debug)]
pub struct BinarizedCohort<'a> {
    cohort: &'a Cohort,
    pub threshold: f64,
    pub labels: Vec<Label>,
    pub counts: ClassCounts,
    /// One class is empty; sweeps skip such thresholds.
    pub degenerate: bool,
}

impl BinarizedCohort<'_> {
    pub fn cohort(&self) -> &Cohort {
        self.cohort
    }

    pub fn raw_outcomes(&self) -> Vec<f64> {
        self.cohort.outcomes()
    }
}

/// Labels every evaluation period high iff its outcome ≥ `threshold`.
pub fn binarize(cohort: &Cohort, threshold: f64) -> Result<BinarizedCohort<'_>> {
    if !threshold.is_finite() {
        return Err(Error::NonFinite("binarization threshold".into()));
    }
    let labels: Vec<Label> = cohort
        .evaluation_periods
        .iter()
        .map(|ep| Label::from_outcome(ep.outcome, threshold))
        .collect();
    let counts = ClassCounts::from_labels(&labels);
    Ok(BinarizedCohort {
        cohort,
        threshold,
        degenerate: counts.n_high == 0 || counts.n_low == 0,
        labels,
        counts,
    })
}

/// What the first retained round of each student carries in a change cohort.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeBaseline {
    /// Keep the first round with a change of 0, flagged `change_baseline`.
    #[default]
    Zero,
    /// Drop the first round; only true consecutive differences remain.
    Drop,
}

/// Replaces outcomes by the difference to the student's previous completed
/// round. Students with a single assessment are removed.
pub fn compute_score_changes(cohort: &Cohort, baseline: ChangeBaseline) -> Cohort {
    let mut by_student: BTreeMap<&StudentId, Vec<&EvaluationPeriod>> = BTreeMap::new();
    for ep in &cohort.evaluation_periods {
        by_student.entry(&ep.student_id).or_default().push(ep);
    }
    let mut exclusions = cohort.exclusions;
    let mut periods = Vec::new();
    for eps in by_student.values_mut() {
        if eps.len() < 2 {
            exclusions.single_assessment += 1;
            continue;
        }
        eps.sort_by_key(|ep| ep.round);
        if baseline == ChangeBaseline::Zero {
            let mut first = eps[0].clone();
            first.outcome = 0.0;
            first.flags.change_baseline = true;
            periods.push(first);
        }
        for pair in eps.windows(2) {
            let mut ep = pair[1].clone();
            ep.outcome = pair[1].outcome - pair[0].outcome;
            periods.push(ep);
        }
    }
    Cohort::from_periods(periods, exclusions).expect("derived from a valid cohort")
}
