//! Tutor-grouped fold search, nested cross-validation, the threshold × seed
//! sweep with agreement-based tree extraction, and the baseline harness.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_score_changes, ChangeBaseline, Cohort, StudentId, TutorId, TALK_MOVE_COUNT};
use crate::dataset::FEATURE_COUNT;
use crate::error::{Error, Result};
use crate::forest::{self, Forest, ForestParams};
use crate::metrics::{r2_to_auc, r_squared, roc_auc, Label, SdKind};
use crate::rng::{self, purpose};
use crate::tree::{FeatureMatrix, Grower, LocalTarget, Mtry, SortedView, Task, TreeNode, TreeParams};

pub const N_FOLDS: usize = 5;
const TARGET_SHARE: f64 = 1.0 / N_FOLDS as f64;

/// Which feature columns a run may read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    #[serde(rename = "talk-moves-only")]
    Talk,
    #[serde(rename = "its-only")]
    Its,
    #[default]
    Combined,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Talk, FeatureSet::Its, FeatureSet::Combined];

    pub fn indices(self) -> Vec<usize> {
        match self {
            FeatureSet::Talk => (0..TALK_MOVE_COUNT).collect(),
            FeatureSet::Its => (TALK_MOVE_COUNT..FEATURE_COUNT).collect(),
            FeatureSet::Combined => (0..FEATURE_COUNT).collect(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureSet::Talk => "talk-moves-only",
            FeatureSet::Its => "its-only",
            FeatureSet::Combined => "combined",
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "talk" | "talk-moves-only" => Ok(FeatureSet::Talk),
            "its" | "its-only" => Ok(FeatureSet::Its),
            "combined" | "all" => Ok(FeatureSet::Combined),
            other => Err(Error::InvalidParam(format!(
                "unknown feature set `{other}` (expected talk, its or combined)"
            ))),
        }
    }
}

/// Rows on which member/vote agreement is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementSet {
    #[default]
    Training,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub tutors: Vec<TutorId>,
    pub students: Vec<StudentId>,
    pub ep_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub sse: f64,
    /// Index of the winning candidate in the search stream.
    pub candidate: usize,
}

impl FoldPlan {
    /// Fold index of each evaluation period.
    pub fn fold_of_eps(&self, n_eps: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n_eps];
        for (f, fold) in self.folds.iter().enumerate() {
            for &i in &fold.ep_indices {
                out[i] = f;
            }
        }
        out
    }
}

/// Σ over folds of (student share − 0.2)² + (tutor share − 0.2)², from
/// per-fold (tutor, student) counts. Any empty fold scores +∞.
pub fn partition_sse_counts(counts: &[(usize, usize)]) -> f64 {
    let tutors: usize = counts.iter().map(|c| c.0).sum();
    let students: usize = counts.iter().map(|c| c.1).sum();
    if counts.iter().any(|&(t, _)| t == 0) || tutors == 0 || students == 0 {
        return f64::INFINITY;
    }
    counts
        .iter()
        .map(|&(t, s)| {
            let ts = t as f64 / tutors as f64 - TARGET_SHARE;
            let ss = s as f64 / students as f64 - TARGET_SHARE;
            ss * ss + ts * ts
        })
        .sum()
}

/// SSE of a candidate partition of the cohort's tutors into folds.
pub fn partition_sse(candidate_folds: &[Vec<TutorId>], cohort: &Cohort) -> f64 {
    let by_tutor = cohort.students_by_tutor();
    let counts: Vec<(usize, usize)> = candidate_folds
        .iter()
        .map(|tutors| {
            let students = tutors
                .iter()
                .map(|t| by_tutor.get(t).map_or(0, Vec::len))
                .sum();
            (tutors.len(), students)
        })
        .collect();
    partition_sse_counts(&counts)
}

/// Draws `n_candidates` random tutor → fold assignments (redrawing any
/// with an empty fold) and keeps the lowest SSE, ties to the earliest.
pub fn search_fold_plan<R: Rng>(cohort: &Cohort, n_candidates: usize, rng: &mut R) -> Result<FoldPlan> {
    let by_tutor = cohort.students_by_tutor();
    let tutors: Vec<&TutorId> = by_tutor.keys().collect();
    if tutors.len() < N_FOLDS {
        return Err(Error::TooFewTutors(tutors.len()));
    }
    if n_candidates == 0 {
        return Err(Error::InvalidParam("n_candidates must be at least 1".into()));
    }
    let sizes: Vec<usize> = by_tutor.values().map(Vec::len).collect();
    let mut assignment = vec![0usize; tutors.len()];
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for c in 0..n_candidates {
        let counts = loop {
            let mut counts = [(0usize, 0usize); N_FOLDS];
            for (t, slot) in assignment.iter_mut().enumerate() {
                *slot = rng.random_range(0..N_FOLDS);
                counts[*slot].0 += 1;
                counts[*slot].1 += sizes[t];
            }
            if counts.iter().all(|c| c.0 > 0) {
                break counts;
            }
        };
        let sse = partition_sse_counts(&counts);
        if best.as_ref().is_none_or(|b| sse < b.0) {
            best = Some((sse, c, assignment.clone()));
        }
    }
    let (sse, candidate, assignment) = best.expect("at least one candidate");

    let mut folds: Vec<Fold> = (0..N_FOLDS)
        .map(|_| Fold {
            tutors: Vec::new(),
            students: Vec::new(),
            ep_indices: Vec::new(),
        })
        .collect();
    let mut fold_of_tutor = BTreeMap::new();
    for ((tutor, students), &f) in by_tutor.iter().zip(&assignment) {
        folds[f].tutors.push(tutor.clone());
        folds[f].students.extend(students.iter().cloned());
        fold_of_tutor.insert(tutor, f);
    }
    for (i, ep) in cohort.evaluation_periods().iter().enumerate() {
        folds[fold_of_tutor[&ep.tutor_id]].ep_indices.push(i);
    }
    Ok(FoldPlan {
        folds,
        sse,
        candidate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub test: usize,
    pub validation: usize,
    pub training: [usize; N_FOLDS - 2],
}

/// Each fold is the test fold once; validation is drawn uniformly from the
/// other four and the remaining three train.
pub fn nested_cv_assignments<R: Rng>(rng: &mut R) -> [FoldAssignment; N_FOLDS] {
    std::array::from_fn(|test| {
        let others: Vec<usize> = (0..N_FOLDS).filter(|&f| f != test).collect();
        let validation = *others.choose(rng).expect("four candidates");
        let rest: Vec<usize> = others.into_iter().filter(|&f| f != validation).collect();
        FoldAssignment {
            test,
            validation,
            training: [rest[0], rest[1], rest[2]],
        }
    })
}

/// Fraction of `rows` on which `tree` predicts the forest's majority vote.
pub fn agreement(tree: &TreeNode, forest: &Forest, x: &FeatureMatrix, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("agreement rows"));
    }
    let mut same = 0usize;
    for &r in rows {
        if tree.predict_label(x.row(r))? == forest.majority_vote(x.row(r))? {
            same += 1;
        }
    }
    Ok(same as f64 / rows.len() as f64)
}

/// Member agreeing most with the majority vote on `rows`; ties go to the
/// lowest member index.
pub fn extract_best_tree(forest: &Forest, x: &FeatureMatrix, rows: &[usize]) -> Result<(usize, f64)> {
    if rows.is_empty() {
        return Err(Error::Empty("agreement rows"));
    }
    for &r in rows {
        if let Some(i) = x.row(r).iter().position(|v| v.is_nan()) {
            return Err(Error::NanFeature(i));
        }
    }
    Ok(extract_unchecked(forest, x, rows))
}

fn extract_unchecked(forest: &Forest, x: &FeatureMatrix, rows: &[usize]) -> (usize, f64) {
    let members = forest.members();
    let mut votes: Vec<Vec<bool>> = members
        .iter()
        .map(|m| rows.iter().map(|&r| m.label_unchecked(x.row(r)).is_high()).collect())
        .collect();
    let majority: Vec<bool> = (0..rows.len())
        .map(|j| 2 * votes.iter().filter(|v| v[j]).count() > members.len())
        .collect();
    let mut best = (0usize, 0usize);
    for (i, v) in votes.iter_mut().enumerate() {
        let agree = v.iter().zip(&majority).filter(|(a, b)| a == b).count();
        if i == 0 || agree > best.1 {
            best = (i, agree);
        }
    }
    (best.0, best.1 as f64 / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub n_seeds: usize,
    /// Member-tree and bagging settings; the seed is set per sweep seed.
    pub forest_params: ForestParams,
    pub master_seed: u64,
    pub feature_set: FeatureSet,
    pub agreement_set: AgreementSet,
    pub n_fold_candidates: usize,
    /// Whether to also run the plain-DT, RFC and RFR baselines.
    pub baselines: bool,
    /// Settings of the plain decision-tree baseline.
    pub baseline_tree_params: TreeParams,
    /// Keep every (threshold, seed) validation score in the report.
    #[serde(default)]
    pub record_candidates: bool,
}

pub const FULL_SWEEP_SEEDS: usize = 10_000;

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: (15..=24).map(f64::from).collect(),
            n_seeds: 200,
            forest_params: ForestParams::default(),
            master_seed: 0,
            feature_set: FeatureSet::Combined,
            agreement_set: AgreementSet::Training,
            n_fold_candidates: 1000,
            baselines: true,
            baseline_tree_params: TreeParams {
                max_depth: usize::MAX,
                min_leaf: 1,
                mtry: Mtry::All,
                task: Task::Classification,
            },
            record_candidates: false,
        }
    }
}

impl SweepConfig {
    /// Defaults for score-change outcomes.
    pub fn for_changes() -> Self {
        Self {
            thresholds: vec![2.0, 2.5, 3.0, 3.5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidParam("at least one threshold is required".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidParam(format!("threshold {t} is not finite")));
        }
        if self.n_seeds < 1 {
            return Err(Error::InvalidParam("n_seeds must be at least 1".into()));
        }
        if self.forest_params.tree_params.task != Task::Classification {
            return Err(Error::InvalidParam("sweep forests must be classifiers".into()));
        }
        self.forest_params.validate()?;
        self.baseline_tree_params.validate()
    }

    /// Forest seed used for sweep seed `index`; shared by all thresholds
    /// and folds.
    pub fn forest_seed(&self, index: usize) -> u64 {
        rng::derive_seed(rng::derive_seed(self.master_seed, purpose::SWEEP_SEEDS), index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub threshold: f64,
    pub seed_index: usize,
    pub validation_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold: usize,
    pub threshold: f64,
    pub seed_index: usize,
    pub seed: u64,
    pub member_index: usize,
    pub agreement: f64,
    pub validation_auc: f64,
    pub test_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedModel {
    pub tree: TreeNode,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub threshold: Option<f64>,
    pub seed_index: Option<usize>,
    pub validation_score: f64,
    pub test_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldBaselines {
    pub dt: MethodResult,
    pub rfc: MethodResult,
    /// Validation score is R²; test AUC is converted from test R².
    pub rfr: MethodResult,
    pub rfr_test_r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub assignment: FoldAssignment,
    pub n_training: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub skipped_thresholds: Vec<f64>,
    pub model: ExtractedModel,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baselines: Option<FoldBaselines>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub candidates: Vec<Candidate>,
}

/// Mean test AUC per method for one feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub feature_set: FeatureSet,
    pub dt: f64,
    pub rfc: f64,
    pub rfr: f64,
    pub extracted_dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub rows: Vec<BaselineRow>,
}

impl BaselineTable {
    pub const HEADER: [&'static str; 5] = ["features", "DT", "RFC", "RFR", "Extracted DT"];

    pub fn to_csv(&self) -> String {
        let mut out = Self::HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                r.feature_set, r.dt, r.rfc, r.rfr, r.extracted_dt
            ));
        }
        out
    }

    pub fn row(&self, fs: FeatureSet) -> Option<&BaselineRow> {
        self.rows.iter().find(|r| r.feature_set == fs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub n_tutors: usize,
    pub n_students: usize,
    pub n_eps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: SweepConfig,
    pub n_eps: usize,
    pub n_students: usize,
    pub fold_sse: f64,
    pub fold_sizes: Vec<FoldSummary>,
    pub folds: Vec<FoldReport>,
    pub mean_test_auc: f64,
    pub final_model: ExtractedModel,
    pub whole_dataset_auc: f64,
    /// Final tree with leaves re-annotated on the whole dataset.
    pub whole_dataset_tree: TreeNode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baselines: Option<BaselineRow>,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One-row table in the baseline CSV layout.
    pub fn table(&self) -> BaselineTable {
        let row = self.baselines.clone().unwrap_or(BaselineRow {
            feature_set: self.config.feature_set,
            dt: f64::NAN,
            rfc: f64::NAN,
            rfr: f64::NAN,
            extracted_dt: self.mean_test_auc,
        });
        BaselineTable { rows: vec![row] }
    }
}

/// Threshold-specific labels for the three fold partitions.
struct Split<'a> {
    train: &'a [usize],
    val: &'a [usize],
    test: &'a [usize],
}

struct ThresholdLabels {
    threshold_index: usize,
    train: Vec<Label>,
    val: Vec<Label>,
}

#[derive(Clone, Copy)]
struct Scored {
    auc: f64,
    threshold_index: usize,
    seed_index: usize,
}

impl Scored {
    /// Higher AUC, then lower seed, then lower threshold.
    fn beats(&self, other: &Scored) -> bool {
        if self.auc != other.auc {
            return self.auc > other.auc;
        }
        (self.seed_index, self.threshold_index) < (other.seed_index, other.threshold_index)
    }

    fn best(a: Option<Scored>, b: Option<Scored>) -> Option<Scored> {
        match (a, b) {
            (Some(a), Some(b)) => Some(if b.beats(&a) { b } else { a }),
            (a, None) => a,
            (None, b) => b,
        }
    }
}

fn labels_for(outcomes: &[f64], rows: &[usize], threshold: f64) -> Vec<Label> {
    rows.iter().map(|&r| Label::from_outcome(outcomes[r], threshold)).collect()
}

fn both_classes(labels: &[Label]) -> bool {
    labels.iter().any(|l| l.is_high()) && labels.iter().any(|l| !l.is_high())
}

fn auc_on(x: &FeatureMatrix, rows: &[usize], labels: &[Label], score: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let scores: Vec<f64> = rows.iter().map(|&r| score(x.row(r))).collect();
    roc_auc(&scores, labels)
}

struct FoldContext<'a> {
    x: &'a FeatureMatrix,
    outcomes: &'a [f64],
    config: &'a SweepConfig,
    features: Vec<usize>,
}

impl FoldContext<'_> {
    fn forest_params(&self, seed_index: usize) -> ForestParams {
        ForestParams {
            seed: self.config.forest_seed(seed_index),
            ..self.config.forest_params
        }
    }

    fn fit(&self, view: &SortedView, labels: &[Label], raw: &[f64], seed_index: usize) -> Forest {
        forest::fit_on_view(view, LocalTarget::Labels(labels), raw, &self.forest_params(seed_index))
    }

    fn agreement_rows<'s>(&self, split: &Split<'s>) -> &'s [usize] {
        match self.config.agreement_set {
            AgreementSet::Training => split.train,
            AgreementSet::Validation => split.val,
        }
    }

    fn run_fold(&self, fold_index: usize, assignment: FoldAssignment, split: &Split<'_>) -> Result<FoldReport> {
        let fold_err = |message: String| Error::Fold {
            fold: fold_index,
            message,
        };
        let config = self.config;
        let view = SortedView::new(self.x, split.train, &self.features)?;
        let raw_train: Vec<f64> = split.train.iter().map(|&r| self.outcomes[r]).collect();

        let mut skipped = Vec::new();
        let mut usable = Vec::new();
        for (ti, &t) in config.thresholds.iter().enumerate() {
            let train = labels_for(self.outcomes, split.train, t);
            let val = labels_for(self.outcomes, split.val, t);
            if both_classes(&train) && both_classes(&val) {
                usable.push(ThresholdLabels {
                    threshold_index: ti,
                    train,
                    val,
                });
            } else {
                skipped.push(t);
            }
        }
        if usable.is_empty() {
            return Err(fold_err(
                "every threshold leaves a single class in training or validation".into(),
            ));
        }
        if split.train.len() < 2 * config.forest_params.tree_params.min_leaf {
            return Err(fold_err(format!("only {} training rows", split.train.len())));
        }

        let grid: Vec<(usize, usize)> = (0..usable.len())
            .flat_map(|u| (0..config.n_seeds).map(move |s| (u, s)))
            .collect();
        let agree_rows = self.agreement_rows(split);
        let evaluated: Vec<(Scored, Scored)> = grid
            .par_iter()
            .map(|&(u, s)| {
                let tl = &usable[u];
                let forest = self.fit(&view, &tl.train, &raw_train, s);
                let (member, _) = extract_unchecked(&forest, self.x, agree_rows);
                let tree = &forest.members()[member];
                let dt = auc_on(self.x, split.val, &tl.val, |r| tree.proba_unchecked(r))
                    .expect("validation has both classes");
                let rfc = auc_on(self.x, split.val, &tl.val, |r| forest.ensemble_proba_unchecked(r))
                    .expect("validation has both classes");
                let key = |auc| Scored {
                    auc,
                    threshold_index: tl.threshold_index,
                    seed_index: s,
                };
                (key(dt), key(rfc))
            })
            .collect();
        let best_dt = evaluated
            .iter()
            .fold(None, |acc, e| Scored::best(acc, Some(e.0)))
            .expect("non-empty grid");

        let candidates = if config.record_candidates {
            evaluated
                .iter()
                .map(|e| Candidate {
                    threshold: config.thresholds[e.0.threshold_index],
                    seed_index: e.0.seed_index,
                    validation_auc: e.0.auc,
                })
                .collect()
        } else {
            Vec::new()
        };

        let threshold = config.thresholds[best_dt.threshold_index];
        let tl = usable
            .iter()
            .find(|u| u.threshold_index == best_dt.threshold_index)
            .expect("winner threshold is usable");
        let forest = self.fit(&view, &tl.train, &raw_train, best_dt.seed_index);
        let (member, agreement) = extract_unchecked(&forest, self.x, agree_rows);
        let tree = forest.members()[member].clone();
        let test_labels = labels_for(self.outcomes, split.test, threshold);
        if !both_classes(&test_labels) {
            return Err(fold_err(format!("test fold has a single class at threshold {threshold}")));
        }
        let test_auc = auc_on(self.x, split.test, &test_labels, |r| tree.proba_unchecked(r))?;
        let model = ExtractedModel {
            tree,
            provenance: Provenance {
                fold: fold_index,
                threshold,
                seed_index: best_dt.seed_index,
                seed: self.config.forest_seed(best_dt.seed_index),
                member_index: member,
                agreement,
                validation_auc: best_dt.auc,
                test_auc,
            },
        };

        let baselines = if config.baselines {
            let best_rfc = evaluated
                .iter()
                .fold(None, |acc, e| Scored::best(acc, Some(e.1)))
                .expect("non-empty grid");
            Some(self.baselines(split, &view, &raw_train, &usable, best_rfc)?)
        } else {
            None
        };

        Ok(FoldReport {
            assignment,
            n_training: split.train.len(),
            n_validation: split.val.len(),
            n_test: split.test.len(),
            skipped_thresholds: skipped,
            model,
            baselines,
            candidates,
        })
    }

    fn baselines(
        &self,
        split: &Split<'_>,
        view: &SortedView,
        raw_train: &[f64],
        usable: &[ThresholdLabels],
        best_rfc: Scored,
    ) -> Result<FoldBaselines> {
        let config = self.config;
        let test_auc_at = |threshold: f64, score: &dyn Fn(&[f64]) -> f64| -> Result<f64> {
            let labels = labels_for(self.outcomes, split.test, threshold);
            auc_on(self.x, split.test, &labels, score)
        };

        // RFC: refit the validation winner.
        let rfc_threshold = config.thresholds[best_rfc.threshold_index];
        let tl = usable
            .iter()
            .find(|u| u.threshold_index == best_rfc.threshold_index)
            .expect("winner threshold is usable");
        let forest = self.fit(view, &tl.train, raw_train, best_rfc.seed_index);
        let rfc = MethodResult {
            threshold: Some(rfc_threshold),
            seed_index: Some(best_rfc.seed_index),
            validation_score: best_rfc.auc,
            test_auc: test_auc_at(rfc_threshold, &|r| forest.ensemble_proba_unchecked(r))?,
        };

        // Plain DT: one deterministic tree per threshold, no bagging.
        let ones = vec![1u32; view.len()];
        let mut dt_best: Option<(f64, usize, TreeNode)> = None;
        for tl in usable {
            let tree = Grower::new(
                view,
                LocalTarget::Labels(&tl.train),
                raw_train,
                &ones,
                config.baseline_tree_params,
            )
            .grow(&mut rng::stream(config.master_seed, 0));
            let auc = auc_on(self.x, split.val, &tl.val, |r| tree.proba_unchecked(r))?;
            if dt_best.as_ref().is_none_or(|b| auc > b.0) {
                dt_best = Some((auc, tl.threshold_index, tree));
            }
        }
        let (dt_val, dt_ti, dt_tree) = dt_best.expect("usable thresholds exist");
        let dt = MethodResult {
            threshold: Some(config.thresholds[dt_ti]),
            seed_index: None,
            validation_score: dt_val,
            test_auc: test_auc_at(config.thresholds[dt_ti], &|r| dt_tree.proba_unchecked(r))?,
        };

        // RFR on raw outcomes; the seed is picked by validation R².
        let rfr_params = |s: usize| ForestParams {
            tree_params: TreeParams {
                task: Task::Regression,
                ..config.forest_params.tree_params
            },
            ..self.forest_params(s)
        };
        let val_y: Vec<f64> = split.val.iter().map(|&r| self.outcomes[r]).collect();
        let test_y: Vec<f64> = split.test.iter().map(|&r| self.outcomes[r]).collect();
        let r2_on = |f: &Forest, rows: &[usize], y: &[f64]| -> Result<f64> {
            let preds: Vec<f64> = rows.iter().map(|&r| f.rfr_predict_unchecked(self.x.row(r))).collect();
            r_squared(&preds, y)
        };
        let scored: Vec<(f64, usize)> = (0..config.n_seeds)
            .into_par_iter()
            .map(|s| {
                let f = forest::fit_on_view(view, LocalTarget::Outcomes(raw_train), raw_train, &rfr_params(s));
                r2_on(&f, split.val, &val_y).map(|r2| (r2, s))
            })
            .collect::<Result<_>>()?;
        let (rfr_val, rfr_seed) = scored
            .into_iter()
            .fold(None, |acc: Option<(f64, usize)>, c| match acc {
                Some(a) if a.0 >= c.0 => Some(a),
                _ => Some(c),
            })
            .expect("n_seeds ≥ 1");
        let f = forest::fit_on_view(view, LocalTarget::Outcomes(raw_train), raw_train, &rfr_params(rfr_seed));
        let rfr_test_r2 = r2_on(&f, split.test, &test_y)?;
        let rfr = MethodResult {
            threshold: None,
            seed_index: Some(rfr_seed),
            validation_score: rfr_val,
            test_auc: r2_to_auc(rfr_test_r2)?,
        };

        Ok(FoldBaselines {
            dt,
            rfc,
            rfr,
            rfr_test_r2,
        })
    }
}

/// The full extraction pipeline: fold search, nested CV, sweep, selection
/// and whole-dataset evaluation.
pub fn run_sweep(cohort: &Cohort, config: &SweepConfig) -> Result<PipelineReport> {
    config.validate()?;
    if cohort.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let plan = search_fold_plan(
        cohort,
        config.n_fold_candidates,
        &mut rng::stream(config.master_seed, purpose::FOLD_SEARCH),
    )?;
    let assignments = nested_cv_assignments(&mut rng::stream(config.master_seed, purpose::NESTED_CV));
    let x = cohort.feature_matrix();
    let outcomes = cohort.outcomes();
    let ctx = FoldContext {
        x: &x,
        outcomes: &outcomes,
        config,
        features: config.feature_set.indices(),
    };

    let mut folds = Vec::with_capacity(N_FOLDS);
    for (i, a) in assignments.iter().enumerate() {
        let mut train: Vec<usize> = a
            .training
            .iter()
            .flat_map(|&f| plan.folds[f].ep_indices.iter().copied())
            .collect();
        train.sort_unstable();
        let split = Split {
            train: &train,
            val: &plan.folds[a.validation].ep_indices,
            test: &plan.folds[a.test].ep_indices,
        };
        log::info!(
            "fold {i}: train {} / validation {} / test {}",
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        folds.push(ctx.run_fold(i, *a, &split)?);
    }

    let mean_test_auc = folds.iter().map(|f| f.model.provenance.test_auc).sum::<f64>() / N_FOLDS as f64;
    let final_fold = folds
        .iter()
        .enumerate()
        .fold(0, |best, (i, f)| {
            if f.model.provenance.test_auc > folds[best].model.provenance.test_auc {
                i
            } else {
                best
            }
        });
    let final_model = folds[final_fold].model.clone();
    let all_labels: Vec<Label> = outcomes
        .iter()
        .map(|&y| Label::from_outcome(y, final_model.provenance.threshold))
        .collect();
    let all_rows: Vec<usize> = (0..x.n_rows()).collect();
    let whole_dataset_auc = auc_on(&x, &all_rows, &all_labels, |r| final_model.tree.proba_unchecked(r))?;
    let whole_dataset_tree = final_model.tree.reannotate(&x, &outcomes, SdKind::Sample)?;

    let baselines = config.baselines.then(|| {
        let mean = |f: &dyn Fn(&FoldBaselines) -> f64| {
            folds.iter().map(|r| f(r.baselines.as_ref().expect("baselines ran"))).sum::<f64>() / N_FOLDS as f64
        };
        BaselineRow {
            feature_set: config.feature_set,
            dt: mean(&|b| b.dt.test_auc),
            rfc: mean(&|b| b.rfc.test_auc),
            rfr: mean(&|b| b.rfr.test_auc),
            extracted_dt: mean_test_auc,
        }
    });

    Ok(PipelineReport {
        config: config.clone(),
        n_eps: cohort.len(),
        n_students: cohort.students().len(),
        fold_sse: plan.sse,
        fold_sizes: plan
            .folds
            .iter()
            .map(|f| FoldSummary {
                n_tutors: f.tutors.len(),
                n_students: f.students.len(),
                n_eps: f.ep_indices.len(),
            })
            .collect(),
        folds,
        mean_test_auc,
        final_model,
        whole_dataset_auc,
        whole_dataset_tree,
        baselines,
    })
}

/// Runs the sweep with baselines once per feature set.
pub fn run_baselines(cohort: &Cohort, config: &SweepConfig) -> Result<(BaselineTable, Vec<PipelineReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for fs in FeatureSet::ALL {
        let cfg = SweepConfig {
            feature_set: fs,
            baselines: true,
            ..config.clone()
        };
        let report = run_sweep(cohort, &cfg)?;
        rows.push(report.baselines.clone().expect("baselines requested"));
        reports.push(report);
    }
    Ok((BaselineTable { rows }, reports))
}

/// Score-change analysis: outcomes become round-to-round differences, then
/// the usual sweep runs with the given thresholds.
pub fn run_change_pipeline(cohort: &Cohort, config: &SweepConfig, baseline: ChangeBaseline) -> Result<PipelineReport> {
    let changes = compute_score_changes(cohort, baseline);
    log::info!(
        "change cohort: {} students, {} evaluation periods",
        changes.students().len(),
        changes.len()
    );
    run_sweep(&changes, config)
}
