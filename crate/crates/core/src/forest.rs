//! Bagged tree ensembles: a majority-vote classifier and a mean-prediction
//! regressor.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{r_squared, Label};
use crate::rng;
use crate::tree::{FeatureMatrix, Grower, LocalTarget, SortedView, Target, TrainingData, TreeNode, TreeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree_params: TreeParams,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 10,
            tree_params: TreeParams::forest_member(),
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::InvalidParam("n_trees must be at least 1".into()));
        }
        self.tree_params.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    members: Vec<TreeNode>,
    params: ForestParams,
    /// Training-row indices drawn for each member, in draw order.
    bootstrap: Vec<Vec<u32>>,
}

impl Forest {
    /// Assembles a forest from already-fitted members (no bootstrap record).
    pub fn from_members(members: Vec<TreeNode>, params: ForestParams) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("forest members"));
        }
        let n = members.len();
        Ok(Self {
            members,
            params: ForestParams { n_trees: n, ..params },
            bootstrap: vec![Vec::new(); n],
        })
    }

    pub fn members(&self) -> &[TreeNode] {
        &self.members
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn bootstrap_indices(&self) -> &[Vec<u32>] {
        &self.bootstrap
    }

    pub fn into_members(self) -> Vec<TreeNode> {
        self.members
    }

    /// Number of members voting high for `x`.
    pub fn high_votes(&self, x: &[f64]) -> Result<usize> {
        let mut n = 0;
        for m in &self.members {
            if m.predict_label(x)?.is_high() {
                n += 1;
            }
        }
        Ok(n)
    }

    /// High iff strictly more than half the members vote high.
    pub fn majority_vote(&self, x: &[f64]) -> Result<Label> {
        Ok(vote(self.high_votes(x)?, self.members.len()))
    }

    /// High votes minus low votes.
    pub fn vote_margin(&self, x: &[f64]) -> Result<i64> {
        let high = self.high_votes(x)? as i64;
        Ok(2 * high - self.members.len() as i64)
    }

    /// Mean of the members' leaf high fractions.
    pub fn ensemble_proba(&self, x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for m in &self.members {
            s += m.predict_proba(x)?;
        }
        Ok(s / self.members.len() as f64)
    }

    pub(crate) fn ensemble_proba_unchecked(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.proba_unchecked(x)).sum::<f64>() / self.members.len() as f64
    }

    pub(crate) fn rfr_predict_unchecked(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.value_unchecked(x)).sum::<f64>() / self.members.len() as f64
    }

    /// Mean of the members' leaf means.
    pub fn rfr_predict(&self, x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for m in &self.members {
            s += m.predict_value(x)?;
        }
        Ok(s / self.members.len() as f64)
    }

    /// R² of the regressor on `x` against `outcomes`.
    pub fn rfr_r2(&self, x: &FeatureMatrix, outcomes: &[f64]) -> Result<f64> {
        let preds = (0..x.n_rows())
            .map(|i| self.rfr_predict(x.row(i)))
            .collect::<Result<Vec<_>>>()?;
        r_squared(&preds, outcomes)
    }

    /// Hex SHA-256 of each member's bootstrap indices (little-endian u32).
    pub fn bootstrap_digests(&self) -> Vec<String> {
        self.bootstrap
            .iter()
            .map(|idx| {
                let mut h = Sha256::new();
                for i in idx {
                    h.update(i.to_le_bytes());
                }
                hex::encode(h.finalize())
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            params: &'a ForestParams,
            members: &'a [TreeNode],
            bootstrap_sha256: Vec<String>,
        }
        Ok(serde_json::to_string_pretty(&Export {
            params: &self.params,
            members: &self.members,
            bootstrap_sha256: self.bootstrap_digests(),
        })?)
    }
}

fn vote(high: usize, n: usize) -> Label {
    if 2 * high > n {
        Label::High
    } else {
        Label::Low
    }
}

/// Fits `n_trees` members. Member `i` draws its bootstrap sample and split
/// features from a stream derived from `(seed, i)`.
pub fn fit_forest(data: &TrainingData<'_>, params: &ForestParams) -> Result<Forest> {
    params.validate()?;
    if params.tree_params.task != data.task() {
        return Err(Error::InvalidParam(format!(
            "tree task {:?} does not match the target",
            params.tree_params.task
        )));
    }
    let n = data.x.n_rows();
    if n < 2 * params.tree_params.min_leaf || n == 0 {
        return Err(Error::TooFewRows {
            needed: (2 * params.tree_params.min_leaf).max(1),
            got: n,
        });
    }
    if let Target::Labels(l) = data.target {
        check_two_classes(l)?;
    }
    let features = data.feature_list()?;
    let rows: Vec<usize> = (0..n).collect();
    let view = SortedView::new(data.x, &rows, &features)?;
    let target = match data.target {
        Target::Labels(l) => LocalTarget::Labels(l),
        Target::Outcomes(o) => LocalTarget::Outcomes(o),
    };
    Ok(fit_on_view(&view, target, data.raw, params))
}

pub(crate) fn check_two_classes(labels: &[Label]) -> Result<()> {
    let n_high = labels.iter().filter(|l| l.is_high()).count();
    let n_low = labels.len() - n_high;
    if n_high == 0 || n_low == 0 {
        return Err(Error::SingleClass { n_high, n_low });
    }
    Ok(())
}

/// Forest training on a prebuilt view; callers have validated inputs.
pub(crate) fn fit_on_view(view: &SortedView, target: LocalTarget<'_>, raw: &[f64], params: &ForestParams) -> Forest {
    let n = view.len();
    let mut members = Vec::with_capacity(params.n_trees);
    let mut bootstrap = Vec::with_capacity(params.n_trees);
    let mut weights = vec![0u32; n];
    for i in 0..params.n_trees {
        let mut child = rng::stream(params.seed, i as u64);
        let drawn: Vec<u32> = if params.bootstrap {
            (0..n).map(|_| child.random_range(0..n as u32)).collect()
        } else {
            (0..n as u32).collect()
        };
        weights.iter_mut().for_each(|w| *w = 0);
        for &d in &drawn {
            weights[d as usize] += 1;
        }
        members.push(Grower::new(view, target, raw, &weights, params.tree_params).grow(&mut child));
        bootstrap.push(drawn);
    }
    Forest {
        members,
        params: *params,
        bootstrap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{fit_tree, LeafValue, Mtry, RawAnnotation, Task};
    use crate::metrics::ClassCounts;

    fn leaf(n_high: u64, n_low: u64) -> TreeNode {
        TreeNode::Leaf {
            value: LeafValue::Class(ClassCounts::new(n_high, n_low)),
            annotation: RawAnnotation { n: n_high + n_low, mean: 0.0, sd: 0.0 },
        }
    }

    fn forest_of(members: Vec<TreeNode>) -> Forest {
        let n = members.len();
        Forest {
            members,
            params: ForestParams { n_trees: n, ..ForestParams::default() },
            bootstrap: vec![Vec::new(); n],
        }
    }

    fn toy() -> (FeatureMatrix, Vec<Label>, Vec<f64>) {
        let rows: Vec<[f64; 3]> = (0..40)
            .map(|i| [i as f64, ((i * 7) % 11) as f64, ((i * 5) % 13) as f64])
            .collect();
        let x = FeatureMatrix::from_rows(rows.iter().map(|r| &r[..])).unwrap();
        let raw: Vec<f64> = (0..40).map(|i| if i < 22 { 10.0 } else { 25.0 } + (i % 3) as f64).collect();
        let labels = raw.iter().map(|&y| Label::from_outcome(y, 20.0)).collect();
        (x, labels, raw)
    }

    #[test]
    fn vote_rules() {
        let mut members = vec![leaf(1, 0); 6];
        members.extend(vec![leaf(0, 1); 4]);
        assert_eq!(forest_of(members).majority_vote(&[0.0]).unwrap(), Label::High);

        let mut members = vec![leaf(1, 0); 5];
        members.extend(vec![leaf(0, 1); 5]);
        let f = forest_of(members);
        assert_eq!(f.majority_vote(&[0.0]).unwrap(), Label::Low);
        assert_eq!(f.vote_margin(&[0.0]).unwrap(), 0);

        let f = forest_of(vec![leaf(1, 0), leaf(1, 0), leaf(0, 1), leaf(0, 1)]);
        assert_eq!(f.ensemble_proba(&[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_unbagged_member_equals_fit_tree() {
        let (x, labels, raw) = toy();
        let data = TrainingData::new(&x, Target::Labels(&labels), &raw).unwrap();
        let tp = TreeParams { mtry: Mtry::All, ..TreeParams::default() };
        let params = ForestParams { n_trees: 1, tree_params: tp, bootstrap: false, seed: 3 };
        let forest = fit_forest(&data, &params).unwrap();
        let tree = fit_tree(&data, &tp, &mut rng::stream(3, 0)).unwrap();
        assert_eq!(forest.members()[0], tree);
        for i in 0..x.n_rows() {
            assert_eq!(forest.ensemble_proba(x.row(i)).unwrap(), tree.predict_proba(x.row(i)).unwrap());
        }
        // A perfectly separable training set is fit exactly.
        for i in 0..x.n_rows() {
            assert_eq!(forest.majority_vote(x.row(i)).unwrap(), labels[i]);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (x, labels, raw) = toy();
        let data = TrainingData::new(&x, Target::Labels(&labels), &raw).unwrap();
        let p = ForestParams { seed: 11, ..ForestParams::default() };
        let a = fit_forest(&data, &p).unwrap();
        let b = fit_forest(&data, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = fit_forest(&data, &ForestParams { seed: 12, ..p }).unwrap();
        let multiset = |f: &Forest| {
            f.bootstrap_indices()
                .iter()
                .map(|v| {
                    let mut v = v.clone();
                    v.sort_unstable();
                    v
                })
                .collect::<Vec<_>>()
        };
        assert_ne!(multiset(&a), multiset(&c));
        assert_eq!(a.members().len(), 10);
        assert!(a.bootstrap_indices().iter().all(|b| b.len() == 40));
        assert_eq!(a.bootstrap_digests()[0].len(), 64);
    }

    #[test]
    fn vote_matches_count_rule() {
        let (x, labels, raw) = toy();
        let data = TrainingData::new(&x, Target::Labels(&labels), &raw).unwrap();
        let f = fit_forest(&data, &ForestParams { seed: 5, ..ForestParams::default() }).unwrap();
        for i in 0..x.n_rows() {
            let high = f.high_votes(x.row(i)).unwrap();
            let expect = if high * 2 > 10 { Label::High } else { Label::Low };
            assert_eq!(f.majority_vote(x.row(i)).unwrap(), expect);
            let p = f.ensemble_proba(x.row(i)).unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _, raw) = toy();
        let labels = vec![Label::Low; 40];
        let data = TrainingData::new(&x, Target::Labels(&labels), &raw).unwrap();
        assert!(matches!(
            fit_forest(&data, &ForestParams::default()),
            Err(Error::SingleClass { n_high: 0, n_low: 40 })
        ));
    }

    #[test]
    fn regressor_paths() {
        let (x, _, raw) = toy();
        let tp = TreeParams { task: Task::Regression, ..TreeParams::forest_member() };
        let constant = vec![17.0; 40];
        let data = TrainingData::new(&x, Target::Outcomes(&constant), &constant).unwrap();
        let f = fit_forest(&data, &ForestParams { tree_params: tp, ..ForestParams::default() }).unwrap();
        assert_eq!(f.rfr_predict(x.row(3)).unwrap(), 17.0);
        assert!(matches!(f.rfr_r2(&x, &constant), Err(Error::ZeroVariance)));

        let data = TrainingData::new(&x, Target::Outcomes(&raw), &raw).unwrap();
        let f = fit_forest(&data, &ForestParams { tree_params: tp, ..ForestParams::default() }).unwrap();
        let r2 = f.rfr_r2(&x, &raw).unwrap();
        assert!(r2 > 0.5 && r2 <= 1.0, "{r2}");
        assert!(fit_forest(&data, &ForestParams::default()).is_err());
    }

    #[test]
    fn r2_hand_example() {
        assert_eq!(r_squared(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    }
}
