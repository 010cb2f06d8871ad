//! Binary CART trees: Gini splits for classification, squared error for
//! regression.
//!
//! Training works on a [`SortedView`], a column-major copy of the training
//! rows with every allowed feature presorted once. Bootstrap resamples are
//! expressed as per-row weights, so many trees can share one view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FEATURE_NAMES;
use crate::error::{Error, Result};
use crate::metrics::{gini_raw, ClassCounts, Label, Moments, SdKind};

/// Improvements smaller than this (relative to the parent impurity) are
/// treated as ties.
const TIE_EPS: f64 = 1e-12;

/// Dense row-major matrix of feature values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_features: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_features: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_features {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: n_rows * n_features,
            });
        }
        Ok(Self {
            n_rows,
            n_features,
            data,
        })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut n_rows = 0;
        let mut n_features = None;
        for row in rows {
            match n_features {
                None => n_features = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(Error::LengthMismatch {
                        left: row.len(),
                        right: n,
                    })
                }
                _ => {}
            }
            data.extend_from_slice(row);
            n_rows += 1;
        }
        Self::new(n_rows, n_features.unwrap_or(0), data)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.data[row * self.n_features + feature]
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Copy with the given columns overwritten by `value`.
    pub fn with_columns_set(&self, columns: &[usize], value: f64) -> Self {
        let mut out = self.clone();
        for r in 0..out.n_rows {
            for &c in columns {
                out.data[r * out.n_features + c] = value;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Number of candidate features drawn at each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mtry {
    /// ⌈√p⌉ of the p available features.
    Sqrt,
    All,
    Count(usize),
}

impl Mtry {
    pub fn resolve(self, available: usize) -> usize {
        let k = match self {
            Mtry::Sqrt => (available as f64).sqrt().ceil() as usize,
            Mtry::All => available,
            Mtry::Count(k) => k,
        };
        k.clamp(1, available.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mtry: Mtry,
    pub task: Task,
}

impl Default for TreeParams {
    /// Standalone depth-2 classification tree over all features.
    fn default() -> Self {
        Self {
            max_depth: 2,
            min_leaf: 5,
            mtry: Mtry::All,
            task: Task::Classification,
        }
    }
}

impl TreeParams {
    /// Member-tree defaults inside a forest: ⌈√p⌉ features per split.
    pub fn forest_member() -> Self {
        Self {
            mtry: Mtry::Sqrt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidParam("max_depth must be at least 1".into()));
        }
        if self.min_leaf < 1 {
            return Err(Error::InvalidParam("min_leaf must be at least 1".into()));
        }
        if let Mtry::Count(0) = self.mtry {
            return Err(Error::InvalidParam("mtry must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Labels(&'a [Label]),
    Outcomes(&'a [f64]),
}

impl Target<'_> {
    pub fn len(&self) -> usize {
        match self {
            Target::Labels(l) => l.len(),
            Target::Outcomes(o) => o.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training rows, their targets and the raw outcomes used for leaf
/// annotation. `features` restricts which columns the tree may read.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub x: &'a FeatureMatrix,
    pub target: Target<'a>,
    pub raw: &'a [f64],
    pub features: Option<&'a [usize]>,
}

impl<'a> TrainingData<'a> {
    pub fn new(x: &'a FeatureMatrix, target: Target<'a>, raw: &'a [f64]) -> Result<Self> {
        if target.len() != x.n_rows() {
            return Err(Error::LengthMismatch {
                left: target.len(),
                right: x.n_rows(),
            });
        }
        if raw.len() != x.n_rows() {
            return Err(Error::LengthMismatch {
                left: raw.len(),
                right: x.n_rows(),
            });
        }
        Ok(Self {
            x,
            target,
            raw,
            features: None,
        })
    }

    pub fn with_features(mut self, features: &'a [usize]) -> Self {
        self.features = Some(features);
        self
    }

    pub(crate) fn feature_list(&self) -> Result<Vec<usize>> {
        let mut f: Vec<usize> = match self.features {
            Some(f) => f.to_vec(),
            None => (0..self.x.n_features()).collect(),
        };
        f.sort_unstable();
        f.dedup();
        if f.is_empty() {
            return Err(Error::InvalidParam("no features to train on".into()));
        }
        if let Some(&bad) = f.iter().find(|&&i| i >= self.x.n_features()) {
            return Err(Error::InvalidParam(format!("feature index {bad} out of range")));
        }
        Ok(f)
    }

    pub(crate) fn task(&self) -> Task {
        match self.target {
            Target::Labels(_) => Task::Classification,
            Target::Outcomes(_) => Task::Regression,
        }
    }
}

/// (n, mean, sd) of the raw outcomes that reached a leaf.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub n: u64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafValue {
    Class(ClassCounts),
    Mean(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: LeafValue,
        annotation: RawAnnotation,
    },
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a TreeNode>) {
        match self {
            TreeNode::Leaf { .. } => out.push(self),
            TreeNode::Split { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn root_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        }
    }

    pub fn annotation(&self) -> Option<&RawAnnotation> {
        match self {
            TreeNode::Leaf { annotation, .. } => Some(annotation),
            TreeNode::Split { .. } => None,
        }
    }

    /// Index (in [`TreeNode::leaves`] order) of the leaf `x` routes to.
    /// Fails on a NaN in any feature the route inspects.
    pub fn leaf_index(&self, x: &[f64]) -> Result<usize> {
        let mut node = self;
        let mut offset = 0;
        loop {
            match node {
                TreeNode::Leaf { .. } => return Ok(offset),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = *x.get(*feature).ok_or(Error::LengthMismatch {
                        left: x.len(),
                        right: feature + 1,
                    })?;
                    if v.is_nan() {
                        return Err(Error::NanFeature(*feature));
                    }
                    if v <= *threshold {
                        node = left;
                    } else {
                        offset += left.n_leaves();
                        node = right;
                    }
                }
            }
        }
    }

    fn route(&self, x: &[f64]) -> Result<&TreeNode> {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { .. } => return Ok(node),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = *x.get(*feature).ok_or(Error::LengthMismatch {
                        left: x.len(),
                        right: feature + 1,
                    })?;
                    if v.is_nan() {
                        return Err(Error::NanFeature(*feature));
                    }
                    node = if v <= *threshold { left } else { right };
                }
            }
        }
    }

    /// Unchecked routing for rows already known to be finite.
    #[inline]
    pub(crate) fn leaf_value(&self, x: &[f64]) -> &LeafValue {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value, .. } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    /// High-class fraction of the leaf `x` reaches.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        match self.route(x)? {
            TreeNode::Leaf {
                value: LeafValue::Class(c),
                ..
            } => Ok(c.high_fraction().unwrap_or(0.0)),
            _ => Err(Error::InvalidParam("predict_proba needs a classification tree".into())),
        }
    }

    /// Majority class of the leaf; a tied leaf predicts low.
    pub fn predict_label(&self, x: &[f64]) -> Result<Label> {
        match self.route(x)? {
            TreeNode::Leaf {
                value: LeafValue::Class(c),
                ..
            } => Ok(c.majority()),
            _ => Err(Error::InvalidParam("predict_label needs a classification tree".into())),
        }
    }

    pub fn predict_value(&self, x: &[f64]) -> Result<f64> {
        match self.route(x)? {
            TreeNode::Leaf {
                value: LeafValue::Mean(m),
                ..
            } => Ok(*m),
            _ => Err(Error::InvalidParam("predict_value needs a regression tree".into())),
        }
    }

    #[inline]
    pub(crate) fn proba_unchecked(&self, x: &[f64]) -> f64 {
        match self.leaf_value(x) {
            LeafValue::Class(c) => c.high_fraction().unwrap_or(0.0),
            LeafValue::Mean(_) => f64::NAN,
        }
    }

    #[inline]
    pub(crate) fn label_unchecked(&self, x: &[f64]) -> Label {
        match self.leaf_value(x) {
            LeafValue::Class(c) => c.majority(),
            LeafValue::Mean(_) => Label::Low,
        }
    }

    #[inline]
    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        match self.leaf_value(x) {
            LeafValue::Mean(m) => *m,
            LeafValue::Class(c) => c.high_fraction().unwrap_or(0.0),
        }
    }

    /// Leaf-size-weighted Gini impurity of a classification tree on the
    /// data it was fit to.
    pub fn training_impurity(&self) -> f64 {
        let leaves: Vec<ClassCounts> = self
            .leaves()
            .into_iter()
            .filter_map(|l| match l {
                TreeNode::Leaf {
                    value: LeafValue::Class(c),
                    ..
                } => Some(*c),
                _ => None,
            })
            .collect();
        let total: u64 = leaves.iter().map(|c| c.total()).sum();
        leaves
            .iter()
            .filter(|c| c.total() > 0)
            .map(|c| c.total() as f64 * gini_raw(c.n_high as f64, c.n_low as f64))
            .sum::<f64>()
            / total as f64
    }

    /// Split features in preorder.
    pub fn split_features(&self) -> Vec<usize> {
        let mut out = Vec::new();
        fn walk(n: &TreeNode, out: &mut Vec<usize>) {
            if let TreeNode::Split {
                feature,
                left,
                right,
                ..
            } = n
            {
                out.push(*feature);
                walk(left, out);
                walk(right, out);
            }
        }
        walk(self, &mut out);
        out
    }

    /// Copy of the tree whose leaf annotations summarize `raw[i]` over the
    /// rows of `x` routed to each leaf. Predictions are left unchanged.
    pub fn reannotate(&self, x: &FeatureMatrix, raw: &[f64], kind: SdKind) -> Result<TreeNode> {
        if raw.len() != x.n_rows() {
            return Err(Error::LengthMismatch {
                left: raw.len(),
                right: x.n_rows(),
            });
        }
        let mut moments = vec![Moments::default(); self.n_leaves()];
        for (i, &y) in raw.iter().enumerate() {
            moments[self.leaf_index(x.row(i))?].add(y, 1);
        }
        let mut next = 0;
        Ok(self.map_leaves(&mut |value| {
            let m = moments[next];
            next += 1;
            TreeNode::Leaf {
                value: *value,
                annotation: RawAnnotation {
                    n: m.n(),
                    mean: m.mean(),
                    sd: m.sd(kind),
                },
            }
        }))
    }

    fn map_leaves(&self, f: &mut impl FnMut(&LeafValue) -> TreeNode) -> TreeNode {
        match self {
            TreeNode::Leaf { value, .. } => f(value),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let left = Box::new(left.map_leaves(f));
                let right = Box::new(right.map_leaves(f));
                TreeNode::Split {
                    feature: *feature,
                    threshold: *threshold,
                    left,
                    right,
                }
            }
        }
    }
}

/// Column-major copy of a training subset with each allowed feature
/// presorted.
#[derive(Clone, Debug)]
pub(crate) struct SortedView {
    /// Allowed global feature indices, ascending.
    features: Vec<usize>,
    /// `columns[k][r]`: value of `features[k]` for local row `r`.
    columns: Vec<Vec<f64>>,
    /// `sorted[k]`: (value, local row) pairs in ascending value order.
    sorted: Vec<Vec<(f64, u32)>>,
    n: usize,
}

impl SortedView {
    pub(crate) fn new(x: &FeatureMatrix, rows: &[usize], features: &[usize]) -> Result<Self> {
        let mut columns = Vec::with_capacity(features.len());
        let mut sorted = Vec::with_capacity(features.len());
        for &f in features {
            let col: Vec<f64> = rows.iter().map(|&r| x.get(r, f)).collect();
            if col.iter().any(|v| v.is_nan()) {
                return Err(Error::NanFeature(f));
            }
            let mut pairs: Vec<(f64, u32)> = col.iter().enumerate().map(|(r, &v)| (v, r as u32)).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            columns.push(col);
            sorted.push(pairs);
        }
        Ok(Self {
            features: features.to_vec(),
            columns,
            sorted,
            n: rows.len(),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.n
    }
}

/// Targets indexed by local view row.
#[derive(Clone, Copy)]
pub(crate) enum LocalTarget<'a> {
    Labels(&'a [Label]),
    Outcomes(&'a [f64]),
}

/// Per-row sufficient statistics, premultiplied by the bootstrap weight.
struct Prepared<'a> {
    weights: &'a [u32],
    /// weight if the row is high, else 0
    high: Vec<u32>,
    /// w·y and w·y²
    wy: Vec<f64>,
    wyy: Vec<f64>,
}

/// Additive node statistics. For a split with sides L and R the weighted
/// child impurity is `(C − P(L) − P(R)) / W`, where `C` and `W` belong to
/// the parent: Gini uses `C = W`, `P = (h² + l²)/w`; squared error uses
/// `C = Σw·y²`, `P = (Σw·y)²/w`.
trait Stat: Copy + Default {
    fn add(&mut self, p: &Prepared<'_>, r: usize);
    fn minus(self, other: Self) -> Self;
    fn weight(&self) -> u32;
    fn purity(&self) -> f64;
    fn constant(&self) -> f64;
}

#[derive(Clone, Copy, Default)]
struct ClassStat {
    w: u32,
    h: u32,
}

impl Stat for ClassStat {
    #[inline(always)]
    fn add(&mut self, p: &Prepared<'_>, r: usize) {
        self.w += p.weights[r];
        self.h += p.high[r];
    }

    #[inline(always)]
    fn minus(self, o: Self) -> Self {
        Self {
            w: self.w - o.w,
            h: self.h - o.h,
        }
    }

    #[inline(always)]
    fn weight(&self) -> u32 {
        self.w
    }

    #[inline(always)]
    fn purity(&self) -> f64 {
        let h = f64::from(self.h);
        let l = f64::from(self.w - self.h);
        (h * h + l * l) / f64::from(self.w)
    }

    fn constant(&self) -> f64 {
        f64::from(self.w)
    }
}

#[derive(Clone, Copy, Default)]
struct RegStat {
    w: u32,
    s: f64,
    ss: f64,
}

impl Stat for RegStat {
    #[inline(always)]
    fn add(&mut self, p: &Prepared<'_>, r: usize) {
        self.w += p.weights[r];
        self.s += p.wy[r];
        self.ss += p.wyy[r];
    }

    #[inline(always)]
    fn minus(self, o: Self) -> Self {
        Self {
            w: self.w - o.w,
            s: self.s - o.s,
            ss: self.ss - o.ss,
        }
    }

    #[inline(always)]
    fn weight(&self) -> u32 {
        self.w
    }

    #[inline(always)]
    fn purity(&self) -> f64 {
        self.s * self.s / f64::from(self.w)
    }

    fn constant(&self) -> f64 {
        self.ss
    }
}

struct Best {
    impurity: f64,
    position: usize,
    threshold: f64,
}

pub(crate) struct Grower<'a> {
    view: &'a SortedView,
    target: LocalTarget<'a>,
    raw: &'a [f64],
    prepared: Prepared<'a>,
    params: TreeParams,
    mtry: usize,
    /// Node id of each local row during split search; rows outside the
    /// bootstrap sample keep `u32::MAX`.
    node_of: Vec<u32>,
    next_node: u32,
    scratch: Vec<(f64, u32)>,
}

impl<'a> Grower<'a> {
    pub(crate) fn new(
        view: &'a SortedView,
        target: LocalTarget<'a>,
        raw: &'a [f64],
        weights: &'a [u32],
        params: TreeParams,
    ) -> Self {
        let (high, wy, wyy) = match target {
            LocalTarget::Labels(l) => (
                weights
                    .iter()
                    .zip(l)
                    .map(|(&w, l)| if l.is_high() { w } else { 0 })
                    .collect(),
                Vec::new(),
                Vec::new(),
            ),
            LocalTarget::Outcomes(y) => (
                Vec::new(),
                weights.iter().zip(y).map(|(&w, &y)| f64::from(w) * y).collect(),
                weights.iter().zip(y).map(|(&w, &y)| f64::from(w) * y * y).collect(),
            ),
        };
        Self {
            view,
            target,
            raw,
            prepared: Prepared {
                weights,
                high,
                wy,
                wyy,
            },
            params,
            mtry: params.mtry.resolve(view.features.len()),
            node_of: vec![u32::MAX; view.n],
            next_node: 0,
            scratch: Vec::new(),
        }
    }

    pub(crate) fn grow<R: Rng>(mut self, rng: &mut R) -> TreeNode {
        let rows: Vec<u32> = (0..self.view.n as u32)
            .filter(|&r| self.prepared.weights[r as usize] > 0)
            .collect();
        match self.target {
            LocalTarget::Labels(_) => self.build::<ClassStat, R>(rows, 0, rng),
            LocalTarget::Outcomes(_) => self.build::<RegStat, R>(rows, 0, rng),
        }
    }

    fn build<S: Stat, R: Rng>(&mut self, rows: Vec<u32>, depth: usize, rng: &mut R) -> TreeNode {
        let mut total = S::default();
        for &r in &rows {
            total.add(&self.prepared, r as usize);
        }
        let w = f64::from(total.weight());
        let node_impurity = (total.constant() - total.purity()) / w;
        let pure = match self.target {
            LocalTarget::Labels(l) => {
                let first = l[rows[0] as usize];
                rows.iter().all(|&r| l[r as usize] == first)
            }
            LocalTarget::Outcomes(y) => {
                let first = y[rows[0] as usize];
                rows.iter().all(|&r| y[r as usize] == first)
            }
        };
        if depth >= self.params.max_depth || pure || w < 2.0 * self.params.min_leaf as f64 {
            return self.leaf(&rows);
        }

        let candidates = self.draw_features(rng);
        let Some(best) = self.best_split::<S>(&rows, &total, &candidates) else {
            return self.leaf(&rows);
        };
        if best.impurity >= node_impurity - TIE_EPS * node_impurity.max(1.0) {
            return self.leaf(&rows);
        }

        let col = &self.view.columns[best.position];
        let (left, right): (Vec<u32>, Vec<u32>) = rows
            .into_iter()
            .partition(|&r| col[r as usize] <= best.threshold);
        let left = self.build::<S, R>(left, depth + 1, rng);
        let right = self.build::<S, R>(right, depth + 1, rng);
        TreeNode::Split {
            feature: self.view.features[best.position],
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Positions (into the view's feature list) of this node's candidates,
    /// ascending so that ties resolve to the lowest feature index.
    fn draw_features<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let p = self.view.features.len();
        if self.mtry >= p {
            return (0..p).collect();
        }
        let mut picked = rand::seq::index::sample(rng, p, self.mtry).into_vec();
        picked.sort_unstable();
        picked
    }

    fn best_split<S: Stat>(&mut self, rows: &[u32], total: &S, candidates: &[usize]) -> Option<Best> {
        let min_leaf = self.params.min_leaf as u32;
        let total_w = total.weight();
        let w = f64::from(total_w);
        let constant = total.constant();
        let mut best: Option<Best> = None;

        // Large nodes scan the presorted pairs; small ones sort locally.
        let use_presorted = rows.len() * 8 >= self.view.n;
        let node_id = self.next_node;
        self.next_node += 1;
        if use_presorted {
            for &r in rows {
                self.node_of[r as usize] = node_id;
            }
        }
        let mut scratch = std::mem::take(&mut self.scratch);

        for &pos in candidates {
            let sorted: &[(f64, u32)] = if use_presorted {
                &self.view.sorted[pos]
            } else {
                let col = &self.view.columns[pos];
                scratch.clear();
                scratch.extend(rows.iter().map(|&r| (col[r as usize], r)));
                scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
                &scratch
            };

            let mut left = S::default();
            let mut prev = f64::NEG_INFINITY;
            for &(v, r) in sorted {
                let ru = r as usize;
                if use_presorted && self.node_of[ru] != node_id {
                    continue;
                }
                let lw = left.weight();
                if v > prev && lw >= min_leaf && total_w - lw >= min_leaf {
                    let right = total.minus(left);
                    let impurity = (constant - left.purity() - right.purity()) / w;
                    let better = match &best {
                        None => true,
                        Some(b) => impurity < b.impurity - TIE_EPS * b.impurity.max(1.0),
                    };
                    if better {
                        let mut threshold = prev + (v - prev) / 2.0;
                        if threshold >= v {
                            threshold = prev;
                        }
                        best = Some(Best {
                            impurity,
                            position: pos,
                            threshold,
                        });
                    }
                }
                left.add(&self.prepared, ru);
                prev = v;
            }
        }
        self.scratch = scratch;
        best
    }

    fn leaf(&self, rows: &[u32]) -> TreeNode {
        let weights = self.prepared.weights;
        let mut n = 0u64;
        let mut sum = 0.0;
        for &r in rows {
            let w = u64::from(weights[r as usize]);
            n += w;
            sum += w as f64 * self.raw[r as usize];
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for &r in rows {
            let d = self.raw[r as usize] - mean;
            ss += f64::from(weights[r as usize]) * d * d;
        }
        let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        let value = match self.target {
            LocalTarget::Labels(_) => {
                let h: u64 = rows.iter().map(|&r| u64::from(self.prepared.high[r as usize])).sum();
                LeafValue::Class(ClassCounts::new(h, n - h))
            }
            LocalTarget::Outcomes(_) => {
                let s: f64 = rows.iter().map(|&r| self.prepared.wy[r as usize]).sum();
                LeafValue::Mean(s / n as f64)
            }
        };
        TreeNode::Leaf {
            value,
            annotation: RawAnnotation { n, mean, sd },
        }
    }
}

/// Fits one tree on every row of `data` by greedy recursive best split.
///
/// At each node `mtry` distinct features are drawn from `rng`; thresholds
/// are midpoints between consecutive distinct values. The lowest weighted
/// impurity wins, ties going to the lowest feature index and then the lowest
/// threshold. Growth stops at `max_depth`, at a pure node, when no split
/// leaves `min_leaf` rows per side, or when no split lowers impurity.
pub fn fit_tree<R: Rng>(data: &TrainingData<'_>, params: &TreeParams, rng: &mut R) -> Result<TreeNode> {
    params.validate()?;
    if params.task != data.task() {
        return Err(Error::InvalidParam(format!(
            "tree task {:?} does not match the target",
            params.task
        )));
    }
    let n = data.x.n_rows();
    if n < 2 * params.min_leaf || n == 0 {
        return Err(Error::TooFewRows {
            needed: (2 * params.min_leaf).max(1),
            got: n,
        });
    }
    let features = data.feature_list()?;
    let rows: Vec<usize> = (0..n).collect();
    let view = SortedView::new(data.x, &rows, &features)?;
    let weights = vec![1u32; n];
    let target = match data.target {
        Target::Labels(l) => LocalTarget::Labels(l),
        Target::Outcomes(o) => LocalTarget::Outcomes(o),
    };
    Ok(Grower::new(&view, target, data.raw, &weights, *params).grow(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Dot,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::InvalidParam(format!("unknown export format `{other}`"))),
        }
    }
}

/// JSON node schema shared by tree exports and saved models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ExportNode {
    Split {
        feature: String,
        feature_index: usize,
        threshold: f64,
        children: Vec<ExportNode>,
    },
    Leaf {
        n: u64,
        mean: f64,
        sd: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class: Option<Label>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        counts: Option<ClassCounts>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
    },
}

fn feature_label(names: &[impl AsRef<str>], i: usize) -> String {
    names
        .get(i)
        .map(|s| s.as_ref().to_string())
        .unwrap_or_else(|| format!("f{i}"))
}

impl TreeNode {
    pub fn to_export(&self, names: &[impl AsRef<str>]) -> ExportNode {
        match self {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => ExportNode::Split {
                feature: feature_label(names, *feature),
                feature_index: *feature,
                threshold: *threshold,
                children: vec![left.to_export(names), right.to_export(names)],
            },
            TreeNode::Leaf { value, annotation } => {
                let (class, counts, value) = match value {
                    LeafValue::Class(c) => (Some(c.majority()), Some(*c), None),
                    LeafValue::Mean(m) => (None, None, Some(*m)),
                };
                ExportNode::Leaf {
                    n: annotation.n,
                    mean: annotation.mean,
                    sd: annotation.sd,
                    class,
                    counts,
                    value,
                }
            }
        }
    }

    pub fn from_export(node: &ExportNode) -> Result<TreeNode> {
        match node {
            ExportNode::Split {
                feature_index,
                threshold,
                children,
                ..
            } => {
                let [left, right] = children.as_slice() else {
                    return Err(Error::InvalidParam(format!(
                        "split node needs 2 children, got {}",
                        children.len()
                    )));
                };
                Ok(TreeNode::Split {
                    feature: *feature_index,
                    threshold: *threshold,
                    left: Box::new(Self::from_export(left)?),
                    right: Box::new(Self::from_export(right)?),
                })
            }
            ExportNode::Leaf {
                n,
                mean,
                sd,
                counts,
                value,
                ..
            } => {
                let value = match (counts, value) {
                    (Some(c), _) => LeafValue::Class(*c),
                    (None, Some(v)) => LeafValue::Mean(*v),
                    (None, None) => {
                        return Err(Error::InvalidParam("leaf has neither counts nor value".into()))
                    }
                };
                Ok(TreeNode::Leaf {
                    value,
                    annotation: RawAnnotation {
                        n: *n,
                        mean: *mean,
                        sd: *sd,
                    },
                })
            }
        }
    }

    pub fn from_json(text: &str) -> Result<TreeNode> {
        Self::from_export(&serde_json::from_str(text)?)
    }
}

impl Serialize for TreeNode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_export(&FEATURE_NAMES).serialize(s)
    }
}

impl<'de> Deserialize<'de> for TreeNode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let node = ExportNode::deserialize(d)?;
        TreeNode::from_export(&node).map_err(serde::de::Error::custom)
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders a tree as graphviz DOT or as the JSON node schema. Output is a
/// pure function of the tree and the names.
pub fn export_tree(tree: &TreeNode, feature_names: &[impl AsRef<str>], format: ExportFormat) -> String {
    match format {
        ExportFormat::Json => serde_json::to_string_pretty(&tree.to_export(feature_names))
            .expect("tree export serializes"),
        ExportFormat::Dot => {
            let mut out = String::from(
                "digraph tree {\n  node [shape=box, fontname=\"Helvetica\"];\n  edge [fontname=\"Helvetica\"];\n",
            );
            let mut next = 0usize;
            write_dot(tree, feature_names, &mut next, &mut out);
            out.push_str("}\n");
            out
        }
    }
}

fn write_dot(node: &TreeNode, names: &[impl AsRef<str>], next: &mut usize, out: &mut String) -> usize {
    let id = *next;
    *next += 1;
    match node {
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            let label = format!("{} ≤ {:.3}", feature_label(names, *feature), threshold);
            out.push_str(&format!("  n{id} [label=\"{}\"];\n", dot_escape(&label)));
            let l = write_dot(left, names, next, out);
            out.push_str(&format!("  n{id} -> n{l} [label=\"yes\"];\n"));
            let r = write_dot(right, names, next, out);
            out.push_str(&format!("  n{id} -> n{r} [label=\"no\"];\n"));
        }
        TreeNode::Leaf { value, annotation } => {
            let tail = match value {
                LeafValue::Class(c) => format!(
                    "class = {}\\nhigh/low = {}/{}",
                    match c.majority() {
                        Label::High => "high",
                        Label::Low => "low",
                    },
                    c.n_high,
                    c.n_low
                ),
                LeafValue::Mean(m) => format!("value = {m:.3}"),
            };
            out.push_str(&format!(
                "  n{id} [shape=ellipse, label=\"n = {}\\nmean(SD) = {:.2} ({:.2})\\n{}\"];\n",
                annotation.n, annotation.mean, annotation.sd, tail
            ));
        }
    }
    id
}
