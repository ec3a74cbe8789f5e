//! Per-goal-type decision trees: top-down growth with indicator lookahead,
//! cost-complexity pruning and weighted, smoothed leaf likelihoods.
//!
//! The learner works on any [`Schema`]; [`Schema::catalog`] is the schema of
//! the goal-recognition feature set.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureGroup, FeatureKind, FeatureVector, N_FEATURES};
use crate::scene::GoalType;

/// Decreases closer than this are ties.
pub const TIE_TOLERANCE: f64 = 1e-12;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub laplace_alpha: f64,
    /// Lets potentially missing features split anywhere and disables
    /// lookahead. Used for the fully-informed baseline.
    #[serde(default)]
    pub oracle: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 1e-4,
            max_depth: 7,
            min_samples_leaf: 10,
            laplace_alpha: 1.0,
            oracle: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::Config("max-depth must be at least 1".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::Config("min-samples-leaf must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.laplace_alpha > 0.0 && self.laplace_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "laplace alpha must be positive and finite, got {}",
                self.laplace_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    None,
    /// Potentially missing; holds its indicator's index.
    Missing(usize),
    /// Indicator; holds the index of the feature it reports on.
    Indicator(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub kinds: Vec<FeatureKind>,
    pub pairing: Vec<Pairing>,
}

impl Schema {
    pub fn catalog() -> Self {
        let kinds = Feature::all().map(Feature::kind).collect();
        let pairing = Feature::all()
            .map(|f| match f.group() {
                FeatureGroup::Base => Pairing::None,
                FeatureGroup::MaybeMissing => Pairing::Missing(f.indicator().unwrap().0),
                FeatureGroup::Indicator => Pairing::Indicator(f.base_of().unwrap().0),
            })
            .collect();
        Schema { kinds, pairing }
    }

    /// Schema without missing values.
    pub fn plain(kinds: Vec<FeatureKind>) -> Self {
        let pairing = vec![Pairing::None; kinds.len()];
        Schema { kinds, pairing }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Column-major samples; NaN marks a missing value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn new(columns: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        if columns.iter().any(|c| c.len() != labels.len()) {
            return Err(Error::Validation("column lengths differ from label count".into()));
        }
        Ok(Dataset { columns, labels })
    }

    pub fn with_features(n: usize) -> Self {
        Dataset {
            columns: vec![Vec::new(); n],
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64], label: bool) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        for (c, v) in self.columns.iter_mut().zip(row) {
            c.push(*v);
        }
        self.labels.push(label);
    }

    pub fn from_vectors<'a>(samples: impl IntoIterator<Item = (&'a FeatureVector, bool)>) -> Self {
        let mut d = Dataset::with_features(N_FEATURES);
        for (fv, y) in samples {
            d.push(&fv.to_row(), y);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|y| **y).count()
    }

    pub fn value(&self, feature: usize, row: usize) -> f64 {
        self.columns[feature][row]
    }

    /// Smoothed class weights (w_G, w_notG) = ((N + 2a)/(N_G + a), (N + 2a)/(N_notG + a)).
    pub fn class_weights(&self, alpha: f64) -> (f64, f64) {
        let n = self.len() as f64;
        let p = self.n_pos() as f64;
        let total = n + 2.0 * alpha;
        (total / (p + alpha), total / (n - p + alpha))
    }

    fn check(&self, schema: &Schema) -> Result<()> {
        if self.n_features() != schema.len() {
            return Err(Error::Validation(format!(
                "dataset has {} features, schema has {}",
                self.n_features(),
                schema.len()
            )));
        }
        for (f, col) in self.columns.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                let ok = match schema.pairing[f] {
                    Pairing::Missing(ind) => v.is_nan() == (self.columns[ind][r] == 1.0),
                    _ => !v.is_nan(),
                };
                if !ok {
                    return Err(Error::Consistency(format!("row {r}: feature {f} inconsistent with its indicator")));
                }
                if schema.kinds[f] == FeatureKind::Binary && !v.is_nan() && *v != 0.0 && *v != 1.0 {
                    return Err(Error::Consistency(format!("row {r}: binary feature {f} has value {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Binary entropy in bits.
pub fn entropy2(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

fn weighted_entropy(w: (f64, f64), pos: usize, neg: usize) -> (f64, f64) {
    let wp = w.0 * pos as f64;
    let wn = w.1 * neg as f64;
    let mass = wp + wn;
    if mass <= 0.0 {
        (0.0, 0.0)
    } else {
        (mass, entropy2(wp / mass))
    }
}

/// Decrease in class-weighted entropy when `pos`/`neg` samples split into a
/// true side (`pos_t`, `neg_t`) and the rest.
pub fn split_decrease(w: (f64, f64), pos: usize, neg: usize, pos_t: usize, neg_t: usize) -> f64 {
    let (m, h) = weighted_entropy(w, pos, neg);
    if m <= 0.0 {
        return 0.0;
    }
    let (mt, ht) = weighted_entropy(w, pos_t, neg_t);
    let (mf, hf) = weighted_entropy(w, pos - pos_t, neg - neg_t);
    h - (mt / m) * ht - (mf / m) * hf
}

/// Decrease from the rule `x_feature > c` over the samples `idx`.
pub fn impurity_decrease(data: &Dataset, idx: &[usize], feature: usize, c: f64, w: (f64, f64)) -> f64 {
    let (mut pos, mut neg, mut pos_t, mut neg_t) = (0, 0, 0, 0);
    for &r in idx {
        let y = data.labels[r];
        let t = data.value(feature, r) > c;
        match (y, t) {
            (true, true) => {
                pos += 1;
                pos_t += 1;
            }
            (true, false) => pos += 1,
            (false, true) => {
                neg += 1;
                neg_t += 1;
            }
            (false, false) => neg += 1,
        }
    }
    split_decrease(w, pos, neg, pos_t, neg_t)
}

/// Threshold between two consecutive distinct values.
pub fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub decrease: f64,
}

/// Every admissible threshold of one feature with its decrease. Samples with
/// a missing value make the feature inadmissible.
pub fn threshold_candidates(
    data: &Dataset,
    idx: &[usize],
    feature: usize,
    kind: FeatureKind,
    w: (f64, f64),
    min_leaf: usize,
) -> Vec<SplitCandidate> {
    let mut vals: Vec<(f64, bool)> = Vec::with_capacity(idx.len());
    for &r in idx {
        let v = data.value(feature, r);
        if v.is_nan() {
            return Vec::new();
        }
        vals.push((v, data.labels[r]));
    }
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos: usize = vals.iter().filter(|v| v.1).count();
    let neg = vals.len() - pos;
    let mut out = Vec::new();
    let (mut pos_f, mut neg_f) = (0usize, 0usize);
    for i in 0..vals.len() {
        if vals[i].1 {
            pos_f += 1;
        } else {
            neg_f += 1;
        }
        if i + 1 == vals.len() || vals[i + 1].0 == vals[i].0 {
            continue;
        }
        let n_false = i + 1;
        let n_true = vals.len() - n_false;
        if n_false < min_leaf || n_true < min_leaf {
            continue;
        }
        let threshold = match kind {
            FeatureKind::Binary => 0.5,
            FeatureKind::Scalar => midpoint(vals[i].0, vals[i + 1].0),
        };
        out.push(SplitCandidate {
            feature,
            threshold,
            decrease: split_decrease(w, pos, neg, pos - pos_f, neg - neg_f),
        });
    }
    out
}

/// Tie-broken maximum: largest decrease, then earlier feature, then smaller
/// threshold. Candidates within the tie tolerance of the maximum are ties.
pub fn select_best(cands: &[SplitCandidate]) -> Option<SplitCandidate> {
    let max = cands.iter().map(|c| c.decrease).fold(f64::NEG_INFINITY, f64::max);
    cands
        .iter()
        .filter(|c| c.decrease >= max - TIE_TOLERANCE)
        .min_by(|a, b| a.feature.cmp(&b.feature).then(a.threshold.total_cmp(&b.threshold)))
        .copied()
}

/// Best single split over the allowed features; `None` when no split has a
/// positive decrease.
pub fn best_split(
    data: &Dataset,
    idx: &[usize],
    allowed: &[usize],
    schema: &Schema,
    w: (f64, f64),
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let cands: Vec<SplitCandidate> = allowed
        .iter()
        .flat_map(|&f| threshold_candidates(data, idx, f, schema.kinds[f], w, min_leaf))
        .collect();
    select_best(&cands).filter(|c| c.decrease > TIE_TOLERANCE)
}

/// Score of placing the indicator of `feature` and then splitting on
/// `feature` among samples where it is present, less `lambda`. Returns the
/// score and the child threshold, or `None` when no child split exists.
pub fn lookahead_split(
    data: &Dataset,
    idx: &[usize],
    feature: usize,
    indicator: usize,
    schema: &Schema,
    w: (f64, f64),
    min_leaf: usize,
    lambda: f64,
) -> Option<(f64, f64)> {
    let present: Vec<usize> = idx.iter().copied().filter(|&r| data.value(indicator, r) != 1.0).collect();
    if present.is_empty() {
        return None;
    }
    let ind_dec = impurity_decrease(data, idx, indicator, 0.5, w);
    let child = select_best(&threshold_candidates(
        data,
        &present,
        feature,
        schema.kinds[feature],
        w,
        min_leaf,
    ))?;
    Some((ind_dec + child.decrease - lambda, child.threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub feature: usize,
    pub threshold: f64,
    pub true_child: usize,
    pub false_child: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub branch: Option<Branch>,
    pub likelihood: f64,
    pub weight_true: Option<f64>,
    pub weight_false: Option<f64>,
    pub n_g: usize,
    pub n_ng: usize,
    /// Class-weighted entropy of the samples reaching the node.
    pub entropy: f64,
    /// Entropy scaled by the node's share of the root's weighted mass.
    pub impurity: f64,
}

/// Arena tree; node 0 is the root and children always follow parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

/// Root-to-leaf path with the constraint imposed by each edge.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPath {
    pub leaf: usize,
    pub likelihood: f64,
    /// (feature, threshold, took the `x > threshold` branch)
    pub tests: Vec<(usize, f64, bool)>,
}

impl Tree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn n_leaves(&self) -> usize {
        subtree_stats(self, 0).1
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            match t.nodes[i].branch {
                None => 0,
                Some(b) => 1 + rec(t, b.true_child).max(rec(t, b.false_child)),
            }
        }
        rec(self, 0)
    }

    /// Likelihood from the root value 0.5 times the edge weights on the path.
    /// Reading a missing value is a contract violation.
    pub fn likelihood(&self, value: impl Fn(usize) -> Option<f64>) -> Result<f64> {
        let mut i = 0;
        let mut l = 0.5;
        while let Some(b) = self.nodes[i].branch {
            let x = value(b.feature).ok_or_else(|| {
                Error::Contract(format!("tree evaluated missing feature {} at node {i}", b.feature))
            })?;
            if x > b.threshold {
                l *= self.nodes[i].weight_true.unwrap();
                i = b.true_child;
            } else {
                l *= self.nodes[i].weight_false.unwrap();
                i = b.false_child;
            }
        }
        Ok(l)
    }

    /// Index of the leaf reached by a sample.
    pub fn leaf_of(&self, value: impl Fn(usize) -> Option<f64>) -> Result<usize> {
        let mut i = 0;
        while let Some(b) = self.nodes[i].branch {
            let x = value(b.feature)
                .ok_or_else(|| Error::Contract(format!("tree evaluated missing feature {}", b.feature)))?;
            i = if x > b.threshold { b.true_child } else { b.false_child };
        }
        Ok(i)
    }

    /// Every leaf with its path, likelihoods computed exactly as in
    /// [`Tree::likelihood`].
    pub fn leaf_paths(&self) -> Vec<LeafPath> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 0.5f64, Vec::new())];
        while let Some((i, l, tests)) = stack.pop() {
            match self.nodes[i].branch {
                None => out.push(LeafPath {
                    leaf: i,
                    likelihood: l,
                    tests,
                }),
                Some(b) => {
                    let mut tf = tests.clone();
                    tf.push((b.feature, b.threshold, false));
                    stack.push((b.false_child, l * self.nodes[i].weight_false.unwrap(), tf));
                    let mut tt = tests;
                    tt.push((b.feature, b.threshold, true));
                    stack.push((b.true_child, l * self.nodes[i].weight_true.unwrap(), tt));
                }
            }
        }
        out.sort_by_key(|p| p.leaf);
        out
    }

    /// Sum of leaf impurities plus `lambda` per leaf.
    pub fn cost(&self, lambda: f64) -> f64 {
        let (r, leaves) = subtree_stats(self, 0);
        r + lambda * leaves as f64
    }

    /// Checks that every potentially missing feature is only tested below the
    /// false branch of its indicator.
    pub fn check_legality(&self, schema: &Schema) -> Result<()> {
        let mut stack = vec![(0usize, Vec::<usize>::new())];
        while let Some((i, cleared)) = stack.pop() {
            if let Some(b) = self.nodes[i].branch {
                if let Pairing::Missing(ind) = schema.pairing[b.feature] {
                    if !cleared.contains(&ind) {
                        return Err(Error::Validation(format!(
                            "node {i} tests feature {} outside the false branch of its indicator",
                            b.feature
                        )));
                    }
                }
                stack.push((b.true_child, cleared.clone()));
                let mut c = cleared;
                c.push(b.feature);
                stack.push((b.false_child, c));
            }
        }
        Ok(())
    }

    fn validate_structure(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Validation("tree has no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if seen[i] {
                return Err(Error::Validation(format!("node {i} reached twice")));
            }
            seen[i] = true;
            let n = &self.nodes[i];
            if !(n.likelihood > 0.0 && n.likelihood < 1.0) {
                return Err(Error::Validation(format!("node {i} likelihood {} outside (0, 1)", n.likelihood)));
            }
            if let Some(b) = n.branch {
                if b.feature >= n_features {
                    return Err(Error::Validation(format!("node {i} feature index out of range")));
                }
                for c in [b.true_child, b.false_child] {
                    if c <= i || c >= self.nodes.len() {
                        return Err(Error::Validation(format!("node {i} has invalid child {c}")));
                    }
                    stack.push(c);
                }
                if n.weight_true.is_none() || n.weight_false.is_none() {
                    return Err(Error::Validation(format!("node {i} lacks edge weights")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("unreachable nodes in tree".into()));
        }
        Ok(())
    }
}

/// Smoothed, class-weighted likelihood of a node.
pub fn leaf_likelihood(n_g: f64, n_ng: f64, w_g: f64, w_ng: f64, alpha: f64) -> f64 {
    let a = w_g * (n_g + alpha);
    let b = w_ng * (n_ng + alpha);
    a / (a + b)
}

struct Grower<'a> {
    data: &'a Dataset,
    schema: &'a Schema,
    config: &'a TrainingConfig,
    w: (f64, f64),
    root_mass: f64,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn make_node(&self, idx: &[usize]) -> Node {
        let pos = idx.iter().filter(|&&r| self.data.labels[r]).count();
        let neg = idx.len() - pos;
        let (mass, h) = weighted_entropy(self.w, pos, neg);
        Node {
            branch: None,
            likelihood: leaf_likelihood(pos as f64, neg as f64, self.w.0, self.w.1, self.config.laplace_alpha),
            weight_true: None,
            weight_false: None,
            n_g: pos,
            n_ng: neg,
            entropy: h,
            impurity: if self.root_mass > 0.0 { mass / self.root_mass * h } else { 0.0 },
        }
    }

    fn choose(&self, idx: &[usize], c_true: &[usize], c_false: &[usize]) -> Option<SplitCandidate> {
        let min_leaf = self.config.min_samples_leaf;
        let mut allowed = Vec::new();
        let mut lookahead = Vec::new();
        for f in 0..self.schema.len() {
            match self.schema.pairing[f] {
                Pairing::None => allowed.push(f),
                Pairing::Indicator(_) => {
                    if !c_true.contains(&f) && !c_false.contains(&f) {
                        allowed.push(f);
                    }
                }
                Pairing::Missing(ind) => {
                    if self.config.oracle || c_false.contains(&ind) {
                        allowed.push(f);
                    } else if !c_true.contains(&ind) {
                        lookahead.push((f, ind));
                    }
                }
            }
        }
        let single = best_split(self.data, idx, &allowed, self.schema, self.w, min_leaf);
        let mut best = single;
        for (f, ind) in lookahead {
            let Some((score, _)) =
                lookahead_split(self.data, idx, f, ind, self.schema, self.w, min_leaf, self.config.lambda)
            else {
                continue;
            };
            let cand = SplitCandidate {
                feature: ind,
                threshold: 0.5,
                decrease: score,
            };
            // Singles win ties; among lookaheads the earlier feature wins.
            let better = match best {
                None => score > TIE_TOLERANCE,
                Some(b) => score > b.decrease + TIE_TOLERANCE,
            };
            if better {
                best = Some(cand);
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, c_true: Vec<usize>, c_false: Vec<usize>) -> usize {
        let id = self.nodes.len();
        let node = self.make_node(&idx);
        let stop = depth >= self.config.max_depth
            || idx.len() < self.config.min_samples_leaf
            || node.n_g == 0
            || node.n_ng == 0;
        self.nodes.push(node);
        if stop {
            return id;
        }
        let Some(split) = self.choose(&idx, &c_true, &c_false) else {
            return id;
        };
        let f = split.feature;
        let (t_idx, f_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&r| self.data.value(f, r) > split.threshold);
        let is_ind = matches!(self.schema.pairing[f], Pairing::Indicator(_));
        let (mut ct, mut cf) = (c_true.clone(), c_false.clone());
        if is_ind {
            ct.push(f);
            cf.push(f);
        }
        let t = self.grow(t_idx, depth + 1, ct, c_false);
        let fc = self.grow(f_idx, depth + 1, c_true, cf);
        self.nodes[id].branch = Some(Branch {
            feature: f,
            threshold: split.threshold,
            true_child: t,
            false_child: fc,
        });
        id
    }
}

/// Grows a tree without pruning or edge weights.
pub fn grow_tree(data: &Dataset, schema: &Schema, config: &TrainingConfig) -> Result<Tree> {
    config.validate()?;
    data.check(schema)?;
    if data.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    let w = data.class_weights(config.laplace_alpha);
    let (root_mass, _) = weighted_entropy(w, data.n_pos(), data.len() - data.n_pos());
    let mut g = Grower {
        data,
        schema,
        config,
        w,
        root_mass,
        nodes: Vec::new(),
    };
    g.grow((0..data.len()).collect(), 0, Vec::new(), Vec::new());
    Ok(Tree { nodes: g.nodes })
}

/// Rebuilds the arena in pre-order from the root, dropping unreachable nodes.
fn compact(tree: &Tree) -> Tree {
    fn rec(src: &Tree, i: usize, out: &mut Vec<Node>) -> usize {
        let id = out.len();
        let mut n = src.nodes[i].clone();
        n.branch = None;
        out.push(n);
        if let Some(b) = src.nodes[i].branch {
            let t = rec(src, b.true_child, out);
            let f = rec(src, b.false_child, out);
            out[id].branch = Some(Branch {
                true_child: t,
                false_child: f,
                ..b
            });
        }
        id
    }
    let mut out = Vec::new();
    rec(tree, 0, &mut out);
    Tree { nodes: out }
}

fn subtree_stats(tree: &Tree, i: usize) -> (f64, usize) {
    match tree.nodes[i].branch {
        None => (tree.nodes[i].impurity, 1),
        Some(b) => {
            let (a, na) = subtree_stats(tree, b.true_child);
            let (c, nc) = subtree_stats(tree, b.false_child);
            (a + c, na + nc)
        }
    }
}

fn reachable(tree: &Tree) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![0];
    while let Some(i) = stack.pop() {
        out.push(i);
        if let Some(b) = tree.nodes[i].branch {
            stack.push(b.false_child);
            stack.push(b.true_child);
        }
    }
    out.sort_unstable();
    out
}

/// Weakest-link pruning. Returns the pruned tree and the cost after each
/// collapse, starting with the unpruned cost.
pub fn prune_with_trace(tree: &Tree, lambda: f64) -> (Tree, Vec<f64>) {
    let mut t = tree.clone();
    let mut trace = vec![t.cost(lambda)];
    if lambda == 0.0 {
        return (t, trace);
    }
    loop {
        let mut weakest: Option<(f64, usize)> = None;
        for i in reachable(&t) {
            if t.nodes[i].branch.is_none() {
                continue;
            }
            let (r_sub, leaves) = subtree_stats(&t, i);
            let g = (t.nodes[i].impurity - r_sub) / (leaves as f64 - 1.0);
            if weakest.map_or(true, |(wg, _)| g < wg) {
                weakest = Some((g, i));
            }
        }
        match weakest {
            Some((g, i)) if g <= lambda => {
                t.nodes[i].branch = None;
                t.nodes[i].weight_true = None;
                t.nodes[i].weight_false = None;
                trace.push(t.cost(lambda));
            }
            _ => break,
        }
    }
    (compact(&t), trace)
}

pub fn prune(tree: &Tree, lambda: f64) -> Tree {
    prune_with_trace(tree, lambda).0
}

/// Sets edge weights to child/parent likelihood ratios.
pub fn assign_edge_weights(tree: &mut Tree) {
    for i in 0..tree.nodes.len() {
        if let Some(b) = tree.nodes[i].branch {
            let l = tree.nodes[i].likelihood;
            tree.nodes[i].weight_true = Some(tree.nodes[b.true_child].likelihood / l);
            tree.nodes[i].weight_false = Some(tree.nodes[b.false_child].likelihood / l);
        }
    }
}

/// Grows, prunes and weights a tree.
pub fn train(data: &Dataset, schema: &Schema, config: &TrainingConfig) -> Result<Tree> {
    let grown = grow_tree(data, schema, config)?;
    let mut t = prune(&grown, config.lambda);
    assign_edge_weights(&mut t);
    Ok(t)
}

/// A trained tree for one goal type over the standard feature catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalTree {
    pub goal_type: GoalType,
    pub config: TrainingConfig,
    pub tree: Tree,
}

impl GoalTree {
    pub fn train(goal_type: GoalType, data: &Dataset, config: &TrainingConfig) -> Result<Self> {
        Ok(GoalTree {
            goal_type,
            config: *config,
            tree: train(data, &Schema::catalog(), config)?,
        })
    }

    pub fn likelihood(&self, x: &FeatureVector) -> Result<f64> {
        self.tree.likelihood(|f| x.get(Feature(f)))
    }

    /// Human-readable decision path: (feature, threshold, branch, edge weight).
    pub fn explain(&self, x: &FeatureVector) -> Result<Vec<(Feature, f64, bool, f64)>> {
        let mut out = Vec::new();
        let mut i = 0;
        while let Some(b) = self.tree.nodes[i].branch {
            let v = x
                .get(Feature(b.feature))
                .ok_or_else(|| Error::Contract(format!("missing {}", Feature(b.feature))))?;
            let went = v > b.threshold;
            let (w, next) = if went {
                (self.tree.nodes[i].weight_true.unwrap(), b.true_child)
            } else {
                (self.tree.nodes[i].weight_false.unwrap(), b.false_child)
            };
            out.push((Feature(b.feature), b.threshold, went, w));
            i = next;
        }
        Ok(out)
    }
}

/// One tree per goal type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Models {
    pub trees: BTreeMap<GoalType, GoalTree>,
}

impl Models {
    pub fn get(&self, g: GoalType) -> Result<&GoalTree> {
        self.trees.get(&g).ok_or_else(|| Error::MissingModel(g.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub goal_type: GoalType,
    pub n_samples: usize,
    pub n_positive: usize,
    pub depth: usize,
    pub leaves: usize,
    pub training_impurity: f64,
}

/// Trains every goal type with at least one sample, in parallel. Goal types
/// with no samples are skipped and reported as warnings.
pub fn train_models(
    datasets: &BTreeMap<GoalType, Dataset>,
    config: &TrainingConfig,
) -> Result<(Models, Vec<TrainReport>, Vec<String>)> {
    config.validate()?;
    let mut warnings = Vec::new();
    let todo: Vec<(&GoalType, &Dataset)> = datasets
        .iter()
        .filter(|(g, d)| {
            if d.is_empty() {
                warnings.push(format!("no samples for goal type {g}; tree skipped"));
                false
            } else {
                true
            }
        })
        .collect();
    let trained: Vec<Result<GoalTree>> = todo.par_iter().map(|(g, d)| GoalTree::train(**g, d, config)).collect();
    let mut models = Models::default();
    let mut reports = Vec::new();
    for ((g, d), t) in todo.iter().zip(trained) {
        let t = t?;
        reports.push(TrainReport {
            goal_type: **g,
            n_samples: d.len(),
            n_positive: d.n_pos(),
            depth: t.tree.depth(),
            leaves: t.tree.n_leaves(),
            training_impurity: t.tree.cost(0.0),
        });
        models.trees.insert(**g, t);
    }
    Ok((models, reports, warnings))
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    kind: String,
    feature: Option<String>,
    threshold: Option<f64>,
    true_child: Option<usize>,
    false_child: Option<usize>,
    likelihood: f64,
    weight_true: Option<f64>,
    weight_false: Option<f64>,
    n_g: usize,
    n_ng: usize,
    impurity: f64,
    entropy: f64,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    goal_type: GoalType,
    config: TrainingConfig,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    trees: Vec<TreeRecord>,
}

fn to_record(t: &GoalTree) -> TreeRecord {
    let nodes = t
        .tree
        .nodes
        .iter()
        .enumerate()
        .map(|(id, n)| NodeRecord {
            id,
            kind: if n.branch.is_some() { "internal" } else { "leaf" }.into(),
            feature: n.branch.map(|b| Feature(b.feature).name().to_string()),
            threshold: n.branch.map(|b| b.threshold),
            true_child: n.branch.map(|b| b.true_child),
            false_child: n.branch.map(|b| b.false_child),
            likelihood: n.likelihood,
            weight_true: n.weight_true,
            weight_false: n.weight_false,
            n_g: n.n_g,
            n_ng: n.n_ng,
            impurity: n.impurity,
            entropy: n.entropy,
        })
        .collect();
    TreeRecord {
        goal_type: t.goal_type,
        config: t.config,
        nodes,
    }
}

fn from_record(r: TreeRecord) -> Result<GoalTree> {
    let mut nodes = Vec::with_capacity(r.nodes.len());
    for (i, n) in r.nodes.into_iter().enumerate() {
        if n.id != i {
            return Err(Error::Validation(format!("node ids must be dense, found {} at {i}", n.id)));
        }
        let branch = match n.kind.as_str() {
            "leaf" => None,
            "internal" => {
                let missing = || Error::Validation(format!("internal node {i} is incomplete"));
                let name = n.feature.ok_or_else(missing)?;
                let feature: Feature = name.parse()?;
                Some(Branch {
                    feature: feature.0,
                    threshold: n.threshold.ok_or_else(missing)?,
                    true_child: n.true_child.ok_or_else(missing)?,
                    false_child: n.false_child.ok_or_else(missing)?,
                })
            }
            other => return Err(Error::Validation(format!("unknown node kind '{other}'"))),
        };
        nodes.push(Node {
            branch,
            likelihood: n.likelihood,
            weight_true: n.weight_true,
            weight_false: n.weight_false,
            n_g: n.n_g,
            n_ng: n.n_ng,
            entropy: n.entropy,
            impurity: n.impurity,
        });
    }
    let tree = Tree { nodes };
    tree.validate_structure(N_FEATURES)?;
    if !r.config.oracle {
        tree.check_legality(&Schema::catalog())?;
    }
    Ok(GoalTree {
        goal_type: r.goal_type,
        config: r.config,
        tree,
    })
}

pub fn models_to_json(models: &Models) -> Result<String> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        trees: models.trees.values().map(to_record).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn models_from_json(text: &str) -> Result<Models> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let found = v
        .get("format_version")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| Error::Validation("model file lacks format_version".into()))? as u32;
    if found != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            expected: MODEL_FORMAT_VERSION,
            found,
        });
    }
    let file: ModelFile = serde_json::from_value(v)?;
    let mut models = Models::default();
    for r in file.trees {
        let t = from_record(r)?;
        if models.trees.insert(t.goal_type, t).is_some() {
            return Err(Error::Validation("duplicate goal type in model file".into()));
        }
    }
    Ok(models)
}

pub fn save_models(models: &Models, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, models_to_json(models)?).map_err(|e| Error::io(path, e))
}

pub fn load_models(path: impl AsRef<Path>) -> Result<Models> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    models_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_data(rows: &[(&[f64], bool)]) -> Dataset {
        let mut d = Dataset::with_features(rows[0].0.len());
        for (r, y) in rows {
            d.push(r, *y);
        }
        d
    }

    fn cfg(min_leaf: usize) -> TrainingConfig {
        TrainingConfig {
            min_samples_leaf: min_leaf,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn pure_node_has_zero_decrease() {
        let d = scalar_data(&[(&[1.0], true), (&[2.0], true), (&[3.0], true)]);
        let idx = [0, 1, 2];
        for c in [0.0, 1.5, 2.5] {
            assert_eq!(impurity_decrease(&d, &idx, 0, c, (1.0, 1.0)), 0.0);
        }
    }

    #[test]
    fn separating_split_gains_one_bit() {
        let d = scalar_data(&[(&[1.0], false), (&[2.0], false), (&[3.0], true), (&[4.0], true)]);
        let dec = impurity_decrease(&d, &[0, 1, 2, 3], 0, 2.5, (1.0, 1.0));
        assert!((dec - 1.0).abs() < 1e-15);
        assert_eq!(impurity_decrease(&d, &[0, 1, 2, 3], 0, 0.0, (1.0, 1.0)), 0.0);
    }

    #[test]
    fn single_midpoint() {
        let d = scalar_data(&[(&[1.0], false), (&[3.0], true)]);
        let s = best_split(&d, &[0, 1], &[0], &Schema::plain(vec![FeatureKind::Scalar]), (1.0, 1.0), 1).unwrap();
        assert_eq!(s.threshold, 2.0);
    }

    #[test]
    fn tie_prefers_earlier_feature() {
        let d = scalar_data(&[(&[1.0, 1.0], false), (&[3.0, 3.0], true)]);
        let schema = Schema::plain(vec![FeatureKind::Scalar; 2]);
        let s = best_split(&d, &[0, 1], &[1, 0], &schema, (1.0, 1.0), 1).unwrap();
        assert_eq!(s.feature, 0);
    }

    #[test]
    fn midpoint_of_adjacent_floats() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert_eq!(midpoint(a, b), a);
        assert_eq!(midpoint(1.0, 3.0), 2.0);
    }

    #[test]
    fn likelihood_examples() {
        assert_eq!(leaf_likelihood(3.0, 3.0, 2.0, 2.0, 1.0), 0.5);
        assert!((leaf_likelihood(3.0, 1.0, 2.0, 2.0, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_gives_single_leaf() {
        let d = scalar_data(&[(&[1.0], true), (&[2.0], true)]);
        let t = train(&d, &Schema::plain(vec![FeatureKind::Scalar]), &cfg(1)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        // smoothed class weights put every root at exactly 0.5
        assert_eq!(t.root().likelihood, 0.5);
    }

    #[test]
    fn alpha_zero_rejected() {
        let c = TrainingConfig {
            laplace_alpha: 0.0,
            ..TrainingConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    /// Two features: 0 potentially missing, 1 its indicator. Missingness is
    /// uninformative (half of each class), the value is decisive.
    fn lookahead_data() -> (Dataset, Schema) {
        let schema = Schema {
            kinds: vec![FeatureKind::Scalar, FeatureKind::Binary],
            pairing: vec![Pairing::Missing(1), Pairing::Indicator(0)],
        };
        let mut d = Dataset::with_features(2);
        for i in 0..10 {
            d.push(&[f64::NAN, 1.0], i % 2 == 0);
            d.push(&[if i % 2 == 0 { 5.0 } else { 1.0 }, 0.0], i % 2 == 0);
        }
        (d, schema)
    }

    #[test]
    fn lookahead_places_indicator_then_feature() {
        let (d, schema) = lookahead_data();
        let t = train(&d, &schema, &cfg(1)).unwrap();
        let root = t.root().branch.unwrap();
        assert_eq!(root.feature, 1);
        let f = t.nodes[root.false_child].branch.unwrap();
        assert_eq!(f.feature, 0);
        assert_eq!(f.threshold, 3.0);
        t.check_legality(&schema).unwrap();
    }

    #[test]
    fn pruning_extremes() {
        let (d, schema) = lookahead_data();
        let grown = grow_tree(&d, &schema, &cfg(1)).unwrap();
        assert_eq!(prune(&grown, 0.0), grown);
        assert_eq!(prune(&grown, 1e6).nodes.len(), 1);
    }

    #[test]
    fn tiny_gain_split_is_pruned() {
        // Root split with large gain; one child split gains 5e-5 of root mass.
        let mut t = Tree {
            nodes: vec![
                Node {
                    branch: Some(Branch {
                        feature: 0,
                        threshold: 0.5,
                        true_child: 1,
                        false_child: 2,
                    }),
                    likelihood: 0.5,
                    weight_true: None,
                    weight_false: None,
                    n_g: 10,
                    n_ng: 10,
                    entropy: 1.0,
                    impurity: 1.0,
                },
                leaf(0.1),
                Node {
                    branch: Some(Branch {
                        feature: 1,
                        threshold: 0.5,
                        true_child: 3,
                        false_child: 4,
                    }),
                    ..leaf(0.20005)
                },
                leaf(0.1),
                leaf(0.1),
            ],
        };
        let (p, trace) = prune_with_trace(&t, 1e-4);
        assert_eq!(p.n_leaves(), 2);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        t.nodes[2].impurity = 0.2002;
        assert_eq!(prune(&t, 1e-4).n_leaves(), 3);
    }

    fn leaf(impurity: f64) -> Node {
        Node {
            branch: None,
            likelihood: 0.5,
            weight_true: None,
            weight_false: None,
            n_g: 1,
            n_ng: 1,
            entropy: 1.0,
            impurity,
        }
    }

    proptest! {
        #[test]
        fn leaves_reconstruct_from_edges(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut d = Dataset::with_features(3);
            for _ in 0..120 {
                let x = [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0..2) as f64];
                let y = x[0] + rng.gen_range(-3.0..3.0) > 5.0;
                d.push(&x, y);
            }
            let schema = Schema::plain(vec![FeatureKind::Scalar, FeatureKind::Scalar, FeatureKind::Binary]);
            let t = train(&d, &schema, &cfg(5)).unwrap();
            for p in t.leaf_paths() {
                prop_assert!((p.likelihood - t.nodes[p.leaf].likelihood).abs() <= 1e-9);
                prop_assert!(t.nodes[p.leaf].likelihood > 0.0 && t.nodes[p.leaf].likelihood < 1.0);
            }
            prop_assert!(t.depth() <= 7);
        }
    }
}
