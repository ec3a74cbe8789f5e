//! Propositions over trained trees, decided by enumerating leaf tuples, plus
//! SMT-LIB export of the same question for an external solver.
//!
//! Symbols are indexed by (goal slot, instance, feature). A potentially
//! missing feature keeps a latent value even while its indicator is set:
//! premises may constrain it, trees never read it. Every tree path that tests
//! such a feature also requires its indicator to be clear.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtree::{Models, Schema};
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureKind, FeatureVector, MAX_DIST, N_FEATURES, N_MISSING, N_VALUES};
use crate::inference::{posterior, uniform_priors};
use crate::scene::GoalType;

/// Admissible range of a feature's value.
pub fn feature_bounds(f: Feature) -> (f64, f64) {
    if f.kind() == FeatureKind::Binary {
        return (0.0, 1.0);
    }
    match f {
        Feature::ANGLE_IN_LANE | Feature::ANGLE_TO_GOAL | Feature::HEADING_CHANGE_1S => (-PI, PI),
        Feature::PATH_TO_GOAL_LENGTH
        | Feature::EXIT_NUMBER
        | Feature::SPEED
        | Feature::SPEED_IN_FRONT
        | Feature::SPEED_ONCOMING => (0.0, f64::INFINITY),
        Feature::DIST_IN_FRONT | Feature::DIST_ONCOMING => (0.0, MAX_DIST),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Premise {
    /// Equal across the two instances; `goal` limits it to one slot.
    EqAcross {
        feature: Feature,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        goal: Option<usize>,
    },
    /// Every feature except those listed is equal across the instances.
    EqAcrossAllExcept {
        except: Vec<Feature>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        goal: Option<usize>,
    },
    Fix {
        instance: usize,
        feature: Feature,
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        goal: Option<usize>,
    },
    Indicator {
        instance: usize,
        feature: Feature,
        value: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        goal: Option<usize>,
    },
}

/// Instances are numbered from 1; `goal` is a slot index into
/// [`Proposition::goals`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conclusion {
    /// L(goal | lhs) >= L(goal | rhs).
    LikelihoodGe { goal: usize, lhs: usize, rhs: usize },
    /// P(goal | lhs) >= P(goal | rhs) under uniform priors over the slots.
    PosteriorGe { goal: usize, lhs: usize, rhs: usize },
    /// Two goals: entropy at `lhs` is at least that at `rhs`. With two goals
    /// this is the largest posterior at `lhs` not exceeding the largest at `rhs`.
    TwoGoalEntropyGe { lhs: usize, rhs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposition {
    #[serde(default)]
    pub name: String,
    pub instances: usize,
    pub goals: Vec<GoalType>,
    pub premises: Vec<Premise>,
    pub conclusion: Conclusion,
}

impl Proposition {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: Proposition = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown variant") {
                Error::Unsupported(msg)
            } else {
                Error::Parse(msg)
            }
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.instances) {
            return Err(Error::Unsupported(format!("{} instances; only 1 or 2 are supported", self.instances)));
        }
        if self.goals.is_empty() {
            return Err(Error::Validation("proposition needs at least one goal".into()));
        }
        let inst_ok = |i: usize| (1..=self.instances).contains(&i);
        let goal_ok = |g: &Option<usize>| g.map_or(true, |g| g < self.goals.len());
        for p in &self.premises {
            match p {
                Premise::EqAcross { goal, .. } | Premise::EqAcrossAllExcept { goal, .. } => {
                    if self.instances != 2 {
                        return Err(Error::Unsupported("equality across instances needs 2 instances".into()));
                    }
                    if !goal_ok(goal) {
                        return Err(Error::Validation("premise goal slot out of range".into()));
                    }
                }
                Premise::Fix {
                    instance,
                    feature,
                    value,
                    goal,
                } => {
                    if !inst_ok(*instance) || !goal_ok(goal) {
                        return Err(Error::Validation("premise instance or goal out of range".into()));
                    }
                    let (lo, hi) = feature_bounds(*feature);
                    if !(value.is_finite() && *value >= lo && *value <= hi) {
                        return Err(Error::Validation(format!("{feature} = {value} is outside [{lo}, {hi}]")));
                    }
                    if feature.kind() == FeatureKind::Binary && *value != 0.0 && *value != 1.0 {
                        return Err(Error::Validation(format!("binary feature {feature} fixed to {value}")));
                    }
                }
                Premise::Indicator {
                    instance,
                    feature,
                    goal,
                    ..
                } => {
                    if !inst_ok(*instance) || !goal_ok(goal) {
                        return Err(Error::Validation("premise instance or goal out of range".into()));
                    }
                    if !feature.is_indicator() {
                        return Err(Error::Unsupported(format!("{feature} is not an indicator feature")));
                    }
                }
            }
        }
        match self.conclusion {
            Conclusion::LikelihoodGe { goal, lhs, rhs } | Conclusion::PosteriorGe { goal, lhs, rhs } => {
                if goal >= self.goals.len() || !inst_ok(lhs) || !inst_ok(rhs) {
                    return Err(Error::Validation("conclusion refers to an unknown goal or instance".into()));
                }
            }
            Conclusion::TwoGoalEntropyGe { lhs, rhs } => {
                if self.goals.len() != 2 {
                    return Err(Error::Unsupported("entropy comparison needs exactly two goals".into()));
                }
                if !inst_ok(lhs) || !inst_ok(rhs) {
                    return Err(Error::Validation("conclusion refers to an unknown instance".into()));
                }
            }
        }
        Ok(())
    }

    fn n_slots(&self) -> usize {
        self.goals.len() * self.instances
    }

    /// Symbol index of (goal slot, 1-based instance, feature).
    fn sym(&self, goal: usize, instance: usize, f: Feature) -> usize {
        ((goal * self.instances) + instance - 1) * N_FEATURES + f.0
    }

    fn goal_slots(&self, goal: Option<usize>) -> Vec<usize> {
        match goal {
            Some(g) => vec![g],
            None => (0..self.goals.len()).collect(),
        }
    }

    /// Premises as equalities between symbols and fixed symbol values.
    fn atoms(&self) -> (Vec<(usize, usize)>, Vec<(usize, f64)>) {
        let mut eqs = Vec::new();
        let mut fixes = Vec::new();
        for p in &self.premises {
            match p {
                Premise::EqAcross { feature, goal } => {
                    for g in self.goal_slots(*goal) {
                        eqs.push((self.sym(g, 1, *feature), self.sym(g, 2, *feature)));
                    }
                }
                Premise::EqAcrossAllExcept { except, goal } => {
                    for g in self.goal_slots(*goal) {
                        for f in Feature::all().filter(|f| !except.contains(f)) {
                            eqs.push((self.sym(g, 1, f), self.sym(g, 2, f)));
                        }
                    }
                }
                Premise::Fix {
                    instance,
                    feature,
                    value,
                    goal,
                } => {
                    for g in self.goal_slots(*goal) {
                        fixes.push((self.sym(g, *instance, *feature), *value));
                    }
                }
                Premise::Indicator {
                    instance,
                    feature,
                    value,
                    goal,
                } => {
                    for g in self.goal_slots(*goal) {
                        fixes.push((self.sym(g, *instance, *feature), if *value { 1.0 } else { 0.0 }));
                    }
                }
            }
        }
        (eqs, fixes)
    }

    /// Evaluates the conclusion from likelihoods indexed `[goal][instance - 1]`.
    pub fn conclusion_holds(&self, lik: &[Vec<f64>]) -> Result<bool> {
        let post = |inst: usize| -> Result<Vec<f64>> {
            let l: Vec<f64> = lik.iter().map(|per| per[inst - 1]).collect();
            posterior(&l, &uniform_priors(l.len()))
        };
        Ok(match self.conclusion {
            Conclusion::LikelihoodGe { goal, lhs, rhs } => lik[goal][lhs - 1] >= lik[goal][rhs - 1],
            Conclusion::PosteriorGe { goal, lhs, rhs } => post(lhs)?[goal] >= post(rhs)?[goal],
            Conclusion::TwoGoalEntropyGe { lhs, rhs } => {
                let (a, b) = (post(lhs)?, post(rhs)?);
                a[0].max(a[1]) <= b[0].max(b[1])
            }
        })
    }
}

/// Latent feature values for every (goal slot, instance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    /// `values[goal][instance - 1][feature]`
    pub values: Vec<Vec<Vec<f64>>>,
}

impl Point {
    /// The vector a tree sees: values masked where their indicator is set.
    pub fn feature_vector(&self, goal: usize, instance: usize) -> Result<FeatureVector> {
        let raw = &self.values[goal][instance - 1];
        let mut ind = [false; N_MISSING];
        for (i, flag) in ind.iter_mut().enumerate() {
            *flag = raw[N_VALUES + i] > 0.5;
        }
        let mut vals = [None; N_VALUES];
        for (i, v) in vals.iter_mut().enumerate() {
            let masked = Feature(i).indicator_slot().is_some_and(|s| ind[s]);
            *v = (!masked).then_some(raw[i]);
        }
        FeatureVector::assemble(vals, ind)
    }
}

/// Premise and conclusion truth at one point, evaluated directly through the
/// trees and the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointOutcome {
    pub premises: bool,
    pub conclusion: bool,
}

pub fn evaluate_point(models: &Models, prop: &Proposition, point: &Point) -> Result<PointOutcome> {
    let get = |sym: usize| {
        let per_goal = N_FEATURES * prop.instances;
        point.values[sym / per_goal][(sym % per_goal) / N_FEATURES][sym % N_FEATURES]
    };
    let (eqs, fixes) = prop.atoms();
    let mut premises = eqs.iter().all(|(a, b)| get(*a) == get(*b)) && fixes.iter().all(|(s, v)| get(*s) == *v);
    for g in 0..prop.goals.len() {
        for inst in 1..=prop.instances {
            for f in Feature::all() {
                let x = point.values[g][inst - 1][f.0];
                let (lo, hi) = feature_bounds(f);
                let binary_ok = f.kind() != FeatureKind::Binary || x == 0.0 || x == 1.0;
                premises &= x >= lo && x <= hi && binary_ok;
            }
        }
    }
    let mut lik = vec![vec![0.0; prop.instances]; prop.goals.len()];
    for (g, gt) in prop.goals.iter().enumerate() {
        let tree = models.get(*gt)?;
        for inst in 1..=prop.instances {
            lik[g][inst - 1] = tree.likelihood(&point.feature_vector(g, inst)?)?;
        }
    }
    Ok(PointOutcome {
        premises,
        conclusion: prop.conclusion_holds(&lik)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Refuted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub point: Point,
    /// What each tree returns at the point, `[goal][instance - 1]`.
    pub likelihoods: Vec<Vec<f64>>,
    /// Feature vectors as the trees see them, `[goal][instance - 1]`.
    pub vectors: Vec<Vec<FeatureVector>>,
}

impl Counterexample {
    /// True when the point satisfies the premises and falsifies the
    /// conclusion when pushed through the trees and the posterior.
    pub fn confirm(&self, models: &Models, prop: &Proposition) -> Result<bool> {
        let o = evaluate_point(models, prop, &self.point)?;
        Ok(o.premises && !o.conclusion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub verdict: Verdict,
    pub counterexample: Option<Counterexample>,
    /// Leaf tuples whose regions were non-empty.
    pub feasible_tuples: u64,
}

/// Interval with optional open ends; `binary` restricts it to {0, 1}.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Interval {
    lo: f64,
    lo_open: bool,
    hi: f64,
    hi_open: bool,
    binary: bool,
}

impl Interval {
    fn of(f: Feature) -> Self {
        let (lo, hi) = feature_bounds(f);
        Interval {
            lo,
            lo_open: false,
            hi,
            hi_open: false,
            binary: f.kind() == FeatureKind::Binary,
        }
    }

    fn contains(&self, x: f64) -> bool {
        (x > self.lo || (!self.lo_open && x == self.lo)) && (x < self.hi || (!self.hi_open && x == self.hi))
    }

    fn is_empty(&self) -> bool {
        if self.binary {
            return !(self.contains(0.0) || self.contains(1.0));
        }
        self.lo > self.hi || (self.lo == self.hi && (self.lo_open || self.hi_open))
    }

    fn greater_than(&mut self, c: f64) {
        if c > self.lo || (c == self.lo && !self.lo_open) {
            self.lo = c;
            self.lo_open = true;
        }
    }

    fn at_most(&mut self, c: f64) {
        if c < self.hi {
            self.hi = c;
            self.hi_open = false;
        }
    }

    fn fix(&mut self, v: f64) {
        if !self.contains(v) {
            self.lo = 1.0;
            self.hi = 0.0;
        } else {
            *self = Interval {
                lo: v,
                lo_open: false,
                hi: v,
                hi_open: false,
                binary: self.binary,
            };
        }
    }

    fn meet(&mut self, o: &Interval) {
        if o.lo > self.lo || (o.lo == self.lo && o.lo_open) {
            self.lo = o.lo;
            self.lo_open = o.lo_open;
        }
        if o.hi < self.hi || (o.hi == self.hi && o.hi_open) {
            self.hi = o.hi;
            self.hi_open = o.hi_open;
        }
        self.binary |= o.binary;
    }

    /// Deterministic witness: midpoint, bound +/- 1 when one side is open
    /// ended, 0 when both are.
    fn witness(&self) -> f64 {
        if self.binary {
            return if self.contains(0.0) { 0.0 } else { 1.0 };
        }
        if self.lo == self.hi {
            return self.lo;
        }
        let x = match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, true) => self.lo + (self.hi - self.lo) / 2.0,
            (true, false) => self.lo + 1.0,
            (false, true) => self.hi - 1.0,
            (false, false) => 0.0,
        };
        if self.contains(x) {
            x
        } else {
            self.hi
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut j = i;
        while self.0[j] != r {
            let next = self.0[j];
            self.0[j] = r;
            j = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// One leaf's box, already mapped onto symbol classes.
struct LeafBox {
    likelihood: f64,
    /// (class, threshold, took `x > threshold`)
    tests: Vec<(usize, f64, bool)>,
}

/// Decides a proposition over the trees' leaf partition.
pub fn check(models: &Models, prop: &Proposition) -> Result<VerificationResult> {
    prop.validate()?;
    let schema = Schema::catalog();
    for gt in &prop.goals {
        models.get(*gt)?.tree.check_legality(&schema).map_err(|e| {
            Error::Unsupported(format!("tree for {gt} tests a feature outside its indicator guard: {e}"))
        })?;
    }
    let n_sym = prop.n_slots() * N_FEATURES;
    let mut uf = UnionFind((0..n_sym).collect());
    let (eqs, fixes) = prop.atoms();
    for (a, b) in &eqs {
        uf.union(*a, *b);
    }
    let class: Vec<usize> = (0..n_sym).map(|s| uf.find(s)).collect();

    let mut base: Vec<Interval> = (0..n_sym).map(|s| Interval::of(Feature(s % N_FEATURES))).collect();
    for s in 0..n_sym {
        if class[s] != s {
            let iv = base[s];
            base[class[s]].meet(&iv);
        }
    }
    for (s, v) in &fixes {
        base[class[*s]].fix(*v);
    }
    let empty = VerificationResult {
        verdict: Verdict::Verified,
        counterexample: None,
        feasible_tuples: 0,
    };
    if (0..n_sym).any(|s| class[s] == s && base[s].is_empty()) {
        return Ok(empty);
    }

    // slot order: goal-major, instance-minor
    let mut boxes: Vec<Vec<LeafBox>> = Vec::with_capacity(prop.n_slots());
    for g in 0..prop.goals.len() {
        let tree = &models.get(prop.goals[g])?.tree;
        for inst in 1..=prop.instances {
            let leaves = tree
                .leaf_paths()
                .into_iter()
                .map(|lp| {
                    let mut tests = Vec::new();
                    for (f, c, t) in lp.tests {
                        tests.push((class[prop.sym(g, inst, Feature(f))], c, t));
                        if let Some(ind) = Feature(f).indicator() {
                            tests.push((class[prop.sym(g, inst, ind)], 0.5, false));
                        }
                    }
                    LeafBox {
                        likelihood: lp.likelihood,
                        tests,
                    }
                })
                .collect();
            boxes.push(leaves);
        }
    }

    let mut search = Search {
        prop,
        boxes: &boxes,
        chosen: vec![0.0; prop.n_slots()],
        feasible: 0,
        found: None,
    };
    search.run(0, base)?;
    let Some(region) = search.found else {
        return Ok(VerificationResult {
            feasible_tuples: search.feasible,
            ..empty
        });
    };
    let mut values = vec![vec![vec![0.0; N_FEATURES]; prop.instances]; prop.goals.len()];
    for s in 0..n_sym {
        let per_goal = N_FEATURES * prop.instances;
        values[s / per_goal][(s % per_goal) / N_FEATURES][s % N_FEATURES] = region[class[s]].witness();
    }
    let point = Point { values };
    let mut likelihoods = vec![vec![0.0; prop.instances]; prop.goals.len()];
    let mut vectors = vec![Vec::new(); prop.goals.len()];
    for (g, gt) in prop.goals.iter().enumerate() {
        for inst in 1..=prop.instances {
            let fv = point.feature_vector(g, inst)?;
            likelihoods[g][inst - 1] = models.get(*gt)?.likelihood(&fv)?;
            vectors[g].push(fv);
        }
    }
    Ok(VerificationResult {
        verdict: Verdict::Refuted,
        counterexample: Some(Counterexample {
            point,
            likelihoods,
            vectors,
        }),
        feasible_tuples: search.feasible,
    })
}

struct Search<'a> {
    prop: &'a Proposition,
    boxes: &'a [Vec<LeafBox>],
    chosen: Vec<f64>,
    feasible: u64,
    found: Option<Vec<Interval>>,
}

impl Search<'_> {
    fn run(&mut self, slot: usize, region: Vec<Interval>) -> Result<()> {
        if self.found.is_some() {
            return Ok(());
        }
        if slot == self.boxes.len() {
            self.feasible += 1;
            let lik: Vec<Vec<f64>> = self
                .chosen
                .chunks(self.prop.instances)
                .map(|c| c.to_vec())
                .collect();
            if !self.prop.conclusion_holds(&lik)? {
                self.found = Some(region);
            }
            return Ok(());
        }
        let boxes = self.boxes;
        'leaves: for leaf in &boxes[slot] {
            let mut r = region.clone();
            for &(c, thr, took_true) in &leaf.tests {
                if took_true {
                    r[c].greater_than(thr);
                } else {
                    r[c].at_most(thr);
                }
                if r[c].is_empty() {
                    continue 'leaves;
                }
            }
            self.chosen[slot] = leaf.likelihood;
            self.run(slot + 1, r)?;
            if self.found.is_some() {
                return Ok(());
            }
        }
        Ok(())
    }
}

/// Exact decimal rendering of a double as an SMT-LIB real term.
pub fn smt_real(x: f64) -> String {
    assert!(x.is_finite(), "SMT constants must be finite");
    if x == 0.0 {
        return "0.0".into();
    }
    let bits = x.abs().to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut m, mut e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    while m % 2 == 0 && e < 0 {
        m /= 2;
        e += 1;
    }
    let body = if e >= 0 {
        format!("{}.0", decimal_mul_pow2(m, e as u32))
    } else {
        format!("(/ {}.0 {}.0)", m, decimal_mul_pow2(1, (-e) as u32))
    };
    if x < 0.0 {
        format!("(- {body})")
    } else {
        body
    }
}

/// m * 2^k in decimal.
fn decimal_mul_pow2(m: u64, k: u32) -> String {
    // little-endian base 1e9 limbs
    let mut limbs: Vec<u64> = vec![m % 1_000_000_000, m / 1_000_000_000 % 1_000_000_000, m / 1_000_000_000_000_000_000];
    for _ in 0..k {
        let mut carry = 0;
        for l in limbs.iter_mut() {
            let v = *l * 2 + carry;
            *l = v % 1_000_000_000;
            carry = v / 1_000_000_000;
        }
        if carry > 0 {
            limbs.push(carry);
        }
    }
    while limbs.len() > 1 && *limbs.last().unwrap() == 0 {
        limbs.pop();
    }
    let mut s = limbs.last().unwrap().to_string();
    for l in limbs.iter().rev().skip(1) {
        write!(s, "{l:09}").unwrap();
    }
    s
}

fn smt_sym(goal: usize, instance: usize, f: Feature) -> String {
    format!("g{goal}_t{instance}_{}", f.name())
}

fn smt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// SMT-LIB v2 script asserting the tree semantics, the premises and the
/// negated conclusion. `unsat` means the proposition holds. Trees must
/// respect indicator guards, which trained models always do.
pub fn smtlib(models: &Models, prop: &Proposition) -> Result<String> {
    prop.validate()?;
    let mut out = String::new();
    let nonlinear = !matches!(prop.conclusion, Conclusion::LikelihoodGe { .. });
    writeln!(out, "; proposition: {}", if prop.name.is_empty() { "unnamed" } else { &prop.name }).unwrap();
    writeln!(out, "(set-logic {})", if nonlinear { "QF_NRA" } else { "QF_LRA" }).unwrap();
    let value_of = |g: usize, inst: usize, f: Feature, c: f64| -> String {
        let s = smt_sym(g, inst, f);
        if f.is_indicator() {
            s
        } else {
            format!("(> {s} {})", smt_real(c))
        }
    };
    for g in 0..prop.goals.len() {
        for inst in 1..=prop.instances {
            for f in Feature::all() {
                let s = smt_sym(g, inst, f);
                if f.is_indicator() {
                    writeln!(out, "(declare-fun {s} () Bool)").unwrap();
                    continue;
                }
                writeln!(out, "(declare-fun {s} () Real)").unwrap();
                if f.kind() == FeatureKind::Binary {
                    writeln!(out, "(assert (or (= {s} 0.0) (= {s} 1.0)))").unwrap();
                } else {
                    let (lo, hi) = feature_bounds(f);
                    if lo.is_finite() {
                        writeln!(out, "(assert (>= {s} {}))", smt_real(lo)).unwrap();
                    }
                    if hi.is_finite() {
                        writeln!(out, "(assert (<= {s} {}))", smt_real(hi)).unwrap();
                    }
                }
            }
        }
    }
    for (g, gt) in prop.goals.iter().enumerate() {
        let tree = &models.get(*gt)?.tree;
        for inst in 1..=prop.instances {
            fn term(
                tree: &crate::dtree::Tree,
                i: usize,
                l: f64,
                test: &dyn Fn(usize, f64) -> String,
            ) -> String {
                let n = &tree.nodes[i];
                match n.branch {
                    None => smt_real(l),
                    Some(b) => format!(
                        "(ite {} {} {})",
                        test(b.feature, b.threshold),
                        term(tree, b.true_child, l * n.weight_true.unwrap_or(1.0), test),
                        term(tree, b.false_child, l * n.weight_false.unwrap_or(1.0), test)
                    ),
                }
            }
            let test = |f: usize, c: f64| value_of(g, inst, Feature(f), c);
            writeln!(out, "(define-fun L_g{g}_t{inst} () Real {})", term(tree, 0, 0.5, &test)).unwrap();
        }
    }
    if nonlinear {
        for inst in 1..=prop.instances {
            let total: Vec<String> = (0..prop.goals.len()).map(|g| format!("L_g{g}_t{inst}")).collect();
            let denom = if total.len() == 1 { total[0].clone() } else { format!("(+ {})", total.join(" ")) };
            for g in 0..prop.goals.len() {
                writeln!(out, "(define-fun P_g{g}_t{inst} () Real (/ L_g{g}_t{inst} {denom}))").unwrap();
            }
        }
    }
    for p in &prop.premises {
        match p {
            Premise::EqAcross { feature, goal } => {
                for g in prop.goal_slots(*goal) {
                    writeln!(out, "(assert (= {} {}))", smt_sym(g, 1, *feature), smt_sym(g, 2, *feature)).unwrap();
                }
            }
            Premise::EqAcrossAllExcept { except, goal } => {
                for g in prop.goal_slots(*goal) {
                    for f in Feature::all().filter(|f| !except.contains(f)) {
                        writeln!(out, "(assert (= {} {}))", smt_sym(g, 1, f), smt_sym(g, 2, f)).unwrap();
                    }
                }
            }
            Premise::Fix {
                instance,
                feature,
                value,
                goal,
            } => {
                for g in prop.goal_slots(*goal) {
                    let rhs = if feature.is_indicator() {
                        smt_bool(*value > 0.5).to_string()
                    } else {
                        smt_real(*value)
                    };
                    writeln!(out, "(assert (= {} {rhs}))", smt_sym(g, *instance, *feature)).unwrap();
                }
            }
            Premise::Indicator {
                instance,
                feature,
                value,
                goal,
            } => {
                for g in prop.goal_slots(*goal) {
                    let s = smt_sym(g, *instance, *feature);
                    if *value {
                        writeln!(out, "(assert {s})").unwrap();
                    } else {
                        writeln!(out, "(assert (not {s}))").unwrap();
                    }
                }
            }
        }
    }
    let psi = match prop.conclusion {
        Conclusion::LikelihoodGe { goal, lhs, rhs } => format!("(>= L_g{goal}_t{lhs} L_g{goal}_t{rhs})"),
        Conclusion::PosteriorGe { goal, lhs, rhs } => format!("(>= P_g{goal}_t{lhs} P_g{goal}_t{rhs})"),
        Conclusion::TwoGoalEntropyGe { lhs: a, rhs: b } => format!(
            "(and (or (<= P_g0_t{a} P_g0_t{b}) (<= P_g0_t{a} P_g1_t{b})) (or (<= P_g1_t{a} P_g0_t{b}) (<= P_g1_t{a} P_g1_t{b})))"
        ),
    };
    writeln!(out, "(assert (not {psi}))").unwrap();
    writeln!(out, "(check-sat)").unwrap();
    Ok(out)
}

pub fn emit_smtlib(models: &Models, prop: &Proposition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, smtlib(models, prop)?).map_err(|e| Error::io(path, e))
}

/// Indicator premises for both oncoming-traffic indicators.
fn oncoming_missing(instance: usize, value: bool) -> Vec<Premise> {
    [Feature::DIST_ONCOMING, Feature::SPEED_ONCOMING]
        .into_iter()
        .map(|f| Premise::Indicator {
            instance,
            feature: f.indicator().unwrap(),
            value,
            goal: None,
        })
        .collect()
}

fn oncoming_indicators() -> Vec<Feature> {
    vec![
        Feature::DIST_ONCOMING.indicator().unwrap(),
        Feature::SPEED_ONCOMING.indicator().unwrap(),
    ]
}

/// Occluded oncoming traffic never makes a straight-on / exit-left choice
/// more certain.
pub fn oncoming_entropy() -> Proposition {
    let mut premises = oncoming_missing(1, true);
    premises.extend(oncoming_missing(2, false));
    premises.push(Premise::EqAcrossAllExcept {
        except: oncoming_indicators(),
        goal: None,
    });
    Proposition {
        name: "oncoming-entropy".into(),
        instances: 2,
        goals: vec![GoalType::StraightOn, GoalType::ExitLeft],
        premises,
        conclusion: Conclusion::TwoGoalEntropyGe { lhs: 1, rhs: 2 },
    }
}

/// A vehicle stopped straight in its lane at a junction entry is at least as
/// likely to be turning right when oncoming traffic is hidden (instance 1)
/// as when the road is visibly clear (instance 2).
pub fn stopped_oncoming_occluded() -> Proposition {
    let mut premises = Vec::new();
    for inst in 1..=2 {
        premises.push(Premise::Fix {
            instance: inst,
            feature: Feature::SPEED,
            value: 0.0,
            goal: None,
        });
        premises.push(Premise::Fix {
            instance: inst,
            feature: Feature::ANGLE_IN_LANE,
            value: 0.0,
            goal: None,
        });
    }
    premises.extend(oncoming_missing(1, true));
    premises.extend(oncoming_missing(2, false));
    premises.push(Premise::Fix {
        instance: 2,
        feature: Feature::DIST_ONCOMING,
        value: MAX_DIST,
        goal: None,
    });
    premises.push(Premise::Fix {
        instance: 2,
        feature: Feature::SPEED_ONCOMING,
        value: 0.0,
        goal: None,
    });
    let mut except = oncoming_indicators();
    except.extend([Feature::DIST_ONCOMING, Feature::SPEED_ONCOMING]);
    premises.push(Premise::EqAcrossAllExcept { except, goal: None });
    Proposition {
        name: "stopped-oncoming-occluded".into(),
        instances: 2,
        goals: vec![GoalType::EnterRight, GoalType::EnterLeft],
        premises,
        conclusion: Conclusion::PosteriorGe { goal: 0, lhs: 1, rhs: 2 },
    }
}

/// An exit that would be the fourth (a U-turn) is no more likely when its
/// exit number is known than when it is hidden.
pub fn exit_number_four() -> Proposition {
    let xnm = Feature::EXIT_NUMBER.indicator().unwrap();
    Proposition {
        name: "exit-number-four".into(),
        instances: 2,
        goals: vec![GoalType::ExitRoundabout],
        premises: vec![
            Premise::Fix {
                instance: 1,
                feature: Feature::PATH_TO_GOAL_LENGTH,
                value: 50.0,
                goal: None,
            },
            Premise::Fix {
                instance: 1,
                feature: Feature::ANGLE_IN_LANE,
                value: 0.0,
                goal: None,
            },
            Premise::Fix {
                instance: 2,
                feature: Feature::EXIT_NUMBER,
                value: 4.0,
                goal: None,
            },
            Premise::Indicator {
                instance: 1,
                feature: xnm,
                value: true,
                goal: None,
            },
            Premise::Indicator {
                instance: 2,
                feature: xnm,
                value: false,
                goal: None,
            },
            Premise::EqAcrossAllExcept {
                except: vec![xnm],
                goal: None,
            },
        ],
        conclusion: Conclusion::LikelihoodGe { goal: 0, lhs: 1, rhs: 2 },
    }
}

pub fn builtin(name: &str) -> Option<Proposition> {
    match name {
        "oncoming-entropy" => Some(oncoming_entropy()),
        "stopped-oncoming-occluded" => Some(stopped_oncoming_occluded()),
        "exit-number-four" => Some(exit_number_four()),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["oncoming-entropy", "stopped-oncoming-occluded", "exit-number-four"];

/// Likelihood of every goal at every instance from the counterexample, keyed
/// by goal type, for reports.
pub fn summarize(prop: &Proposition, cx: &Counterexample) -> BTreeMap<String, Vec<f64>> {
    prop.goals
        .iter()
        .enumerate()
        .map(|(g, gt)| (format!("{g}:{gt}"), cx.likelihoods[g].clone()))
        .collect()
}
