//! Axis-aligned cohorts: conjunctions of threshold predicates and the
//! partitions they form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Threshold split: `feature < threshold` goes left, `>=` goes right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature: usize,
    pub threshold: f64,
}

impl SplitRule {
    pub fn goes_left(&self, features: &[f64]) -> bool {
        features[self.feature] < self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// `x < threshold`
    #[serde(rename = "<")]
    Below,
    /// `x >= threshold`
    #[serde(rename = ">=")]
    AtOrAbove,
}

/// One predicate of a cohort definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    #[serde(rename = "op")]
    pub side: Side,
    pub threshold: f64,
}

impl Condition {
    pub fn holds(&self, features: &[f64]) -> bool {
        let x = features[self.feature];
        match self.side {
            Side::Below => x < self.threshold,
            Side::AtOrAbove => x >= self.threshold,
        }
    }
}

/// Half-open interval `[lower, upper)` on one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const FULL: Interval = Interval {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn is_empty(&self) -> bool {
        self.lower >= self.upper
    }
}

/// A conjunction of threshold predicates. The empty conjunction covers the
/// whole feature space.
///
/// Conditions are kept normalized: at most one lower and one upper bound per
/// feature, sorted by feature, lower bound first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub id: String,
    pub conditions: Vec<Condition>,
}

impl Cohort {
    pub fn whole_space(id: impl Into<String>) -> Self {
        Cohort {
            id: id.into(),
            conditions: Vec::new(),
        }
    }

    /// Build from an arbitrary predicate list (e.g. a root-to-leaf path).
    pub fn from_conditions(id: impl Into<String>, conditions: &[Condition]) -> Self {
        Cohort {
            id: id.into(),
            conditions: normalize(conditions),
        }
    }

    pub fn contains(&self, features: &[f64]) -> bool {
        self.conditions.iter().all(|c| c.holds(features))
    }

    pub fn interval(&self, feature: usize) -> Interval {
        let mut iv = Interval::FULL;
        for c in self.conditions.iter().filter(|c| c.feature == feature) {
            match c.side {
                Side::Below => iv.upper = iv.upper.min(c.threshold),
                Side::AtOrAbove => iv.lower = iv.lower.max(c.threshold),
            }
        }
        iv
    }

    /// Exact emptiness: some feature's lower bound reaches its upper bound.
    pub fn is_empty(&self) -> bool {
        let mut features: Vec<usize> = self.conditions.iter().map(|c| c.feature).collect();
        features.dedup();
        features.into_iter().any(|f| self.interval(f).is_empty())
    }

    /// Intersection, or `None` when it is empty.
    pub fn intersect(&self, other: &Cohort, id: impl Into<String>) -> Option<Cohort> {
        let mut all = self.conditions.clone();
        all.extend_from_slice(&other.conditions);
        let c = Cohort::from_conditions(id, &all);
        (!c.is_empty()).then_some(c)
    }

    /// A point inside the cohort (midpoints of finite bounds, otherwise a
    /// point one unit past the finite side). Requires a non-empty cohort.
    pub fn interior_point(&self, n_features: usize) -> Vec<f64> {
        (0..n_features)
            .map(|f| {
                let iv = self.interval(f);
                match (iv.lower.is_finite(), iv.upper.is_finite()) {
                    (true, true) => 0.5 * (iv.lower + iv.upper),
                    (true, false) => iv.lower + 1.0,
                    (false, true) => iv.upper - 1.0,
                    (false, false) => 0.0,
                }
            })
            .collect()
    }

    pub fn describe(&self, feature_names: &[String]) -> String {
        if self.conditions.is_empty() {
            return "(all)".into();
        }
        self.conditions
            .iter()
            .map(|c| {
                let name = feature_names
                    .get(c.feature)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", c.feature));
                let op = match c.side {
                    Side::Below => "<",
                    Side::AtOrAbove => ">=",
                };
                format!("{name} {op} {}", c.threshold)
            })
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

fn normalize(conditions: &[Condition]) -> Vec<Condition> {
    let mut features: Vec<usize> = conditions.iter().map(|c| c.feature).collect();
    features.sort_unstable();
    features.dedup();
    let mut out = Vec::new();
    for f in features {
        let lower = conditions
            .iter()
            .filter(|c| c.feature == f && c.side == Side::AtOrAbove)
            .map(|c| c.threshold)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
        let upper = conditions
            .iter()
            .filter(|c| c.feature == f && c.side == Side::Below)
            .map(|c| c.threshold)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
        if let Some(t) = lower {
            out.push(Condition {
                feature: f,
                side: Side::AtOrAbove,
                threshold: t,
            });
        }
        if let Some(t) = upper {
            out.push(Condition {
                feature: f,
                side: Side::Below,
                threshold: t,
            });
        }
    }
    out
}

/// A mutually exclusive and exhaustive set of cohorts over `n_features`
/// dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSet {
    pub n_features: usize,
    pub cohorts: Vec<Cohort>,
}

impl CohortSet {
    pub fn whole_space(n_features: usize, id: impl Into<String>) -> Self {
        CohortSet {
            n_features,
            cohorts: vec![Cohort::whole_space(id)],
        }
    }

    pub fn len(&self) -> usize {
        self.cohorts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cohorts.is_empty()
    }

    /// Index of the cohort containing `features`.
    pub fn assign(&self, features: &[f64]) -> Result<usize> {
        if features.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: features.len(),
            });
        }
        self.cohorts
            .iter()
            .position(|c| c.contains(features))
            .ok_or_else(|| Error::Validation("feature vector is not covered by any cohort".into()))
    }

    /// Cohort index of every row, using a [`CohortIndex`] for large sets.
    pub fn assign_all<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<usize>> {
        if self.cohorts.len() <= 32 {
            return rows.into_iter().map(|r| self.assign(r)).collect();
        }
        let index = CohortIndex::new(self);
        rows.into_iter().map(|r| index.assign(self, r)).collect()
    }

    /// Exact pairwise exclusivity check by interval reasoning.
    pub fn check_exclusive(&self) -> Result<()> {
        for (a, ca) in self.cohorts.iter().enumerate() {
            for (b, cb) in self.cohorts.iter().enumerate().skip(a + 1) {
                if ca.intersect(cb, "").is_some() {
                    return Err(Error::Validation(format!(
                        "cohorts `{}` ({a}) and `{}` ({b}) overlap",
                        ca.id, cb.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every probe point must fall in exactly one cohort.
    pub fn check_probes(&self, probes: &[Vec<f64>]) -> Result<()> {
        for p in probes {
            let hits = self.cohorts.iter().filter(|c| c.contains(p)).count();
            if hits != 1 {
                return Err(Error::Validation(format!(
                    "probe point {p:?} lies in {hits} cohorts; expected exactly one"
                )));
            }
        }
        Ok(())
    }

    /// Exclusivity (exact) plus exhaustiveness on [`probe_points`].
    pub fn validate_partition(&self, seed: u64) -> Result<()> {
        self.check_exclusive()?;
        self.check_probes(&probe_points(std::slice::from_ref(self), 2048, seed))
    }
}

/// Search tree over the boxes of a [`CohortSet`]. Each node splits on one
/// threshold; a box that straddles it is kept on both sides.
#[derive(Debug, Clone)]
pub struct CohortIndex {
    nodes: Vec<IndexNode>,
}

#[derive(Debug, Clone)]
enum IndexNode {
    Leaf(Vec<usize>),
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
    },
}

const INDEX_LEAF: usize = 8;

impl CohortIndex {
    pub fn new(set: &CohortSet) -> Self {
        let boxes: Vec<Vec<Interval>> = set
            .cohorts
            .iter()
            .map(|c| (0..set.n_features).map(|f| c.interval(f)).collect())
            .collect();
        let mut index = CohortIndex { nodes: Vec::new() };
        index.build(&boxes, (0..boxes.len()).collect());
        index
    }

    fn build(&mut self, boxes: &[Vec<Interval>], items: Vec<usize>) -> usize {
        let at = self.nodes.len();
        self.nodes.push(IndexNode::Leaf(Vec::new()));
        let n_features = boxes.first().map_or(0, Vec::len);
        let mut best: Option<(usize, SplitRule)> = None;
        if items.len() > INDEX_LEAF {
            for f in 0..n_features {
                let mut lowers: Vec<f64> = items
                    .iter()
                    .map(|&i| boxes[i][f].lower)
                    .filter(|l| l.is_finite())
                    .collect();
                if lowers.is_empty() {
                    continue;
                }
                lowers.sort_by(f64::total_cmp);
                let t = lowers[lowers.len() / 2];
                let left = items.iter().filter(|&&i| boxes[i][f].lower < t).count();
                let right = items.iter().filter(|&&i| boxes[i][f].upper > t).count();
                let worst = left.max(right);
                if worst < items.len() && best.as_ref().is_none_or(|b| worst < b.0) {
                    best = Some((worst, SplitRule { feature: f, threshold: t }));
                }
            }
        }
        match best {
            None => self.nodes[at] = IndexNode::Leaf(items),
            Some((_, rule)) => {
                let f = rule.feature;
                let t = rule.threshold;
                let (l, r): (Vec<usize>, Vec<usize>) = (
                    items.iter().copied().filter(|&i| boxes[i][f].lower < t).collect(),
                    items.iter().copied().filter(|&i| boxes[i][f].upper > t).collect(),
                );
                let left = self.build(boxes, l);
                let right = self.build(boxes, r);
                self.nodes[at] = IndexNode::Split { rule, left, right };
            }
        }
        at
    }

    /// Same answer as [`CohortSet::assign`] on the set the index was built
    /// from.
    pub fn assign(&self, set: &CohortSet, features: &[f64]) -> Result<usize> {
        if features.len() != set.n_features {
            return Err(Error::DimensionMismatch {
                expected: set.n_features,
                actual: features.len(),
            });
        }
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                IndexNode::Split { rule, left, right } => {
                    at = if rule.goes_left(features) { *left } else { *right };
                }
                IndexNode::Leaf(items) => {
                    return items
                        .iter()
                        .copied()
                        .find(|&i| set.cohorts[i].contains(features))
                        .ok_or_else(|| Error::Validation("feature vector is not covered by any cohort".into()));
                }
            }
        }
    }
}

/// Probe points that exercise every threshold appearing in `sets`: each
/// coordinate is drawn from the thresholds themselves, points just below
/// them, midpoints between neighbours, and values outside the range.
pub fn probe_points(sets: &[CohortSet], count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;

    let n_features = sets.first().map_or(0, |s| s.n_features);
    let mut candidates: Vec<Vec<f64>> = vec![Vec::new(); n_features];
    for set in sets {
        for c in set.cohorts.iter().flat_map(|c| &c.conditions) {
            candidates[c.feature].push(c.threshold);
        }
    }
    for cands in candidates.iter_mut() {
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let mut extra = vec![0.0];
        if let (Some(&lo), Some(&hi)) = (cands.first(), cands.last()) {
            extra.push(lo - 1.0);
            extra.push(hi + 1.0);
        }
        for w in cands.windows(2) {
            extra.push(0.5 * (w[0] + w[1]));
        }
        for &t in cands.iter() {
            extra.push(next_down(t));
        }
        cands.extend(extra);
    }
    let mut rng = rng::stream(seed, 0);
    (0..count)
        .map(|_| {
            candidates
                .iter()
                .map(|c| c[rng.random_range(0..c.len())])
                .collect()
        })
        .collect()
}

fn next_down(x: f64) -> f64 {
    if x == 0.0 {
        -f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves(feature: usize, t: f64, prefix: &str) -> CohortSet {
        CohortSet {
            n_features: 2,
            cohorts: vec![
                Cohort::from_conditions(
                    format!("{prefix}L"),
                    &[Condition {
                        feature,
                        side: Side::Below,
                        threshold: t,
                    }],
                ),
                Cohort::from_conditions(
                    format!("{prefix}R"),
                    &[Condition {
                        feature,
                        side: Side::AtOrAbove,
                        threshold: t,
                    }],
                ),
            ],
        }
    }

    #[test]
    fn boundary_goes_right() {
        let set = halves(0, 0.0, "a");
        assert_eq!(set.assign(&[-1.0, 0.0]).unwrap(), 0);
        assert_eq!(set.assign(&[0.0, 0.0]).unwrap(), 1);
        assert!(matches!(set.assign(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn normalization_keeps_tightest_bounds() {
        let c = Cohort::from_conditions(
            "x",
            &[
                Condition { feature: 1, side: Side::Below, threshold: 3.0 },
                Condition { feature: 0, side: Side::AtOrAbove, threshold: -1.0 },
                Condition { feature: 1, side: Side::Below, threshold: 2.0 },
                Condition { feature: 0, side: Side::AtOrAbove, threshold: 0.5 },
            ],
        );
        assert_eq!(c.conditions.len(), 2);
        assert_eq!(c.interval(0), Interval { lower: 0.5, upper: f64::INFINITY });
        assert_eq!(c.interval(1), Interval { lower: f64::NEG_INFINITY, upper: 2.0 });
    }

    #[test]
    fn touching_intervals_are_empty() {
        let a = halves(0, 1.0, "a");
        assert!(a.cohorts[0].intersect(&a.cohorts[1], "x").is_none());
        assert!(a.cohorts[0].intersect(&a.cohorts[0], "x").is_some());
        a.validate_partition(3).unwrap();
    }

    #[test]
    fn overlap_and_gap_are_detected() {
        let mut overlap = halves(0, 1.0, "a");
        overlap.cohorts[1].conditions[0].threshold = 0.5;
        assert!(overlap.validate_partition(0).is_err());
        let mut gap = halves(0, 1.0, "a");
        gap.cohorts[1].conditions[0].threshold = 1.5;
        assert!(gap.validate_partition(0).is_err());
    }

    #[test]
    fn interior_point_is_inside() {
        let c = Cohort::from_conditions(
            "x",
            &[
                Condition { feature: 0, side: Side::AtOrAbove, threshold: 1.0 },
                Condition { feature: 0, side: Side::Below, threshold: 2.0 },
                Condition { feature: 1, side: Side::Below, threshold: -3.0 },
            ],
        );
        assert!(c.contains(&c.interior_point(3)));
    }
}
