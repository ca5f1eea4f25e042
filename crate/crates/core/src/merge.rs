//! Merging per-(treatment, metric) partitions into one common partition.
//!
//! Sources are folded left to right: the running partition is refined by
//! every cohort of the next source, empty intersections are dropped, and
//! each surviving cohort inherits the effect of both parents.

use serde::{Deserialize, Serialize};

use crate::causal_tree::EffectEstimate;
use crate::cohort::{probe_points, CohortSet};
use crate::error::{Error, Result};

/// Which (treatment, metric) pair a partition was fitted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceKey {
    pub treatment: usize,
    pub metric: usize,
}

/// One input partition with the effect of every cohort in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSource {
    pub key: SourceKey,
    pub cohorts: CohortSet,
    pub effects: Vec<EffectEstimate>,
}

/// Effect of every source on every merged cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub sources: Vec<SourceKey>,
    /// `effects[cohort][source]`.
    pub effects: Vec<Vec<EffectEstimate>>,
}

impl EffectTable {
    pub fn source_index(&self, key: SourceKey) -> Option<usize> {
        self.sources.iter().position(|&k| k == key)
    }

    pub fn get(&self, cohort: usize, key: SourceKey) -> Option<&EffectEstimate> {
        let s = self.source_index(key)?;
        self.effects.get(cohort).map(|row| &row[s])
    }
}

/// Canonical processing order: every treatment of metric 0, then metric 1,
/// and so on.
pub fn canonical_order(sources: &mut [EffectSource]) {
    sources.sort_by_key(|s| (s.key.metric, s.key.treatment));
}

/// Refine `a` by `b`. Returns the non-empty intersections, ids joined with
/// `&`, and the parent indices `(index in a, index in b)` of each.
pub fn merge_partitions(a: &CohortSet, b: &CohortSet) -> Result<(CohortSet, Vec<(usize, usize)>)> {
    if a.n_features != b.n_features {
        return Err(Error::DimensionMismatch {
            expected: a.n_features,
            actual: b.n_features,
        });
    }
    let mut cohorts = Vec::new();
    let mut parents = Vec::new();
    for (ia, ca) in a.cohorts.iter().enumerate() {
        for (ib, cb) in b.cohorts.iter().enumerate() {
            if let Some(c) = ca.intersect(cb, format!("{}&{}", ca.id, cb.id)) {
                cohorts.push(c);
                parents.push((ia, ib));
            }
        }
    }
    Ok((
        CohortSet {
            n_features: a.n_features,
            cohorts,
        },
        parents,
    ))
}

/// Number of probe points used to screen inputs for gaps.
const INPUT_PROBES: usize = 4096;

/// Merge `sources` in the order given (see [`canonical_order`]).
///
/// Every input must be a partition: exclusivity is checked exactly and
/// exhaustiveness on probe points built from all thresholds involved.
pub fn merge_cohort_sets(sources: &[EffectSource], seed: u64) -> Result<(CohortSet, EffectTable)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Validation("merge needs at least one source".into()))?;
    let sets: Vec<CohortSet> = sources.iter().map(|s| s.cohorts.clone()).collect();
    for (l, s) in sources.iter().enumerate() {
        if s.cohorts.len() != s.effects.len() {
            return Err(Error::Validation(format!(
                "source {l} has {} cohorts but {} effects",
                s.cohorts.len(),
                s.effects.len()
            )));
        }
        if s.cohorts.is_empty() {
            return Err(Error::Validation(format!("source {l} has no cohorts")));
        }
        if s.cohorts.n_features != first.cohorts.n_features {
            return Err(Error::DimensionMismatch {
                expected: first.cohorts.n_features,
                actual: s.cohorts.n_features,
            });
        }
        s.cohorts
            .check_exclusive()
            .map_err(|e| Error::Validation(format!("source {l}: {e}")))?;
    }
    let probes = probe_points(&sets, INPUT_PROBES, seed);
    for (l, s) in sources.iter().enumerate() {
        s.cohorts
            .check_probes(&probes)
            .map_err(|e| Error::Validation(format!("source {l}: {e}")))?;
    }

    let mut merged = first.cohorts.clone();
    let mut rows: Vec<Vec<EffectEstimate>> = first.effects.iter().map(|e| vec![*e]).collect();
    for s in &sources[1..] {
        let (next, parents) = merge_partitions(&merged, &s.cohorts)?;
        rows = parents
            .iter()
            .map(|&(ia, ib)| {
                let mut row = rows[ia].clone();
                row.push(s.effects[ib]);
                row
            })
            .collect();
        merged = next;
    }
    Ok((
        merged,
        EffectTable {
            sources: sources.iter().map(|s| s.key).collect(),
            effects: rows,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Cohort, Condition, Side};

    fn est(tau: f64) -> EffectEstimate {
        EffectEstimate {
            tau,
            var: 0.0,
            n_treat: 1,
            n_control: 1,
            var_treat: 0.0,
            var_control: 0.0,
        }
    }

    fn halves(feature: usize, prefix: &str) -> CohortSet {
        let cond = |side| Condition {
            feature,
            side,
            threshold: 0.0,
        };
        CohortSet {
            n_features: 2,
            cohorts: vec![
                Cohort::from_conditions(format!("{prefix}0"), &[cond(Side::Below)]),
                Cohort::from_conditions(format!("{prefix}1"), &[cond(Side::AtOrAbove)]),
            ],
        }
    }

    fn source(feature: usize, prefix: &str, treatment: usize, taus: [f64; 2]) -> EffectSource {
        EffectSource {
            key: SourceKey { treatment, metric: 0 },
            cohorts: halves(feature, prefix),
            effects: taus.iter().map(|&t| est(t)).collect(),
        }
    }

    #[test]
    fn single_source_is_unchanged() {
        let s = source(0, "a", 1, [1.0, 2.0]);
        let (set, table) = merge_cohort_sets(std::slice::from_ref(&s), 0).unwrap();
        assert_eq!(set, s.cohorts);
        assert_eq!(table.effects, vec![vec![est(1.0)], vec![est(2.0)]]);
    }

    #[test]
    fn crossing_halves_give_four_cohorts() {
        let a = source(0, "a", 1, [1.0, 2.0]);
        let b = source(1, "b", 2, [10.0, 20.0]);
        let (set, table) = merge_cohort_sets(&[a, b], 0).unwrap();
        assert_eq!(set.len(), 4);
        let i = set.assign(&[-1.0, 1.0]).unwrap();
        assert_eq!(set.cohorts[i].id, "a0&b1");
        assert_eq!(table.effects[i][0].tau, 1.0);
        assert_eq!(table.effects[i][1].tau, 20.0);
        let key = SourceKey { treatment: 2, metric: 0 };
        assert_eq!(table.get(i, key).unwrap().tau, 20.0);
    }

    #[test]
    fn identical_partitions_do_not_grow() {
        let a = source(0, "a", 1, [1.0, 2.0]);
        let b = source(0, "b", 2, [3.0, 4.0]);
        let (set, _) = merge_cohort_sets(&[a, b], 0).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn gaps_are_rejected() {
        let mut a = source(0, "a", 1, [1.0, 2.0]);
        a.cohorts.cohorts.pop();
        a.effects.pop();
        let b = source(1, "b", 2, [3.0, 4.0]);
        assert!(matches!(merge_cohort_sets(&[a, b], 0), Err(Error::Validation(_))));
    }

    #[test]
    fn overlaps_are_rejected() {
        let mut a = source(0, "a", 1, [1.0, 2.0]);
        a.cohorts.cohorts[1] = Cohort::whole_space("all");
        assert!(matches!(merge_cohort_sets(&[a], 0), Err(Error::Validation(_))));
    }
}
