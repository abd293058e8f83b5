//! Discrete mutual information between descriptor id sets.
//!
//! Each set is treated as a uniform distribution over its ids. The joint
//! distribution is the normalized match table `T[i][j] = [X_i = Y_j]`, so
//! with `m` shared ids the mutual information collapses to
//! `log2(|X|·|Y| / m)`. The contingency computation is kept explicit rather
//! than using the closed form.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flags::Flag;

/// Ordered, duplicate-free descriptor ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ConceptIdSet(Vec<u32>);

impl ConceptIdSet {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::DuplicateId(*id));
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The set without its first `t` ids.
    pub fn without_prefix(&self, t: usize) -> Self {
        Self(self.0[t.min(self.0.len())..].to_vec())
    }
}

impl TryFrom<Vec<u32>> for ConceptIdSet {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConceptIdSet> for Vec<u32> {
    fn from(s: ConceptIdSet) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiValue {
    pub bits: f64,
    pub overlap: usize,
    pub no_overlap: bool,
}

/// Entropy in bits of a table of counts: `log2 T − (1/T) Σ c log2 c`. Unit
/// counts contribute exactly zero to the sum, so uniform tables give an exact
/// `log2 T`.
fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let weighted: f64 = counts
        .iter()
        .filter(|c| **c > 1)
        .map(|&c| c as f64 * (c as f64).log2())
        .sum();
    t.log2() - weighted / t
}

/// `H(X) + H(Y) − H(X, Y)` in bits with uniform marginals and the match
/// table as the joint. Zero with a no-overlap flag when nothing matches.
pub fn contingency_mi(x: &ConceptIdSet, y: &ConceptIdSet) -> MiValue {
    let zero = |overlap| MiValue {
        bits: 0.0,
        overlap,
        no_overlap: true,
    };
    if x.is_empty() || y.is_empty() {
        return zero(0);
    }
    let ys: HashSet<u32> = y.ids().iter().copied().collect();
    // Non-zero cells of the match table; each holds a count of 1.
    let total = x.ids().iter().filter(|id| ys.contains(id)).count();
    if total == 0 {
        return zero(0);
    }
    let hx = entropy_bits(&vec![1; x.len()]);
    let hy = entropy_bits(&vec![1; y.len()]);
    let hxy = entropy_bits(&vec![1; total]);
    MiValue {
        bits: hx + hy - hxy,
        overlap: total,
        no_overlap: false,
    }
}

/// Normalized trapezoid: `(1/M) Σ (c[t] + c[t+1]) / 2` over `M = len − 1`
/// intervals. A single point gives that point.
pub fn normalized_auc(curve: &[f64]) -> f64 {
    match curve.len() {
        0 => 0.0,
        1 => curve[0],
        n => curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / (n - 1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCurve {
    /// MI after 0, 1, …, |Dv| removals.
    pub values: Vec<f64>,
    pub auc: f64,
    /// Ablation order (ids of Dv, removed first to last).
    pub order: Vec<u32>,
    pub flags: Vec<Flag>,
}

/// Removes the vision-side ids one at a time, most important first, and
/// records the MI after each removal.
pub fn mi_dynamics(dv: &ConceptIdSet, dy: &ConceptIdSet) -> Result<MiCurve> {
    if dv.is_empty() {
        return Err(Error::InvalidInput("vision concept set is empty".into()));
    }
    let values: Vec<f64> = (0..=dv.len())
        .map(|t| contingency_mi(&dv.without_prefix(t), dy).bits)
        .collect();
    let mut flags = Vec::new();
    if contingency_mi(dv, dy).no_overlap {
        flags.push(Flag::NoOverlap);
    }
    Ok(MiCurve {
        auc: normalized_auc(&values),
        values,
        order: dv.ids().to_vec(),
        flags,
    })
}

impl MiCurve {
    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.values
            .iter()
            .enumerate()
            .map(|(t, v)| vec![t.to_string(), format!("{v}")])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    pub image_id: String,
    pub class: String,
    pub mi: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSummary {
    pub group: String,
    pub count: usize,
    pub mean_mi: f64,
    pub mean_auc: f64,
}

fn summarize(group: String, records: &[&MiRecord]) -> MiSummary {
    let n = records.len() as f64;
    MiSummary {
        group,
        count: records.len(),
        mean_mi: records.iter().map(|r| r.mi).sum::<f64>() / n,
        mean_auc: records.iter().map(|r| r.auc).sum::<f64>() / n,
    }
}

/// Overall means, plus per-class means when `by_class` is set.
pub fn aggregate_mi(records: &[MiRecord], by_class: bool) -> Result<Vec<MiSummary>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no MI results to aggregate".into()));
    }
    let mut out = vec![summarize("all".into(), &records.iter().collect::<Vec<_>>())];
    if by_class {
        let mut groups: BTreeMap<&str, Vec<&MiRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(&r.class).or_default().push(r);
        }
        out.extend(groups.into_iter().map(|(c, rs)| summarize(c.to_string(), &rs)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> ConceptIdSet {
        ConceptIdSet::new(ids.to_vec()).unwrap()
    }

    /// Full contingency table with explicit marginals.
    fn brute_force(x: &[u32], y: &[u32]) -> f64 {
        let t: Vec<Vec<f64>> = x
            .iter()
            .map(|a| y.iter().map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        let total: f64 = t.iter().flatten().sum();
        let hxy: f64 = t
            .iter()
            .flatten()
            .filter(|v| **v > 0.0)
            .map(|v| {
                let p = v / total;
                -p * p.log2()
            })
            .sum();
        let hx: f64 = x.iter().map(|_| 1.0 / x.len() as f64).map(|p| -p * p.log2()).sum();
        let hy: f64 = y.iter().map(|_| 1.0 / y.len() as f64).map(|p| -p * p.log2()).sum();
        hx + hy - hxy
    }

    #[test]
    fn identical_sets_give_log_l() {
        let x = set(&[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(contingency_mi(&x, &x).bits, 3.0);
    }

    #[test]
    fn fifteen_by_fifty_with_five_shared() {
        let x: Vec<u32> = (0..15).collect();
        let y: Vec<u32> = (10..60).collect();
        let v = contingency_mi(&set(&x), &set(&y));
        assert_eq!(v.overlap, 5);
        assert!((v.bits - 150f64.log2()).abs() < 1e-12);
        assert!((v.bits - brute_force(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_empty_sets_are_flagged_zero() {
        let v = contingency_mi(&set(&[1, 2]), &set(&[3]));
        assert_eq!(v.bits, 0.0);
        assert!(v.no_overlap);
        assert!(contingency_mi(&set(&[]), &set(&[3])).no_overlap);
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(matches!(ConceptIdSet::new(vec![1, 2, 1]), Err(Error::DuplicateId(1))));
        assert!(serde_json::from_str::<ConceptIdSet>("[4, 4]").is_err());
    }

    #[test]
    fn dynamics_on_identical_pair() {
        // [log2 2, log2(1·2/1), 0]; trapezoids 1 and 0.5 over two steps.
        let x = set(&[3, 9]);
        let c = mi_dynamics(&x, &x).unwrap();
        assert_eq!(c.values, vec![1.0, 1.0, 0.0]);
        assert!((c.auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn disjoint_dynamics_are_flat() {
        let c = mi_dynamics(&set(&[1, 2, 3]), &set(&[4, 5])).unwrap();
        assert!(c.values.iter().all(|v| *v == 0.0));
        assert_eq!(c.auc, 0.0);
        assert_eq!(c.flags, vec![Flag::NoOverlap]);
    }

    #[test]
    fn empty_vision_set_is_an_error() {
        assert!(mi_dynamics(&set(&[]), &set(&[1])).is_err());
    }

    #[test]
    fn aggregate_means() {
        let r = |c: &str, mi, auc| MiRecord { image_id: "i".into(), class: c.into(), mi, auc };
        let s = aggregate_mi(&[r("a", 7.0, 2.0), r("b", 8.0, 4.0)], true).unwrap();
        assert_eq!(s[0].mean_auc, 3.0);
        assert_eq!(s[0].mean_mi, 7.5);
        assert_eq!(s[1].group, "a");
        assert_eq!(s[2].mean_auc, 4.0);
        let one = aggregate_mi(&[r("a", 7.0, 2.0)], false).unwrap();
        assert_eq!((one[0].mean_mi, one[0].mean_auc), (7.0, 2.0));
        assert!(aggregate_mi(&[], false).is_err());
    }
}
