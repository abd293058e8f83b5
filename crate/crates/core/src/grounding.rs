//! Grounding visual concepts in textual descriptors.
//!
//! Each concept's region embedding is scored against every descriptor. Per
//! concept, only descriptors scoring above the row median by a margin survive
//! (capped at `k`). A Sinkhorn transport plan over the surviving entries
//! spreads concepts across different descriptors, and the plan is read off
//! row by row with a greedy uniqueness rule on each concept's top descriptor.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorBank;
use crate::embedding::{similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::flags::Flag;
use crate::imaging::concept_colour;

/// Margin above the row median a candidate must clear.
pub const MEDIAN_MARGIN: f64 = 0.02;
pub const DEFAULT_TOP_K: usize = 500;
pub const DEFAULT_TOP_N: usize = 3;

/// Concept × descriptor similarities with a per-row candidate mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: DMatrix<f64>,
    candidates: Vec<Vec<bool>>,
}

impl ScoreMatrix {
    /// All entries start as candidates.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("score matrix has non-finite entries".into()));
        }
        let candidates = vec![vec![true; values.ncols()]; values.nrows()];
        Ok(Self { values, candidates })
    }

    pub fn with_candidates(values: DMatrix<f64>, candidates: Vec<Vec<bool>>) -> Result<Self> {
        let mut s = Self::new(values)?;
        if candidates.len() != s.rows() || candidates.iter().any(|r| r.len() != s.cols()) {
            return Err(Error::InvalidInput("candidate mask shape differs from scores".into()));
        }
        s.candidates = candidates;
        Ok(s)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, l: usize, d: usize) -> f64 {
        self.values[(l, d)]
    }

    pub fn row(&self, l: usize) -> Vec<f64> {
        self.values.row(l).iter().copied().collect()
    }

    pub fn is_candidate(&self, l: usize, d: usize) -> bool {
        self.candidates[l][d]
    }

    pub fn candidates(&self, l: usize) -> Vec<usize> {
        (0..self.cols()).filter(|&d| self.candidates[l][d]).collect()
    }

    /// Restricts every row to [`candidate_filter`]. Rows left empty are
    /// flagged.
    pub fn apply_filter(&mut self, k: usize) -> Result<Vec<Flag>> {
        let mut flags = Vec::new();
        for l in 0..self.rows() {
            let keep = candidate_filter(&self.row(l), k)?;
            if keep.is_empty() {
                flags.push(Flag::EmptyCandidateSet { concept: l });
            }
            let mut mask = vec![false; self.cols()];
            for d in keep {
                mask[d] = true;
            }
            self.candidates[l] = mask;
        }
        Ok(flags)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: &self.values * factor,
            candidates: self.candidates.clone(),
        }
    }
}

/// `Ĉ[l, d] = region_l · descriptor_d`.
pub fn score_concepts(regions: &[EmbeddingVector], bank: &DescriptorBank) -> Result<ScoreMatrix> {
    if regions.is_empty() {
        return Err(Error::InvalidInput("no concept embeddings to score".into()));
    }
    let desc = bank.embeddings()?;
    let mut values = DMatrix::zeros(regions.len(), desc.len());
    for (l, r) in regions.iter().enumerate() {
        for (d, e) in desc.iter().enumerate() {
            values[(l, d)] = similarity(r, e)?;
        }
    }
    ScoreMatrix::new(values)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices with score > median + 0.02, best first (ties to the lower index),
/// truncated to `k`.
pub fn candidate_filter(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if row.len() < 2 {
        return Err(Error::InvalidInput("candidate filter needs at least two descriptors".into()));
    }
    let threshold = median(row) + MEDIAN_MARGIN;
    let mut keep: Vec<usize> = (0..row.len()).filter(|&d| row[d] > threshold).collect();
    keep.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    keep.truncate(k);
    Ok(keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub tau: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tau: 1.0,
            max_iters: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: DMatrix<f64>,
    /// Target mass per row; zero for inactive rows.
    pub row_targets: Vec<f64>,
    pub col_targets: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest marginal violation at exit.
    pub violation: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.values.row_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.values.column_iter().map(|c| c.sum()).collect()
    }
}

/// Sinkhorn–Knopp scaling of `K = exp(τ(Ĉ − max Ĉ))` over the candidate
/// entries, with uniform marginals over active rows and columns.
pub fn sinkhorn_assign(scores: &ScoreMatrix, options: &SinkhornOptions) -> Result<TransportPlan> {
    if !(options.tau > 0.0) || !options.tau.is_finite() {
        return Err(Error::InvalidInput("tau must be positive".into()));
    }
    let (l_n, d_n) = (scores.rows(), scores.cols());
    let active_rows: Vec<bool> = (0..l_n).map(|l| scores.candidates[l].iter().any(|c| *c)).collect();
    let active_cols: Vec<bool> = (0..d_n)
        .map(|d| (0..l_n).any(|l| scores.candidates[l][d]))
        .collect();
    let n_rows = active_rows.iter().filter(|a| **a).count();
    let n_cols = active_cols.iter().filter(|a| **a).count();
    if n_rows == 0 {
        return Err(Error::AllMasked);
    }
    let max = (0..l_n)
        .flat_map(|l| (0..d_n).map(move |d| (l, d)))
        .filter(|&(l, d)| scores.candidates[l][d])
        .map(|(l, d)| scores.values[(l, d)])
        .fold(f64::NEG_INFINITY, f64::max);
    let kernel = DMatrix::from_fn(l_n, d_n, |l, d| {
        if scores.candidates[l][d] {
            (options.tau * (scores.values[(l, d)] - max)).exp()
        } else {
            0.0
        }
    });
    let r: Vec<f64> = active_rows.iter().map(|a| if *a { 1.0 / n_rows as f64 } else { 0.0 }).collect();
    let c: Vec<f64> = active_cols.iter().map(|a| if *a { 1.0 / n_cols as f64 } else { 0.0 }).collect();
    let mut u = vec![1.0; l_n];
    let mut v = vec![1.0; d_n];
    let plan_of = |u: &[f64], v: &[f64]| DMatrix::from_fn(l_n, d_n, |l, d| u[l] * kernel[(l, d)] * v[d]);
    let violation_of = |p: &DMatrix<f64>| {
        let rv = (0..l_n).map(|l| (p.row(l).sum() - r[l]).abs()).fold(0.0, f64::max);
        let cv = (0..d_n).map(|d| (p.column(d).sum() - c[d]).abs()).fold(0.0, f64::max);
        rv.max(cv)
    };
    let mut iterations = 0;
    let mut violation = violation_of(&plan_of(&u, &v));
    while violation >= options.tol && iterations < options.max_iters {
        for l in 0..l_n {
            let kv: f64 = (0..d_n).map(|d| kernel[(l, d)] * v[d]).sum();
            u[l] = if active_rows[l] && kv > 0.0 { r[l] / kv } else { 0.0 };
        }
        for d in 0..d_n {
            let ku: f64 = (0..l_n).map(|l| kernel[(l, d)] * u[l]).sum();
            v[d] = if active_cols[d] && ku > 0.0 { c[d] / ku } else { 0.0 };
        }
        iterations += 1;
        violation = violation_of(&plan_of(&u, &v));
    }
    Ok(TransportPlan {
        values: plan_of(&u, &v),
        row_targets: r,
        col_targets: c,
        iterations,
        converged: violation < options.tol,
        violation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedDescriptor {
    pub id: u32,
    /// `Ĉ[l, d]`.
    pub score: f64,
    /// Transport mass `Π[l, d]`.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedConcept {
    pub concept: usize,
    pub colour: [u8; 3],
    /// Patch indices carrying this concept.
    pub patches: Vec<usize>,
    /// Best first; at most `top_n`.
    pub descriptors: Vec<AssignedDescriptor>,
    /// `s(I, I_p)`: whole image vs the prompted region.
    pub region_similarity: f64,
    /// `s(I, I_p) · s(I, d_top1)`; zero when no descriptor was assigned.
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedConceptSet {
    pub concepts: Vec<GroundedConcept>,
    pub flags: Vec<Flag>,
}

/// Inputs to the concept importance score.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceInputs {
    /// `s(I, I_p)` per concept row.
    pub region_similarity: Vec<f64>,
    /// `s(I, d)` for every descriptor id.
    pub descriptor_similarity: Vec<f64>,
    /// Concept label and patch indices per row.
    pub concepts: Vec<(usize, Vec<usize>)>,
}

impl ImportanceInputs {
    /// Unit importance inputs for `rows` concepts over `cols` descriptors.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            region_similarity: vec![1.0; rows],
            descriptor_similarity: vec![1.0; cols],
            concepts: (0..rows).map(|l| (l, Vec::new())).collect(),
        }
    }
}

fn by_mass_desc(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
}

/// Top-1 per row, greedily by descending mass with no column reused while
/// an unused one with positive mass remains for that row.
pub fn unique_top1(plan: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (l_n, d_n) = (plan.nrows(), plan.ncols());
    let mut entries: Vec<(usize, usize, f64)> = (0..l_n)
        .flat_map(|l| (0..d_n).map(move |d| (l, d)))
        .map(|(l, d)| (l, d, plan[(l, d)]))
        .filter(|e| e.2 > 0.0)
        .collect();
    entries.sort_by(by_mass_desc);
    let mut top = vec![None; l_n];
    let mut taken = vec![false; d_n];
    for &(l, d, _) in &entries {
        if top[l].is_none() && !taken[d] {
            top[l] = Some(d);
            taken[d] = true;
        }
    }
    // Rows whose every positive column went elsewhere keep their own best.
    for l in 0..l_n {
        if top[l].is_none() {
            top[l] = entries.iter().find(|e| e.0 == l).map(|e| e.1);
        }
    }
    top
}

/// Reads descriptors off the plan: unique top-1 per concept, then the next
/// best columns by mass up to `top_n`.
pub fn assign_descriptors(
    plan: &TransportPlan,
    scores: &ScoreMatrix,
    top_n: usize,
    inputs: &ImportanceInputs,
) -> Result<GroundedConceptSet> {
    let (l_n, d_n) = (plan.values.nrows(), plan.values.ncols());
    if (l_n, d_n) != (scores.rows(), scores.cols()) {
        return Err(Error::InvalidInput("plan and score shapes differ".into()));
    }
    if plan.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("transport plan has non-finite entries".into()));
    }
    if inputs.region_similarity.len() != l_n || inputs.concepts.len() != l_n {
        return Err(Error::DimensionMismatch {
            what: "importance inputs vs concept rows",
            expected: l_n,
            found: inputs.region_similarity.len(),
        });
    }
    if inputs.descriptor_similarity.len() != d_n {
        return Err(Error::DimensionMismatch {
            what: "importance inputs vs descriptors",
            expected: d_n,
            found: inputs.descriptor_similarity.len(),
        });
    }
    let top1 = unique_top1(&plan.values);
    let mut flags = Vec::new();
    let mut concepts = Vec::with_capacity(l_n);
    for l in 0..l_n {
        let (label, patches) = inputs.concepts[l].clone();
        let mut chosen = Vec::new();
        if let Some(first) = top1[l] {
            chosen.push(first);
            let mut rest: Vec<(usize, usize, f64)> = (0..d_n)
                .filter(|&d| d != first && plan.values[(l, d)] > 0.0)
                .map(|d| (l, d, plan.values[(l, d)]))
                .collect();
            rest.sort_by(by_mass_desc);
            chosen.extend(rest.iter().take(top_n.saturating_sub(1)).map(|e| e.1));
        } else {
            flags.push(Flag::EmptyPlanRow { concept: label });
        }
        chosen.truncate(top_n);
        let descriptors: Vec<AssignedDescriptor> = chosen
            .iter()
            .map(|&d| AssignedDescriptor {
                id: d as u32,
                score: scores.get(l, d),
                mass: plan.values[(l, d)],
            })
            .collect();
        let region_similarity = inputs.region_similarity[l];
        let importance = match descriptors.first() {
            Some(d) => region_similarity * inputs.descriptor_similarity[d.id as usize],
            None => 0.0,
        };
        concepts.push(GroundedConcept {
            concept: label,
            colour: concept_colour(label),
            patches,
            descriptors,
            region_similarity,
            importance,
        });
    }
    Ok(GroundedConceptSet { concepts, flags })
}

/// Per-row argmax of `Ĉ` over candidates (the assignment without transport).
pub fn argmax_assignment(scores: &ScoreMatrix) -> Vec<Option<u32>> {
    (0..scores.rows())
        .map(|l| {
            scores
                .candidates(l)
                .into_iter()
                .max_by(|&a, &b| scores.get(l, a).total_cmp(&scores.get(l, b)).then(b.cmp(&a)))
                .map(|d| d as u32)
        })
        .collect()
}

/// Base-2 entropy of the top-1 descriptor frequency distribution.
pub fn diversity_entropy(top1: &[u32]) -> f64 {
    if top1.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for id in top1 {
        *counts.entry(*id).or_default() += 1;
    }
    let n = top1.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Stable descending order of concepts by importance.
pub fn concept_rank(set: &GroundedConceptSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.concepts.len()).collect();
    order.sort_by(|&a, &b| set.concepts[b].importance.total_cmp(&set.concepts[a].importance));
    order
}

impl GroundedConceptSet {
    pub fn top1(&self) -> Vec<u32> {
        self.concepts
            .iter()
            .filter_map(|c| c.descriptors.first().map(|d| d.id))
            .collect()
    }

    pub fn diversity(&self) -> f64 {
        diversity_entropy(&self.top1())
    }

    /// `𝒟_v` ordered for ablation: concepts by importance, each concept's
    /// descriptors best first, first occurrence kept.
    pub fn ranked_descriptor_ids(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in concept_rank(self) {
            for d in &self.concepts[c].descriptors {
                if !out.contains(&d.id) {
                    out.push(d.id);
                }
            }
        }
        out
    }

    /// Report with descriptor texts filled in.
    pub fn report(&self, bank: &DescriptorBank) -> serde_json::Value {
        let concepts: Vec<serde_json::Value> = self
            .concepts
            .iter()
            .map(|c| {
                serde_json::json!({
                    "concept": c.concept,
                    "color": c.colour,
                    "mask": format!("concept_{}.png", c.concept),
                    "patches": c.patches,
                    "descriptors": c.descriptors.iter().map(|d| serde_json::json!({
                        "id": d.id,
                        "text": bank.text(d.id),
                        "score": d.score,
                        "mass": d.mass,
                    })).collect::<Vec<_>>(),
                    "region_similarity": c.region_similarity,
                    "importance": c.importance,
                })
            })
            .collect();
        serde_json::json!({
            "concepts": concepts,
            "diversity_entropy": self.diversity(),
            "flags": self.flags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn median_filter_examples() {
        assert_eq!(candidate_filter(&[0.5, 0.5, 0.5, 0.9], 500).unwrap(), vec![3]);
        assert!(candidate_filter(&[0.3; 6], 500).unwrap().is_empty());
        assert!(candidate_filter(&[0.3], 500).is_err());
        // Margin is strict.
        assert!(candidate_filter(&[0.0, 0.0, 0.0, 0.02], 500).unwrap().is_empty());
    }

    #[test]
    fn empty_candidate_rows_are_flagged() {
        let mut s = ScoreMatrix::new(mat(&[&[0.1, 0.1, 0.1], &[0.0, 0.5, 0.1]])).unwrap();
        let flags = s.apply_filter(500).unwrap();
        assert_eq!(flags, vec![Flag::EmptyCandidateSet { concept: 0 }]);
        assert_eq!(s.candidates(1), vec![1]);
    }

    #[test]
    fn dominant_diagonal_recovers_identity() {
        let s = ScoreMatrix::new(mat(&[&[10.0, 0.0, 0.0], &[0.0, 10.0, 0.0], &[0.0, 0.0, 10.0]])).unwrap();
        let p = sinkhorn_assign(&s, &SinkhornOptions::default()).unwrap();
        assert!(p.converged);
        for l in 0..3 {
            let best = (0..3).max_by(|&a, &b| p.values[(l, a)].total_cmp(&p.values[(l, b)])).unwrap();
            assert_eq!(best, l);
        }
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let s = ScoreMatrix::with_candidates(
            mat(&[&[0.3, 0.2, 0.1], &[0.1, 0.4, 0.2]]),
            vec![vec![true, false, true], vec![true, true, true]],
        )
        .unwrap();
        let p = sinkhorn_assign(&s, &SinkhornOptions::default()).unwrap();
        assert_eq!(p.values[(0, 1)], 0.0);
        assert!(p.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn fully_masked_matrix_is_an_error() {
        let s = ScoreMatrix::with_candidates(mat(&[&[0.3, 0.2]]), vec![vec![false, false]]).unwrap();
        assert!(matches!(sinkhorn_assign(&s, &SinkhornOptions::default()), Err(Error::AllMasked)));
    }

    #[test]
    fn non_convergence_is_reported() {
        let s = ScoreMatrix::new(mat(&[&[0.3, 0.2, 0.9], &[0.1, 0.4, 0.2]])).unwrap();
        let p = sinkhorn_assign(&s, &SinkhornOptions { tau: 1.0, max_iters: 1, tol: 1e-15 }).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations, 1);
    }

    fn plan_of(values: DMatrix<f64>) -> TransportPlan {
        let (l, d) = (values.nrows(), values.ncols());
        TransportPlan {
            values,
            row_targets: vec![1.0 / l as f64; l],
            col_targets: vec![1.0 / d as f64; d],
            iterations: 0,
            converged: true,
            violation: 0.0,
        }
    }

    #[test]
    fn permutation_plan_assigns_its_columns() {
        let p = plan_of(mat(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]));
        let s = ScoreMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let g = assign_descriptors(&p, &s, 3, &ImportanceInputs::uniform(3, 3)).unwrap();
        assert_eq!(g.top1(), vec![1, 2, 0]);
        assert!(g.concepts.iter().all(|c| c.descriptors.len() == 1));
    }

    #[test]
    fn shared_peak_goes_to_the_larger_mass() {
        let p = plan_of(mat(&[&[0.3, 0.1, 0.05], &[0.4, 0.05, 0.2]]));
        let s = ScoreMatrix::new(DMatrix::zeros(2, 3)).unwrap();
        let g = assign_descriptors(&p, &s, 3, &ImportanceInputs::uniform(2, 3)).unwrap();
        assert_eq!(g.top1(), vec![1, 0]);
        let ids: Vec<u32> = g.concepts[0].descriptors.iter().map(|d| d.id).collect();
        assert_eq!(ids, vec![1, 0, 2]);
    }

    #[test]
    fn empty_row_is_kept_and_flagged() {
        let p = plan_of(mat(&[&[0.5, 0.0], &[0.0, 0.0]]));
        let s = ScoreMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        let g = assign_descriptors(&p, &s, 3, &ImportanceInputs::uniform(2, 2)).unwrap();
        assert!(g.concepts[1].descriptors.is_empty());
        assert_eq!(g.concepts[1].importance, 0.0);
        assert_eq!(g.flags, vec![Flag::EmptyPlanRow { concept: 1 }]);
    }

    #[test]
    fn importance_is_a_product_of_similarities() {
        let p = plan_of(mat(&[&[0.1, 0.9]]));
        let s = ScoreMatrix::new(DMatrix::zeros(1, 2)).unwrap();
        let inputs = ImportanceInputs {
            region_similarity: vec![0.8],
            descriptor_similarity: vec![0.2, 0.7],
            concepts: vec![(4, vec![1, 2])],
        };
        let g = assign_descriptors(&p, &s, 3, &inputs).unwrap();
        assert!((g.concepts[0].importance - 0.56).abs() < 1e-12);
        assert_eq!(g.concepts[0].concept, 4);
    }

    #[test]
    fn entropy_examples() {
        assert!((diversity_entropy(&[0, 1, 2, 3, 4]) - 5f64.log2()).abs() < 1e-12);
        assert_eq!(diversity_entropy(&[7, 7, 7]), 0.0);
        assert!((diversity_entropy(&[1, 1, 2, 2]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concept_rank_is_stable() {
        let mk = |importance: f64| GroundedConcept {
            concept: 0,
            colour: [0, 0, 0],
            patches: vec![],
            descriptors: vec![],
            region_similarity: 1.0,
            importance,
        };
        let set = GroundedConceptSet {
            concepts: vec![mk(0.9 * 0.5), mk(0.8 * 0.7)],
            flags: vec![],
        };
        assert_eq!(concept_rank(&set), vec![1, 0]);
        let tied = GroundedConceptSet {
            concepts: vec![mk(0.3), mk(0.3), mk(0.3)],
            flags: vec![],
        };
        assert_eq!(concept_rank(&tied), vec![0, 1, 2]);
    }
}
