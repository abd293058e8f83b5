//! Visual concepts: exclusive clusters of prominent patches, fit jointly over
//! a batch of images with k-means or PCA.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{GridGeometry, PatchFeatureGrid};
use crate::error::{Error, Result};
use crate::flags::Flag;
use crate::imaging::PixelMask;
use crate::spectral::{largest_connected_component, ProminenceMask};

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptMethod {
    #[default]
    Kmeans,
    Pca,
}

impl fmt::Display for ConceptMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConceptMethod::Kmeans => "kmeans",
            ConceptMethod::Pca => "pca",
        })
    }
}

impl FromStr for ConceptMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "pca" => Ok(Self::Pca),
            other => Err(Error::InvalidInput(format!("unknown concept method {other:?}"))),
        }
    }
}

/// Per-image concept labels; `None` is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSegmentation {
    pub method: ConceptMethod,
    pub l: usize,
    pub geometry: GridGeometry,
    pub labels: Vec<Option<usize>>,
}

impl ConceptSegmentation {
    pub fn patch_flags(&self, concept: usize) -> Vec<bool> {
        self.labels.iter().map(|l| *l == Some(concept)).collect()
    }

    pub fn patch_count(&self, concept: usize) -> usize {
        self.labels.iter().filter(|l| **l == Some(concept)).count()
    }

    /// Concepts present in this image, ascending.
    pub fn present(&self) -> Vec<usize> {
        (0..self.l).filter(|c| self.patch_count(*c) > 0).collect()
    }

    /// All patches of a concept at pixel resolution.
    pub fn concept_pixels(&self, concept: usize) -> Result<PixelMask> {
        PixelMask::from_patches(self.geometry, &self.patch_flags(concept))
    }

    /// Largest 4-connected patch region of a concept at pixel resolution.
    pub fn concept_region(&self, concept: usize) -> Result<PixelMask> {
        let mask = ProminenceMask::new(self.patch_flags(concept), self.geometry)?;
        let lcc = largest_connected_component(&mask)?;
        PixelMask::from_patches(self.geometry, &lcc.flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptOptions {
    pub method: ConceptMethod,
    pub l: usize,
    pub seed: u64,
    /// L2-normalize patch features before clustering.
    pub normalize: bool,
}

impl Default for ConceptOptions {
    fn default() -> Self {
        Self {
            method: ConceptMethod::Kmeans,
            l: 5,
            seed: 0,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFit {
    pub segmentations: Vec<ConceptSegmentation>,
    pub l_used: usize,
    pub flags: Vec<Flag>,
    /// k-means objective after each assignment step; empty for PCA.
    pub inertia: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding. May return fewer than `k` centres when the data has
/// fewer distinct points.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && *d > 0.0 {
                pick = i;
                break;
            }
        }
        while d2[pick] <= 0.0 {
            pick -= 1;
        }
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. The fit runs on the points in
/// lexicographic order, so permuting the input permutes the labels and
/// nothing else. Cluster ids follow the smallest point of each cluster.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult> {
    if points.is_empty() || k == 0 {
        return Err(Error::InvalidInput("k-means needs points and k ≥ 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput("k-means points differ in dimension".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lexicographic(&points[a], &points[b]));
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let mut r = kmeans_sorted(&sorted, k, seed, dim);
    let mut labels = vec![0; points.len()];
    for (s, &i) in order.iter().enumerate() {
        labels[i] = r.labels[s];
    }
    r.labels = labels;
    Ok(r)
}

fn kmeans_sorted(points: &[Vec<f64>], k: usize, seed: u64, dim: usize) -> KmeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k.min(points.len()), &mut rng);
    let mut labels = vec![0usize; points.len()];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    loop {
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            total += d;
        }
        inertia.push(total);
        if iterations == KMEANS_MAX_ITERS {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &j) in points.iter().zip(&labels) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for (j, c) in centroids.iter_mut().enumerate() {
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, c).sqrt());
            *c = new;
        }
        if shift < KMEANS_TOL {
            let mut total = 0.0;
            for (i, p) in points.iter().enumerate() {
                let (j, d) = nearest(p, &centroids);
                labels[i] = j;
                total += d;
            }
            inertia.push(total);
            break;
        }
    }
    // Canonical relabelling; empty clusters are dropped.
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut next = 0;
    for &j in &labels {
        if remap[j] == usize::MAX {
            remap[j] = next;
            next += 1;
        }
    }
    let mut ordered = vec![Vec::new(); next];
    for (j, c) in centroids.into_iter().enumerate() {
        if remap[j] != usize::MAX {
            ordered[remap[j]] = c;
        }
    }
    KmeansResult {
        labels: labels.into_iter().map(|j| remap[j]).collect(),
        centroids: ordered,
        inertia,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// Unit principal axes, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
    pub rank: usize,
}

/// Top-`l` principal axes of the rows of `points` (mean-centred).
pub fn pca(points: &[Vec<f64>], l: usize) -> Result<PcaResult> {
    if points.len() < 2 || l == 0 {
        return Err(Error::InvalidInput("PCA needs at least two points and l ≥ 1".into()));
    }
    let n = points.len();
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let cov = 0.5 * (&cov + cov.transpose());
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-10 * top.max(f64::MIN_POSITIVE))
        .count();
    let keep = l.min(rank);
    let components = order[..keep]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: largest-magnitude entry positive.
            let k = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(k, _)| k)
                .unwrap_or(0);
            if v[k] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(PcaResult {
        components,
        variances: order[..keep].iter().map(|&i| eig.eigenvalues[i]).collect(),
        mean,
        rank,
    })
}

/// Assigns each point to the component with the largest |projection|.
pub fn pca_assign(points: &[Vec<f64>], fit: &PcaResult) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let centred: Vec<f64> = p.iter().zip(&fit.mean).map(|(a, m)| a - m).collect();
            let mut best = (0, f64::NEG_INFINITY);
            for (j, c) in fit.components.iter().enumerate() {
                let proj: f64 = centred.iter().zip(c).map(|(a, b)| a * b).sum::<f64>().abs();
                if proj > best.1 {
                    best = (j, proj);
                }
            }
            best.0
        })
        .collect()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Fits concepts jointly over the prominent patches of a batch of images.
pub fn fit_concepts(
    images: &[(&PatchFeatureGrid, &ProminenceMask)],
    options: &ConceptOptions,
) -> Result<ConceptFit> {
    if options.l == 0 {
        return Err(Error::InvalidInput("concept count must be at least 1".into()));
    }
    let mut points = Vec::new();
    let mut origin = Vec::new();
    for (img, (grid, mask)) in images.iter().enumerate() {
        if grid.geometry() != mask.geometry {
            return Err(Error::InvalidInput(format!(
                "image {img}: mask geometry does not match its patch grid"
            )));
        }
        for p in mask.indices() {
            let mut v: Vec<f64> = grid.row(p).iter().map(|x| *x as f64).collect();
            if options.normalize {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
            }
            points.push(v);
            origin.push((img, p));
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyMask);
    }
    // Canonical point order makes the fit independent of image order.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lexicographic(&points[a], &points[b]));
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();

    let mut flags = Vec::new();
    let (labels_sorted, l_used, inertia) = match options.method {
        ConceptMethod::Kmeans => {
            let r = kmeans(&sorted, options.l, options.seed)?;
            (r.labels, r.centroids.len(), r.inertia)
        }
        ConceptMethod::Pca => {
            if sorted.len() < 2 {
                (vec![0], 1, Vec::new())
            } else {
                let fit = pca(&sorted, options.l)?;
                if fit.components.is_empty() {
                    (vec![0; sorted.len()], 1, Vec::new())
                } else {
                    let raw = pca_assign(&sorted, &fit);
                    (raw, fit.components.len(), Vec::new())
                }
            }
        }
    };
    if l_used < options.l {
        flags.push(Flag::ConceptCountReduced {
            requested: options.l,
            used: l_used,
        });
    }
    let mut segmentations: Vec<ConceptSegmentation> = images
        .iter()
        .map(|(grid, _)| ConceptSegmentation {
            method: options.method,
            l: l_used,
            geometry: grid.geometry(),
            labels: vec![None; grid.num_patches()],
        })
        .collect();
    for (k, &i) in order.iter().enumerate() {
        let (img, p) = origin[i];
        segmentations[img].labels[p] = Some(labels_sorted[k]);
    }
    Ok(ConceptFit {
        segmentations,
        l_used,
        flags,
        inertia,
    })
}

pub fn kmeans_concepts(
    images: &[(&PatchFeatureGrid, &ProminenceMask)],
    l: usize,
    seed: u64,
) -> Result<ConceptFit> {
    fit_concepts(
        images,
        &ConceptOptions {
            method: ConceptMethod::Kmeans,
            l,
            seed,
            normalize: true,
        },
    )
}

pub fn pca_concepts(
    images: &[(&PatchFeatureGrid, &ProminenceMask)],
    l: usize,
    seed: u64,
) -> Result<ConceptFit> {
    fit_concepts(
        images,
        &ConceptOptions {
            method: ConceptMethod::Pca,
            l,
            seed,
            normalize: true,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn repeated_distinct_points_get_zero_inertia() {
        let base = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]];
        let points: Vec<Vec<f64>> = (0..20).map(|i| base[i % 4].clone()).collect();
        let r = kmeans(&points, 4, 3).unwrap();
        assert_eq!(*r.inertia.last().unwrap(), 0.0);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(r.labels[i] == r.labels[j], i % 4 == j % 4);
            }
        }
    }

    #[test]
    fn fewer_distinct_points_than_k_reduces_clusters() {
        let points = vec![vec![1.0], vec![1.0], vec![2.0]];
        let r = kmeans(&points, 3, 0).unwrap();
        assert_eq!(r.centroids.len(), 2);
    }

    #[test]
    fn gaussian_blobs_match_true_centres() {
        let centres = [[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..300 {
            let c = centres[i % 3];
            let p = vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)];
            // Oracle: nearest true centre.
            let t = (0..3)
                .min_by(|&a, &b| sq_dist(&p, &centres[a]).total_cmp(&sq_dist(&p, &centres[b])))
                .unwrap();
            truth.push(t);
            points.push(p);
        }
        let r = kmeans(&points, 3, 5).unwrap();
        // Match clusters to centres by majority vote.
        let mut agree = 0;
        for k in 0..3 {
            let mut votes = [0usize; 3];
            for (l, t) in r.labels.iter().zip(&truth) {
                if *l == k {
                    votes[*t] += 1;
                }
            }
            agree += votes.iter().max().unwrap();
        }
        assert!(agree as f64 >= 0.99 * 300.0, "agreement {agree}/300");
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let r = kmeans(&points, 6, 9).unwrap();
        for w in r.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", w);
        }
    }

    #[test]
    fn pca_recovers_orthogonal_axes() {
        let mut points = Vec::new();
        let mut axis = Vec::new();
        for t in [1.0, 2.0, 3.0] {
            for s in [-1.0, 1.0] {
                points.push(vec![s * t, 0.0]);
                axis.push(0);
                points.push(vec![0.0, s * t * 0.5]);
                axis.push(1);
            }
        }
        let fit = pca(&points, 2).unwrap();
        let labels = pca_assign(&points, &fit);
        for (l, a) in labels.iter().zip(&axis) {
            assert_eq!(l, a);
        }
    }

    #[test]
    fn pca_subspace_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|i| (0..8).map(|j| rng.random::<f64>() * (1.0 + j as f64) + (i % 3) as f64).collect())
            .collect();
        let l = 3;
        let fit = pca(&points, l).unwrap();
        let mean: Vec<f64> = (0..8).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / 50.0).collect();
        let x = DMatrix::from_fn(50, 8, |i, j| points[i][j] - mean[j]);
        let svd = x.svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let oracle = DMatrix::from_fn(8, l, |r, c| vt[(idx[c], r)]);
        let ours = DMatrix::from_fn(8, l, |r, c| fit.components[c][r]);
        // Cosines of principal angles are the singular values of QᵀQ'.
        let s = (oracle.transpose() * ours).singular_values();
        for v in s.iter() {
            let angle = v.min(1.0).acos();
            assert!(angle < 1e-6, "principal angle {angle}");
        }
    }

    fn grid(rows: &[[f32; 2]]) -> PatchFeatureGrid {
        PatchFeatureGrid::new(
            rows.iter().flatten().copied().collect(),
            2,
            1,
            rows.len(),
            1,
            crate::embedding::Facet::Tokens,
        )
        .unwrap()
    }

    #[test]
    fn background_stays_unlabelled_and_l1_shares_one_label() {
        let g = grid(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.3, 0.2]]);
        let m = ProminenceMask::new(vec![true, true, false, true], g.geometry()).unwrap();
        for method in [ConceptMethod::Kmeans, ConceptMethod::Pca] {
            let fit = fit_concepts(&[(&g, &m)], &ConceptOptions { method, l: 1, seed: 0, normalize: true }).unwrap();
            let s = &fit.segmentations[0];
            assert_eq!(s.labels[2], None);
            assert_eq!(s.labels[0], Some(0));
            assert_eq!(s.labels[1], Some(0));
            assert_eq!(s.labels[3], Some(0));
        }
    }

    #[test]
    fn too_few_patches_reduce_l_with_flag() {
        let g = grid(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let m = ProminenceMask::new(vec![true, true, false], g.geometry()).unwrap();
        let fit = kmeans_concepts(&[(&g, &m)], 5, 1).unwrap();
        assert_eq!(fit.l_used, 2);
        assert_eq!(fit.flags, vec![Flag::ConceptCountReduced { requested: 5, used: 2 }]);
    }
}
