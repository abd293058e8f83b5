//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerical code.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::PathBuf;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic10")
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns eigenvalues in descending order with unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with uniform marginals over all rows and columns,
/// run for a fixed number of iterations.
pub fn log_sinkhorn(scores: &[Vec<f64>], tau: f64, iterations: usize) -> Vec<Vec<f64>> {
    let (l, d) = (scores.len(), scores[0].len());
    let log_r = -(l as f64).ln();
    let log_c = -(d as f64).ln();
    let mut f = vec![0.0; l];
    let mut g = vec![0.0; d];
    for _ in 0..iterations {
        let (f_prev, g_prev) = (f.clone(), g.clone());
        for i in 0..l {
            f[i] = log_r - logsumexp((0..d).map(|j| tau * scores[i][j] + g[j]));
        }
        for j in 0..d {
            g[j] = log_c - logsumexp((0..l).map(|i| tau * scores[i][j] + f[i]));
        }
        // At a bitwise fixed point further iterations change nothing.
        if f == f_prev && g == g_prev {
            break;
        }
    }
    (0..l)
        .map(|i| (0..d).map(|j| (tau * scores[i][j] + f[i] + g[j]).exp()).collect())
        .collect()
}

/// 4-connected components by breadth-first search, as sorted index lists.
pub fn bfs_components(flags: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; flags.len()];
    let mut out = Vec::new();
    for start in 0..flags.len() {
        if !flags[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if flags[j] && !seen[j] {
                    seen[j] = true;
                    q.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Median by full sort, then strict threshold, descending sort with ties to
/// the lower index, then truncation.
pub fn sort_filter(row: &[f64], k: usize, margin: f64) -> Vec<usize> {
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.into_iter().filter(|&i| row[i] > median + margin).take(k).collect()
}

/// Base-2 entropy of the empirical distribution of `items`.
pub fn entropy_bits<T: Ord>(items: &[T]) -> f64 {
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort();
    let n = items.len() as f64;
    let mut h = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let p = (j - i) as f64 / n;
        h -= p * p.log2();
        i = j;
    }
    h
}
