//! Prominent-patch localization from the patch affinity graph.
//!
//! The affinity matrix is the Gram matrix of the patch features. Its
//! eigenvector for the second-largest eigenvalue is split by sign; the
//! positive side is taken as the prominent set once the vector is oriented
//! (smaller side positive, ties broken by mean feature norm).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::PixelBox;
use crate::embedding::{GridGeometry, PatchFeatureGrid};
use crate::error::{Error, Result};
use crate::flags::Flag;

/// Above this many nodes the iterative solver is used.
pub const DENSE_SOLVER_LIMIT: usize = 1024;
/// Eigenvector residual tolerance, relative to the spectral scale.
pub const EIGEN_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-9;
/// Entries with |v_i| below this fraction of max |v| count as zero.
const SIGN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: DMatrix<f64>,
    geometry: GridGeometry,
}

impl AffinityMatrix {
    /// Wraps an explicit matrix. It must be square, finite and symmetric.
    pub fn new(values: DMatrix<f64>, geometry: GridGeometry) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::InvalidInput("affinity matrix must be square".into()));
        }
        if geometry.num_patches() != n {
            return Err(Error::DimensionMismatch {
                what: "affinity size vs grid",
                expected: geometry.num_patches(),
                found: n,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("affinity matrix has non-finite entries".into()));
        }
        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidInput(format!(
                        "affinity matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { values, geometry })
    }

    /// Convenience for matrices that do not come from an image: a 1×N strip.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        Self::new(
            values,
            GridGeometry {
                grid_h: 1,
                grid_w: n,
                patch_size: 1,
            },
        )
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// `A = f fᵀ` over the patch features, accumulated in f64.
pub fn affinity(features: &PatchFeatureGrid) -> Result<AffinityMatrix> {
    let n = features.num_patches();
    if n < 2 {
        return Err(Error::InvalidInput("affinity needs at least two patches".into()));
    }
    let c = features.channels();
    let f = DMatrix::from_row_iterator(n, c, features.as_slice().iter().map(|v| *v as f64));
    let mut a = &f * f.transpose();
    // Force exact symmetry; the product is symmetric up to rounding only.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    AffinityMatrix::new(a, features.geometry())
}

/// Boolean mask over the patch grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProminenceMask {
    pub flags: Vec<bool>,
    pub geometry: GridGeometry,
}

impl ProminenceMask {
    pub fn new(flags: Vec<bool>, geometry: GridGeometry) -> Result<Self> {
        if flags.len() != geometry.num_patches() {
            return Err(Error::DimensionMismatch {
                what: "mask length vs grid",
                expected: geometry.num_patches(),
                found: flags.len(),
            });
        }
        Ok(Self { flags, geometry })
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i)
    }

    /// Tight pixel box around the true patches.
    pub fn pixel_box(&self) -> Result<PixelBox> {
        let w = self.geometry.grid_w;
        let p = self.geometry.patch_size as f64;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for i in self.indices() {
            let (r, c) = (i / w, i % w);
            bounds = Some(match bounds {
                None => (c, r, c, r),
                Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c), r1.max(r)),
            });
        }
        let (c0, r0, c1, r1) = bounds.ok_or(Error::EmptyMask)?;
        Ok(PixelBox {
            x0: c0 as f64 * p,
            y0: r0 as f64 * p,
            x1: (c1 + 1) as f64 * p,
            y1: (r1 + 1) as f64 * p,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiedlerPartition {
    pub mask: ProminenceMask,
    /// Oriented eigenvector (positive entries = prominent).
    pub vector: Vec<f64>,
    /// The largest eigenvalues found, descending (at least two).
    pub eigenvalues: Vec<f64>,
    pub flags: Vec<Flag>,
}

/// Top eigenpairs of a symmetric matrix, eigenvalues descending.
struct TopEigen {
    values: Vec<f64>,
    vectors: Vec<DVector<f64>>,
}

fn dense_top(a: &DMatrix<f64>, k: usize) -> TopEigen {
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let k = k.min(order.len());
    TopEigen {
        values: order[..k].iter().map(|&i| eig.eigenvalues[i]).collect(),
        vectors: order[..k]
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect(),
    }
}

fn orthonormalize(x: &mut DMatrix<f64>) {
    let qr = x.clone().qr();
    *x = qr.q();
}

/// Subspace iteration with Rayleigh–Ritz on a shifted (PSD) matrix.
fn iterative_top(a: &DMatrix<f64>, k: usize, max_iters: usize) -> Result<TopEigen> {
    let n = a.nrows();
    let block = (k + 6).min(n);
    // Gershgorin bound makes A + shift·I positive semidefinite, so the
    // dominant subspace is the algebraically largest one.
    let shift = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let scale = shift.max(1.0);
    let mut x = DMatrix::from_fn(n, block, |i, j| {
        // Deterministic, non-degenerate start.
        let t = (i * 7919 + j * 104_729 + 1) as f64;
        (t.sin() * 43758.5453).fract() - 0.5
    });
    orthonormalize(&mut x);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let ax = a * &x;
        let shifted = &ax + &x * shift;
        let mut y = shifted;
        orthonormalize(&mut y);
        let ay = a * &y;
        let t = y.transpose() * &ay;
        let small = dense_top(&(0.5 * (&t + t.transpose())), block);
        let rot = DMatrix::from_columns(&small.vectors);
        x = &y * &rot;
        let ax = a * &x;
        residual = (0..k)
            .map(|j| (ax.column(j) - x.column(j) * small.values[j]).norm())
            .fold(0.0f64, f64::max);
        if residual <= EIGEN_TOL * scale {
            return Ok(TopEigen {
                values: small.values[..k].to_vec(),
                vectors: (0..k).map(|j| x.column(j).into_owned()).collect(),
            });
        }
    }
    Err(Error::EigenNonConvergence {
        iterations: max_iters,
        residual,
    })
}

fn top_eigenpairs(a: &DMatrix<f64>, k: usize) -> Result<TopEigen> {
    let n = a.nrows();
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs())) * n as f64;
    let top = if n <= DENSE_SOLVER_LIMIT {
        dense_top(a, k)
    } else {
        iterative_top(a, k, 5000)?
    };
    for (lambda, v) in top.values.iter().zip(&top.vectors) {
        let residual = (a * v - v * *lambda).norm();
        if residual > EIGEN_TOL * scale {
            return Err(Error::EigenNonConvergence {
                iterations: 0,
                residual,
            });
        }
    }
    Ok(top)
}

/// Splits the graph by the sign of the eigenvector of the second-largest
/// eigenvalue of `a`.
pub fn fiedler_partition(a: &AffinityMatrix) -> Result<FiedlerPartition> {
    let n = a.size();
    if n < 2 {
        return Err(Error::InvalidInput("partition needs at least two nodes".into()));
    }
    let top = top_eigenpairs(a.values(), 3.min(n))?;
    let mut flags = Vec::new();
    let spread = top.values[0].abs().max(1.0);
    let tol = 1e-9 * spread;
    let degenerate = (top.values[0] - top.values[1]).abs() <= tol
        || (top.values.len() > 2 && (top.values[1] - top.values[2]).abs() <= tol);
    if degenerate {
        flags.push(Flag::DegenerateSpectrum);
    }

    let v = &top.vectors[1];
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let eps = SIGN_EPS * vmax;
    let positive: Vec<bool> = v.iter().map(|x| *x > eps).collect();
    let negative: Vec<bool> = v.iter().map(|x| *x < -eps).collect();
    let np = positive.iter().filter(|b| **b).count();
    let nn = negative.iter().filter(|b| **b).count();

    let norms: Vec<f64> = (0..n).map(|i| a.values()[(i, i)].max(0.0).sqrt()).collect();
    let mean_norm = |side: &[bool]| {
        let (s, c) = side
            .iter()
            .zip(&norms)
            .filter(|(b, _)| **b)
            .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    let valid = |k: usize| k >= 1 && k < n;
    let flip = match (valid(np), valid(nn)) {
        (true, false) => false,
        (false, true) => true,
        (false, false) => {
            return Err(Error::InvalidInput(
                "eigenvector has no usable sign split".into(),
            ))
        }
        (true, true) => {
            if np != nn {
                nn < np
            } else {
                mean_norm(&negative) > mean_norm(&positive)
            }
        }
    };
    let (flags_mask, vector) = if flip {
        (negative, v.iter().map(|x| -x).collect())
    } else {
        (positive, v.iter().copied().collect())
    };
    Ok(FiedlerPartition {
        mask: ProminenceMask::new(flags_mask, a.geometry())?,
        vector,
        eigenvalues: top.values,
        flags,
    })
}

/// 4-connected components of the true patches, each as sorted patch indices,
/// in order of their lowest index.
pub fn connected_components(mask: &ProminenceMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.geometry.grid_h, mask.geometry.grid_w);
    let mut seen = vec![false; mask.flags.len()];
    let mut out = Vec::new();
    for start in 0..mask.flags.len() {
        if !mask.flags[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.flags[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Keeps the largest 4-connected region; ties go to the region whose first
/// (top-left) patch comes earliest.
pub fn largest_connected_component(mask: &ProminenceMask) -> Result<ProminenceMask> {
    let comps = connected_components(mask);
    let mut best: Option<&Vec<usize>> = None;
    for comp in &comps {
        if best.map_or(true, |b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    let best = best.ok_or(Error::EmptyMask)?;
    let mut flags = vec![false; mask.flags.len()];
    for &i in best {
        flags[i] = true;
    }
    ProminenceMask::new(flags, mask.geometry)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorLoc {
    pub iou: f64,
    pub hit: bool,
}

/// IoU of the mask's tight pixel box against a ground-truth box; a hit is
/// IoU > 0.5.
pub fn corloc(mask: &ProminenceMask, gt_box: &PixelBox) -> Result<CorLoc> {
    let pred = mask.pixel_box()?;
    let iou = pred.iou(gt_box);
    Ok(CorLoc { iou, hit: iou > 0.5 })
}

/// JSON form of a mask export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskExport {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub flags: Vec<bool>,
}

impl From<&ProminenceMask> for MaskExport {
    fn from(m: &ProminenceMask) -> Self {
        Self {
            grid_h: m.geometry.grid_h,
            grid_w: m.geometry.grid_w,
            patch_size: m.geometry.patch_size,
            flags: m.flags.clone(),
        }
    }
}

/// Binary-alpha PNG raster of the mask at pixel resolution.
pub fn mask_to_rgba(mask: &ProminenceMask) -> image::RgbaImage {
    let g = mask.geometry;
    image::RgbaImage::from_fn(g.pixel_width() as u32, g.pixel_height() as u32, |x, y| {
        let i = (y as usize / g.patch_size) * g.grid_w + x as usize / g.patch_size;
        if mask.flags[i] {
            image::Rgba([255, 255, 255, 255])
        } else {
            image::Rgba([0, 0, 0, 0])
        }
    })
}
