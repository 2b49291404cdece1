//! Gaussian radial basis functions over the weight-covariate space.
//!
//! Centers come from k-means on the observed weight covariates, from an
//! equally spaced grid over their bounding box, or (product placement) from
//! the Cartesian product of per-block k-means centers, e.g. spatial x temporal.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CdstError, Result};
use crate::linalg::{row_vec, select_columns, squared_distance};

pub const DEFAULT_BANDWIDTH: f64 = 1.0;

fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}

fn default_kmeans_max_iter() -> usize {
    100
}

/// A group of weight-covariate columns sharing one bandwidth, with its own
/// k-means center count in product placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub columns: Vec<usize>,
    pub centers: usize,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    KMeans {
        centers: usize,
    },
    /// Per-dimension grid counts; `M` is their product.
    Grid {
        counts: Vec<usize>,
    },
    Product {
        blocks: Vec<BlockSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub placement: Placement,
    /// Used by k-means and grid placement; product blocks carry their own.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub kmeans_seed: u64,
    #[serde(default = "default_kmeans_max_iter")]
    pub kmeans_max_iter: usize,
}

impl BasisSpec {
    pub fn kmeans(centers: usize, bandwidth: f64, seed: u64) -> Self {
        BasisSpec {
            placement: Placement::KMeans { centers },
            bandwidth,
            kmeans_seed: seed,
            kmeans_max_iter: default_kmeans_max_iter(),
        }
    }

    /// Number of basis functions this spec produces.
    pub fn size(&self) -> usize {
        match &self.placement {
            Placement::KMeans { centers } => *centers,
            Placement::Grid { counts } => counts.iter().product(),
            Placement::Product { blocks } => blocks.iter().map(|b| b.centers).product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBlock {
    pub columns: Vec<usize>,
    pub bandwidth: f64,
}

/// `M` fixed centers in weight-covariate space plus the kernel blocks:
/// `phi_m(x) = amplitude * exp(-sum_b ||x_b - c_mb||^2 / (2 h_b^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisEvaluator {
    dim: usize,
    centers: Vec<Vec<f64>>,
    blocks: Vec<KernelBlock>,
    #[serde(default = "one")]
    amplitude: f64,
}

fn one() -> f64 {
    1.0
}

impl BasisEvaluator {
    pub fn new(dim: usize, centers: Vec<Vec<f64>>, blocks: Vec<KernelBlock>) -> Result<Self> {
        let mut covered = vec![false; dim];
        for b in &blocks {
            if !(b.bandwidth > 0.0 && b.bandwidth.is_finite()) {
                return Err(invalid("bandwidths must be positive"));
            }
            for &c in &b.columns {
                if c >= dim || covered[c] {
                    return Err(invalid("kernel blocks must partition the weight columns"));
                }
                covered[c] = true;
            }
        }
        if !centers.is_empty() && covered.iter().any(|c| !c) {
            return Err(invalid("kernel blocks must partition the weight columns"));
        }
        for c in &centers {
            if c.len() != dim {
                return Err(CdstError::DimensionMismatch {
                    context: "basis center",
                    expected: dim,
                    found: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(CdstError::NonFinite("basis center".into()));
            }
        }
        Ok(BasisEvaluator {
            dim,
            centers,
            blocks,
            amplitude: 1.0,
        })
    }

    /// Single-block evaluator with one bandwidth for all columns.
    pub fn isotropic(centers: Vec<Vec<f64>>, dim: usize, bandwidth: f64) -> Result<Self> {
        Self::new(
            dim,
            centers,
            vec![KernelBlock {
                columns: (0..dim).collect(),
                bandwidth,
            }],
        )
    }

    /// No basis functions: weights reduce to constants.
    pub fn empty(dim: usize) -> Self {
        BasisEvaluator {
            dim,
            centers: Vec::new(),
            blocks: Vec::new(),
            amplitude: 1.0,
        }
    }

    /// Scale every basis function by `c`.
    pub fn with_amplitude(mut self, c: f64) -> Self {
        self.amplitude = c;
        self
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn blocks(&self) -> &[KernelBlock] {
        &self.blocks
    }

    pub fn eval_point(&self, x: &[f64]) -> Vec<f64> {
        self.centers
            .iter()
            .map(|c| {
                let expo: f64 = self
                    .blocks
                    .iter()
                    .map(|b| {
                        let d2: f64 = b.columns.iter().map(|&k| (x[k] - c[k]).powi(2)).sum();
                        d2 / (2.0 * b.bandwidth * b.bandwidth)
                    })
                    .sum();
                self.amplitude * (-expo).exp()
            })
            .collect()
    }

    /// `m x M` matrix with entry `(i, m) = phi_m(xtilde_i)`.
    pub fn eval(&self, xtilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xtilde.ncols() != self.dim {
            return Err(CdstError::DimensionMismatch {
                context: "eval_basis columns",
                expected: self.dim,
                found: xtilde.ncols(),
            });
        }
        let mut e = DMatrix::zeros(xtilde.nrows(), self.len());
        for i in 0..xtilde.nrows() {
            let row = self.eval_point(&row_vec(xtilde, i));
            for (m, v) in row.into_iter().enumerate() {
                e[(i, m)] = v;
            }
        }
        Ok(e)
    }
}

pub fn eval_basis(ev: &BasisEvaluator, xtilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ev.eval(xtilde)
}

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k` centers, one per row.
    pub centers: DMatrix<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each completed iteration.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn count_distinct_rows(points: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<f64>> = (0..points.nrows()).map(|i| row_vec(points, i)).collect();
    let cmp = |a: &Vec<f64>, b: &Vec<f64>| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    rows.sort_by(cmp);
    rows.dedup_by(|a, b| cmp(a, b).is_eq());
    rows.len()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm. Initial centers are `k` distinct points chosen by a
/// seeded shuffle; a cluster that empties is re-seeded at the point farthest
/// from its current center.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(invalid("k-means needs k >= 1"));
    }
    if max_iter == 0 {
        return Err(invalid("k-means needs max_iter >= 1"));
    }
    let distinct = count_distinct_rows(points);
    if k > distinct {
        return Err(invalid(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row_vec(points, i)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centers.len() == k {
            break;
        }
        if !centers.iter().any(|c| c == &rows[i]) {
            centers.push(rows[i].clone());
        }
    }

    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut wcss_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let next: Vec<(usize, f64)> = rows.iter().map(|r| nearest(r, &centers)).collect();
        let changed = next.iter().zip(&assignment).any(|((a, _), b)| a != b);
        if !changed {
            converged = true;
            break;
        }
        iterations += 1;
        for (slot, (a, _)) in assignment.iter_mut().zip(&next) {
            *slot = *a;
        }

        let dim = points.ncols();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut empties = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                empties.push(c);
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let wcss: f64 = rows
            .iter()
            .zip(&assignment)
            .map(|(r, &a)| squared_distance(r, &centers[a]))
            .sum();
        wcss_history.push(wcss);
        if !empties.is_empty() {
            let mut far: Vec<(usize, f64)> = rows
                .iter()
                .zip(&assignment)
                .enumerate()
                .map(|(i, (r, &a))| (i, squared_distance(r, &centers[a])))
                .collect();
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut candidates = far.into_iter().map(|(i, _)| i);
            for c in empties {
                for i in candidates.by_ref() {
                    if !centers.iter().any(|cc| cc == &rows[i]) {
                        centers[c] = rows[i].clone();
                        break;
                    }
                }
            }
        }
    }

    let dim = points.ncols();
    Ok(KMeansResult {
        centers: DMatrix::from_fn(k, dim, |i, j| centers[i][j]),
        assignment,
        wcss_history,
        iterations,
        converged,
    })
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row_vec(m, i)).collect()
}

pub fn build_basis(spec: &BasisSpec, points: &DMatrix<f64>) -> Result<BasisEvaluator> {
    if points.nrows() == 0 {
        return Err(CdstError::EmptyData);
    }
    let dim = points.ncols();
    match &spec.placement {
        Placement::KMeans { centers } => {
            let km = kmeans(points, *centers, spec.kmeans_seed, spec.kmeans_max_iter)?;
            BasisEvaluator::isotropic(matrix_rows(&km.centers), dim, spec.bandwidth)
        }
        Placement::Grid { counts } => {
            if counts.len() != dim || counts.contains(&0) {
                return Err(invalid(format!(
                    "grid needs {dim} positive per-dimension counts"
                )));
            }
            let axes: Vec<Vec<f64>> = (0..dim)
                .map(|j| {
                    let col = points.column(j);
                    let (lo, hi) = (col.min(), col.max());
                    let c = counts[j];
                    if c == 1 {
                        vec![(lo + hi) / 2.0]
                    } else {
                        (0..c)
                            .map(|t| lo + (hi - lo) * t as f64 / (c - 1) as f64)
                            .collect()
                    }
                })
                .collect();
            BasisEvaluator::isotropic(cartesian(&axes), dim, spec.bandwidth)
        }
        Placement::Product { blocks } => {
            if blocks.is_empty() {
                return Err(invalid("product placement needs at least one block"));
            }
            let mut per_block: Vec<Vec<Vec<f64>>> = Vec::with_capacity(blocks.len());
            for (b, block) in blocks.iter().enumerate() {
                if block.columns.iter().any(|&c| c >= dim) {
                    return Err(invalid("block column out of range"));
                }
                let sub = select_columns(points, &block.columns);
                let seed = spec.kmeans_seed.wrapping_add(b as u64);
                let km = kmeans(&sub, block.centers, seed, spec.kmeans_max_iter)?;
                per_block.push(matrix_rows(&km.centers));
            }
            // Cartesian product over blocks, first block varying slowest.
            let mut centers: Vec<Vec<f64>> = vec![vec![0.0; dim]];
            for (block, block_centers) in blocks.iter().zip(&per_block) {
                let mut next = Vec::with_capacity(centers.len() * block_centers.len());
                for partial in &centers {
                    for bc in block_centers {
                        let mut c = partial.clone();
                        for (&col, v) in block.columns.iter().zip(bc) {
                            c[col] = *v;
                        }
                        next.push(c);
                    }
                }
                centers = next;
            }
            let kernel_blocks = blocks
                .iter()
                .map(|b| KernelBlock {
                    columns: b.columns.clone(),
                    bandwidth: b.bandwidth,
                })
                .collect();
            BasisEvaluator::new(dim, centers, kernel_blocks)
        }
    }
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_single_cluster() {
        let p = DMatrix::from_row_slice(1, 2, &[0.3, -1.2]);
        let km = kmeans(&p, 1, 0, 10).unwrap();
        assert_eq!(row_vec(&km.centers, 0), vec![0.3, -1.2]);
    }

    fn wcss_of(rows: &[Vec<f64>], labels: &[usize], k: usize) -> (f64, Vec<Vec<f64>>) {
        let dim = rows[0].len();
        let mut centers = vec![vec![0.0; dim]; k];
        let mut counts = vec![0; k];
        for (r, &l) in rows.iter().zip(labels) {
            counts[l] += 1;
            for d in 0..dim {
                centers[l][d] += r[d];
            }
        }
        for c in 0..k {
            for d in 0..dim {
                centers[c][d] /= counts[c] as f64;
            }
        }
        let w = rows
            .iter()
            .zip(labels)
            .map(|(r, &l)| squared_distance(r, &centers[l]))
            .sum();
        (w, centers)
    }

    #[test]
    fn two_tight_groups_match_exhaustive_partition() {
        let pts = [
            [0.0, 0.0],
            [0.1, 0.05],
            [-0.05, 0.1],
            [10.0, 0.0],
            [10.1, -0.1],
            [9.95, 0.05],
        ];
        let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
        // Brute force over every non-trivial 2-partition.
        let n = rows.len();
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let (w, c) = wcss_of(&rows, &labels, 2);
            if w < best.0 {
                best = (w, c);
            }
        }
        let m = DMatrix::from_fn(n, 2, |i, j| rows[i][j]);
        for seed in 0..5 {
            let km = kmeans(&m, 2, seed, 100).unwrap();
            let mut got: Vec<Vec<f64>> = matrix_rows(&km.centers);
            let mut want = best.1.clone();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            want.sort_by(|a, b| a[0].total_cmp(&b[0]));
            for (g, w) in got.iter().zip(&want) {
                assert!(squared_distance(g, w).sqrt() < 1e-9);
            }
        }
    }

    #[test]
    fn k_exceeding_distinct_points_errors() {
        let p = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 2.0]);
        assert!(kmeans(&p, 3, 0, 10).is_err());
        assert!(kmeans(&p, 2, 0, 10).is_ok());
        assert!(kmeans(&p, 0, 0, 10).is_err());
    }

    #[test]
    fn grid_placement_is_equally_spaced() {
        let p = DMatrix::from_row_slice(4, 1, &[0.0, 0.2, 0.9, 1.0]);
        let spec = BasisSpec {
            placement: Placement::Grid { counts: vec![3] },
            bandwidth: 1.0,
            kmeans_seed: 0,
            kmeans_max_iter: 10,
        };
        let ev = build_basis(&spec, &p).unwrap();
        assert_eq!(ev.centers(), &[vec![0.0], vec![0.5], vec![1.0]]);
    }

    #[test]
    fn grid_counts_must_match_dimension() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let spec = BasisSpec {
            placement: Placement::Grid { counts: vec![3] },
            bandwidth: 1.0,
            kmeans_seed: 0,
            kmeans_max_iter: 10,
        };
        assert!(build_basis(&spec, &p).is_err());
    }

    #[test]
    fn product_placement_counts_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let p = DMatrix::from_fn(200, 3, |_, j| {
            if j < 2 {
                rng.random::<f64>()
            } else {
                rng.random_range(1..=17) as f64
            }
        });
        let spec = BasisSpec {
            placement: Placement::Product {
                blocks: vec![
                    BlockSpec {
                        columns: vec![0, 1],
                        centers: 20,
                        bandwidth: 0.2,
                    },
                    BlockSpec {
                        columns: vec![2],
                        centers: 5,
                        bandwidth: 2.0,
                    },
                ],
            },
            bandwidth: 1.0,
            kmeans_seed: 3,
            kmeans_max_iter: 100,
        };
        assert_eq!(spec.size(), 100);
        let ev = build_basis(&spec, &p).unwrap();
        assert_eq!(ev.len(), 100);

        // spatial offset of norm 0.2 and temporal offset 2 give exp(-1)
        let c = ev.centers()[0].clone();
        let q = vec![c[0] + 0.12, c[1] + 0.16, c[2] + 2.0];
        let v = ev.eval_point(&q)[0];
        assert!((v - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn unit_bandwidth_kernel_value() {
        let ev = BasisEvaluator::isotropic(vec![vec![0.0, 0.0]], 2, 1.0).unwrap();
        let v = ev.eval_point(&[1.0, 1.0])[0];
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-12);
        assert_eq!(ev.eval_point(&[0.0, 0.0])[0], 1.0);
    }

    #[test]
    fn kmeans_centers_lie_in_convex_hull() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DMatrix::from_fn(150, 2, |_, _| rng.random_range(-1.0..1.0));
        let ev = build_basis(&BasisSpec::kmeans(10, 1.0, 4), &p).unwrap();
        assert_eq!(ev.len(), 10);
        let hull = convex_hull(&matrix_rows(&p));
        for c in ev.centers() {
            assert!(inside_hull(&hull, c), "center {c:?} outside hull");
        }
    }

    // Monotone-chain hull, counter-clockwise.
    fn convex_hull(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
        let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
            (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
        };
        let mut lower: Vec<[f64; 2]> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2
                && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0
            {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<[f64; 2]> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2
                && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0
            {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        lower
    }

    fn inside_hull(hull: &[[f64; 2]], p: &[f64]) -> bool {
        (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-12
        })
    }

    #[test]
    fn eval_rejects_wrong_width() {
        let ev = BasisEvaluator::isotropic(vec![vec![0.0, 0.0]], 2, 1.0).unwrap();
        assert!(ev.eval(&DMatrix::zeros(3, 3)).is_err());
    }

    proptest! {
        #[test]
        fn kmeans_wcss_is_monotone_and_deterministic(
            coords in proptest::collection::vec(-5.0f64..5.0, 20..80),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let n = coords.len() / 2;
            let p = DMatrix::from_fn(n, 2, |i, j| coords[2 * i + j]);
            let k = k.min(count_distinct_rows(&p));
            let a = kmeans(&p, k, seed, 50).unwrap();
            for w in a.wcss_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            let b = kmeans(&p, k, seed, 50).unwrap();
            prop_assert_eq!(a.centers, b.centers);
        }

        #[test]
        fn basis_values_in_unit_interval_and_row_equivariant(
            coords in proptest::collection::vec(-2.0f64..2.0, 12..40),
            h in 0.3f64..3.0,
        ) {
            let n = coords.len() / 2;
            let p = DMatrix::from_fn(n, 2, |i, j| coords[2 * i + j]);
            let centers = vec![vec![0.0, 0.0], vec![1.0, -1.0]];
            let ev = BasisEvaluator::isotropic(centers, 2, h).unwrap();
            let e = ev.eval(&p).unwrap();
            for v in e.iter() {
                prop_assert!(*v > 0.0 && *v <= 1.0);
            }
            let perm: Vec<usize> = (0..n).rev().collect();
            let ep = ev.eval(&crate::linalg::select_rows(&p, &perm)).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                for m in 0..2 {
                    prop_assert_eq!(ep[(i, m)], e[(pi, m)]);
                }
            }
        }
    }
}
