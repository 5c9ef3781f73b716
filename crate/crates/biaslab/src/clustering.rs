//! k-means, spectral clustering, and cluster-count selection.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::rng::{self, tags};
use crate::tensor::{sqdist, Tensor};

const MAX_LLOYD_ITERS: usize = 300;
/// Restarts used when k-means runs inside spectral clustering or select_k.
const INNER_RESTARTS: usize = 4;

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    /// Cluster index per point, in `[0, k)`.
    pub labels: Vec<usize>,
    /// Final centroids (k-means only).
    pub centroids: Option<Tensor>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Set when some cluster index never appears in `labels`.
    pub degenerate: bool,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Lloyd's algorithm with k-means++ seeding, best inertia over `restarts`
/// independently seeded runs (ties keep the earliest restart).
pub fn kmeans(points: &Tensor, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "kmeans: k = {k} out of range for {n} points"
        )));
    }
    let restarts = restarts.max(1);
    let runs: Vec<ClusterAssignment> = exec::map_indices(restarts, |r| {
        lloyd(points, k, rng::subseed(seed, tags::KMEANS_RESTART, r as u64))
    });
    Ok(runs
        .into_iter()
        .min_by(|a, b| a.inertia.partial_cmp(&b.inertia).unwrap())
        .expect("at least one restart"))
}

fn lloyd(points: &Tensor, k: usize, seed: u64) -> ClusterAssignment {
    let n = points.rows();
    let d = points.cols();
    let mut rng = rng::rng_from_seed(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.random_range(0..n)).to_vec());
    let mut nearest_sq = vec![0.0f64; n];
    while centroids.len() < k {
        let mut total = 0.0;
        for i in 0..n {
            let best = centroids
                .iter()
                .map(|c| sqdist(points.row(i), c))
                .fold(f64::INFINITY, f64::min);
            nearest_sq[i] = best;
            total += best;
        }
        let idx = if total <= 0.0 {
            // all points coincide with existing centroids
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest_sq.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points.row(idx).to_vec());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let dd = sqdist(points.row(i), centroid);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its
                // current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sqdist(points.row(a), &centroids[labels[a]])
                            .partial_cmp(&sqdist(points.row(b), &centroids[labels[b]]))
                            .unwrap()
                    })
                    .expect("nonempty points");
                centroids[c] = points.row(far).to_vec();
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|i| sqdist(points.row(i), &centroids[labels[i]]))
        .sum();
    let mut seen = vec![false; k];
    for &l in &labels {
        seen[l] = true;
    }
    ClusterAssignment {
        labels,
        centroids: Some(
            Tensor::new(vec![k, d], centroids.into_iter().flatten().collect())
                .expect("centroid shape"),
        ),
        inertia,
        degenerate: seen.iter().any(|s| !s),
    }
}

/// Binary k-NN affinity (symmetrized by union) for the spectral pipeline.
fn knn_affinity(points: &Tensor, knn_k: usize) -> Vec<Vec<usize>> {
    let n = points.rows();
    let lists: Vec<Vec<usize>> = exec::map_indices(n, |i| {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sqdist(points.row(i), points.row(j)), j))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        dists.truncate(knn_k);
        dists.into_iter().map(|(_, j)| j).collect()
    });
    let mut adj = vec![Vec::new(); n];
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            if !adj[i].contains(&j) {
                adj[i].push(j);
            }
            if !adj[j].contains(&i) {
                adj[j].push(i);
            }
        }
    }
    adj
}

/// Ascending eigenvalues (and vectors) of the normalized Laplacian
/// L = I − D^{−1/2} A D^{−1/2} of the binary k-NN graph.
fn laplacian_spectrum(points: &Tensor, knn_k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = points.rows();
    let adj = knn_affinity(points, knn_k);
    let deg: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        l[i * n + i] = 1.0;
        for &j in &adj[i] {
            l[i * n + j] = -inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let (mut values, mut vectors) = linalg::eigh(&l, n);
    values.reverse();
    vectors.reverse();
    (values, vectors)
}

/// Normalized spectral clustering: bottom-k eigenvectors of the normalized
/// Laplacian, row-normalized, then k-means on the rows.
pub fn spectral_cluster(
    points: &Tensor,
    k: usize,
    knn_k: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "spectral_cluster: k = {k} out of range for {n} points"
        )));
    }
    if knn_k == 0 || knn_k >= n {
        return Err(Error::invalid(format!(
            "spectral_cluster: knn_k = {knn_k} out of range for {n} points"
        )));
    }
    let (_, vectors) = laplacian_spectrum(points, knn_k);
    let mut rows = vec![0.0; n * k];
    for i in 0..n {
        for (c, vec_c) in vectors.iter().take(k).enumerate() {
            rows[i * k + c] = vec_c[i];
        }
        let norm: f64 = rows[i * k..(i + 1) * k]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for v in &mut rows[i * k..(i + 1) * k] {
                *v /= norm;
            }
        }
    }
    let embedded = Tensor::new(vec![n, k], rows)?;
    let mut assignment = kmeans(&embedded, k, seed, INNER_RESTARTS)?;
    // centroids live in eigenvector space, not input space
    assignment.centroids = None;
    Ok(assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectKMethod {
    Elbow,
    Eigengap,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectKResult {
    pub k: usize,
    /// Set when the criterion had no usable signal and the smallest k in
    /// range was returned.
    pub degenerate: bool,
}

/// Pick a cluster count in `[k_min, k_max]`.
///
/// Elbow maximizes the second difference of the k-means inertia curve;
/// eigengap maximizes λ_{k+1} − λ_k of the normalized-Laplacian spectrum
/// (built on the same binary k-NN affinity as `spectral_cluster`, hence the
/// `knn_k` parameter). Ties break toward the smallest k.
pub fn select_k(
    points: &Tensor,
    k_min: usize,
    k_max: usize,
    method: SelectKMethod,
    knn_k: usize,
    seed: u64,
) -> Result<SelectKResult> {
    let n = points.rows();
    if k_min == 0 || k_min > k_max || k_max > n {
        return Err(Error::invalid(format!(
            "select_k: range [{k_min}, {k_max}] invalid for {n} points"
        )));
    }
    match method {
        SelectKMethod::Elbow => {
            if k_max - k_min < 2 {
                return Ok(SelectKResult {
                    k: k_min,
                    degenerate: true,
                });
            }
            let inertia: Vec<f64> = (k_min..=k_max)
                .map(|k| Ok(kmeans(points, k, seed, INNER_RESTARTS)?.inertia))
                .collect::<Result<_>>()?;
            let mut best_k = k_min;
            let mut best_d2 = 0.0;
            for idx in 1..inertia.len() - 1 {
                let d2 = inertia[idx - 1] - 2.0 * inertia[idx] + inertia[idx + 1];
                if d2 > best_d2 {
                    best_d2 = d2;
                    best_k = k_min + idx;
                }
            }
            Ok(SelectKResult {
                k: best_k,
                degenerate: best_d2 <= 0.0,
            })
        }
        SelectKMethod::Eigengap => {
            if knn_k == 0 || knn_k >= n {
                return Err(Error::invalid(format!(
                    "select_k: knn_k = {knn_k} out of range for {n} points"
                )));
            }
            let (values, _) = laplacian_spectrum(points, knn_k);
            let mut best_k = k_min;
            let mut best_gap = f64::NEG_INFINITY;
            for k in k_min..=k_max.min(n - 1) {
                let gap = values[k] - values[k - 1];
                if gap > best_gap {
                    best_gap = gap;
                    best_k = k;
                }
            }
            Ok(SelectKResult {
                k: best_k,
                degenerate: best_gap <= 0.0,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        Tensor::new(vec![n, d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    fn partition_equal(a: &[usize], b: &[usize]) -> bool {
        // same grouping up to label names
        let n = a.len();
        for i in 0..n {
            for j in 0..n {
                if (a[i] == a[j]) != (b[i] == b[j]) {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn kmeans_separated_pairs() {
        let p = points(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 10.0], &[10.0, 11.0]]);
        let a = kmeans(&p, 2, 42, 4).unwrap();
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
        assert!(!a.degenerate);
    }

    #[test]
    fn kmeans_k1_and_kn() {
        let p = points(&[&[1.0], &[2.0], &[6.0]]);
        let one = kmeans(&p, 1, 0, 1).unwrap();
        assert_eq!(one.labels, vec![0, 0, 0]);
        let c = one.centroids.as_ref().unwrap();
        assert!((c.row(0)[0] - 3.0).abs() < 1e-12);
        // inertia = total squared deviation from the mean
        assert!((one.inertia - (4.0 + 1.0 + 9.0)).abs() < 1e-12);

        let all = kmeans(&p, 3, 0, 2).unwrap();
        assert_eq!(all.inertia, 0.0);
    }

    #[test]
    fn kmeans_rejects_k_above_n() {
        let p = points(&[&[0.0], &[1.0]]);
        assert!(kmeans(&p, 3, 0, 1).is_err());
    }

    #[test]
    fn kmeans_same_seed_same_assignment() {
        let mut vals = Vec::new();
        let mut state = 5u64;
        for _ in 0..60 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push((state >> 11) as f64 / (1u64 << 53) as f64);
        }
        let p = Tensor::new(vec![30, 2], vals).unwrap();
        let a = kmeans(&p, 3, 9, 3).unwrap();
        let b = kmeans(&p, 3, 9, 3).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }

    fn two_cliques() -> Tensor {
        // two tight 5-point groups far apart
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for i in 0..5 {
            rows.push(vec![i as f64 * 0.01, 0.0]);
        }
        for i in 0..5 {
            rows.push(vec![100.0 + i as f64 * 0.01, 0.0]);
        }
        Tensor::new(vec![10, 2], rows.into_iter().flatten().collect()).unwrap()
    }

    #[test]
    fn spectral_splits_disconnected_cliques_exactly() {
        let p = two_cliques();
        let a = spectral_cluster(&p, 2, 3, 1).unwrap();
        let want = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        assert!(partition_equal(&a.labels, &want), "{:?}", a.labels);
    }

    #[test]
    fn spectral_single_clique_one_cluster() {
        let p = points(&[&[0.0], &[0.1], &[0.2], &[0.3]]);
        let a = spectral_cluster(&p, 1, 2, 0).unwrap();
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn spectral_reorder_gives_same_partition() {
        let p = two_cliques();
        let a = spectral_cluster(&p, 2, 3, 5).unwrap();
        // reorder points: interleave the groups
        let perm: Vec<usize> = vec![0, 5, 1, 6, 2, 7, 3, 8, 4, 9];
        let mut vals = Vec::new();
        for &i in &perm {
            vals.extend_from_slice(p.row(i));
        }
        let q = Tensor::new(vec![10, 2], vals).unwrap();
        let b = spectral_cluster(&q, 2, 3, 5).unwrap();
        let b_unpermuted: Vec<usize> = {
            let mut out = vec![0; 10];
            for (new_pos, &orig) in perm.iter().enumerate() {
                out[orig] = b.labels[new_pos];
            }
            out
        };
        assert!(partition_equal(&a.labels, &b_unpermuted));
    }

    #[test]
    fn elbow_on_known_curve() {
        // inertia curve [100, 20, 18, 17] has its largest second difference
        // at k = 2: (100-20) - (20-18) = 78
        let i = [100.0, 20.0, 18.0, 17.0];
        let mut best = (0usize, 0.0f64);
        for idx in 1..3 {
            let d2 = i[idx - 1] - 2.0 * i[idx] + i[idx + 1];
            if d2 > best.1 {
                best = (idx + 1, d2);
            }
        }
        assert_eq!(best.0, 2);
        assert!((best.1 - 78.0).abs() < 1e-12);

        // the full pipeline on matching geometry: one tight cluster at 0,
        // one at 100 -> inertia collapses from k=1 to k=2
        let p = two_cliques();
        let r = select_k(&p, 1, 4, SelectKMethod::Elbow, 3, 2).unwrap();
        assert_eq!(r.k, 2);
        assert!(!r.degenerate);
    }

    #[test]
    fn eigengap_on_disconnected_components() {
        let p = two_cliques();
        let r = select_k(&p, 1, 5, SelectKMethod::Eigengap, 3, 0).unwrap();
        assert_eq!(r.k, 2);
    }

    #[test]
    fn elbow_constant_curve_degenerates_to_smallest() {
        // all points identical: inertia is 0 for every k
        let p = points(&[&[1.0], &[1.0], &[1.0], &[1.0], &[1.0]]);
        let r = select_k(&p, 1, 4, SelectKMethod::Elbow, 2, 0).unwrap();
        assert_eq!(r.k, 1);
        assert!(r.degenerate);
    }
}
