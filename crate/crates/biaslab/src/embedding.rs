//! Dimensionality reduction: k-NN geodesic distances, classical MDS, their
//! composition (Isomap), and the naive downscale baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::linalg;
use crate::tensor::{sqdist, Tensor};

/// Symmetric all-pairs distances with a zero diagonal.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<DistanceMatrix> {
        if data.len() != n * n {
            return Err(Error::invalid("distance matrix size mismatch"));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::invalid(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::invalid(format!("invalid distance at ({i},{j})")));
                }
                if (a - b).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "asymmetry at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    /// Pairwise Euclidean distances of row-vectors in `points` (`[n, d]`).
    pub fn euclidean(points: &Tensor) -> DistanceMatrix {
        let n = points.rows();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = sqdist(points.row(i), points.row(j)).sqrt();
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub k_neighbors: usize,
    pub target_dims: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            k_neighbors: 10,
            target_dims: 10,
        }
    }
}

/// Geodesic distances plus how many bridge edges connectivity repair added.
#[derive(Debug, Clone)]
pub struct Geodesics {
    pub distances: DistanceMatrix,
    pub repairs: usize,
}

/// Euclidean k-NN graph (symmetrized by union), all-pairs shortest paths by
/// Dijkstra. A disconnected graph is repaired by repeatedly adding the
/// single shortest edge between components — auditing must not silently
/// drop samples — and the repair count is reported.
pub fn knn_geodesics(points: &Tensor, k: usize) -> Result<Geodesics> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("knn_geodesics: k must be >= 1"));
    }
    if n < k + 1 {
        return Err(Error::invalid(format!(
            "knn_geodesics: need at least k+1 = {} points, have {n}",
            k + 1
        )));
    }

    // k nearest neighbours per point, ties broken by index
    let neighbour_lists: Vec<Vec<(usize, f64)>> = exec::map_indices(n, |i| {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sqdist(points.row(i), points.row(j)).sqrt(), j))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        dists.truncate(k);
        dists.into_iter().map(|(d, j)| (j, d)).collect()
    });

    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, neigh) in neighbour_lists.iter().enumerate() {
        for &(j, d) in neigh {
            if !adjacency[i].iter().any(|&(t, _)| t == j) {
                adjacency[i].push((j, d));
            }
            if !adjacency[j].iter().any(|&(t, _)| t == i) {
                adjacency[j].push((i, d));
            }
        }
    }

    let repairs = repair_connectivity(&mut adjacency, points);

    let rows: Vec<Vec<f64>> = exec::map_indices(n, |src| dijkstra(&adjacency, src));
    // make the matrix exactly symmetric: both directions take the value
    // computed from the lower-indexed source
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = if i <= j { rows[i][j] } else { rows[j][i] };
            data[i * n + j] = v;
        }
    }
    Ok(Geodesics {
        distances: DistanceMatrix::new(n, data)?,
        repairs,
    })
}

fn repair_connectivity(adjacency: &mut [Vec<(usize, f64)>], points: &Tensor) -> usize {
    let n = adjacency.len();
    let mut repairs = 0;
    loop {
        let comp = components(adjacency);
        let ncomp = comp.iter().max().map(|m| m + 1).unwrap_or(0);
        if ncomp <= 1 {
            return repairs;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if comp[i] == comp[j] {
                    continue;
                }
                let d = sqdist(points.row(i), points.row(j)).sqrt();
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.expect("multiple components imply a bridging pair");
        adjacency[i].push((j, d));
        adjacency[j].push((i, d));
        repairs += 1;
    }
}

fn components(adjacency: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adjacency[u] {
                if comp[v] == usize::MAX {
                    comp[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // reversed: BinaryHeap is a max-heap, we need the closest node first
        other
            .dist
            .partial_cmp(&self.dist)
            .expect("finite distances")
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adjacency: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(HeapEntry {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adjacency[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapEntry { dist: nd, node: v });
            }
        }
    }
    dist
}

/// Classical MDS output: coordinates plus how many requested dimensions had
/// no positive eigenvalue and were zero-padded.
#[derive(Debug, Clone)]
pub struct MdsResult {
    pub coordinates: Tensor,
    pub padded: usize,
}

/// Double-center −½D², take the top eigenpairs, scale eigenvectors by
/// √eigenvalue. Negative eigenvalues clamp to zero; missing positive
/// directions pad with zero columns (reported in `padded`).
pub fn classical_mds(d: &DistanceMatrix, target_dims: usize) -> Result<MdsResult> {
    let n = d.len();
    if target_dims == 0 {
        return Err(Error::invalid("classical_mds: target_dims must be >= 1"));
    }
    if target_dims >= n {
        return Err(Error::invalid(format!(
            "classical_mds: target_dims {target_dims} must be below the point count {n}"
        )));
    }
    // B = -1/2 * J D^2 J, computed via row/column/grand means of D^2
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = d.get(i, j);
            sq[i * n + j] = v * v;
        }
    }
    let row_mean: Vec<f64> = (0..n)
        .map(|i| sq[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = -0.5 * (sq[i * n + j] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let (values, vectors) = linalg::eigh(&b, n);
    let mut padded = 0;
    let mut coords = vec![0.0; n * target_dims];
    for k in 0..target_dims {
        let lambda = values[k].max(0.0);
        if lambda <= 0.0 {
            padded += 1;
            continue;
        }
        let scale = lambda.sqrt();
        for i in 0..n {
            coords[i * target_dims + k] = vectors[k][i] * scale;
        }
    }
    Ok(MdsResult {
        coordinates: Tensor::new(vec![n, target_dims], coords)?,
        padded,
    })
}

#[derive(Debug, Clone)]
pub struct IsomapResult {
    pub coordinates: Tensor,
    pub repairs: usize,
    pub padded: usize,
}

/// Isomap: geodesics on the k-NN graph, then classical MDS.
pub fn isomap(points: &Tensor, cfg: &EmbeddingConfig) -> Result<IsomapResult> {
    let geo = knn_geodesics(points, cfg.k_neighbors)?;
    let mds = classical_mds(&geo.distances, cfg.target_dims)?;
    Ok(IsomapResult {
        coordinates: mds.coordinates,
        repairs: geo.repairs,
        padded: mds.padded,
    })
}

/// Box-filter average pooling to `side`×`side`, row-major flatten — the
/// plain geometric reduction SpRAy uses.
pub fn downscale(image: &Image, side: usize) -> Result<Vec<f64>> {
    Ok(image.box_downscale(side)?.into_pixels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        Tensor::new(vec![n, d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn collinear_geodesics_add_hops() {
        let p = points(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let geo = knn_geodesics(&p, 2).unwrap();
        assert_eq!(geo.repairs, 0);
        assert!((geo.distances.get(0, 3) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_geodesics_are_euclidean() {
        let p = points(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], &[3.0, 3.0]]);
        let geo = knn_geodesics(&p, 3).unwrap();
        let eu = DistanceMatrix::euclidean(&p);
        for i in 0..4 {
            for j in 0..4 {
                assert!((geo.distances.get(i, j) - eu.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disconnected_graph_is_repaired() {
        // two tight pairs far apart; k=1 keeps them disconnected
        let p = points(&[&[0.0], &[0.1], &[10.0], &[10.1]]);
        let geo = knn_geodesics(&p, 1).unwrap();
        assert_eq!(geo.repairs, 1);
        assert!(geo.distances.get(0, 3).is_finite());
        // the bridge is the closest inter-pair edge (0.1 <-> 10.0)
        let expected = 0.1 + 9.9 + 0.1;
        assert!((geo.distances.get(0, 3) - expected).abs() < 1e-9);
    }

    #[test]
    fn geodesics_satisfy_triangle_inequality() {
        let mut vals = Vec::new();
        let mut state = 123u64;
        for _ in 0..60 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push(((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0);
        }
        let p = Tensor::new(vec![30, 2], vals).unwrap();
        let geo = knn_geodesics(&p, 4).unwrap();
        let n = 30;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    assert!(
                        geo.distances.get(i, j)
                            <= geo.distances.get(i, k) + geo.distances.get(k, j) + 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn mds_reconstructs_right_triangle() {
        // legs 3 and 4, hypotenuse 5
        let d = DistanceMatrix::new(
            3,
            vec![0.0, 3.0, 4.0, 3.0, 0.0, 5.0, 4.0, 5.0, 0.0],
        )
        .unwrap();
        let mds = classical_mds(&d, 2).unwrap();
        assert_eq!(mds.padded, 0);
        let c = &mds.coordinates;
        for i in 0..3 {
            for j in 0..3 {
                let dist = sqdist(c.row(i), c.row(j)).sqrt();
                assert!((dist - d.get(i, j)).abs() < 1e-9, "({i},{j}): {dist}");
            }
        }
    }

    #[test]
    fn mds_zero_matrix_gives_zero_embedding() {
        let d = DistanceMatrix::new(3, vec![0.0; 9]).unwrap();
        let mds = classical_mds(&d, 2).unwrap();
        assert!(mds.coordinates.data().iter().all(|&v| v == 0.0));
        assert_eq!(mds.padded, 2);
    }

    #[test]
    fn mds_preserves_one_dimensional_order() {
        let p = points(&[&[0.0], &[1.0], &[2.5], &[4.0]]);
        let d = DistanceMatrix::euclidean(&p);
        let mds = classical_mds(&d, 1).unwrap();
        let xs: Vec<f64> = (0..4).map(|i| mds.coordinates.row(i)[0]).collect();
        let increasing = xs.windows(2).all(|w| w[0] < w[1]);
        let decreasing = xs.windows(2).all(|w| w[0] > w[1]);
        assert!(increasing || decreasing, "{xs:?}");
    }

    #[test]
    fn isomap_identity_and_duplicates() {
        // duplicate points embed to identical rows
        let p = points(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.5], &[2.0, 1.0], &[3.0, 0.0]]);
        let cfg = EmbeddingConfig {
            k_neighbors: 3,
            target_dims: 2,
        };
        let iso = isomap(&p, &cfg).unwrap();
        let (r0, r1) = (iso.coordinates.row(0).to_vec(), iso.coordinates.row(1).to_vec());
        for (a, b) in r0.iter().zip(&r1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn isomap_translation_leaves_geodesics_identical() {
        let mut vals = Vec::new();
        let mut state = 77u64;
        for _ in 0..40 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push(((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0);
        }
        let p = Tensor::new(vec![20, 2], vals.clone()).unwrap();
        let shifted =
            Tensor::new(vec![20, 2], vals.iter().map(|v| v + 17.0).collect()).unwrap();
        let a = knn_geodesics(&p, 4).unwrap();
        let b = knn_geodesics(&shifted, 4).unwrap();
        for (x, y) in a.distances.data().iter().zip(b.distances.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn downscale_flattens_row_major() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downscale(&img, 1).unwrap(), vec![0.5]);
        let c = Image::filled(4, 4, 0.3);
        assert_eq!(downscale(&c, 2).unwrap(), vec![0.3; 4]);
    }
}
