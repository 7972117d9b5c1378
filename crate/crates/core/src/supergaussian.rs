//! SuperGaussian clustering: voxel-seeded region growing over a k-NN graph
//! under the joint feature/position metric, plus per-cluster summaries.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, Reader, Writer};
use crate::cloud_io::{Aabb, Vec3};
use crate::error::{Error, Result};
use crate::features::FeatureSet;

pub const KNN_K: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: f64,
    pub origin: Vec3,
    /// Non-empty cells in lexicographic key order, each with ascending member indices.
    pub cells: BTreeMap<[i64; 3], Vec<usize>>,
}

impl VoxelGrid {
    pub fn non_empty(&self) -> usize {
        self.cells.len()
    }
}

pub fn voxelize(positions: &[Vec3], resolution: f64) -> Result<VoxelGrid> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::invalid(format!("voxel resolution must be positive, got {resolution}")));
    }
    let bb = Aabb::from_points(positions).ok_or_else(|| Error::Empty("voxelize: no points".into()))?;
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        let key = [0, 1, 2].map(|a| ((p[a] - bb.min[a]) / resolution).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    Ok(VoxelGrid {
        resolution,
        origin: bb.min,
        cells,
    })
}

/// One uniformly drawn member per non-empty cell, in cell order.
pub fn select_seeds(grid: &VoxelGrid, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.cells
        .values()
        .map(|members| members[rng.gen_range(0..members.len())])
        .collect()
}

// ---------------------------------------------------------------------------
// k-NN graph

struct KdTree<'a> {
    points: &'a [Vec3],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(PartialEq)]
struct Neighbor(f64, usize);

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl<'a> KdTree<'a> {
    fn build(points: &'a [Vec3]) -> Self {
        let mut tree = KdTree {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_rec(&mut idx, 0);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let point = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(KdNode {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    /// The `k` nearest points other than `query` itself, ordered by (distance², index).
    fn knn(&self, query: usize, k: usize) -> Vec<usize> {
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_vec();
        out.sort();
        out.into_iter().map(|n| n.1).collect()
    }

    fn search(&self, node: Option<usize>, query: usize, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let q = &self.points[query];
        let p = &self.points[node.point];
        if node.point != query {
            let cand = Neighbor((p - q).norm_squared(), node.point);
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        self.search(near, query, k, heap);
        if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
            self.search(far, query, k, heap);
        }
    }
}

/// Symmetrized k-NN adjacency with sorted neighbor lists.
pub fn knn_graph(positions: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::build(positions);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); positions.len()];
    for i in 0..positions.len() {
        for j in tree.knn(i, k) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

// ---------------------------------------------------------------------------
// metric and clustering

/// `1 − |f_i·f_j| / (‖f_i‖‖f_j‖) + μ‖p_i − p_j‖ / R`
pub fn metric_d(pi: &Vec3, pj: &Vec3, fi: &[f64], fj: &[f64], mu: f64, resolution: f64) -> Result<f64> {
    if !(resolution > 0.0) {
        return Err(Error::invalid("resolution must be positive"));
    }
    if fi.len() != fj.len() {
        return Err(Error::Dimension {
            expected: fi.len(),
            actual: fj.len(),
        });
    }
    let ni = norm(fi);
    let nj = norm(fj);
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::invalid("metric_d needs non-zero feature vectors"));
    }
    Ok(metric_with_norms(pi, pj, fi, fj, ni, nj, mu, resolution))
}

fn norm(f: &[f64]) -> f64 {
    f.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn metric_with_norms(pi: &Vec3, pj: &Vec3, fi: &[f64], fj: &[f64], ni: f64, nj: f64, mu: f64, r: f64) -> f64 {
    let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
    1.0 - dot.abs() / (ni * nj) + mu * (pi - pj).norm() / r
}

struct Metric<'a> {
    positions: &'a [Vec3],
    features: &'a [Vec<f64>],
    norms: Vec<f64>,
    mu: f64,
    resolution: f64,
}

impl Metric<'_> {
    fn d(&self, i: usize, j: usize) -> f64 {
        metric_with_norms(
            &self.positions[i],
            &self.positions[j],
            &self.features[i],
            &self.features[j],
            self.norms[i],
            self.norms[j],
            self.mu,
            self.resolution,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    /// `seeds[k]` is the seed point of cluster `k`.
    pub seeds: Vec<usize>,
    pub k: usize,
    /// Σ D(G_i, seed) after each accepted iteration.
    pub objective: Vec<f64>,
}

impl Clustering {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.u32(self.assignment.len() as u32);
        w.u32(self.k as u32);
        self.assignment.iter().for_each(|&c| w.u32(c as u32));
        w.save(path)
    }

    /// Reads labels back; seeds and objective history are not cached.
    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let assignment = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let mut seen = vec![false; k];
        for &c in &assignment {
            if c >= k {
                return Err(r.err(format!("label {c} out of range for {k} clusters")));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(r.err("empty cluster in cached labels"));
        }
        Ok(Self {
            assignment,
            seeds: Vec::new(),
            k,
            objective: Vec::new(),
        })
    }
}

#[derive(PartialEq)]
struct Claim {
    d: f64,
    cluster: usize,
    point: usize,
}

impl Eq for Claim {}

impl PartialOrd for Claim {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Claim {
    // reversed for a min-heap on (d, cluster, point)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .d
            .total_cmp(&self.d)
            .then(other.cluster.cmp(&self.cluster))
            .then(other.point.cmp(&self.point))
    }
}

const UNASSIGNED: usize = usize::MAX;

fn grow(seeds: &[usize], graph: &[Vec<usize>], metric: &Metric<'_>) -> Vec<usize> {
    let n = graph.len();
    let mut assignment = vec![UNASSIGNED; n];
    let mut heap = BinaryHeap::new();
    for (c, &s) in seeds.iter().enumerate() {
        assignment[s] = c;
    }
    let push_neighbors = |heap: &mut BinaryHeap<Claim>, assignment: &[usize], c: usize, p: usize| {
        for &nb in &graph[p] {
            if assignment[nb] == UNASSIGNED {
                heap.push(Claim {
                    d: metric.d(nb, seeds[c]),
                    cluster: c,
                    point: nb,
                });
            }
        }
    };
    for (c, &s) in seeds.iter().enumerate() {
        push_neighbors(&mut heap, &assignment, c, s);
    }
    while let Some(Claim { cluster, point, .. }) = heap.pop() {
        if assignment[point] != UNASSIGNED {
            continue;
        }
        assignment[point] = cluster;
        push_neighbors(&mut heap, &assignment, cluster, point);
    }
    // points the graph never reached go to the globally nearest seed
    for i in 0..n {
        if assignment[i] == UNASSIGNED {
            let mut best = (f64::INFINITY, 0);
            for (c, &s) in seeds.iter().enumerate() {
                let d = metric.d(i, s);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
        }
    }
    assignment
}

fn objective(assignment: &[usize], seeds: &[usize], metric: &Metric<'_>) -> f64 {
    assignment.iter().enumerate().map(|(i, &c)| metric.d(i, seeds[c])).sum()
}

fn medoids(assignment: &[usize], k: usize, metric: &Metric<'_>) -> Vec<usize> {
    let mut members = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        members[c].push(i);
    }
    members
        .iter()
        .map(|m| {
            let mut best = (f64::INFINITY, m[0]);
            for &cand in m {
                let cost: f64 = m.iter().map(|&x| metric.d(x, cand)).sum();
                if cost < best.0 {
                    best = (cost, cand);
                }
            }
            best.1
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterParams {
    pub resolution: f64,
    pub mu: f64,
    pub iterations: usize,
    pub seed: u64,
}

pub fn cluster(positions: &[Vec3], features: &FeatureSet, params: &ClusterParams) -> Result<Clustering> {
    if positions.is_empty() {
        return Err(Error::Empty("cannot cluster an empty cloud".into()));
    }
    if features.len() != positions.len() {
        return Err(Error::Dimension {
            expected: positions.len(),
            actual: features.len(),
        });
    }
    if params.iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    let norms: Vec<f64> = features.vectors.iter().map(|f| norm(f)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::invalid(format!("feature {i} has zero norm")));
    }
    let grid = voxelize(positions, params.resolution)?;
    let metric = Metric {
        positions,
        features: &features.vectors,
        norms,
        mu: params.mu,
        resolution: params.resolution,
    };
    let graph = knn_graph(positions, KNN_K);

    let mut seeds = select_seeds(&grid, params.seed);
    let mut assignment = grow(&seeds, &graph, &metric);
    let mut history = vec![objective(&assignment, &seeds, &metric)];
    for _ in 1..params.iterations {
        let next_seeds = medoids(&assignment, seeds.len(), &metric);
        if next_seeds == seeds {
            break;
        }
        let next = grow(&next_seeds, &graph, &metric);
        let obj = objective(&next, &next_seeds, &metric);
        if obj > *history.last().unwrap() {
            break;
        }
        seeds = next_seeds;
        assignment = next;
        history.push(obj);
    }
    Ok(Clustering {
        k: seeds.len(),
        assignment,
        seeds,
        objective: history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub centers: Vec<Vec3>,
    pub features: Vec<Vec<f64>>,
}

/// Mean member position and componentwise max-pooled member feature per cluster.
pub fn cluster_summary(positions: &[Vec3], features: &FeatureSet, clustering: &Clustering) -> Result<ClusterSummary> {
    if positions.len() != clustering.assignment.len() || features.len() != positions.len() {
        return Err(Error::invalid("clustering, positions and features disagree in length"));
    }
    let k = clustering.k;
    let mut sums = vec![Vec3::zeros(); k];
    let mut counts = vec![0usize; k];
    let mut pooled = vec![vec![f64::NEG_INFINITY; features.dim]; k];
    for (i, &c) in clustering.assignment.iter().enumerate() {
        sums[c] += positions[i];
        counts[c] += 1;
        for (acc, &v) in pooled[c].iter_mut().zip(&features.vectors[i]) {
            *acc = acc.max(v);
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("cluster {c} is empty")));
    }
    Ok(ClusterSummary {
        centers: sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect(),
        features: pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_features(n: usize) -> FeatureSet {
        FeatureSet {
            dim: 2,
            vectors: vec![vec![1.0, 0.5]; n],
        }
    }

    fn random_positions(n: usize, seed: u64, extent: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..extent))).collect()
    }

    #[test]
    fn voxel_counts() {
        let two = [Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)];
        assert_eq!(voxelize(&two, 1.0).unwrap().non_empty(), 2);
        let tight = [Vec3::zeros(), Vec3::new(0.5, 0.2, 0.9), Vec3::new(0.1, 0.1, 0.1)];
        assert_eq!(voxelize(&tight, 1.0).unwrap().non_empty(), 1);
        assert!(voxelize(&two, 0.0).is_err());
        assert!(voxelize(&two, -1.0).is_err());
    }

    #[test]
    fn voxel_count_matches_brute_force_binning() {
        let pts = random_positions(500, 4, 3.0);
        let grid = voxelize(&pts, 0.37).unwrap();
        // independent binning: sort and dedup integer keys
        let min = pts.iter().fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
        let mut keys: Vec<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                let q = (p - min) / 0.37;
                (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(grid.non_empty(), keys.len());
        assert_eq!(grid.cells.values().map(|m| m.len()).sum::<usize>(), 500);
    }

    #[test]
    fn seeds_one_per_cell() {
        let pts = random_positions(300, 5, 2.0);
        let grid = voxelize(&pts, 0.5).unwrap();
        let seeds = select_seeds(&grid, 7);
        assert_eq!(seeds.len(), grid.non_empty());
        for (s, members) in seeds.iter().zip(grid.cells.values()) {
            assert!(members.contains(s));
        }
        assert_eq!(seeds, select_seeds(&grid, 7));

        let spread = [Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0), Vec3::new(0.0, 5.0, 0.0)];
        let g = voxelize(&spread, 1.0).unwrap();
        let mut s = select_seeds(&g, 1);
        s.sort();
        assert_eq!(s, vec![0, 1, 2]);
    }

    #[test]
    fn metric_cases() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert!(metric_d(&p, &p, &[1.0, 2.0], &[1.0, 2.0], 0.5, 1.0).unwrap().abs() < 1e-15);
        assert_eq!(metric_d(&p, &p, &[1.0, 0.0], &[0.0, 3.0], 0.5, 1.0).unwrap(), 1.0);
        let q = p + Vec3::new(0.0, 2.0, 0.0);
        assert_eq!(metric_d(&p, &q, &[1.0, 0.0], &[2.0, 0.0], 0.5, 2.0).unwrap(), 0.5);
        // antiparallel features count as similar through |·|
        assert_eq!(metric_d(&p, &p, &[1.0, 0.0], &[-1.0, 0.0], 0.5, 1.0).unwrap(), 0.0);
        assert!(metric_d(&p, &p, &[0.0, 0.0], &[1.0, 0.0], 0.5, 1.0).is_err());
    }

    #[test]
    fn knn_graph_matches_brute_force() {
        let pts = random_positions(200, 9, 1.0);
        let graph = knn_graph(&pts, 12);
        let mut brute: Vec<Vec<usize>> = vec![Vec::new(); pts.len()];
        for i in 0..pts.len() {
            let mut d: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| ((pts[i] - pts[j]).norm_squared(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in d.iter().take(12) {
                brute[i].push(j);
                brute[j].push(i);
            }
        }
        for l in &mut brute {
            l.sort_unstable();
            l.dedup();
        }
        assert_eq!(graph, brute);
    }

    #[test]
    fn single_point() {
        let c = cluster(&[Vec3::zeros()], &uniform_features(1), &params(1.0, 1)).unwrap();
        assert_eq!(c.k, 1);
        assert_eq!(c.assignment, vec![0]);
    }

    fn params(resolution: f64, iterations: usize) -> ClusterParams {
        ClusterParams {
            resolution,
            mu: 0.5,
            iterations,
            seed: 3,
        }
    }

    #[test]
    fn two_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pts = Vec::new();
        for b in 0..2 {
            for _ in 0..40 {
                let offset = Vec3::new(100.0 * b as f64, 0.0, 0.0);
                pts.push(offset + Vec3::from_fn(|_, _| rng.gen_range(0.0..0.9)));
            }
        }
        let c = cluster(&pts, &uniform_features(80), &params(1.0, 1)).unwrap();
        assert_eq!(c.k, 2);
        let first = c.assignment[0];
        assert!(c.assignment[..40].iter().all(|&a| a == first));
        assert!(c.assignment[40..].iter().all(|&a| a != first));
    }

    #[test]
    fn clustering_invariants_and_determinism() {
        let pts = random_positions(300, 21, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = FeatureSet {
            dim: 4,
            vectors: (0..300).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        };
        let p = params(0.5, 4);
        let c = cluster(&pts, &fs, &p).unwrap();
        let grid = voxelize(&pts, 0.5).unwrap();
        assert_eq!(c.k, grid.non_empty());
        for (k, &s) in c.seeds.iter().enumerate() {
            assert_eq!(c.assignment[s], k);
        }
        assert!(c.members().iter().all(|m| !m.is_empty()));
        assert!(c.objective.windows(2).all(|w| w[1] <= w[0]), "{:?}", c.objective);
        assert_eq!(c, cluster(&pts, &fs, &p).unwrap());
    }

    #[test]
    fn summary_pools_and_averages() {
        let pts = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(9.0, 9.0, 9.0)];
        let fs = FeatureSet {
            dim: 2,
            vectors: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.3, -0.2]],
        };
        let c = Clustering {
            assignment: vec![0, 0, 1],
            seeds: vec![0, 2],
            k: 2,
            objective: vec![],
        };
        let s = cluster_summary(&pts, &fs, &c).unwrap();
        assert_eq!(s.centers[0], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(s.features[0], vec![1.0, 1.0]);
        assert_eq!(s.centers[1], pts[2]);
        assert_eq!(s.features[1], vec![0.3, -0.2]);

        let swapped = FeatureSet {
            dim: 2,
            vectors: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.3, -0.2]],
        };
        assert_eq!(cluster_summary(&pts, &swapped, &c).unwrap().features, s.features);
    }

    #[test]
    fn label_cache_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = Clustering {
            assignment: vec![1, 0, 1, 2],
            seeds: vec![1, 0, 3],
            k: 3,
            objective: vec![],
        };
        c.save(&path).unwrap();
        let back = Clustering::load(&path).unwrap();
        assert_eq!(back.assignment, c.assignment);
        assert_eq!(back.k, 3);

        let bad = Clustering {
            assignment: vec![0, 0],
            seeds: vec![],
            k: 2,
            objective: vec![],
        };
        bad.save(&path).unwrap();
        assert!(Clustering::load(&path).is_err());
    }
}
