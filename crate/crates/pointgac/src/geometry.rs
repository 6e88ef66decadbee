//! Neighbor graphs, per-point geometric features, and Potts-energy
//! segmentation.
//!
//! The segmentation minimizes
//!
//! ```text
//! E(g) = sum_i ||g_i - f_i||^2 + mu * sum_{(i,j) in E} w_ij [g_i != g_j]
//! ```
//!
//! with g constrained piecewise constant per segment (the value of a segment
//! is the mean feature of its points). Exact minimization is NP-hard; the
//! solver here is greedy region merging: start from singletons and repeatedly
//! merge the adjacent pair with the largest energy decrease, which makes the
//! energy trace monotone by construction.

use std::collections::BTreeMap;

use nalgebra::Matrix3;

use crate::error::{Error, Result};

/// Ordered list of 3D points with optional per-point segment labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points, labels: None }
    }

    pub fn with_labels(points: Vec<[f64; 3]>, labels: Vec<u32>) -> Self {
        assert_eq!(points.len(), labels.len());
        PointCloud {
            points,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::invalid("label count does not match point count"));
            }
        }
        Ok(())
    }

    pub fn num_segments(&self) -> usize {
        match &self.labels {
            Some(l) => l.iter().map(|&x| x as usize + 1).max().unwrap_or(0),
            None => 0,
        }
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// K-nearest-neighbor graph. `knn` holds exactly k directed neighbors per
/// point; `edges` is the symmetrized undirected edge set (each pair once,
/// i < j) that the Potts energy sums over.
#[derive(Clone, Debug)]
pub struct NeighborGraph {
    pub k: usize,
    pub knn: Vec<Vec<(usize, f64)>>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl NeighborGraph {
    /// Mean edge length over the undirected edge set.
    pub fn mean_edge_length(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(|&(_, _, d)| d).sum::<f64>() / self.edges.len() as f64
    }

    /// Bounded, scale-robust edge weight: w = 1 / (1 + d / d_mean).
    pub fn edge_weight(&self, d: f64) -> f64 {
        let mean = self.mean_edge_length();
        if mean == 0.0 {
            1.0
        } else {
            1.0 / (1.0 + d / mean)
        }
    }
}

/// Exact k-nearest neighbors by Euclidean distance, ties broken by lower
/// point index, then symmetrized into an undirected edge set.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k = {k} must satisfy 1 <= k < N = {n}"
        )));
    }
    let mut knn = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, distance(&cloud.points[i], &cloud.points[j])))
            .collect();
        dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        dists.truncate(k);
        knn.push(dists);
    }
    let mut edge_set: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, neigh) in knn.iter().enumerate() {
        for &(j, d) in neigh {
            let key = (i.min(j), i.max(j));
            edge_set.insert(key, d);
        }
    }
    let edges = edge_set.into_iter().map(|((a, b), d)| (a, b, d)).collect();
    Ok(NeighborGraph { k, knn, edges })
}

/// Per-point features: linearity, planarity, scattering, verticality, each
/// in [0, 1].
#[derive(Clone, Debug)]
pub struct GeometricFeatures {
    pub features: Vec<[f64; 4]>,
}

pub const FEATURE_DIM: usize = 4;

/// Feature row used when the neighborhood covariance is degenerate.
pub const DEGENERATE_FEATURE: [f64; 4] = [0.0, 0.0, 1.0, 0.0];

/// Eigenvalue features of the neighborhood covariance. The neighborhood of
/// point i is the point itself plus its k directed neighbors; eigenvalues
/// l1 >= l2 >= l3 >= 0 give linearity (l1-l2)/l1, planarity (l2-l3)/l1 and
/// scattering l3/l1, and verticality is |z component of the l3 eigenvector|.
pub fn compute_geometric_features(cloud: &PointCloud, graph: &NeighborGraph) -> GeometricFeatures {
    let features = (0..cloud.len())
        .map(|i| {
            let mut pts: Vec<[f64; 3]> = vec![cloud.points[i]];
            pts.extend(graph.knn[i].iter().map(|&(j, _)| cloud.points[j]));
            feature_row(&pts)
        })
        .collect();
    GeometricFeatures { features }
}

fn feature_row(pts: &[[f64; 3]]) -> [f64; 4] {
    let m = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for a in mean.iter_mut() {
        *a /= m;
    }
    let mut cov = [[0.0; 3]; 3];
    for p in pts {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= m;
        }
    }
    let mat = Matrix3::new(
        cov[0][0], cov[0][1], cov[0][2], cov[1][0], cov[1][1], cov[1][2], cov[2][0], cov[2][1],
        cov[2][2],
    );
    let eig = mat.symmetric_eigen();
    // Sort eigenpairs descending by eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    let l3 = eig.eigenvalues[order[2]].max(0.0);
    if l1 <= 1e-18 {
        return DEGENERATE_FEATURE;
    }
    let linearity = ((l1 - l2) / l1).clamp(0.0, 1.0);
    let planarity = ((l2 - l3) / l1).clamp(0.0, 1.0);
    let scattering = (l3 / l1).clamp(0.0, 1.0);
    let normal = eig.eigenvectors.column(order[2]);
    let verticality = normal[2].abs().clamp(0.0, 1.0);
    [linearity, planarity, scattering, verticality]
}

/// Result of the greedy Potts solver. `trace` records the energy after the
/// initial labeling and after every merge.
#[derive(Clone, Debug)]
pub struct PottsResult {
    pub labels: Vec<u32>,
    pub energy: f64,
    pub trace: Vec<f64>,
    pub num_segments: usize,
}

/// Greedy region-merging minimization of the Potts objective. Starts from
/// singleton segments, merges the adjacent pair with the largest energy
/// decrease, stops when no merge decreases the energy or the segment count
/// reaches `min_segments`. Labels are compacted to [0, S) in order of first
/// appearance.
pub fn potts_segmentation(
    features: &GeometricFeatures,
    graph: &NeighborGraph,
    mu: f64,
    min_segments: usize,
) -> PottsResult {
    let n = features.features.len();
    assert!(mu > 0.0, "invalid argument: mu must be positive");
    let min_segments = min_segments.max(1);

    // Union-find with the smallest member index as root, so merge results
    // are order-independent and deterministic.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    // Per-root segment statistics: count, feature sum, sum of squared norms.
    let mut count: Vec<f64> = vec![1.0; n];
    let mut sum: Vec<[f64; 4]> = features.features.clone();
    let mut sq: Vec<f64> = features
        .features
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum())
        .collect();

    // Crossing-weight map between segment roots.
    let mut pair_w: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(a, b, d) in &graph.edges {
        let w = graph.edge_weight(d);
        *pair_w.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
    }

    // Data cost of a segment: sum ||f_i - mean||^2 = sq - |sum|^2 / count.
    let seg_cost = |count: f64, sum: &[f64; 4], sq: f64| -> f64 {
        let s2: f64 = sum.iter().map(|v| v * v).sum();
        (sq - s2 / count).max(0.0)
    };

    let mut num_segments = n;
    let mut energy: f64 = mu * pair_w.values().sum::<f64>();
    let mut trace = vec![energy];

    while num_segments > min_segments {
        // Scan all adjacent root pairs for the best merge.
        let mut best: Option<((usize, usize), f64)> = None;
        for (&(a, b), &w) in &pair_w {
            let merged_count = count[a] + count[b];
            let mut merged_sum = sum[a];
            for (ms, v) in merged_sum.iter_mut().zip(&sum[b]) {
                *ms += v;
            }
            let merged_sq = sq[a] + sq[b];
            let delta_data = seg_cost(merged_count, &merged_sum, merged_sq)
                - seg_cost(count[a], &sum[a], sq[a])
                - seg_cost(count[b], &sum[b], sq[b]);
            let delta = delta_data - mu * w;
            match &best {
                Some((_, best_delta)) if delta >= *best_delta => {}
                _ => best = Some(((a, b), delta)),
            }
        }
        let Some(((a, b), delta)) = best else { break };
        if delta >= 0.0 {
            break;
        }

        // Merge b into a (a < b by map ordering); a stays the root.
        parent[b] = a;
        count[a] += count[b];
        let absorbed = sum[b];
        for (sa, v) in sum[a].iter_mut().zip(&absorbed) {
            *sa += v;
        }
        sq[a] += sq[b];
        // Rebuild b's adjacency onto a.
        let stale: Vec<((usize, usize), f64)> = pair_w
            .range((b, 0)..(b + 1, 0))
            .map(|(&k, &v)| (k, v))
            .chain(
                pair_w
                    .iter()
                    .filter(|(&(_, y), _)| y == b)
                    .map(|(&k, &v)| (k, v)),
            )
            .collect();
        for (key, w) in stale {
            pair_w.remove(&key);
            let other = if key.0 == b { key.1 } else { key.0 };
            if other == a {
                continue; // the merged edge disappears
            }
            let nk = (a.min(other), a.max(other));
            *pair_w.entry(nk).or_insert(0.0) += w;
        }

        num_segments -= 1;
        energy += delta;
        trace.push(energy);
    }

    // Compact labels in order of first appearance.
    let mut labels = vec![0u32; n];
    let mut remap: BTreeMap<usize, u32> = BTreeMap::new();
    let mut next = 0u32;
    for i in 0..n {
        let r = find(&mut parent, i);
        let id = *remap.entry(r).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        labels[i] = id;
    }

    PottsResult {
        labels,
        energy,
        trace,
        num_segments,
    }
}

/// Exact Potts objective of a labeling, with segment values fixed to segment
/// mean features.
pub fn segmentation_energy(
    features: &GeometricFeatures,
    graph: &NeighborGraph,
    labels: &[u32],
    mu: f64,
) -> f64 {
    let n = features.features.len();
    assert_eq!(labels.len(), n, "invalid argument: label count");
    let num_segments = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut count = vec![0.0f64; num_segments];
    let mut sum = vec![[0.0f64; 4]; num_segments];
    for (i, f) in features.features.iter().enumerate() {
        let s = labels[i] as usize;
        count[s] += 1.0;
        for (acc, v) in sum[s].iter_mut().zip(f) {
            *acc += v;
        }
    }
    let mut data = 0.0;
    for (i, f) in features.features.iter().enumerate() {
        let s = labels[i] as usize;
        for a in 0..4 {
            let d = f[a] - sum[s][a] / count[s];
            data += d * d;
        }
    }
    let mut pairwise = 0.0;
    for &(a, b, d) in &graph.edges {
        if labels[a] != labels[b] {
            pairwise += graph.edge_weight(d);
        }
    }
    data + mu * pairwise
}

/// Greedy farthest point sampling. The seed is the point farthest from the
/// centroid; every subsequent pick maximizes the minimum distance to the
/// chosen set. All ties break toward the lower index, so the sequence is a
/// pure function of the input.
pub fn fps_sample(cloud: &PointCloud, l: usize) -> Result<(Vec<usize>, Vec<u32>)> {
    let n = cloud.len();
    if l == 0 || l > n {
        return Err(Error::invalid(format!(
            "L = {l} must satisfy 1 <= L <= N = {n}"
        )));
    }
    let mut centroid = [0.0f64; 3];
    for p in &cloud.points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for a in centroid.iter_mut() {
        *a /= n as f64;
    }
    let mut seed = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in cloud.points.iter().enumerate() {
        let d = squared_distance(p, &centroid);
        if d > best {
            best = d;
            seed = i;
        }
    }

    let mut chosen = Vec::with_capacity(l);
    chosen.push(seed);
    let mut min_dist: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| squared_distance(p, &cloud.points[seed]))
        .collect();
    while chosen.len() < l {
        let mut next = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best {
                best = d;
                next = i;
            }
        }
        chosen.push(next);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = squared_distance(&cloud.points[i], &cloud.points[next]);
            if nd < *d {
                *d = nd;
            }
        }
    }

    let labels = match &cloud.labels {
        Some(l) => chosen.iter().map(|&i| l[i]).collect(),
        None => vec![0; chosen.len()],
    };
    Ok((chosen, labels))
}
