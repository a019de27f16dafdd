//! Spectral clustering of labels on a consensus correlation matrix.
//!
//! Affinity is the symmetrized absolute correlation with a zero diagonal, the
//! embedding comes from the smallest eigenvectors of the symmetric normalized
//! Laplacian, rows are normalized to unit length and grouped by k-means.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrstats::CorrelationMatrix;
use crate::error::{check_square, Error, Result};

/// Degrees below this are treated as isolated labels.
pub const DEGREE_FLOOR: f64 = 1e-12;
/// Upper bound on the number of eigenvalues scanned by the eigengap rule.
pub const EIGENGAP_SCAN: usize = 16;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;

/// Symmetric, nonnegative label affinity with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: Array2<f64>,
}

impl AffinityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        check_square("affinity", n, values.ncols(), n)?;
        for i in 0..n {
            if values[[i, i]] != 0.0 {
                return Err(Error::InvalidParameter {
                    name: "affinity",
                    reason: format!("nonzero diagonal at {i}"),
                });
            }
            for j in 0..n {
                let v = values[[i, j]];
                if !(v >= 0.0) || v != values[[j, i]] {
                    return Err(Error::InvalidParameter {
                        name: "affinity",
                        reason: format!("entry ({i}, {j}) is negative or asymmetric"),
                    });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_labels(&self) -> usize {
        self.values.nrows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.values.rows().into_iter().map(|r| r.sum()).collect()
    }
}

/// Disjoint, nonempty label clusters covering `0..n_labels`.
///
/// Clusters are kept in canonical form: members ascending, clusters ordered by
/// their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct LabelPartition {
    clusters: Vec<Vec<usize>>,
    assignment: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    clusters: Vec<Vec<usize>>,
}

impl TryFrom<PartitionRepr> for LabelPartition {
    type Error = Error;
    fn try_from(r: PartitionRepr) -> Result<Self> {
        let n = r.clusters.iter().map(Vec::len).sum();
        LabelPartition::new(r.clusters, n)
    }
}

impl From<LabelPartition> for PartitionRepr {
    fn from(p: LabelPartition) -> Self {
        PartitionRepr {
            clusters: p.clusters,
        }
    }
}

impl LabelPartition {
    pub fn new(clusters: Vec<Vec<usize>>, n_labels: usize) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidParameter {
            name: "partition",
            reason,
        };
        let mut assignment = vec![usize::MAX; n_labels];
        let mut clusters: Vec<Vec<usize>> = clusters;
        for cl in clusters.iter_mut() {
            if cl.is_empty() {
                return Err(invalid("empty cluster".into()));
            }
            cl.sort_unstable();
        }
        clusters.sort_by_key(|cl| cl[0]);
        for (g, cl) in clusters.iter().enumerate() {
            for &c in cl {
                if c >= n_labels {
                    return Err(invalid(format!("label {c} out of range 0..{n_labels}")));
                }
                if assignment[c] != usize::MAX {
                    return Err(invalid(format!("label {c} appears twice")));
                }
                assignment[c] = g;
            }
        }
        if let Some(c) = assignment.iter().position(|&a| a == usize::MAX) {
            return Err(invalid(format!("label {c} is not covered")));
        }
        Ok(Self {
            clusters,
            assignment,
        })
    }

    /// Builds a partition from a per-label cluster id.
    pub fn from_assignment(labels: &[usize]) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut clusters = vec![Vec::new(); k];
        for (c, &g) in labels.iter().enumerate() {
            clusters[g].push(c);
        }
        clusters.retain(|cl| !cl.is_empty());
        Self::new(clusters, labels.len())
    }

    pub fn single(n_labels: usize) -> Self {
        Self::new(vec![(0..n_labels).collect()], n_labels).expect("valid single cluster")
    }

    pub fn singletons(n_labels: usize) -> Self {
        Self::new((0..n_labels).map(|c| vec![c]).collect(), n_labels).expect("valid singletons")
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_labels(&self) -> usize {
        self.assignment.len()
    }

    /// Cluster index of every label.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn same_block(&self, c: usize, c2: usize) -> bool {
        self.assignment[c] == self.assignment[c2]
    }

    /// Number of ordered in-block pairs, the sum of squared cluster sizes.
    pub fn in_block_pairs(&self) -> usize {
        self.clusters.iter().map(|cl| cl.len() * cl.len()).sum()
    }
}

pub fn build_affinity(r: &CorrelationMatrix) -> AffinityMatrix {
    affinity_of(r.values())
}

fn affinity_of(r: &Array2<f64>) -> AffinityMatrix {
    let n = r.nrows();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (r[[i, j]].abs() + r[[j, i]].abs());
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    AffinityMatrix { values: s }
}

/// `D^{-1/2} (D - S) D^{-1/2}`; isolated labels get a zero `D^{-1/2}` entry.
pub fn normalized_laplacian(s: &AffinityMatrix) -> Array2<f64> {
    let n = s.n_labels();
    let inv_sqrt: Vec<f64> = s
        .degrees()
        .into_iter()
        .map(|d| if d < DEGREE_FLOOR { 0.0 } else { 1.0 / d.sqrt() })
        .collect();
    let deg = s.degrees();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dij = if i == j { deg[i] } else { 0.0 };
            l[[i, j]] = inv_sqrt[i] * (dij - s.values[[i, j]]) * inv_sqrt[j];
        }
    }
    l
}

/// Eigenpairs of a symmetric matrix, ascending, with the first component of
/// magnitude above `1e-12` of every eigenvector made positive.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for i in 0..n {
            vectors[[i, col]] = sign * v[i];
        }
    }
    (values, vectors)
}

/// Number of clusters suggested by the largest gap among the leading
/// Laplacian eigenvalues.
pub fn eigengap_cluster_count(r: &CorrelationMatrix) -> usize {
    let s = build_affinity(r);
    let (values, _) = symmetric_eigen(&normalized_laplacian(&s));
    let m = values.len().min(EIGENGAP_SCAN);
    if m < 2 {
        return 1;
    }
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..m {
        let gap = values[k] - values[k - 1];
        if gap > best.1 + 1e-12 {
            best = (k, gap);
        }
    }
    best.0
}

pub fn spectral_cluster(r: &CorrelationMatrix, n_clusters: usize, seed: u64) -> Result<LabelPartition> {
    let c = r.n_labels();
    if n_clusters == 0 || n_clusters > c {
        return Err(Error::InvalidClusterCount {
            clusters: n_clusters,
            labels: c,
        });
    }
    let s = build_affinity(r);
    let deg = s.degrees();
    let active: Vec<usize> = (0..c).filter(|&i| deg[i] >= DEGREE_FLOOR).collect();

    // cluster id per label; isolated labels are placed afterwards
    let mut assign = vec![usize::MAX; c];
    let mut n_found = 0;
    if active.len() >= n_clusters && n_clusters > 1 {
        let sub = Array2::from_shape_fn((active.len(), active.len()), |(i, j)| {
            s.values[[active[i], active[j]]]
        });
        let lap = normalized_laplacian(&AffinityMatrix { values: sub });
        let (_, vecs) = symmetric_eigen(&lap);
        let mut points: Vec<Vec<f64>> = (0..active.len())
            .map(|i| (0..n_clusters).map(|k| vecs[[i, k]]).collect())
            .collect();
        for p in &mut points {
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                p.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let labels = kmeans(&points, n_clusters, seed);
        for (i, &g) in labels.iter().enumerate() {
            assign[active[i]] = g;
        }
        n_found = n_clusters;
    } else if n_clusters == 1 || active.is_empty() {
        for &i in &active {
            assign[i] = 0;
        }
        n_found = usize::from(!active.is_empty());
    } else {
        for (g, &i) in active.iter().enumerate() {
            assign[i] = g;
            n_found += 1;
        }
    }

    // isolated labels join the cluster with the highest mean affinity
    for i in 0..c {
        if assign[i] != usize::MAX {
            continue;
        }
        if n_found == 0 {
            assign[i] = 0;
            n_found = 1;
            continue;
        }
        let mut best = (0, f64::NEG_INFINITY);
        for g in 0..n_found {
            let members: Vec<usize> = (0..c).filter(|&j| assign[j] == g).collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().map(|&j| s.values[[i, j]]).sum::<f64>() / members.len() as f64;
            if mean > best.1 {
                best = (g, mean);
            }
        }
        assign[i] = best.0;
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n_found.max(1)];
    for (i, &g) in assign.iter().enumerate() {
        clusters[g].push(i);
    }
    clusters.retain(|cl| !cl.is_empty());
    repair_cluster_count(&mut clusters, n_clusters, &s);
    LabelPartition::new(clusters, c)
}

/// Splits the largest clusters until there are `target` of them. The member
/// with the weakest affinity to the rest of its cluster leaves first.
fn repair_cluster_count(clusters: &mut Vec<Vec<usize>>, target: usize, s: &AffinityMatrix) {
    while clusters.len() < target {
        let (idx, _) = clusters
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .expect("at least one cluster");
        let cl = &mut clusters[idx];
        debug_assert!(cl.len() >= 2);
        let (pos, _) = cl
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, cl.iter().map(|&j| s.values[[i, j]]).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty cluster");
        let label = cl.remove(pos);
        clusters.push(vec![label]);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best-inertia k-means++ over several restarts. Each restart draws from its
/// own stream of `seed`, ties go to the earlier restart.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let (inertia, labels) = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![0usize; n];
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = iter == 0;
        for (i, p) in points.iter().enumerate() {
            let g = nearest(p, &centers);
            changed |= g != labels[i];
            labels[i] = g;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &g) in points.iter().zip(&labels) {
            counts[g] += 1;
            sums[g].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for g in 0..k {
            if counts[g] > 0 {
                centers[g] = sums[g].iter().map(|s| s / counts[g] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("nonempty points");
                centers[g] = points[far].clone();
                labels[far] = g;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &g)| sq_dist(p, &centers[g]))
        .sum();
    (inertia, labels)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (g, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (g, d);
        }
    }
    best.0
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| comb2(v)).sum();
    let rows: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| comb2(table.iter().map(|r| r[j]).sum())).sum();
    let total = comb2(n as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-15 {
        // only reachable when both labelings are the same trivial split
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn corr(m: Array2<f64>) -> CorrelationMatrix {
        CorrelationMatrix::from_values(m, 1e-8).unwrap()
    }

    #[test]
    fn affinity_takes_absolute_values() {
        let r = corr(array![[1.0, -0.4], [-0.4, 1.0]]);
        let s = build_affinity(&r);
        assert_eq!(s.values(), &array![[0.0, 0.4], [0.4, 0.0]]);
    }

    #[test]
    fn laplacian_of_two_cliques() {
        let s = AffinityMatrix::new(array![
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0]
        ])
        .unwrap();
        let (vals, _) = symmetric_eigen(&normalized_laplacian(&s));
        assert!(vals[0].abs() < 1e-12 && vals[1].abs() < 1e-12);
        assert!(vals[2] > 0.5);
    }

    #[test]
    fn laplacian_of_empty_graph_is_zero() {
        let s = AffinityMatrix::new(Array2::zeros((3, 3))).unwrap();
        assert!(normalized_laplacian(&s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let r = corr(Array2::eye(3));
        assert!(matches!(
            spectral_cluster(&r, 4, 0),
            Err(Error::InvalidClusterCount { .. })
        ));
        assert!(spectral_cluster(&r, 0, 0).is_err());
    }

    #[test]
    fn full_count_gives_singletons() {
        let r = corr(array![
            [1.0, 0.9, 0.1, 0.0],
            [0.9, 1.0, 0.0, 0.2],
            [0.1, 0.0, 1.0, 0.8],
            [0.0, 0.2, 0.8, 1.0]
        ]);
        let p = spectral_cluster(&r, 4, 3).unwrap();
        assert_eq!(p, LabelPartition::singletons(4));
    }

    #[test]
    fn isolated_labels_still_yield_requested_count() {
        let r = corr(Array2::eye(5));
        for g in 1..=5 {
            let p = spectral_cluster(&r, g, 0).unwrap();
            assert_eq!(p.n_clusters(), g);
            assert_eq!(p.n_labels(), 5);
        }
    }

    #[test]
    fn partition_rejects_overlap_and_gaps() {
        assert!(LabelPartition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(LabelPartition::new(vec![vec![0], vec![2]], 3).is_err());
        assert!(LabelPartition::new(vec![vec![0, 1], vec![]], 2).is_err());
    }

    #[test]
    fn partition_json_shape() {
        let p = LabelPartition::new(vec![vec![3, 2], vec![0, 1]], 4).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"clusters":[[0,1],[2,3]]}"#);
        let back: LabelPartition = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(v < 0.0);
    }

    #[test]
    fn eigengap_finds_three_blocks() {
        let mut m = Array2::eye(9);
        for b in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        m[[3 * b + i, 3 * b + j]] = 0.7;
                    }
                }
            }
        }
        m[[0, 5]] = 0.02;
        m[[5, 0]] = 0.02;
        assert_eq!(eigengap_cluster_count(&corr(m)), 3);
    }
}
