use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalyticsError;

/// Largest input accepted by the O(n³) agglomerative path by default.
pub const DEFAULT_AGGLO_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClusterMethod {
    Kmeans,
    Agglomerative,
}

/// Two clusters joined by agglomerative clustering. Each cluster is named
/// by its smallest point index, so the merged cluster keeps `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Increase of the within-cluster sum of squares.
    pub cost: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub method: ClusterMethod,
    pub k: usize,
    pub labels: Vec<usize>,
    /// K-means only.
    pub inertia: Option<f64>,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    /// K-means: inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    /// Agglomerative: every merge, in order.
    pub merges: Vec<Merge>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-9,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn sample_weighted(d2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    if total <= 0.0 {
        return rng.gen_range(0..d2.len());
    }
    let mut r = rng.gen::<f64>() * total;
    for (i, &w) in d2.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    d2.len() - 1
}

/// Greedy k-means++: each new centroid is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance.
fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let c = sample_weighted(&d2, total, rng);
            let next: Vec<f64> = points
                .iter()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, &points[c])))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                best = Some((potential, next, c));
            }
        }
        let (_, next, c) = best.expect("at least two trials");
        centroids.push(points[c].clone());
        d2 = next;
    }
    centroids
}

/// Lloyd's algorithm from a seeded k-means++ start. A cluster that ends up
/// empty takes the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], config: KMeansConfig) -> Result<ClusterResult, AnalyticsError> {
    let n = points.len();
    let k = config.k;
    if k == 0 || k > n {
        return Err(AnalyticsError::KTooLarge { k, n });
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (j, dist) = nearest(p, &centroids);
            changed |= labels[i] != j;
            labels[i] = j;
            dists[i] = dist;
        }
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with two points");
            sizes[labels[far]] -= 1;
            labels[far] = empty;
            sizes[empty] = 1;
            dists[far] = 0.0;
            centroids[empty] = points[far].clone();
            changed = true;
        }
        trace.push(dists.iter().sum());

        let mut next = vec![vec![0.0; d]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (acc, x) in next[l].iter_mut().zip(p) {
                *acc += x;
            }
        }
        for (c, &s) in next.iter_mut().zip(&sizes) {
            c.iter_mut().for_each(|x| *x /= s as f64);
        }
        let shift: f64 = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b))
            .sum::<f64>()
            .sqrt();
        centroids = next;
        if !changed || shift <= config.tol {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    Ok(ClusterResult {
        method: ClusterMethod::Kmeans,
        k,
        labels,
        inertia: Some(inertia),
        seed: config.seed,
        centroids,
        inertia_trace: trace,
        iterations,
        merges: Vec::new(),
    })
}

/// Ward agglomerative clustering over Euclidean distance, naive O(n³).
/// Dissimilarities start at `‖xᵢ − xⱼ‖² / 2`, the Ward cost of joining
/// two singletons, and are updated with the Lance–Williams recurrence.
/// Ties go to the lexicographically smallest cluster pair.
pub fn agglomerative(points: &[Vec<f64>], k: usize, cap: usize) -> Result<ClusterResult, AnalyticsError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(AnalyticsError::KTooLarge { k, n });
    }
    if n > cap {
        return Err(AnalyticsError::TooManyPoints { n, cap });
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&points[i], &points[j]) / 2.0;
            dist[i][j] = v;
            dist[j][i] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - k);

    for _ in 0..n - k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                if best.is_none_or(|(c, _, _)| dist[i][j] < c) {
                    best = Some((dist[i][j], i, j));
                }
            }
        }
        let (cost, a, b) = best.expect("more than k clusters remain");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for m in (0..n).filter(|&m| active[m] && m != a && m != b) {
            let nm = size[m] as f64;
            let v = ((na + nm) * dist[m][a] + (nb + nm) * dist[m][b] - nm * cost) / (na + nb + nm);
            dist[m][a] = v;
            dist[a][m] = v;
        }
        active[b] = false;
        size[a] += size[b];
        owner.iter_mut().filter(|o| **o == b).for_each(|o| *o = a);
        merges.push(Merge {
            a,
            b,
            cost,
            size: size[a],
        });
    }

    let roots: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let labels: Vec<usize> = owner
        .iter()
        .map(|o| roots.binary_search(o).expect("owner is a root"))
        .collect();
    let d = points[0].len();
    let mut centroids = vec![vec![0.0; d]; k];
    for (p, &l) in points.iter().zip(&labels) {
        for (acc, x) in centroids[l].iter_mut().zip(p) {
            *acc += x;
        }
    }
    for (l, c) in centroids.iter_mut().enumerate() {
        let s = size[roots[l]] as f64;
        c.iter_mut().for_each(|x| *x /= s);
    }
    Ok(ClusterResult {
        method: ClusterMethod::Agglomerative,
        k,
        labels,
        inertia: None,
        seed: 0,
        centroids,
        inertia_trace: Vec::new(),
        iterations: merges.len(),
        merges,
    })
}
