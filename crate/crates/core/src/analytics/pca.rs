#![allow(clippy::needless_range_loop)]

use super::AnalyticsError;

pub const DEFAULT_PCA_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `k` unit vectors of length `d`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Ratios of all `d` components, for the variance curve.
    pub all_ratios: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// `n × k` projections.
    pub scores: Vec<Vec<f64>>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(values, vectors)` sorted by descending value, where
/// `vectors[i]` belongs to `values[i]` and its largest-magnitude entry is
/// positive.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();

    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = v.iter().map(|row| row[i]).collect();
            let lead = col
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(1.0, |(_, x)| x);
            if lead < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

/// Sample covariance (divisor n − 1) of the columns of `x`.
pub(crate) fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let means: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in x {
        for i in 0..d {
            let di = row[i] - means[i];
            for j in i..d {
                cov[i][j] += di * (row[j] - means[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

/// Principal components of `x` (usually standardized). `k` must not exceed
/// `min(n − 1, d)`.
pub fn pca(x: &[Vec<f64>], k: usize) -> Result<PcaResult, AnalyticsError> {
    let n = x.len();
    if n < 2 {
        return Err(AnalyticsError::TooFewRows(n));
    }
    let d = x[0].len();
    let max = (n - 1).min(d);
    if k == 0 || k > max {
        return Err(AnalyticsError::RankTooLow { k, max });
    }
    let cov = covariance(x);
    let (values, vectors) = symmetric_eigen(&cov);
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let all_ratios: Vec<f64> = values
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let explained_variance_ratio = all_ratios[..k].to_vec();
    let cumulative = explained_variance_ratio
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    let components: Vec<Vec<f64>> = vectors.into_iter().take(k).collect();
    let means: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let scores = x
        .iter()
        .map(|row| {
            components
                .iter()
                .map(|c| c.iter().zip(row).zip(&means).map(|((a, b), m)| a * (b - m)).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        components,
        explained_variance_ratio,
        cumulative,
        all_ratios,
        eigenvalues: values[..k].to_vec(),
        scores,
    })
}
