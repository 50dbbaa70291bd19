//! Figure data as CSV. Every file is a pure function of the bundle.
//!
//! | file | header |
//! |---|---|
//! | `histogram.csv` | `category,count` |
//! | `stacked_bar.csv` | `question,<6 category labels>` |
//! | `heatmap.csv` | `category,Q1..Qm` |
//! | `radar.csv` | `scope,<6 category labels>` |
//! | `pca_variance.csv` | `component,ratio,cumulative` |
//! | `elbow.csv` | `k,inertia` |
//! | `scatter2d.csv` | `row,PC1,PC2,cluster` |
//! | `scatter3d.csv` | `row,PC1,PC2,PC3,cluster` |
//! | `questions.csv` | `question,dilemma_id` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    agglomerative, aggregate_counts, build_answer_matrix, kmeans, one_hot, pca, radar_profile,
    standardize, AnalyticsError, AnswerMatrix, AttemptPolicy, ClusterMethod, ClusterResult,
    CountMatrix, KMeansConfig, PcaResult, RadarProfile, RadarScope, DEFAULT_AGGLO_CAP,
};
use crate::catalog::Group;
use crate::responsestore::StoreContents;

/// Largest k tried for the elbow curve.
pub const ELBOW_MAX_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub group: Group,
    pub attempt: AttemptPolicy,
    pub pca_k: usize,
    pub cluster: ClusterMethod,
    pub k: usize,
    pub seed: u64,
    pub agglo_cap: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            group: Group::A,
            attempt: AttemptPolicy::Latest,
            pca_k: super::DEFAULT_PCA_K,
            cluster: ClusterMethod::Kmeans,
            k: 3,
            seed: 0,
            agglo_cap: DEFAULT_AGGLO_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisBundle {
    pub matrix: AnswerMatrix,
    pub counts: CountMatrix,
    pub population: RadarProfile,
    pub players: Vec<RadarProfile>,
    pub pca: PcaResult,
    pub elbow: Vec<(usize, f64)>,
    pub clusters: ClusterResult,
}

/// Runs the whole pipeline on one group: matrix, counts, radar profiles,
/// PCA on the standardized one-hot encoding, the elbow curve and the
/// requested clustering of the PCA scores.
pub fn analyze(contents: &StoreContents, config: &AnalyzeConfig) -> Result<AnalysisBundle, AnalyticsError> {
    let matrix = build_answer_matrix(contents, config.group, config.attempt)?;
    let counts = aggregate_counts(&matrix)?;
    let population = radar_profile(&matrix, &RadarScope::Population)?;
    let players = matrix
        .rows
        .iter()
        .map(|key| radar_profile(&matrix, &RadarScope::Player(key.clone())))
        .collect::<Result<_, _>>()?;
    let scaled = standardize(&one_hot(&matrix))?;
    let pca = pca(&scaled, config.pca_k)?;
    let n = matrix.n_rows();
    let elbow = (1..=ELBOW_MAX_K.min(n))
        .map(|k| {
            let r = kmeans(&pca.scores, KMeansConfig::new(k, config.seed))?;
            Ok((k, r.inertia.unwrap_or(0.0)))
        })
        .collect::<Result<_, AnalyticsError>>()?;
    let clusters = match config.cluster {
        ClusterMethod::Kmeans => kmeans(&pca.scores, KMeansConfig::new(config.k, config.seed))?,
        ClusterMethod::Agglomerative => agglomerative(&pca.scores, config.k, config.agglo_cap)?,
    };
    Ok(AnalysisBundle {
        matrix,
        counts,
        population,
        players,
        pca,
        elbow,
        clusters,
    })
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), AnalyticsError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn labels(group: Group) -> Vec<String> {
    group.labels().iter().map(|s| s.to_string()).collect()
}

fn scatter(bundle: &AnalysisBundle, dims: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["row".to_string()];
    header.extend((1..=dims).map(|i| format!("PC{i}")));
    header.push("cluster".into());
    let rows = bundle
        .matrix
        .rows
        .iter()
        .zip(&bundle.pca.scores)
        .zip(&bundle.clusters.labels)
        .map(|((key, s), l)| {
            let mut r = vec![key.label()];
            r.extend(s[..dims].iter().map(f64::to_string));
            r.push(l.to_string());
            r
        })
        .collect();
    (header, rows)
}

/// Writes the figure files into `out_dir`, plus `heatmap.svg` when `svg`
/// is set. Returns the written paths in a fixed order.
pub fn emit_figures(bundle: &AnalysisBundle, out_dir: &Path, svg: bool) -> Result<Vec<PathBuf>, AnalyticsError> {
    fs::create_dir_all(out_dir)?;
    let group = bundle.matrix.group;
    let questions = bundle.matrix.question_labels();
    let mut written = Vec::new();
    let mut emit = |name: &str, header: Vec<String>, rows: Vec<Vec<String>>| -> Result<(), AnalyticsError> {
        let path = out_dir.join(name);
        write_rows(&path, &header, &rows)?;
        written.push(path);
        Ok(())
    };

    emit(
        "histogram.csv",
        vec!["category".into(), "count".into()],
        bundle
            .population
            .categories()
            .map(|(c, n)| vec![c.label().to_string(), n.to_string()])
            .collect(),
    )?;

    let mut header = vec!["question".to_string()];
    header.extend(labels(group));
    emit(
        "stacked_bar.csv",
        header,
        questions
            .iter()
            .enumerate()
            .map(|(q, label)| {
                let mut r = vec![label.clone()];
                r.extend(bundle.counts.counts.iter().map(|row| row[q].to_string()));
                r
            })
            .collect(),
    )?;

    let mut header = vec!["category".to_string()];
    header.extend(questions.iter().cloned());
    emit(
        "heatmap.csv",
        header,
        labels(group)
            .into_iter()
            .zip(&bundle.counts.counts)
            .map(|(label, row)| {
                let mut r = vec![label];
                r.extend(row.iter().map(u32::to_string));
                r
            })
            .collect(),
    )?;

    let mut header = vec!["scope".to_string()];
    header.extend(labels(group));
    let mut rows = vec![{
        let mut r = vec!["population".to_string()];
        r.extend(bundle.population.totals.iter().map(u32::to_string));
        r
    }];
    for (key, profile) in bundle.matrix.rows.iter().zip(&bundle.players) {
        let mut r = vec![key.label()];
        r.extend(profile.totals.iter().map(u32::to_string));
        rows.push(r);
    }
    emit("radar.csv", header, rows)?;

    let mut cumulative = 0.0;
    emit(
        "pca_variance.csv",
        vec!["component".into(), "ratio".into(), "cumulative".into()],
        bundle
            .pca
            .all_ratios
            .iter()
            .enumerate()
            .map(|(i, r)| {
                cumulative += r;
                vec![format!("PC{}", i + 1), r.to_string(), cumulative.to_string()]
            })
            .collect(),
    )?;

    emit(
        "elbow.csv",
        vec!["k".into(), "inertia".into()],
        bundle
            .elbow
            .iter()
            .map(|(k, i)| vec![k.to_string(), i.to_string()])
            .collect(),
    )?;

    let dims = bundle.pca.components.len();
    if dims >= 2 {
        let (h, r) = scatter(bundle, 2);
        emit("scatter2d.csv", h, r)?;
    }
    if dims >= 3 {
        let (h, r) = scatter(bundle, 3);
        emit("scatter3d.csv", h, r)?;
    }

    emit(
        "questions.csv",
        vec!["question".into(), "dilemma_id".into()],
        questions
            .iter()
            .zip(&bundle.matrix.dilemma_ids)
            .map(|(q, d)| vec![q.clone(), d.to_string()])
            .collect(),
    )?;

    if svg {
        let path = out_dir.join("heatmap.svg");
        fs::write(&path, heatmap_svg(&bundle.counts, &questions))?;
        written.push(path);
    }
    Ok(written)
}

fn heatmap_svg(counts: &CountMatrix, questions: &[String]) -> String {
    const CELL: usize = 40;
    const LEFT: usize = 190;
    const TOP: usize = 30;
    let max = counts.counts.iter().flatten().copied().max().unwrap_or(0).max(1);
    let width = LEFT + CELL * questions.len() + 10;
    let height = TOP + CELL * counts.counts.len() + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for (q, label) in questions.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            LEFT + q * CELL + CELL / 2,
            TOP - 10
        );
    }
    for (c, (label, row)) in counts.row_labels().iter().zip(&counts.counts).enumerate() {
        let y = TOP + c * CELL;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, LEFT - 8, y + CELL / 2 + 4);
        for (q, &n) in row.iter().enumerate() {
            let shade = 255 - (n as usize * 200 / max as usize);
            let x = LEFT + q * CELL;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)"/><text x="{}" y="{}" text-anchor="middle">{n}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
