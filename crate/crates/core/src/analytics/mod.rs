//! Research-side analysis of stored answers.
//!
//! Answers are categorical, so nothing here averages raw category indices.
//! The pipeline is: [`build_answer_matrix`] → [`aggregate_counts`] /
//! [`radar_profile`] for the descriptive figures, and [`one_hot`] →
//! [`standardize`] → [`pca`] → [`kmeans`] / [`agglomerative`] for the
//! numeric ones. [`figures`] writes the results as CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Group, IdeologyCategory, OPTIONS_PER_DILEMMA};
use crate::responsestore::{StoreContents, StoreError};
use crate::session::PlayerId;

mod cluster;
mod dummy;
pub mod figures;
mod pca;

pub use cluster::{agglomerative, kmeans, ClusterMethod, ClusterResult, KMeansConfig, Merge, DEFAULT_AGGLO_CAP};
pub use dummy::{generate_dummy, DummySummary, Persona};
pub use figures::{analyze, emit_figures, AnalysisBundle, AnalyzeConfig};
pub use pca::{pca, symmetric_eigen, PcaResult, DEFAULT_PCA_K};

/// Number of categories per group.
pub const CATEGORIES: usize = OPTIONS_PER_DILEMMA;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no completed sessions in the store")]
    NoCompleteSessions,
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("player {player} in room `{room_id}` is not in the matrix")]
    UnknownPlayer { room_id: String, player: PlayerId },
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("k = {k} exceeds the available rank {max}")]
    RankTooLow { k: usize, max: usize },
    #[error("k = {k} is not in 1..={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("{n} points exceed the agglomerative cap of {cap}")]
    TooManyPoints { n: usize, cap: usize },
    #[error("persona `{persona}`: {what}")]
    BadDistribution { persona: String, what: String },
    #[error("cell value {0} is not a category index")]
    BadCell(u8),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttemptPolicy {
    #[default]
    Latest,
    First,
}

/// One completed session of one player.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub room_id: String,
    pub player: PlayerId,
}

impl RowKey {
    pub fn label(&self) -> String {
        format!("{}:{}", self.room_id, self.player)
    }
}

/// Category index per (session, question) for one group. Rows are sorted by
/// key and columns by dilemma id; column `j` is question `Q{j+1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerMatrix {
    pub group: Group,
    pub rows: Vec<RowKey>,
    pub dilemma_ids: Vec<u32>,
    pub cells: Vec<Vec<u8>>,
}

impl AnswerMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_questions(&self) -> usize {
        self.dilemma_ids.len()
    }

    pub fn question_labels(&self) -> Vec<String> {
        (1..=self.n_questions()).map(|i| format!("Q{i}")).collect()
    }

    pub fn row_of(&self, key: &RowKey) -> Option<usize> {
        self.rows.binary_search(key).ok()
    }
}

/// Builds the matrix from the non-incomplete rows of `group`. A session
/// that did not answer every question seen in the group is left out.
pub fn build_answer_matrix(
    contents: &StoreContents,
    group: Group,
    policy: AttemptPolicy,
) -> Result<AnswerMatrix, AnalyticsError> {
    // (key, dilemma) -> (attempt, category index)
    let mut chosen: BTreeMap<RowKey, BTreeMap<u32, (u32, u8)>> = BTreeMap::new();
    for row in contents.rows(group).iter().filter(|r| !r.incomplete) {
        let r = &row.record;
        let key = RowKey {
            room_id: r.room_id.clone(),
            player: r.player,
        };
        let cell = (r.attempt, r.category.index());
        let slot = chosen.entry(key).or_default().entry(r.dilemma_id).or_insert(cell);
        let replace = match policy {
            AttemptPolicy::Latest => cell.0 > slot.0,
            AttemptPolicy::First => cell.0 < slot.0,
        };
        if replace {
            *slot = cell;
        }
    }
    let mut dilemma_ids: Vec<u32> = chosen.values().flat_map(|m| m.keys().copied()).collect();
    dilemma_ids.sort_unstable();
    dilemma_ids.dedup();

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (key, answers) in chosen {
        if answers.len() != dilemma_ids.len() {
            continue;
        }
        rows.push(key);
        cells.push(answers.values().map(|&(_, c)| c).collect());
    }
    if rows.is_empty() {
        return Err(AnalyticsError::NoCompleteSessions);
    }
    Ok(AnswerMatrix {
        group,
        rows,
        dilemma_ids,
        cells,
    })
}

/// `counts[c][q]`: how many rows answered category `c` on question `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    pub group: Group,
    pub counts: [Vec<u32>; CATEGORIES],
}

impl CountMatrix {
    pub fn n_questions(&self) -> usize {
        self.counts[0].len()
    }

    pub fn row_labels(&self) -> &'static [&'static str; CATEGORIES] {
        self.group.labels()
    }

    pub fn column_sum(&self, q: usize) -> u32 {
        self.counts.iter().map(|row| row[q]).sum()
    }

    pub fn row_sums(&self) -> [u32; CATEGORIES] {
        std::array::from_fn(|c| self.counts[c].iter().sum())
    }
}

pub fn aggregate_counts(matrix: &AnswerMatrix) -> Result<CountMatrix, AnalyticsError> {
    if matrix.cells.is_empty() {
        return Err(AnalyticsError::EmptyMatrix);
    }
    let m = matrix.n_questions();
    let mut counts: [Vec<u32>; CATEGORIES] = std::array::from_fn(|_| vec![0; m]);
    for row in &matrix.cells {
        for (q, &c) in row.iter().enumerate() {
            let c = usize::from(c);
            if c >= CATEGORIES {
                return Err(AnalyticsError::BadCell(c as u8));
            }
            counts[c][q] += 1;
        }
    }
    Ok(CountMatrix {
        group: matrix.group,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RadarScope {
    Player(RowKey),
    Population,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadarProfile {
    pub group: Group,
    pub totals: [u32; CATEGORIES],
}

impl RadarProfile {
    pub fn categories(&self) -> impl Iterator<Item = (IdeologyCategory, u32)> + '_ {
        self.group.categories().zip(self.totals)
    }
}

pub fn radar_profile(matrix: &AnswerMatrix, scope: &RadarScope) -> Result<RadarProfile, AnalyticsError> {
    let rows: Vec<&Vec<u8>> = match scope {
        RadarScope::Population => matrix.cells.iter().collect(),
        RadarScope::Player(key) => {
            let i = matrix.row_of(key).ok_or_else(|| AnalyticsError::UnknownPlayer {
                room_id: key.room_id.clone(),
                player: key.player,
            })?;
            vec![&matrix.cells[i]]
        }
    };
    let mut totals = [0u32; CATEGORIES];
    for &c in rows.iter().flat_map(|r| r.iter()) {
        *totals.get_mut(usize::from(c)).ok_or(AnalyticsError::BadCell(c))? += 1;
    }
    Ok(RadarProfile {
        group: matrix.group,
        totals,
    })
}

/// Expands every cell into 6 indicator columns; question `q`, category `c`
/// lands in column `6q + c`.
pub fn one_hot(matrix: &AnswerMatrix) -> Vec<Vec<f64>> {
    matrix
        .cells
        .iter()
        .map(|row| {
            let mut out = vec![0.0; row.len() * CATEGORIES];
            for (q, &c) in row.iter().enumerate() {
                out[q * CATEGORIES + usize::from(c)] = 1.0;
            }
            out
        })
        .collect()
}

/// Inverse of [`one_hot`]: the index of the single 1 in each block.
pub fn decode_one_hot(encoded: &[Vec<f64>]) -> Result<Vec<Vec<u8>>, AnalyticsError> {
    encoded
        .iter()
        .map(|row| {
            row.chunks(CATEGORIES)
                .map(|block| {
                    let ones: Vec<usize> = (0..block.len()).filter(|&i| block[i] == 1.0).collect();
                    match (ones.as_slice(), block.iter().filter(|&&v| v != 0.0).count()) {
                        ([i], 1) if block.len() == CATEGORIES => Ok(*i as u8),
                        _ => Err(AnalyticsError::BadCell(u8::MAX)),
                    }
                })
                .collect()
        })
        .collect()
}

/// Centers every column and scales it to unit sample standard deviation
/// (divisor n − 1). Constant columns become all zeros.
pub fn standardize(x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AnalyticsError> {
    let n = x.len();
    if n < 2 {
        return Err(AnalyticsError::TooFewRows(n));
    }
    let d = x[0].len();
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let ss: f64 = x.iter().map(|r| (r[j] - mean).powi(2)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        for (row, src) in out.iter_mut().zip(x) {
            row[j] = if sd > 0.0 { (src[j] - mean) / sd } else { 0.0 };
        }
    }
    Ok(out)
}
