//! Dilemma catalog: the question set, its ideology taxonomy, and the two
//! table layouts derived from it (per-group table and diagonal table).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::responsestore::{ResponseStore, StoreError};

/// Exact header line of a catalog file.
pub const CATALOG_HEADER: [&str; 11] = [
    "group",
    "level",
    "venue",
    "dilemma_id",
    "prompt",
    "opt0",
    "opt1",
    "opt2",
    "opt3",
    "opt4",
    "opt5",
];

/// Number of answer options per dilemma, one per category of its group.
pub const OPTIONS_PER_DILEMMA: usize = 6;

/// Value written into off-diagonal cells of a [`DiagonalTable`].
pub const ZERO_CELL: &str = "0";

const GROUP_A_LABELS: [&str; 6] = [
    "DemocraticRadicalism",
    "CriticalLiberalism",
    "Depoliticization",
    "Conservatism",
    "Authoritarianism",
    "Nihilism",
];

const GROUP_B_LABELS: [&str; 6] = [
    "Realism",
    "Technocracy",
    "CulturalReductionism",
    "Humanism",
    "Meritocracy",
    "Communalism",
];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog header does not match `{}`", CATALOG_HEADER.join(","))]
    MalformedHeader,
    #[error("row {row}: expected 6 options, found {found}")]
    BadOptionCount { row: u64, found: usize },
    #[error("duplicate dilemma id {0}")]
    DuplicateDilemmaId(u32),
    #[error("row {row}: unknown group `{value}`")]
    UnknownGroup { row: u64, value: String },
    #[error("row {row}: invalid `{field}` value `{value}`")]
    BadField {
        row: u64,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: `{field}` must not be empty")]
    EmptyField { row: u64, field: &'static str },
    #[error("group {0} has no dilemmas")]
    EmptyGroup(Group),
    #[error("expected {expected} answers, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("table belongs to group {found}, expected group {expected}")]
    WrongGroup { expected: Group, found: Group },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::A, Group::B];

    pub fn parse(s: &str) -> Option<Group> {
        match s.trim() {
            "A" | "a" => Some(Group::A),
            "B" | "b" => Some(Group::B),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::A => "A",
            Group::B => "B",
        }
    }

    /// Export table number: group A is table 1, group B is table 2.
    pub fn table_number(self) -> u8 {
        match self {
            Group::A => 1,
            Group::B => 2,
        }
    }

    pub fn labels(self) -> &'static [&'static str; 6] {
        match self {
            Group::A => &GROUP_A_LABELS,
            Group::B => &GROUP_B_LABELS,
        }
    }

    pub fn categories(self) -> impl Iterator<Item = IdeologyCategory> {
        (0..OPTIONS_PER_DILEMMA as u8).map(move |index| IdeologyCategory { group: self, index })
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the twelve ideology categories. Serialized as its label, which is
/// unique across both groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdeologyCategory {
    group: Group,
    index: u8,
}

impl IdeologyCategory {
    pub fn new(group: Group, index: u8) -> Option<Self> {
        ((index as usize) < OPTIONS_PER_DILEMMA).then_some(Self { group, index })
    }

    pub fn group(self) -> Group {
        self.group
    }

    pub fn index(self) -> u8 {
        self.index
    }

    pub fn label(self) -> &'static str {
        self.group.labels()[self.index as usize]
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Group::ALL.into_iter().find_map(|group| {
            group
                .labels()
                .iter()
                .position(|l| *l == label)
                .map(|i| Self {
                    group,
                    index: i as u8,
                })
        })
    }

    pub fn all() -> impl Iterator<Item = IdeologyCategory> {
        Group::ALL.into_iter().flat_map(Group::categories)
    }
}

impl fmt::Display for IdeologyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for IdeologyCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for IdeologyCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let label = String::deserialize(d)?;
        IdeologyCategory::from_label(&label)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown category `{label}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dilemma {
    pub dilemma_id: u32,
    pub group: Group,
    pub venue: String,
    pub level: u32,
    pub prompt: String,
    /// `options[i]` is the answer text for category index `i` of `group`.
    pub options: [String; OPTIONS_PER_DILEMMA],
}

impl Dilemma {
    pub fn category_of(&self, option_index: u8) -> Option<IdeologyCategory> {
        IdeologyCategory::new(self.group, option_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilemmaCatalog {
    dilemmas: Vec<Dilemma>,
}

impl DilemmaCatalog {
    /// Validates ids and field contents. Row numbers in errors are 1-based
    /// positions in `dilemmas` plus one for the header.
    pub fn new(dilemmas: Vec<Dilemma>) -> Result<Self, CatalogError> {
        let mut seen = HashSet::new();
        for (i, d) in dilemmas.iter().enumerate() {
            let row = i as u64 + 2;
            if d.venue.trim().is_empty() {
                return Err(CatalogError::EmptyField { row, field: "venue" });
            }
            if d.prompt.is_empty() {
                return Err(CatalogError::EmptyField { row, field: "prompt" });
            }
            if d.level == 0 {
                return Err(CatalogError::BadField {
                    row,
                    field: "level",
                    value: "0".into(),
                });
            }
            if !seen.insert(d.dilemma_id) {
                return Err(CatalogError::DuplicateDilemmaId(d.dilemma_id));
            }
        }
        Ok(Self { dilemmas })
    }

    pub fn dilemmas(&self) -> &[Dilemma] {
        &self.dilemmas
    }

    pub fn get(&self, dilemma_id: u32) -> Option<&Dilemma> {
        self.dilemmas.iter().find(|d| d.dilemma_id == dilemma_id)
    }

    pub fn by_group(&self, group: Group) -> impl Iterator<Item = &Dilemma> {
        self.dilemmas.iter().filter(move |d| d.group == group)
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.by_group(group).count()
    }

    pub fn group_counts(&self) -> BTreeMap<Group, usize> {
        Group::ALL
            .into_iter()
            .map(|g| (g, self.group_count(g)))
            .collect()
    }

    /// Distinct levels, ascending.
    pub fn levels(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.dilemmas.iter().map(|d| d.level).collect();
        set.into_iter().collect()
    }

    pub fn level_dilemmas(&self, level: u32) -> BTreeSet<u32> {
        self.dilemmas
            .iter()
            .filter(|d| d.level == level)
            .map(|d| d.dilemma_id)
            .collect()
    }
}

/// Parses a catalog file (see [`CATALOG_HEADER`]).
pub fn parse_catalog<R: Read>(source: R) -> Result<DilemmaCatalog, CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r?,
        None => return Err(CatalogError::MalformedHeader),
    };
    if header.iter().ne(CATALOG_HEADER.iter().copied()) {
        return Err(CatalogError::MalformedHeader);
    }

    let mut dilemmas = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != CATALOG_HEADER.len() {
            return Err(CatalogError::BadOptionCount {
                row,
                found: record.len().saturating_sub(5),
            });
        }
        let group = Group::parse(&record[0]).ok_or_else(|| CatalogError::UnknownGroup {
            row,
            value: record[0].to_string(),
        })?;
        let level = parse_u32(&record[1], row, "level")?;
        let dilemma_id = parse_u32(&record[3], row, "dilemma_id")?;
        if !seen.insert(dilemma_id) {
            return Err(CatalogError::DuplicateDilemmaId(dilemma_id));
        }
        let options: [String; OPTIONS_PER_DILEMMA] =
            std::array::from_fn(|i| record[5 + i].to_string());
        dilemmas.push(Dilemma {
            dilemma_id,
            group,
            venue: record[2].to_string(),
            level,
            prompt: record[4].to_string(),
            options,
        });
    }
    DilemmaCatalog::new(dilemmas)
}

fn parse_u32(value: &str, row: u64, field: &'static str) -> Result<u32, CatalogError> {
    value.trim().parse().map_err(|_| CatalogError::BadField {
        row,
        field,
        value: value.to_string(),
    })
}

/// Writes `catalog` in the same format [`parse_catalog`] reads.
pub fn write_catalog<W: Write>(catalog: &DilemmaCatalog, sink: W) -> Result<(), CatalogError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    writer.write_record(CATALOG_HEADER)?;
    for d in &catalog.dilemmas {
        let level = d.level.to_string();
        let id = d.dilemma_id.to_string();
        let mut fields = vec![d.group.as_str(), &level, &d.venue, &id, &d.prompt];
        fields.extend(d.options.iter().map(String::as_str));
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Descriptor columns shared by both table layouts.
pub const DESCRIPTOR_COLUMNS: [&str; 3] = ["level", "venue", "prompt"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRow {
    pub dilemma_id: u32,
    pub level: u32,
    pub venue: String,
    pub prompt: String,
    pub options: [String; OPTIONS_PER_DILEMMA],
}

impl GroupRow {
    fn descriptors(&self) -> [String; 3] {
        [self.level.to_string(), self.venue.clone(), self.prompt.clone()]
    }
}

/// One group's dilemmas, in catalog order. The row index is the position in
/// `rows`, so it always starts at zero and is contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTable {
    pub group: Group,
    pub rows: Vec<GroupRow>,
}

impl GroupTable {
    pub fn columns(&self) -> Vec<String> {
        DESCRIPTOR_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.group.labels().iter().map(|s| s.to_string()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                r.descriptors()
                    .into_iter()
                    .chain(r.options.iter().cloned())
                    .collect()
            })
            .collect()
    }

    /// Name under which [`persist_tables`] stores this table.
    pub fn store_name(&self) -> String {
        format!("dilemmas_group_{}", self.group.as_str().to_ascii_lowercase())
    }
}

pub fn build_group_table(catalog: &DilemmaCatalog, group: Group) -> Result<GroupTable, CatalogError> {
    let rows: Vec<GroupRow> = catalog
        .by_group(group)
        .map(|d| GroupRow {
            dilemma_id: d.dilemma_id,
            level: d.level,
            venue: d.venue.clone(),
            prompt: d.prompt.clone(),
            options: d.options.clone(),
        })
        .collect();
    if rows.is_empty() {
        return Err(CatalogError::EmptyGroup(group));
    }
    Ok(GroupTable { group, rows })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagonalRow {
    pub descriptors: [String; 3],
    pub answers: Vec<String>,
}

/// N×N answer block appended after the descriptor columns. Row `i` holds its
/// recorded answer in column `Di`; every other answer cell is [`ZERO_CELL`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagonalTable {
    pub group: Group,
    pub rows: Vec<DiagonalRow>,
}

impl DiagonalTable {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn columns(&self) -> Vec<String> {
        DESCRIPTOR_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain((0..self.n()).map(|j| format!("D{j}")))
            .collect()
    }

    pub fn answer_block(&self) -> Vec<Vec<String>> {
        self.rows.iter().map(|r| r.answers.clone()).collect()
    }

    pub fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| r.descriptors.iter().chain(&r.answers).cloned().collect())
            .collect()
    }
}

pub fn build_diagonal_table<S: AsRef<str>>(
    table: &GroupTable,
    answers: &[S],
) -> Result<DiagonalTable, CatalogError> {
    let n = table.len();
    if answers.len() != n {
        return Err(CatalogError::LengthMismatch {
            expected: n,
            found: answers.len(),
        });
    }
    let rows = table
        .rows
        .iter()
        .zip(answers)
        .enumerate()
        .map(|(i, (row, answer))| {
            let mut cells = vec![ZERO_CELL.to_string(); n];
            cells[i] = answer.as_ref().to_string();
            DiagonalRow {
                descriptors: row.descriptors(),
                answers: cells,
            }
        })
        .collect();
    Ok(DiagonalTable {
        group: table.group,
        rows,
    })
}

/// Stores both group tables under their [`GroupTable::store_name`].
pub fn persist_tables(
    table_a: &GroupTable,
    table_b: &GroupTable,
    store: &ResponseStore,
) -> Result<(), CatalogError> {
    for (table, expected) in [(table_a, Group::A), (table_b, Group::B)] {
        if table.group != expected {
            return Err(CatalogError::WrongGroup {
                expected,
                found: table.group,
            });
        }
    }
    store.write_group_table(&table_a.store_name(), table_a)?;
    store.write_group_table(&table_b.store_name(), table_b)?;
    Ok(())
}
