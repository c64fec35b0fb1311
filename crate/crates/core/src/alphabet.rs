//! Character / row / column label structure of the alphabet and its
//! train/val/test class partition.
//!
//! The grid is ragged (some consonant families have 7 forms, some 8 or 9), so
//! row and column labels are always looked up from the manifest, never
//! derived from the character index.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The manifest shipped with the crate.
pub const AMHARIC_MANIFEST: &str = include_str!("../data/amharic_alphabet.csv");

#[derive(Debug, Error)]
pub enum AlphabetError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest row at line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("duplicate char_label {label} at line {line}")]
    DuplicateChar { label: u32, line: u64 },
    #[error("{field} {value} out of range 1..={max} at line {line}")]
    LabelOutOfRange {
        field: &'static str,
        value: u32,
        max: u32,
        line: u64,
    },
    #[error("missing characters: {0:?}")]
    MissingCharacters(Vec<u32>),
    #[error("split {split} has {found} classes, expected {expected}")]
    SplitSize {
        split: Split,
        expected: usize,
        found: usize,
    },
    #[error("char {char_label} is ({found_row},{found_col}), expected ({row},{col})")]
    AnchorMismatch {
        char_label: u32,
        row: u32,
        col: u32,
        found_row: u32,
        found_col: u32,
    },
    #[error("char_label {0} is not in the alphabet")]
    UnknownChar(u32),
    #[error("unknown split name {0:?} (expected train, val or test)")]
    UnknownSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = AlphabetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(AlphabetError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphabetEntry {
    pub char_label: u32,
    pub row_label: u32,
    pub col_label: u32,
    pub split: Split,
}

/// Shape constraints a manifest must satisfy.
///
/// [`AlphabetSchema::amharic`] is the real alphabet; other schemas exist so
/// synthetic corpora can reuse the same machinery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphabetSchema {
    pub num_chars: u32,
    pub num_rows: u32,
    pub num_cols: u32,
    /// Class counts for train, val, test.
    pub split_sizes: [usize; 3],
    /// `(char_label, row_label, col_label)` records that must be present.
    pub anchors: Vec<(u32, u32, u32)>,
}

impl AlphabetSchema {
    pub fn amharic() -> Self {
        AlphabetSchema {
            num_chars: 265,
            num_rows: 34,
            num_cols: 9,
            split_sizes: [120, 61, 84],
            anchors: vec![(1, 1, 1), (265, 34, 7)],
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.split_sizes[split.index()]
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    char_label: u32,
    row_label: u32,
    col_label: u32,
    split: String,
}

/// Validated character → (row, column, split) lookup. Immutable after load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlphabetTable {
    schema: AlphabetSchema,
    /// `entries[c - 1]` is the record for char `c`.
    entries: Vec<AlphabetEntry>,
}

/// Loads the real alphabet from a CSV manifest.
pub fn load_alphabet<R: Read>(source: R) -> Result<AlphabetTable, AlphabetError> {
    AlphabetTable::from_reader(source, &AlphabetSchema::amharic())
}

fn parse_records<R: Read>(source: R) -> Result<Vec<(u64, AlphabetEntry)>, AlphabetError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let malformed = |e: csv::Error, line: u64| AlphabetError::Malformed {
        line: e.position().map_or(line, |p| p.line()),
        reason: match e.kind() {
            csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
            _ => e.to_string(),
        },
    };
    let headers = reader.headers().map_err(|e| malformed(e, 1))?.clone();
    let mut entries = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut row) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(malformed(e, line)),
        }
        let line = row.position().map_or(line, |p| p.line());
        let record: ManifestRecord = row
            .deserialize(Some(&headers))
            .map_err(|e| malformed(e, line))?;
        let split = record
            .split
            .parse::<Split>()
            .map_err(|_| AlphabetError::Malformed {
                line,
                reason: format!("unknown split {:?}", record.split),
            })?;
        entries.push((
            line,
            AlphabetEntry {
                char_label: record.char_label,
                row_label: record.row_label,
                col_label: record.col_label,
                split,
            },
        ));
    }
    Ok(entries)
}

impl AlphabetTable {
    /// The manifest compiled into the crate.
    pub fn builtin() -> AlphabetTable {
        load_alphabet(AMHARIC_MANIFEST.as_bytes()).expect("builtin manifest is valid")
    }

    pub fn from_path(path: &Path, schema: &AlphabetSchema) -> Result<AlphabetTable, AlphabetError> {
        let file = std::fs::File::open(path).map_err(|source| AlphabetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        AlphabetTable::from_reader(file, schema)
    }

    pub fn from_reader<R: Read>(
        source: R,
        schema: &AlphabetSchema,
    ) -> Result<AlphabetTable, AlphabetError> {
        AlphabetTable::from_entries_with_lines(parse_records(source)?, schema)
    }

    /// Loads a manifest whose shape is taken from its own contents: label
    /// ranges from the largest labels seen and split sizes from the counts.
    /// Labels must still be contiguous and unique.
    pub fn from_reader_inferred<R: Read>(source: R) -> Result<AlphabetTable, AlphabetError> {
        let records = parse_records(source)?;
        if records.is_empty() {
            return Err(AlphabetError::Malformed {
                line: 1,
                reason: "manifest has no records".into(),
            });
        }
        let max =
            |f: fn(&AlphabetEntry) -> u32| records.iter().map(|(_, e)| f(e)).max().unwrap_or(0);
        let mut split_sizes = [0usize; 3];
        for (_, e) in &records {
            split_sizes[e.split.index()] += 1;
        }
        let schema = AlphabetSchema {
            num_chars: max(|e| e.char_label),
            num_rows: max(|e| e.row_label),
            num_cols: max(|e| e.col_label),
            split_sizes,
            anchors: Vec::new(),
        };
        AlphabetTable::from_entries_with_lines(records, &schema)
    }

    pub fn from_path_inferred(path: &Path) -> Result<AlphabetTable, AlphabetError> {
        let file = std::fs::File::open(path).map_err(|source| AlphabetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        AlphabetTable::from_reader_inferred(file)
    }

    pub fn from_entries(
        entries: Vec<AlphabetEntry>,
        schema: &AlphabetSchema,
    ) -> Result<AlphabetTable, AlphabetError> {
        let numbered = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| (i as u64 + 1, e))
            .collect();
        AlphabetTable::from_entries_with_lines(numbered, schema)
    }

    fn from_entries_with_lines(
        entries: Vec<(u64, AlphabetEntry)>,
        schema: &AlphabetSchema,
    ) -> Result<AlphabetTable, AlphabetError> {
        let mut slots: Vec<Option<AlphabetEntry>> = vec![None; schema.num_chars as usize];
        for (line, entry) in entries {
            check_range("char_label", entry.char_label, schema.num_chars, line)?;
            check_range("row_label", entry.row_label, schema.num_rows, line)?;
            check_range("col_label", entry.col_label, schema.num_cols, line)?;
            let slot = &mut slots[entry.char_label as usize - 1];
            if slot.is_some() {
                return Err(AlphabetError::DuplicateChar {
                    label: entry.char_label,
                    line,
                });
            }
            *slot = Some(entry);
        }

        let missing: Vec<u32> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i as u32 + 1)
            .collect();
        if !missing.is_empty() {
            return Err(AlphabetError::MissingCharacters(missing));
        }
        let entries: Vec<AlphabetEntry> = slots.into_iter().flatten().collect();

        for split in Split::ALL {
            let found = entries.iter().filter(|e| e.split == split).count();
            let expected = schema.split_size(split);
            if found != expected {
                return Err(AlphabetError::SplitSize {
                    split,
                    expected,
                    found,
                });
            }
        }

        for &(char_label, row, col) in &schema.anchors {
            let e = entries
                .get(char_label as usize - 1)
                .ok_or(AlphabetError::UnknownChar(char_label))?;
            if e.row_label != row || e.col_label != col {
                return Err(AlphabetError::AnchorMismatch {
                    char_label,
                    row,
                    col,
                    found_row: e.row_label,
                    found_col: e.col_label,
                });
            }
        }

        Ok(AlphabetTable {
            schema: schema.clone(),
            entries,
        })
    }

    pub fn schema(&self) -> &AlphabetSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AlphabetEntry] {
        &self.entries
    }

    pub fn entry(&self, char_label: u32) -> Result<&AlphabetEntry, AlphabetError> {
        char_label
            .checked_sub(1)
            .and_then(|i| self.entries.get(i as usize))
            .ok_or(AlphabetError::UnknownChar(char_label))
    }

    pub fn row_of(&self, char_label: u32) -> Result<u32, AlphabetError> {
        self.entry(char_label).map(|e| e.row_label)
    }

    pub fn col_of(&self, char_label: u32) -> Result<u32, AlphabetError> {
        self.entry(char_label).map(|e| e.col_label)
    }

    pub fn split_of(&self, char_label: u32) -> Result<Split, AlphabetError> {
        self.entry(char_label).map(|e| e.split)
    }

    /// Character labels of one split, ascending.
    pub fn split_classes(&self, split: Split) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.char_label)
            .collect()
    }

    /// [`split_classes`](Self::split_classes) keyed by name.
    pub fn split_classes_named(&self, split: &str) -> Result<BTreeSet<u32>, AlphabetError> {
        Ok(self.split_classes(split.parse()?))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("char_label,row_label,col_label,split\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.char_label, e.row_label, e.col_label, e.split
            ));
        }
        out
    }
}

fn check_range(field: &'static str, value: u32, max: u32, line: u64) -> Result<(), AlphabetError> {
    if value == 0 || value > max {
        return Err(AlphabetError::LabelOutOfRange {
            field,
            value,
            max,
            line,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_without(label: u32) -> String {
        AMHARIC_MANIFEST
            .lines()
            .filter(|l| !l.starts_with(&format!("{label},")))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn builtin_anchors() {
        let t = AlphabetTable::builtin();
        assert_eq!(t.len(), 265);
        assert_eq!((t.row_of(1).unwrap(), t.col_of(1).unwrap()), (1, 1));
        assert_eq!((t.row_of(265).unwrap(), t.col_of(265).unwrap()), (34, 7));
    }

    #[test]
    fn split_sizes_partition_the_alphabet() {
        let t = AlphabetTable::builtin();
        let train = t.split_classes(Split::Train);
        let val = t.split_classes_named("val").unwrap();
        let test = t.split_classes_named("test").unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (120, 61, 84));
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        let all: BTreeSet<u32> = train.iter().chain(&val).chain(&test).copied().collect();
        assert_eq!(all, (1..=265).collect());
    }

    #[test]
    fn lookups_out_of_range() {
        let t = AlphabetTable::builtin();
        assert!(matches!(
            t.row_of(300),
            Err(AlphabetError::UnknownChar(300))
        ));
        assert!(t.col_of(0).is_err());
        assert!(matches!(
            t.split_classes_named("holdout"),
            Err(AlphabetError::UnknownSplit(_))
        ));
    }

    #[test]
    fn lookups_follow_manifest_not_arithmetic() {
        let t = AlphabetTable::builtin();
        for e in t.entries() {
            assert_eq!(t.row_of(e.char_label).unwrap(), e.row_label);
            assert_eq!(t.col_of(e.char_label).unwrap(), e.col_label);
        }
        // The grid is ragged, so a fixed-width formula must disagree somewhere.
        assert!(t
            .entries()
            .iter()
            .any(|e| (e.char_label - 1) / 9 + 1 != e.row_label));
    }

    #[test]
    fn missing_character_rejected() {
        let err = load_alphabet(manifest_without(100).as_bytes()).unwrap_err();
        match err {
            AlphabetError::MissingCharacters(m) => assert_eq!(m, vec![100]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_character_rejected() {
        let text = format!("{AMHARIC_MANIFEST}2,1,2,train\n");
        assert!(matches!(
            load_alphabet(text.as_bytes()),
            Err(AlphabetError::DuplicateChar {
                label: 2,
                line: 267
            })
        ));
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let text = AMHARIC_MANIFEST.replacen("1,1,1,train", "1,35,1,train", 1);
        assert!(matches!(
            load_alphabet(text.as_bytes()),
            Err(AlphabetError::LabelOutOfRange {
                field: "row_label",
                value: 35,
                ..
            })
        ));
        let text = AMHARIC_MANIFEST.replacen("1,1,1,train", "1,1,10,train", 1);
        assert!(matches!(
            load_alphabet(text.as_bytes()),
            Err(AlphabetError::LabelOutOfRange {
                field: "col_label",
                ..
            })
        ));
    }

    #[test]
    fn wrong_split_sizes_rejected() {
        let text = AMHARIC_MANIFEST.replacen("1,1,1,train", "1,1,1,val", 1);
        assert!(matches!(
            load_alphabet(text.as_bytes()),
            Err(AlphabetError::SplitSize {
                split: Split::Train,
                expected: 120,
                found: 119
            })
        ));
    }

    #[test]
    fn anchor_mismatch_rejected() {
        let text = AMHARIC_MANIFEST.replacen("265,34,7,test", "265,34,6,test", 1);
        assert!(matches!(
            load_alphabet(text.as_bytes()),
            Err(AlphabetError::AnchorMismatch {
                char_label: 265,
                ..
            })
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = AMHARIC_MANIFEST.replacen("3,1,3,train", "3,x,3,train", 1);
        match load_alphabet(text.as_bytes()).unwrap_err() {
            AlphabetError::Malformed { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rows_in_any_order_accepted() {
        let mut lines: Vec<&str> = AMHARIC_MANIFEST.lines().collect();
        lines[1..].reverse();
        let t = load_alphabet(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(t, AlphabetTable::builtin());
    }

    #[test]
    fn csv_roundtrip() {
        let t = AlphabetTable::builtin();
        assert_eq!(load_alphabet(t.to_csv().as_bytes()).unwrap(), t);
    }

    #[test]
    fn inferred_schema() {
        let csv = "char_label,row_label,col_label,split\n1,1,1,train\n2,1,2,train\n3,2,1,val\n4,2,2,test\n";
        let t = AlphabetTable::from_reader_inferred(csv.as_bytes()).unwrap();
        assert_eq!(t.schema().split_sizes, [2, 1, 1]);
        assert_eq!((t.schema().num_rows, t.schema().num_cols), (2, 2));
        let gap = "char_label,row_label,col_label,split\n1,1,1,train\n3,2,1,val\n";
        assert!(matches!(
            AlphabetTable::from_reader_inferred(gap.as_bytes()),
            Err(AlphabetError::MissingCharacters(m)) if m == vec![2]
        ));
        assert!(AlphabetTable::from_reader_inferred(
            "char_label,row_label,col_label,split\n".as_bytes()
        )
        .is_err());
    }
}
