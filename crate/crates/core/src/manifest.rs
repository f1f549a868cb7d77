//! Dataset records, the JSON Lines manifest format, and split assembly.
//!
//! A manifest file is UTF-8 JSON Lines. An optional first line
//! `{"schema_version": N}` carries the format version; every other line is one
//! [`ImageRecord`]. Fields the toolkit does not know about are kept in
//! [`ImageRecord::extra`] and written back unchanged.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use synthvision_nn::rng;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Positive,
    Negative,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Positive, ClassLabel::Negative];

    /// Index used by the classifier head: positive = 1, negative = 0.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Negative => 0,
            ClassLabel::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            ClassLabel::Positive
        } else {
            ClassLabel::Negative
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unassigned];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub const ALL: [Provenance; 2] = [Provenance::Real, Provenance::Synthetic];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationStatus {
    NotApplicable,
    Pending,
    Accepted,
    Rejected,
}

impl CurationStatus {
    pub const ALL: [CurationStatus; 4] = [
        CurationStatus::NotApplicable,
        CurationStatus::Pending,
        CurationStatus::Accepted,
        CurationStatus::Rejected,
    ];
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().unwrap_or_default())
            }
        }
    )*};
}
display_via_serde!(ClassLabel, Split, Provenance, CurationStatus);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the data root.
    pub path: String,
    pub class_label: ClassLabel,
    pub split: Split,
    pub provenance: Provenance,
    #[serde(default)]
    pub prompt_id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub curation_status: CurationStatus,
    pub created_at: DateTime<Utc>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ImageRecord {
    pub fn real(id: impl Into<String>, path: impl Into<String>, class_label: ClassLabel) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            class_label,
            split: Split::Unassigned,
            provenance: Provenance::Real,
            prompt_id: None,
            seed: None,
            curation_status: CurationStatus::NotApplicable,
            created_at: Utc::now(),
            extra: Default::default(),
        }
    }

    /// A freshly generated candidate: positive, unassigned, pending review.
    pub fn synthetic(
        id: impl Into<String>,
        path: impl Into<String>,
        prompt_id: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            class_label: ClassLabel::Positive,
            split: Split::Unassigned,
            provenance: Provenance::Synthetic,
            prompt_id: Some(prompt_id.into()),
            seed: Some(seed),
            curation_status: CurationStatus::Pending,
            created_at: Utc::now(),
            extra: Default::default(),
        }
    }

    /// Field-level invariants; the message names what is violated.
    pub fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        if self.path.is_empty() {
            return Err("path must be non-empty".into());
        }
        match self.provenance {
            Provenance::Real if self.curation_status != CurationStatus::NotApplicable => {
                Err(format!(
                    "provenance=real requires curation_status=not_applicable, found {}",
                    self.curation_status
                ))
            }
            Provenance::Synthetic if self.curation_status == CurationStatus::NotApplicable => Err(
                "provenance=synthetic requires curation_status in {pending, accepted, rejected}"
                    .into(),
            ),
            Provenance::Synthetic if self.prompt_id.is_none() || self.seed.is_none() => {
                Err("provenance=synthetic requires prompt_id and seed".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id `{id}` (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("record `{id}`: {message}")]
    Invariant { id: String, message: String },
    #[error("record `{id}`: file not found at {path}")]
    MissingFile { id: String, path: String },
    #[error("unsupported schema_version {0}")]
    UnsupportedSchema(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Deserialize)]
struct SchemaHeader {
    schema_version: u32,
}

impl Manifest {
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_records(
        records: impl IntoIterator<Item = ImageRecord>,
    ) -> Result<Self, ManifestError> {
        let mut m = Self::new();
        for r in records {
            m.push(r)?;
        }
        Ok(m)
    }

    /// Append a record after checking its invariants and id uniqueness.
    pub fn push(&mut self, record: ImageRecord) -> Result<(), ManifestError> {
        self.push_at(record, self.records.len() + 1)
    }

    fn push_at(&mut self, record: ImageRecord, line: usize) -> Result<(), ManifestError> {
        record.check().map_err(|message| ManifestError::Invariant {
            id: record.id.clone(),
            message,
        })?;
        if self.index.contains_key(&record.id) {
            return Err(ManifestError::DuplicateId {
                id: record.id,
                line,
            });
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Replace the curation status of an existing record, re-checking invariants.
    pub fn set_status(&mut self, id: &str, status: CurationStatus) -> Result<(), ManifestError> {
        let i = *self.index.get(id).ok_or_else(|| ManifestError::Invariant {
            id: id.to_string(),
            message: "unknown id".into(),
        })?;
        let mut r = self.records[i].clone();
        r.curation_status = status;
        r.check().map_err(|message| ManifestError::Invariant {
            id: id.to_string(),
            message,
        })?;
        self.records[i] = r;
        Ok(())
    }

    /// Merge another manifest's records into this one.
    pub fn extend(&mut self, other: &Manifest) -> Result<(), ManifestError> {
        for r in other.records() {
            self.push(r.clone())?;
        }
        Ok(())
    }

    pub fn filter(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Manifest {
        let mut m = Manifest::new();
        for r in self.records.iter().filter(|r| keep(r)) {
            m.push(r.clone())
                .expect("subset of a valid manifest is valid");
        }
        m
    }

    pub fn split(&self, split: Split) -> Manifest {
        self.filter(|r| r.split == split)
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            let is_header = value.get("schema_version").is_some() && value.get("id").is_none();
            if is_header {
                if !m.records.is_empty() {
                    return Err(ManifestError::Parse {
                        line: lineno,
                        message: "schema header must be the first line".into(),
                    });
                }
                let h: SchemaHeader =
                    serde_json::from_value(value).map_err(|e| ManifestError::Parse {
                        line: lineno,
                        message: e.to_string(),
                    })?;
                if h.schema_version > SCHEMA_VERSION {
                    return Err(ManifestError::UnsupportedSchema(h.schema_version));
                }
                m.schema_version = h.schema_version;
                continue;
            }
            let record: ImageRecord =
                serde_json::from_value(value).map_err(|e| ManifestError::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            m.push_at(record, lineno)?;
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({ "schema_version": self.schema_version }).to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Atomically write the manifest as JSON Lines.
    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        synthvision_nn::checkpoint::write_atomic(path, self.to_jsonl().as_bytes()).map_err(|e| {
            match e {
                synthvision_nn::NnError::Io(io) => ManifestError::Io(io),
                other => ManifestError::Io(std::io::Error::other(other.to_string())),
            }
        })
    }

    /// Check that every record's path exists under `data_root`.
    pub fn validate_paths(&self, data_root: &Path) -> Result<(), ManifestError> {
        for r in &self.records {
            if !data_root.join(&r.path).is_file() {
                return Err(ManifestError::MissingFile {
                    id: r.id.clone(),
                    path: data_root.join(&r.path).display().to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Resolve a record path against `base` (absolute paths pass through).
pub fn resolve_path(base: &Path, record_path: &str) -> std::path::PathBuf {
    base.join(record_path)
}

impl Manifest {
    /// Rewrite relative record paths as `base.join(path)`.
    pub fn absolutize(&mut self, base: &Path) {
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        for r in &mut self.records {
            r.path = resolve_path(&base, &r.path).to_string_lossy().into_owned();
        }
    }
}

/// Requested record counts per (split, class).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_pos: usize,
    pub train_neg: usize,
    pub val_pos: usize,
    pub val_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
}

impl SplitSpec {
    /// Full-scale composition: 500/500 train, 50/50 val, 70/70 test.
    pub const FULL: SplitSpec = SplitSpec {
        train_pos: 500,
        train_neg: 500,
        val_pos: 50,
        val_neg: 50,
        test_pos: 70,
        test_neg: 70,
    };

    pub fn count(&self, split: Split, class: ClassLabel) -> usize {
        match (split, class) {
            (Split::Train, ClassLabel::Positive) => self.train_pos,
            (Split::Train, ClassLabel::Negative) => self.train_neg,
            (Split::Val, ClassLabel::Positive) => self.val_pos,
            (Split::Val, ClassLabel::Negative) => self.val_neg,
            (Split::Test, ClassLabel::Positive) => self.test_pos,
            (Split::Test, ClassLabel::Negative) => self.test_neg,
            (Split::Unassigned, _) => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.train_pos
            + self.train_neg
            + self.val_pos
            + self.val_neg
            + self.test_pos
            + self.test_neg
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("need {required} accepted synthetic positives for train, have {available} (short by {shortfall})")]
    InsufficientAcceptedSynthetics {
        required: usize,
        available: usize,
        shortfall: usize,
    },
    #[error(
        "need {required} real {class} records for {split}, have {available} (short by {shortfall})"
    )]
    InsufficientReal {
        split: Split,
        class: ClassLabel,
        required: usize,
        available: usize,
        shortfall: usize,
    },
    #[error("cross-split leak: {0}")]
    CrossSplitLeak(String),
}

/// Assign train/val/test splits according to `spec`.
///
/// Train positives are drawn only from accepted synthetic records; every other
/// slot is drawn from real records. A real record that already carries a split
/// is reserved for that split and is preferred over unassigned records. Records
/// that are not selected come back with `split = unassigned`. Selection among
/// surplus candidates is a seeded shuffle, so the result is reproducible.
pub fn build_training_set(
    manifest: &Manifest,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Manifest, BuildError> {
    for r in manifest.records() {
        if r.provenance == Provenance::Synthetic && matches!(r.split, Split::Val | Split::Test) {
            return Err(BuildError::CrossSplitLeak(format!(
                "synthetic record `{}` is assigned to {}",
                r.id, r.split
            )));
        }
    }

    let records = manifest.records();
    let synthetic_pool: Vec<usize> = (0..records.len())
        .filter(|&i| {
            let r = &records[i];
            r.provenance == Provenance::Synthetic
                && r.curation_status == CurationStatus::Accepted
                && r.class_label == ClassLabel::Positive
        })
        .collect();
    if synthetic_pool.len() < spec.train_pos {
        return Err(BuildError::InsufficientAcceptedSynthetics {
            required: spec.train_pos,
            available: synthetic_pool.len(),
            shortfall: spec.train_pos - synthetic_pool.len(),
        });
    }

    let mut rng = rng::stream(seed, rng::label("dataset.split"));
    let mut assigned: Vec<Split> = vec![Split::Unassigned; records.len()];
    let mut taken = vec![false; records.len()];

    let real_slots = [
        (Split::Test, ClassLabel::Positive),
        (Split::Test, ClassLabel::Negative),
        (Split::Val, ClassLabel::Positive),
        (Split::Val, ClassLabel::Negative),
        (Split::Train, ClassLabel::Negative),
    ];
    for (split, class) in real_slots {
        let want = spec.count(split, class);
        let eligible = |i: usize, pinned: bool| {
            let r = &records[i];
            !taken[i]
                && r.provenance == Provenance::Real
                && r.class_label == class
                && if pinned {
                    r.split == split
                } else {
                    r.split == Split::Unassigned
                }
        };
        let mut pinned: Vec<usize> = (0..records.len()).filter(|&i| eligible(i, true)).collect();
        let mut free: Vec<usize> = (0..records.len()).filter(|&i| eligible(i, false)).collect();
        pinned.shuffle(&mut rng);
        free.shuffle(&mut rng);
        let available = pinned.len() + free.len();
        if available < want {
            return Err(BuildError::InsufficientReal {
                split,
                class,
                required: want,
                available,
                shortfall: want - available,
            });
        }
        for i in pinned.into_iter().chain(free).take(want) {
            taken[i] = true;
            assigned[i] = split;
        }
    }

    let mut pool = synthetic_pool;
    pool.shuffle(&mut rng);
    for i in pool.into_iter().take(spec.train_pos) {
        taken[i] = true;
        assigned[i] = Split::Train;
    }

    let mut by_path: HashMap<&str, Split> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if assigned[i] == Split::Unassigned {
            continue;
        }
        if let Some(prev) = by_path.insert(r.path.as_str(), assigned[i]) {
            if prev != assigned[i] {
                return Err(BuildError::CrossSplitLeak(format!(
                    "file {} would appear in both {prev} and {}",
                    r.path, assigned[i]
                )));
            }
        }
    }

    let mut out = Manifest::new();
    for (i, r) in records.iter().enumerate() {
        let mut r = r.clone();
        r.split = assigned[i];
        out.push(r).expect("records of a valid manifest stay valid");
    }
    Ok(out)
}

/// Count key: (split, class, provenance, curation status).
pub type StatKey = (Split, ClassLabel, Provenance, CurationStatus);

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StatCell {
    pub split: Split,
    pub class_label: ClassLabel,
    pub provenance: Provenance,
    pub curation_status: CurationStatus,
    pub count: usize,
}

/// Exhaustive per-cell record counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    cells: BTreeMap<StatKey, usize>,
    total: usize,
}

impl DatasetStats {
    pub fn get(
        &self,
        split: Split,
        class: ClassLabel,
        prov: Provenance,
        status: CurationStatus,
    ) -> usize {
        self.cells[&(split, class, prov, status)]
    }

    /// Sum of the cells matching every `Some` filter.
    pub fn sum_where(
        &self,
        split: Option<Split>,
        class: Option<ClassLabel>,
        prov: Option<Provenance>,
        status: Option<CurationStatus>,
    ) -> usize {
        self.cells
            .iter()
            .filter(|((s, c, p, st), _)| {
                split.is_none_or(|x| x == *s)
                    && class.is_none_or(|x| x == *c)
                    && prov.is_none_or(|x| x == *p)
                    && status.is_none_or(|x| x == *st)
            })
            .map(|(_, n)| n)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn cells(&self) -> Vec<StatCell> {
        self.cells
            .iter()
            .map(
                |(&(split, class_label, provenance, curation_status), &count)| StatCell {
                    split,
                    class_label,
                    provenance,
                    curation_status,
                    count,
                },
            )
            .collect()
    }
}

impl Serialize for DatasetStats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View {
            total: usize,
            cells: Vec<StatCell>,
        }
        View {
            total: self.total,
            cells: self.cells(),
        }
        .serialize(s)
    }
}

pub fn stats(manifest: &Manifest) -> DatasetStats {
    let mut cells = BTreeMap::new();
    for split in Split::ALL {
        for class in ClassLabel::ALL {
            for prov in Provenance::ALL {
                for status in CurationStatus::ALL {
                    cells.insert((split, class, prov, status), 0);
                }
            }
        }
    }
    for r in manifest.records() {
        *cells
            .get_mut(&(r.split, r.class_label, r.provenance, r.curation_status))
            .expect("grid covers every key") += 1;
    }
    DatasetStats {
        cells,
        total: manifest.len(),
    }
}

/// Ids present in more than one of the given manifests' splits (for audits).
pub fn ids_in_multiple_splits(manifest: &Manifest) -> Vec<String> {
    let mut seen: HashMap<&str, HashSet<Split>> = HashMap::new();
    for r in manifest.records() {
        if r.split != Split::Unassigned {
            seen.entry(&r.id).or_default().insert(r.split);
        }
    }
    let mut out: Vec<String> = seen
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(id, _)| id.to_string())
        .collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(i: usize, status: CurationStatus) -> ImageRecord {
        let mut r = ImageRecord::synthetic(format!("s{i}"), format!("syn/{i}.png"), "p", i as u64);
        r.curation_status = status;
        r
    }

    fn real(i: usize, class: ClassLabel) -> ImageRecord {
        ImageRecord::real(format!("r{i}"), format!("real/{i}.png"), class)
    }

    #[test]
    fn empty_file_is_an_empty_manifest() {
        let m = Manifest::parse("").unwrap();
        assert_eq!(m.len(), 0);
        assert_eq!(m.schema_version, SCHEMA_VERSION);
    }

    #[test]
    fn single_synthetic_record_loads_as_pending() {
        let line = serde_json::to_string(&synth(0, CurationStatus::Pending)).unwrap();
        let m = Manifest::parse(&line).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records()[0].curation_status, CurationStatus::Pending);
    }

    #[test]
    fn real_pending_is_rejected_with_the_invariant_named() {
        let mut r = real(0, ClassLabel::Negative);
        r.curation_status = CurationStatus::Pending;
        let text = serde_json::to_string(&r).unwrap();
        match Manifest::parse(&text) {
            Err(ManifestError::Invariant { id, message }) => {
                assert_eq!(id, "r0");
                assert!(message.contains("provenance=real"), "{message}");
            }
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let good = serde_json::to_string(&real(0, ClassLabel::Negative)).unwrap();
        let text = format!("{good}\n{{not json\n");
        match Manifest::parse(&text) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let a = serde_json::to_string(&real(0, ClassLabel::Negative)).unwrap();
        let err = Manifest::parse(&format!("{a}\n{a}\n")).unwrap_err();
        assert!(
            matches!(err, ManifestError::DuplicateId { line: 2, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn synthetic_without_seed_is_invalid() {
        let mut r = synth(0, CurationStatus::Pending);
        r.seed = None;
        assert!(r.check().is_err());
    }

    #[test]
    fn unknown_fields_survive_a_round_trip() {
        let mut v = serde_json::to_value(real(0, ClassLabel::Negative)).unwrap();
        v["scanner"] = serde_json::json!({"model": "x"});
        let m = Manifest::parse(&v.to_string()).unwrap();
        let again = Manifest::parse(&m.to_jsonl()).unwrap();
        assert_eq!(again.records()[0].extra["scanner"]["model"], "x");
        assert_eq!(again, m);
    }

    #[test]
    fn zero_spec_builds_empty_splits() {
        let m = Manifest::from_records((0..3).map(|i| real(i, ClassLabel::Negative))).unwrap();
        let built = build_training_set(&m, &SplitSpec::default(), 0).unwrap();
        assert!(built.records().iter().all(|r| r.split == Split::Unassigned));
    }

    #[test]
    fn shortfall_of_one_accepted_synthetic() {
        let m =
            Manifest::from_records((0..499).map(|i| synth(i, CurationStatus::Accepted))).unwrap();
        let spec = SplitSpec {
            train_pos: 500,
            ..Default::default()
        };
        assert_eq!(
            build_training_set(&m, &spec, 0).unwrap_err(),
            BuildError::InsufficientAcceptedSynthetics {
                required: 500,
                available: 499,
                shortfall: 1
            }
        );
    }

    #[test]
    fn insufficient_real_names_the_slot() {
        let m = Manifest::from_records((0..3).map(|i| real(i, ClassLabel::Negative))).unwrap();
        let spec = SplitSpec {
            test_neg: 5,
            ..Default::default()
        };
        match build_training_set(&m, &spec, 0).unwrap_err() {
            BuildError::InsufficientReal {
                split, shortfall, ..
            } => {
                assert_eq!(split, Split::Test);
                assert_eq!(shortfall, 2);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn synthetic_in_test_is_a_leak() {
        let mut r = synth(0, CurationStatus::Accepted);
        r.split = Split::Test;
        let m = Manifest::from_records([r]).unwrap();
        assert!(matches!(
            build_training_set(&m, &SplitSpec::default(), 0),
            Err(BuildError::CrossSplitLeak(_))
        ));
    }

    #[test]
    fn shared_file_across_splits_is_a_leak() {
        let a = real(0, ClassLabel::Negative);
        let mut b = real(1, ClassLabel::Negative);
        b.path = a.path.clone();
        let m = Manifest::from_records([a, b]).unwrap();
        let spec = SplitSpec {
            train_neg: 1,
            test_neg: 1,
            ..Default::default()
        };
        assert!(matches!(
            build_training_set(&m, &spec, 0),
            Err(BuildError::CrossSplitLeak(_))
        ));
    }

    #[test]
    fn pinned_real_records_keep_their_split() {
        let mut recs: Vec<ImageRecord> = (0..6).map(|i| real(i, ClassLabel::Negative)).collect();
        recs[4].split = Split::Test;
        recs[5].split = Split::Test;
        let m = Manifest::from_records(recs).unwrap();
        let spec = SplitSpec {
            train_neg: 2,
            test_neg: 2,
            ..Default::default()
        };
        let built = build_training_set(&m, &spec, 9).unwrap();
        assert_eq!(built.get("r4").unwrap().split, Split::Test);
        assert_eq!(built.get("r5").unwrap().split, Split::Test);
        assert_eq!(built.split(Split::Train).len(), 2);
    }

    #[test]
    fn stats_of_empty_manifest_are_all_zero() {
        let s = stats(&Manifest::new());
        assert_eq!(s.total(), 0);
        assert_eq!(s.cells().len(), 4 * 2 * 2 * 4);
        assert!(s.cells().iter().all(|c| c.count == 0));
    }

    #[test]
    fn stats_count_rejected_synthetics() {
        let m = Manifest::from_records((0..630).map(|i| {
            synth(
                i,
                if i < 130 {
                    CurationStatus::Rejected
                } else {
                    CurationStatus::Accepted
                },
            )
        }))
        .unwrap();
        let s = stats(&m);
        let syn = |st| s.sum_where(None, None, Some(Provenance::Synthetic), Some(st));
        assert_eq!(syn(CurationStatus::Rejected), 130);
        assert_eq!(syn(CurationStatus::Accepted), 500);
        assert_eq!(s.cells().iter().map(|c| c.count).sum::<usize>(), 630);
    }
}
