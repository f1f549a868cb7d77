//! Review of synthetic candidates with an append-only decision log.
//!
//! The effective status of an image is its latest decision, or its manifest
//! status when it has none. Decisions never change in place; a correction is a
//! new decision whose `supersedes` names the latest decision for that image,
//! so each image's history is a linear chain.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::manifest::{CurationStatus, ImageRecord, Manifest, ManifestError, Provenance};

pub const DECISIONS_FILE: &str = "decisions.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn status(self) -> CurationStatus {
        match self {
            Decision::Accept => CurationStatus::Accepted,
            Decision::Reject => CurationStatus::Rejected,
        }
    }
}

/// A decision as submitted by a reviewer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub image_id: String,
    pub decision: Decision,
    pub reviewer: String,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub supersedes: Option<String>,
}

/// A decision as stored in the audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub id: String,
    pub image_id: String,
    pub decision: Decision,
    pub reviewer: String,
    #[serde(default)]
    pub note: Option<String>,
    pub decided_at: DateTime<Utc>,
    #[serde(default)]
    pub supersedes: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueueState {
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub total: usize,
}

impl ReviewQueueState {
    fn add(&mut self, status: CurationStatus) {
        self.total += 1;
        match status {
            CurationStatus::Pending => self.pending += 1,
            CurationStatus::Accepted => self.accepted += 1,
            CurationStatus::Rejected => self.rejected += 1,
            CurationStatus::NotApplicable => {
                unreachable!("synthetic records are never not_applicable")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptProgress {
    pub prompt_id: String,
    #[serde(flatten)]
    pub state: ReviewQueueState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    #[serde(flatten)]
    pub state: ReviewQueueState,
    pub per_prompt: Vec<PromptProgress>,
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("image `{0}` is not synthetic")]
    NotSynthetic(String),
    #[error("invalid supersedes reference: {0}")]
    Supersedes(String),
    #[error("reviewer must be non-empty")]
    MissingReviewer,
    #[error("{pending} images are still pending review")]
    PendingRemaining { pending: usize },
    #[error("only {accepted} images accepted, target is {target} (short by {shortfall})")]
    Shortfall {
        accepted: usize,
        target: usize,
        shortfall: usize,
    },
    #[error("the manifest contains no synthetic images to review")]
    NoSynthetics,
    #[error("decision log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CurationError {
    /// Machine-readable error code for API responses.
    pub fn code(&self) -> &'static str {
        match self {
            CurationError::UnknownImage(_) => "unknown_image",
            CurationError::NotSynthetic(_) => "not_synthetic",
            CurationError::Supersedes(_) => "invalid_supersedes",
            CurationError::MissingReviewer => "missing_reviewer",
            CurationError::PendingRemaining { .. } => "pending_remaining",
            CurationError::Shortfall { .. } => "shortfall",
            CurationError::NoSynthetics => "no_synthetics",
            CurationError::Log { .. } => "corrupt_log",
            CurationError::Manifest(_) => "manifest",
            CurationError::Io(_) | CurationError::Json(_) => "io",
        }
    }
}

pub struct CurationService {
    manifest: Manifest,
    image_root: PathBuf,
    log: Vec<ReviewDecision>,
    /// image id -> index of its latest decision in `log`.
    latest: HashMap<String, usize>,
    log_path: Option<PathBuf>,
    /// Synthetic record indices ordered by (prompt_id, seed, id).
    queue_order: Vec<usize>,
}

impl CurationService {
    /// In-memory service over `manifest`; image paths resolve against `image_root`.
    pub fn new(manifest: Manifest, image_root: impl Into<PathBuf>) -> Self {
        let recs = manifest.records();
        let mut queue_order: Vec<usize> = (0..recs.len())
            .filter(|&i| recs[i].provenance == Provenance::Synthetic)
            .collect();
        queue_order.sort_by(|&a, &b| {
            let key = |r: &ImageRecord| (r.prompt_id.clone(), r.seed, r.id.clone());
            key(&recs[a]).cmp(&key(&recs[b]))
        });
        Self {
            manifest,
            image_root: image_root.into(),
            log: Vec::new(),
            latest: HashMap::new(),
            log_path: None,
            queue_order,
        }
    }

    /// Rebuild state by folding `decisions` over `manifest`.
    pub fn replay(manifest: Manifest, decisions: &[ReviewDecision]) -> Result<Self, CurationError> {
        let mut s = Self::new(manifest, PathBuf::new());
        for d in decisions {
            s.check(&d.image_id, d.supersedes.as_deref())?;
            s.apply(d.clone());
        }
        Ok(s)
    }

    /// Service backed by `log_path`: existing decisions are replayed and new
    /// ones are appended to it.
    pub fn open(
        manifest: Manifest,
        image_root: impl Into<PathBuf>,
        log_path: &Path,
    ) -> Result<Self, CurationError> {
        let decisions = if log_path.exists() {
            read_log(log_path)?
        } else {
            Vec::new()
        };
        let mut s = Self::replay(manifest, &decisions)?;
        s.image_root = image_root.into();
        s.log_path = Some(log_path.to_path_buf());
        Ok(s)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn log(&self) -> &[ReviewDecision] {
        &self.log
    }

    pub fn synthetic_count(&self) -> usize {
        self.queue_order.len()
    }

    fn record_status(&self, r: &ImageRecord) -> CurationStatus {
        match self.latest.get(&r.id) {
            Some(&i) => self.log[i].decision.status(),
            None => r.curation_status,
        }
    }

    pub fn status(&self, image_id: &str) -> Option<CurationStatus> {
        self.manifest.get(image_id).map(|r| self.record_status(r))
    }

    /// The record with its effective curation status.
    pub fn record(&self, image_id: &str) -> Option<ImageRecord> {
        self.manifest.get(image_id).map(|r| {
            let mut r = r.clone();
            r.curation_status = self.record_status(&r);
            r
        })
    }

    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        self.manifest
            .get(image_id)
            .map(|r| crate::manifest::resolve_path(&self.image_root, &r.path))
    }

    /// First pending synthetic record in (prompt_id, seed) order.
    pub fn next_pending(&self, prompt_id: Option<&str>) -> Option<ImageRecord> {
        let recs = self.manifest.records();
        self.queue_order
            .iter()
            .map(|&i| &recs[i])
            .filter(|r| prompt_id.is_none_or(|p| r.prompt_id.as_deref() == Some(p)))
            .find(|r| self.record_status(r) == CurationStatus::Pending)
            .map(|r| {
                let mut r = r.clone();
                r.curation_status = CurationStatus::Pending;
                r
            })
    }

    pub fn state(&self) -> ReviewQueueState {
        let mut s = ReviewQueueState::default();
        for &i in &self.queue_order {
            s.add(self.record_status(&self.manifest.records()[i]));
        }
        s
    }

    pub fn progress(&self) -> Progress {
        let mut per: BTreeMap<String, ReviewQueueState> = BTreeMap::new();
        for &i in &self.queue_order {
            let r = &self.manifest.records()[i];
            per.entry(r.prompt_id.clone().unwrap_or_default())
                .or_default()
                .add(self.record_status(r));
        }
        Progress {
            state: self.state(),
            per_prompt: per
                .into_iter()
                .map(|(prompt_id, state)| PromptProgress { prompt_id, state })
                .collect(),
        }
    }

    fn check(&self, image_id: &str, supersedes: Option<&str>) -> Result<(), CurationError> {
        let r = self
            .manifest
            .get(image_id)
            .ok_or_else(|| CurationError::UnknownImage(image_id.to_string()))?;
        if r.provenance != Provenance::Synthetic {
            return Err(CurationError::NotSynthetic(image_id.to_string()));
        }
        let current = self.latest.get(image_id).map(|&i| self.log[i].id.as_str());
        match (current, supersedes) {
            (None, None) => Ok(()),
            (Some(cur), Some(s)) if cur == s => Ok(()),
            (None, Some(s)) => Err(CurationError::Supersedes(format!(
                "image `{image_id}` has no earlier decision, but supersedes `{s}` was given"
            ))),
            (Some(cur), None) => Err(CurationError::Supersedes(format!(
                "image `{image_id}` was already decided by `{cur}`; a correction must supersede it"
            ))),
            (Some(cur), Some(s)) => Err(CurationError::Supersedes(format!(
                "`{s}` is not the latest decision for `{image_id}` (latest is `{cur}`)"
            ))),
        }
    }

    fn apply(&mut self, d: ReviewDecision) {
        self.latest.insert(d.image_id.clone(), self.log.len());
        self.log.push(d);
    }

    /// Validate and append a decision, returning the updated counts.
    pub fn record_decision(
        &mut self,
        req: DecisionRequest,
    ) -> Result<ReviewQueueState, CurationError> {
        self.record_decision_at(req, Utc::now())
            .map(|_| self.state())
    }

    /// Like [`record_decision`](Self::record_decision) with an explicit
    /// timestamp; returns the stored decision.
    pub fn record_decision_at(
        &mut self,
        req: DecisionRequest,
        decided_at: DateTime<Utc>,
    ) -> Result<ReviewDecision, CurationError> {
        if req.reviewer.trim().is_empty() {
            return Err(CurationError::MissingReviewer);
        }
        self.check(&req.image_id, req.supersedes.as_deref())?;
        let d = ReviewDecision {
            id: format!("dec-{:06}", self.log.len() + 1),
            image_id: req.image_id,
            decision: req.decision,
            reviewer: req.reviewer,
            note: req.note,
            decided_at,
            supersedes: req.supersedes,
        };
        if let Some(path) = &self.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(&d)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        self.apply(d.clone());
        Ok(d)
    }

    /// The manifest with every record's effective status.
    pub fn effective_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        for r in self.manifest.records() {
            let mut r = r.clone();
            r.curation_status = self.record_status(&r);
            m.push(r)
                .expect("statuses from decisions keep records valid");
        }
        m
    }

    /// Accepted synthetic records, once nothing is pending and at least
    /// `target_accepted` were accepted.
    pub fn finalize(&self, target_accepted: usize) -> Result<Manifest, CurationError> {
        let s = self.state();
        if s.total == 0 {
            return Err(CurationError::NoSynthetics);
        }
        if s.pending > 0 {
            return Err(CurationError::PendingRemaining { pending: s.pending });
        }
        if s.accepted < target_accepted {
            return Err(CurationError::Shortfall {
                accepted: s.accepted,
                target: target_accepted,
                shortfall: target_accepted - s.accepted,
            });
        }
        Ok(self.effective_manifest().filter(|r| {
            r.provenance == Provenance::Synthetic && r.curation_status == CurationStatus::Accepted
        }))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<ReviewDecision>, CurationError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CurationError::Log {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ClassLabel;

    fn manifest(n: usize) -> Manifest {
        let mut recs: Vec<ImageRecord> = (0..n)
            .map(|i| {
                ImageRecord::synthetic(
                    format!("s{i}"),
                    format!("{i}.png"),
                    format!("p{}", i % 3),
                    i as u64,
                )
            })
            .collect();
        recs.push(ImageRecord::real("r0", "r0.png", ClassLabel::Negative));
        Manifest::from_records(recs).unwrap()
    }

    fn req(id: &str, d: Decision, sup: Option<&str>) -> DecisionRequest {
        DecisionRequest {
            image_id: id.into(),
            decision: d,
            reviewer: "dr".into(),
            note: None,
            supersedes: sup.map(str::to_string),
        }
    }

    #[test]
    fn queue_is_ordered_by_prompt_then_seed() {
        let s = CurationService::new(manifest(6), ".");
        assert_eq!(s.next_pending(None).unwrap().id, "s0");
        assert_eq!(s.next_pending(Some("p2")).unwrap().id, "s2");
        assert!(s.next_pending(Some("nope")).is_none());
    }

    #[test]
    fn correction_chain() {
        let mut s = CurationService::new(manifest(2), ".");
        s.record_decision(req("s0", Decision::Accept, None))
            .unwrap();
        assert!(matches!(
            s.record_decision(req("s0", Decision::Reject, None)),
            Err(CurationError::Supersedes(_))
        ));
        s.record_decision(req("s0", Decision::Reject, Some("dec-000001")))
            .unwrap();
        assert_eq!(s.status("s0"), Some(CurationStatus::Rejected));
        assert_eq!(s.log().len(), 2);
        assert!(matches!(
            s.record_decision(req("s0", Decision::Accept, Some("dec-000001"))),
            Err(CurationError::Supersedes(_))
        ));
    }

    #[test]
    fn invalid_targets_leave_the_log_unchanged() {
        let mut s = CurationService::new(manifest(2), ".");
        assert!(matches!(
            s.record_decision(req("zz", Decision::Accept, None)),
            Err(CurationError::UnknownImage(_))
        ));
        assert!(matches!(
            s.record_decision(req("r0", Decision::Accept, None)),
            Err(CurationError::NotSynthetic(_))
        ));
        assert!(matches!(
            s.record_decision(req("s1", Decision::Accept, Some("dec-000009"))),
            Err(CurationError::Supersedes(_))
        ));
        assert!(s.log().is_empty());
    }

    #[test]
    fn finalize_requires_empty_queue() {
        let mut s = CurationService::new(manifest(2), ".");
        s.record_decision(req("s0", Decision::Accept, None))
            .unwrap();
        assert!(matches!(
            s.finalize(1),
            Err(CurationError::PendingRemaining { pending: 1 })
        ));
        s.record_decision(req("s1", Decision::Reject, None))
            .unwrap();
        let m = s.finalize(1).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records()[0].id, "s0");
        assert!(matches!(
            s.finalize(2),
            Err(CurationError::Shortfall { shortfall: 1, .. })
        ));
    }

    #[test]
    fn file_backed_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join(DECISIONS_FILE);
        {
            let mut s = CurationService::open(manifest(3), dir.path(), &log).unwrap();
            s.record_decision(req("s0", Decision::Accept, None))
                .unwrap();
            s.record_decision(req("s1", Decision::Reject, None))
                .unwrap();
        }
        let s = CurationService::open(manifest(3), dir.path(), &log).unwrap();
        assert_eq!(
            s.state(),
            ReviewQueueState {
                pending: 1,
                accepted: 1,
                rejected: 1,
                total: 3
            }
        );
        assert_eq!(s.image_path("s1").unwrap(), dir.path().join("1.png"));
    }
}
