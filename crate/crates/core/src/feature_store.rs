//! Ingest and persistence of per-person features.
//!
//! The feature file is line-delimited, one person per line:
//!
//! ```text
//! group_id <TAB> camera_id <TAB> person_id <TAB> depth_mean <TAB> v1,v2,...,vD
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Records sharing a
//! `(group_id, camera_id)` pair form one [`GroupSample`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::norm;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: not found", .0.display())]
    NotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: feature dimension {found} does not match {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("part count must divide dimension (D = {dim}, P = {parts})")]
    PartCount { dim: usize, parts: usize },
    #[error("line {line}: duplicate person {person_id} in group {group_id}/{camera_id}")]
    DuplicatePerson {
        line: usize,
        group_id: String,
        camera_id: String,
        person_id: String,
    },
    #[error("line {line}: non-finite feature value")]
    NonFiniteFeature { line: usize },
    #[error("line {line}: zero-norm feature vector")]
    ZeroFeature { line: usize },
    #[error("line {line}: depth must be a finite non-negative real")]
    BadDepth { line: usize },
    #[error("dataset contains no records")]
    Empty,
}

/// One person: identity, unit-norm feature and mean depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonDescriptor {
    pub person_id: String,
    feature: Vec<f64>,
    part_count: usize,
    pub depth_mean: f64,
}

impl PersonDescriptor {
    /// Normalizes `feature` to unit length.
    pub fn new(
        person_id: impl Into<String>,
        mut feature: Vec<f64>,
        depth_mean: f64,
        part_count: usize,
    ) -> Result<Self, StoreError> {
        if part_count == 0 || feature.is_empty() || feature.len() % part_count != 0 {
            return Err(StoreError::PartCount {
                dim: feature.len(),
                parts: part_count,
            });
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteFeature { line: 0 });
        }
        if !(depth_mean.is_finite() && depth_mean >= 0.0) {
            return Err(StoreError::BadDepth { line: 0 });
        }
        let n = norm(&feature);
        if n == 0.0 {
            return Err(StoreError::ZeroFeature { line: 0 });
        }
        feature.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            person_id: person_id.into(),
            feature,
            part_count,
            depth_mean,
        })
    }

    /// Builds a descriptor without normalizing or checking anything. Used to
    /// construct deliberately broken manifests for validation.
    pub fn from_raw(
        person_id: impl Into<String>,
        feature: Vec<f64>,
        depth_mean: f64,
        part_count: usize,
    ) -> Self {
        Self {
            person_id: person_id.into(),
            feature,
            part_count,
            depth_mean,
        }
    }

    pub fn feature(&self) -> &[f64] {
        &self.feature
    }

    pub fn dim(&self) -> usize {
        self.feature.len()
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn part_dim(&self) -> usize {
        self.feature.len() / self.part_count.max(1)
    }

    /// The `P` consecutive slices of the feature.
    pub fn parts(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.feature.chunks_exact(self.part_dim().max(1))
    }
}

/// Depth order with person id as tie-break.
pub fn depth_order(a: &PersonDescriptor, b: &PersonDescriptor) -> std::cmp::Ordering {
    a.depth_mean
        .total_cmp(&b.depth_mean)
        .then_with(|| a.person_id.cmp(&b.person_id))
}

/// All members of one group seen from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group_id: String,
    pub camera_id: String,
    pub members: Vec<PersonDescriptor>,
}

impl GroupSample {
    /// Sorts members into canonical depth order.
    pub fn new(
        group_id: impl Into<String>,
        camera_id: impl Into<String>,
        mut members: Vec<PersonDescriptor>,
    ) -> Self {
        members.sort_by(depth_order);
        Self {
            group_id: group_id.into(),
            camera_id: camera_id.into(),
            members,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub groups: Vec<GroupSample>,
    pub feature_dim: usize,
    pub part_count: usize,
}

impl DatasetManifest {
    pub fn part_dim(&self) -> usize {
        self.feature_dim / self.part_count.max(1)
    }

    pub fn person_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn cameras(&self) -> Vec<&str> {
        let mut cams: Vec<&str> = self.groups.iter().map(|g| g.camera_id.as_str()).collect();
        cams.sort_unstable();
        cams.dedup();
        cams
    }

    /// Groups seen by `camera_id`, in manifest order.
    pub fn view(&self, camera_id: &str) -> Vec<GroupSample> {
        self.groups
            .iter()
            .filter(|g| g.camera_id == camera_id)
            .cloned()
            .collect()
    }

    /// Serializes in the feature-file format.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "# groups={} persons={} dim={}",
            self.groups.len(),
            self.person_count(),
            self.feature_dim
        )?;
        for g in &self.groups {
            for m in &g.members {
                write!(
                    out,
                    "{}\t{}\t{}\t{:?}\t",
                    g.group_id, g.camera_id, m.person_id, m.depth_mean
                )?;
                for (k, v) in m.feature.iter().enumerate() {
                    if k > 0 {
                        out.write_all(b",")?;
                    }
                    write!(out, "{v:?}")?;
                }
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(io_err)?;
        std::fs::write(path, buf).map_err(io_err)
    }
}

/// Reads and normalizes a feature file.
pub fn load_dataset(path: &Path, part_count: usize) -> Result<DatasetManifest, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            StoreError::NotFound(path.to_path_buf())
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_dataset(&text, part_count)
}

/// Parses feature-file text. Group order is canonical (sorted by group id,
/// then camera id) so the result does not depend on record order.
pub fn parse_dataset(text: &str, part_count: usize) -> Result<DatasetManifest, StoreError> {
    let mut dim: Option<usize> = None;
    let mut groups: BTreeMap<(String, String), Vec<PersonDescriptor>> = BTreeMap::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let rec = raw.strip_suffix('\r').unwrap_or(raw);
        if rec.trim().is_empty() || rec.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = rec.split('\t').collect();
        if fields.len() != 5 {
            return Err(StoreError::Malformed {
                line,
                reason: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let (group_id, camera_id, person_id) = (fields[0], fields[1], fields[2]);
        if group_id.is_empty() || camera_id.is_empty() || person_id.is_empty() {
            return Err(StoreError::Malformed {
                line,
                reason: "empty identifier".into(),
            });
        }
        let depth: f64 = fields[3].trim().parse().map_err(|_| StoreError::Malformed {
            line,
            reason: format!("bad depth value {:?}", fields[3]),
        })?;
        let feature = fields[4]
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| StoreError::Malformed {
                line,
                reason: format!("bad feature value: {e}"),
            })?;

        let d = *dim.get_or_insert(feature.len());
        if feature.len() != d {
            return Err(StoreError::DimensionMismatch {
                line,
                expected: d,
                found: feature.len(),
            });
        }
        if part_count == 0 || d % part_count != 0 {
            return Err(StoreError::PartCount {
                dim: d,
                parts: part_count,
            });
        }
        let key = (
            group_id.to_string(),
            camera_id.to_string(),
            person_id.to_string(),
        );
        if !seen.insert(key) {
            return Err(StoreError::DuplicatePerson {
                line,
                group_id: group_id.into(),
                camera_id: camera_id.into(),
                person_id: person_id.into(),
            });
        }
        let person = PersonDescriptor::new(person_id, feature, depth, part_count).map_err(
            |e| match e {
                StoreError::NonFiniteFeature { .. } => StoreError::NonFiniteFeature { line },
                StoreError::ZeroFeature { .. } => StoreError::ZeroFeature { line },
                StoreError::BadDepth { .. } => StoreError::BadDepth { line },
                other => other,
            },
        )?;
        groups
            .entry((group_id.to_string(), camera_id.to_string()))
            .or_default()
            .push(person);
    }

    let feature_dim = dim.ok_or(StoreError::Empty)?;
    Ok(DatasetManifest {
        groups: groups
            .into_iter()
            .map(|((g, c), members)| GroupSample::new(g, c, members))
            .collect(),
        feature_dim,
        part_count,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyGroup,
    DuplicateGroupView,
    DuplicatePerson,
    UnsortedMembers,
    DimensionMismatch { expected: usize, found: usize },
    PartCountMismatch,
    NonFiniteFeature,
    NotNormalized,
    BadDepth,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyGroup => f.write_str("group has no members"),
            Self::DuplicateGroupView => f.write_str("duplicate group/camera pair"),
            Self::DuplicatePerson => f.write_str("duplicate person within group"),
            Self::UnsortedMembers => f.write_str("members not sorted by depth"),
            Self::DimensionMismatch { expected, found } => {
                write!(f, "feature dimension {found} does not match {expected}")
            }
            Self::PartCountMismatch => f.write_str("part count must divide dimension"),
            Self::NonFiniteFeature => f.write_str("non-finite feature value"),
            Self::NotNormalized => f.write_str("feature not unit norm"),
            Self::BadDepth => f.write_str("depth must be a finite non-negative real"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub group_id: String,
    pub camera_id: String,
    pub person_id: Option<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group_id, self.camera_id)?;
        if let Some(p) = &self.person_id {
            write!(f, "/{p}")?;
        }
        write!(f, ": {}", self.kind)
    }
}

/// Lists every invariant violation in `manifest`; empty when it is clean.
pub fn validate_dataset(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut report = Vec::new();
    if manifest.part_count == 0 || manifest.feature_dim % manifest.part_count != 0 {
        report.push(Violation {
            group_id: String::new(),
            camera_id: String::new(),
            person_id: None,
            kind: ViolationKind::PartCountMismatch,
        });
    }
    let mut views = HashSet::new();
    for g in &manifest.groups {
        let violation = |person: Option<&PersonDescriptor>, kind| Violation {
            group_id: g.group_id.clone(),
            camera_id: g.camera_id.clone(),
            person_id: person.map(|p| p.person_id.clone()),
            kind,
        };
        if !views.insert((&g.group_id, &g.camera_id)) {
            report.push(violation(None, ViolationKind::DuplicateGroupView));
        }
        if g.members.is_empty() {
            report.push(violation(None, ViolationKind::EmptyGroup));
        }
        if g
            .members
            .windows(2)
            .any(|w| depth_order(&w[0], &w[1]) == std::cmp::Ordering::Greater)
        {
            report.push(violation(None, ViolationKind::UnsortedMembers));
        }
        let mut ids = HashSet::new();
        for m in &g.members {
            if !ids.insert(&m.person_id) {
                report.push(violation(Some(m), ViolationKind::DuplicatePerson));
            }
            if m.dim() != manifest.feature_dim {
                report.push(violation(
                    Some(m),
                    ViolationKind::DimensionMismatch {
                        expected: manifest.feature_dim,
                        found: m.dim(),
                    },
                ));
                continue;
            }
            if m.part_count != manifest.part_count {
                report.push(violation(Some(m), ViolationKind::PartCountMismatch));
            }
            if m.feature.iter().any(|v| !v.is_finite()) {
                report.push(violation(Some(m), ViolationKind::NonFiniteFeature));
            } else if (norm(&m.feature) - 1.0).abs() > 1e-9 {
                report.push(violation(Some(m), ViolationKind::NotNormalized));
            }
            if !(m.depth_mean.is_finite() && m.depth_mean >= 0.0) {
                report.push(violation(Some(m), ViolationKind::BadDepth));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(g: &str, c: &str, p: &str, depth: f64, v: &[f64]) -> String {
        let feat: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        format!("{g}\t{c}\t{p}\t{depth}\t{}\n", feat.join(","))
    }

    #[test]
    fn members_sorted_by_depth() {
        let text = [
            rec("g1", "A", "a", 2.1, &[1.0, 0.0]),
            rec("g1", "A", "b", 0.5, &[0.0, 1.0]),
            rec("g1", "A", "c", 1.3, &[1.0, 1.0]),
        ]
        .concat();
        let m = parse_dataset(&text, 1).unwrap();
        let depths: Vec<f64> = m.groups[0].members.iter().map(|p| p.depth_mean).collect();
        assert_eq!(depths, vec![0.5, 1.3, 2.1]);
    }

    #[test]
    fn feature_is_normalized() {
        let m = parse_dataset(&rec("g", "A", "p", 1.0, &[3.0, 4.0]), 1).unwrap();
        assert_eq!(m.groups[0].members[0].feature(), &[0.6, 0.8]);
    }

    #[test]
    fn part_count_must_divide_dimension() {
        let err = parse_dataset(&rec("g", "A", "p", 1.0, &[1.0; 6]), 4).unwrap_err();
        assert!(err.to_string().contains("part count must divide dimension"));
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = format!("# header\n{}g\tA\tq\tnope\t1,2\n", rec("g", "A", "p", 1.0, &[1.0, 2.0]));
        match parse_dataset(&text, 1).unwrap_err() {
            StoreError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_and_duplicates_rejected() {
        let text = [rec("g", "A", "p", 1.0, &[1.0, 2.0]), rec("g", "A", "q", 1.0, &[1.0])].concat();
        assert!(matches!(
            parse_dataset(&text, 1),
            Err(StoreError::DimensionMismatch { line: 2, expected: 2, found: 1 })
        ));
        let text = [rec("g", "A", "p", 1.0, &[1.0, 2.0]), rec("g", "A", "p", 2.0, &[1.0, 0.0])].concat();
        assert!(matches!(parse_dataset(&text, 1), Err(StoreError::DuplicatePerson { line: 2, .. })));
        // Same person id in another camera is a different record.
        let text = [rec("g", "A", "p", 1.0, &[1.0, 2.0]), rec("g", "B", "p", 2.0, &[1.0, 0.0])].concat();
        assert_eq!(parse_dataset(&text, 1).unwrap().groups.len(), 2);
    }

    #[test]
    fn nan_is_rejected_with_line() {
        let text = rec("g", "A", "p", 1.0, &[f64::NAN, 1.0]);
        assert!(matches!(parse_dataset(&text, 1), Err(StoreError::NonFiniteFeature { line: 1 })));
    }

    #[test]
    fn depth_ties_broken_by_person_id() {
        let text = [
            rec("g", "A", "zed", 1.0, &[1.0, 0.0]),
            rec("g", "A", "amy", 1.0, &[0.0, 1.0]),
        ]
        .concat();
        let m = parse_dataset(&text, 1).unwrap();
        assert_eq!(m.groups[0].members[0].person_id, "amy");
    }

    #[test]
    fn validate_clean_manifest() {
        let text = [rec("g", "A", "a", 1.0, &[1.0, 2.0]), rec("g", "B", "b", 0.0, &[2.0, 1.0])].concat();
        assert!(validate_dataset(&parse_dataset(&text, 2).unwrap()).is_empty());
    }

    #[test]
    fn validate_reports_unsorted_group() {
        let members = vec![
            PersonDescriptor::new("a", vec![1.0, 0.0], 3.0, 1).unwrap(),
            PersonDescriptor::new("b", vec![0.0, 1.0], 1.0, 1).unwrap(),
            PersonDescriptor::new("c", vec![1.0, 1.0], 2.0, 1).unwrap(),
        ];
        let manifest = DatasetManifest {
            groups: vec![GroupSample {
                group_id: "g7".into(),
                camera_id: "A".into(),
                members,
            }],
            feature_dim: 2,
            part_count: 1,
        };
        let report = validate_dataset(&manifest);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].group_id, "g7");
        assert_eq!(report[0].kind, ViolationKind::UnsortedMembers);
    }

    #[test]
    fn validate_reports_nan() {
        let manifest = DatasetManifest {
            groups: vec![GroupSample::new(
                "g",
                "A",
                vec![PersonDescriptor::from_raw("p", vec![f64::NAN, 0.0], 1.0, 1)],
            )],
            feature_dim: 2,
            part_count: 1,
        };
        let report = validate_dataset(&manifest);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].kind.to_string(), "non-finite feature value");
    }
}
