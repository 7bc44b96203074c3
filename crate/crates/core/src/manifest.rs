//! Dataset manifests and group splits.
//!
//! A manifest is a CSV with header `path,label,group,role`. `role` is one of
//! `pretrain`, `support`, `query`, `pretrain+query`, or `auto`; group may be
//! empty to request seeded grouping. [`build_groups`] resolves `auto` roles:
//! per group and class, `shots` clips become the labelled support set and
//! every remaining clip is used both as unlabelled pre-training material and
//! as a labelled query (`pretrain+query`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Pretrain,
    Support,
    Query,
    PretrainQuery,
    Auto,
}

impl Role {
    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "pretrain" => Ok(Role::Pretrain),
            "support" => Ok(Role::Support),
            "query" => Ok(Role::Query),
            "pretrain+query" => Ok(Role::PretrainQuery),
            "auto" | "" => Ok(Role::Auto),
            other => Err(Error::Manifest(format!(
                "unknown role `{other}` (expected pretrain|support|query|pretrain+query|auto)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Pretrain => "pretrain",
            Role::Support => "support",
            Role::Query => "query",
            Role::PretrainQuery => "pretrain+query",
            Role::Auto => "auto",
        }
    }

    pub fn is_pretrain(&self) -> bool {
        matches!(self, Role::Pretrain | Role::PretrainQuery)
    }

    pub fn is_query(&self) -> bool {
        matches!(self, Role::Query | Role::PretrainQuery)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    pub label: String,
    pub group: String,
    pub role: Role,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawEntry {
    path: String,
    label: String,
    group: String,
    role: String,
}

impl Manifest {
    pub fn from_entries(entries: Vec<Entry>) -> Result<Manifest> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate path `{}`", e.path)));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Manifest(format!(
                "cannot open manifest {}: {e}",
                path.display()
            )),
            _ => Error::Manifest(e.to_string()),
        })?;
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<RawEntry>().enumerate() {
            let raw = row.map_err(|e| {
                Error::Manifest(format!("{}: row {}: {e}", path.display(), i + 2))
            })?;
            let role = Role::parse(&raw.role).map_err(|e| {
                Error::Manifest(format!("{}: row {}: {e}", path.display(), i + 2))
            })?;
            entries.push(Entry {
                path: raw.path,
                label: raw.label,
                group: raw.group,
                role,
            });
        }
        Manifest::from_entries(entries)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer =
            csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
        for e in &self.entries {
            writer
                .serialize(RawEntry {
                    path: e.path.clone(),
                    label: e.label.clone(),
                    group: e.group.clone(),
                    role: e.role.as_str().to_string(),
                })
                .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

/// One group's resolved split. Entries in `pretrain` and `query` overlap by
/// design: every non-support clip pre-trains (label unused) and is also
/// evaluated as a query.
#[derive(Debug, Clone)]
pub struct GroupSplit {
    pub group: String,
    pub classes: Vec<String>,
    pub support: Vec<Entry>,
    pub pretrain: Vec<Entry>,
    pub query: Vec<Entry>,
}

impl GroupSplit {
    /// Entries of this split with their resolved role, in deterministic order.
    pub fn resolved_entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for e in &self.support {
            out.push(Entry {
                role: Role::Support,
                group: self.group.clone(),
                ..e.clone()
            });
        }
        let query_paths: std::collections::HashSet<&str> =
            self.query.iter().map(|e| e.path.as_str()).collect();
        for e in &self.pretrain {
            let role = if query_paths.contains(e.path.as_str()) {
                Role::PretrainQuery
            } else {
                Role::Pretrain
            };
            out.push(Entry {
                role,
                group: self.group.clone(),
                ..e.clone()
            });
        }
        let pretrain_paths: std::collections::HashSet<&str> =
            self.pretrain.iter().map(|e| e.path.as_str()).collect();
        for e in &self.query {
            if !pretrain_paths.contains(e.path.as_str()) {
                out.push(Entry {
                    role: Role::Query,
                    group: self.group.clone(),
                    ..e.clone()
                });
            }
        }
        out
    }
}

/// Emit resolved splits as one manifest (same schema, resolved roles).
pub fn splits_to_manifest(splits: &[GroupSplit]) -> Manifest {
    let entries = splits.iter().flat_map(|s| s.resolved_entries()).collect();
    Manifest { entries }
}

/// Partition classes into groups and resolve per-class support/rest roles.
///
/// Explicit group ids in the manifest win over seeded grouping; explicit
/// `support` roles are honored and topped up from `auto` entries. Each class
/// needs strictly more than `shots` clips.
pub fn build_groups(
    manifest: &Manifest,
    classes_per_group: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<GroupSplit>> {
    if classes_per_group == 0 {
        return Err(Error::Config("classes_per_group must be positive".into()));
    }

    // Class -> entries, insertion-ordered within class, classes sorted by name.
    let mut by_class: BTreeMap<String, Vec<Entry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(e.label.clone()).or_default().push(e.clone());
    }
    for (class, entries) in &by_class {
        if entries.len() <= shots {
            return Err(Error::InsufficientData {
                class: class.clone(),
                have: entries.len(),
                need: shots,
            });
        }
    }

    // Class-level group assignment.
    let mut explicit: BTreeMap<String, Vec<String>> = BTreeMap::new(); // group -> classes
    let mut unassigned: Vec<String> = Vec::new();
    for (class, entries) in &by_class {
        let mut groups: Vec<&str> = entries
            .iter()
            .map(|e| e.group.as_str())
            .filter(|g| !g.is_empty())
            .collect();
        groups.sort_unstable();
        groups.dedup();
        match groups.len() {
            0 => unassigned.push(class.clone()),
            1 => explicit
                .entry(groups[0].to_string())
                .or_default()
                .push(class.clone()),
            _ => {
                return Err(Error::Manifest(format!(
                    "class `{class}` is assigned to multiple groups: {groups:?}"
                )))
            }
        }
    }

    let mut rng = rng_for(seed, "grouping", 0);
    shuffle(&mut unassigned, &mut rng);

    let mut groups: Vec<(String, Vec<String>)> =
        explicit.into_iter().collect();
    let mut next_id = 1usize;
    for chunk in unassigned.chunks(classes_per_group) {
        let name = loop {
            let candidate = format!("G{next_id}");
            next_id += 1;
            if !groups.iter().any(|(g, _)| *g == candidate) {
                break candidate;
            }
        };
        groups.push((name, chunk.to_vec()));
    }

    let mut splits = Vec::new();
    for (group, mut classes) in groups {
        classes.sort_unstable();
        let mut support = Vec::new();
        let mut pretrain = Vec::new();
        let mut query = Vec::new();
        for class in &classes {
            let entries = &by_class[class];
            let explicit_support: Vec<&Entry> = entries
                .iter()
                .filter(|e| e.role == Role::Support)
                .collect();
            if explicit_support.len() > shots {
                return Err(Error::Manifest(format!(
                    "class `{class}` marks {} support clips but shots={shots}",
                    explicit_support.len()
                )));
            }
            let mut chosen: Vec<Entry> =
                explicit_support.iter().map(|e| (*e).clone()).collect();
            let mut candidates: Vec<&Entry> = entries
                .iter()
                .filter(|e| e.role == Role::Auto)
                .collect();
            let needed = shots - chosen.len();
            if candidates.len() < needed {
                return Err(Error::InsufficientData {
                    class: class.clone(),
                    have: explicit_support.len() + candidates.len(),
                    need: shots,
                });
            }
            let mut pick = rng_for(seed, "support", hash_class(&group, class));
            shuffle(&mut candidates, &mut pick);
            chosen.extend(candidates[..needed].iter().map(|e| (*e).clone()));
            let chosen_paths: std::collections::HashSet<&str> =
                chosen.iter().map(|e| e.path.as_str()).collect();
            // Manifest order for the rest keeps emission deterministic.
            for e in entries {
                if chosen_paths.contains(e.path.as_str()) {
                    continue;
                }
                match e.role {
                    Role::Pretrain => pretrain.push(e.clone()),
                    Role::Query => query.push(e.clone()),
                    _ => {
                        pretrain.push(e.clone());
                        query.push(e.clone());
                    }
                }
            }
            support.extend(chosen);
        }
        splits.push(GroupSplit {
            group,
            classes,
            support,
            pretrain,
            query,
        });
    }
    splits.sort_by(|a, b| a.group.cmp(&b.group));
    Ok(splits)
}

fn hash_class(group: &str, class: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in group.bytes().chain([0u8]).chain(class.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn shuffle<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest(classes: usize, clips: usize) -> Manifest {
        let mut entries = Vec::new();
        for c in 0..classes {
            for k in 0..clips {
                entries.push(Entry {
                    path: format!("clips/c{c}_{k}.wav"),
                    label: format!("class{c}"),
                    group: String::new(),
                    role: Role::Auto,
                });
            }
        }
        Manifest::from_entries(entries).unwrap()
    }

    #[test]
    fn five_classes_forty_clips_split_counts() {
        let m = toy_manifest(5, 40);
        let splits = build_groups(&m, 5, 5, 7).unwrap();
        assert_eq!(splits.len(), 1);
        let s = &splits[0];
        assert_eq!(s.support.len(), 25);
        assert_eq!(s.pretrain.len(), 175);
        assert_eq!(s.query.len(), 175);
    }

    #[test]
    fn zero_shots_leaves_all_clips_unlabelled() {
        let m = toy_manifest(2, 4);
        let splits = build_groups(&m, 2, 0, 7).unwrap();
        assert!(splits[0].support.is_empty());
        assert_eq!(splits[0].pretrain.len(), 8);
        assert_eq!(splits[0].query.len(), 8);
    }

    #[test]
    fn class_at_shots_boundary_errors() {
        let m = toy_manifest(1, 5);
        match build_groups(&m, 1, 5, 7) {
            Err(Error::InsufficientData { class, .. }) => {
                assert_eq!(class, "class0");
            }
            other => panic!("expected insufficient-data error, got {other:?}"),
        }
    }

    #[test]
    fn support_and_pretrain_are_disjoint_and_cover() {
        let m = toy_manifest(4, 9);
        let splits = build_groups(&m, 2, 3, 11).unwrap();
        assert_eq!(splits.len(), 2);
        for s in &splits {
            let support: std::collections::HashSet<&str> =
                s.support.iter().map(|e| e.path.as_str()).collect();
            let pretrain: std::collections::HashSet<&str> =
                s.pretrain.iter().map(|e| e.path.as_str()).collect();
            let query: std::collections::HashSet<&str> =
                s.query.iter().map(|e| e.path.as_str()).collect();
            assert!(support.is_disjoint(&pretrain));
            let mut covered = support.clone();
            covered.extend(&pretrain);
            covered.extend(&query);
            let expected: std::collections::HashSet<&str> = m
                .entries
                .iter()
                .filter(|e| s.classes.contains(&e.label))
                .map(|e| e.path.as_str())
                .collect();
            assert_eq!(covered, expected);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_manifests(){
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(6, 8);
        for run in 0..2 {
            let splits = build_groups(&m, 3, 2, 99).unwrap();
            splits_to_manifest(&splits)
                .write(dir.path().join(format!("run{run}.csv")))
                .unwrap();
        }
        let a = std::fs::read(dir.path().join("run0.csv")).unwrap();
        let b = std::fs::read(dir.path().join("run1.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn explicit_groups_override_seeded_grouping() {
        let mut m = toy_manifest(4, 3);
        for e in &mut m.entries {
            if e.label == "class0" || e.label == "class2" {
                e.group = "even".into();
            }
        }
        let splits = build_groups(&m, 2, 1, 0).unwrap();
        let even = splits.iter().find(|s| s.group == "even").unwrap();
        assert_eq!(even.classes, vec!["class0".to_string(), "class2".to_string()]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let entries = vec![
            Entry {
                path: "a.wav".into(),
                label: "x".into(),
                group: String::new(),
                role: Role::Auto,
            };
            2
        ];
        assert!(Manifest::from_entries(entries).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = toy_manifest(2, 3);
        m.write(&path).unwrap();
        let r = Manifest::read(&path).unwrap();
        assert_eq!(m.entries, r.entries);
    }

    #[test]
    fn unknown_role_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "path,label,group,role\na.wav,x,,bogus\n").unwrap();
        match Manifest::read(&path) {
            Err(Error::Manifest(msg)) => assert!(msg.contains("bogus"), "{msg}"),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
}
