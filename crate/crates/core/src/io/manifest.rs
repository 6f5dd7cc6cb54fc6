//! JSON-lines dataset manifests.
//!
//! Each line is either an image entry
//! `{"id": "...", "label": 3, "split": "train", "resolution": 336, "path": "a/b.msvf"}`
//! or a relevance record `{"query": "...", "positives": [...], "junk": [...]}`.
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::io::tensor::read_tensor_shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: i64,
    pub split: Split,
    pub resolution: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relevance {
    pub positives: BTreeSet<String>,
    #[serde(default)]
    pub junk: BTreeSet<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelevanceLine {
    query: String,
    positives: Vec<String>,
    #[serde(default)]
    junk: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Relevance(RelevanceLine),
    Entry(ManifestEntry),
}

/// A validated manifest. Entries are kept sorted by `(id, resolution, ...)`
/// so that two manifests with permuted lines compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub relevance: BTreeMap<String, Relevance>,
    /// Channel count shared by every feature file, when any were checked.
    pub channels: Option<usize>,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn load_map(&self, entry: &ManifestEntry) -> Result<FeatureMap> {
        FeatureMap::load(self.resolve(entry))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct image ids of a split, in sorted order.
    pub fn ids(&self, split: Split) -> Vec<&str> {
        let ids: BTreeSet<&str> = self.split(split).map(|e| e.id.as_str()).collect();
        ids.into_iter().collect()
    }

    pub fn find(&self, id: &str, resolution: u32) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id && e.resolution == resolution)
    }

    /// All resolutions present in the manifest, ascending.
    pub fn resolutions(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.entries.iter().map(|e| e.resolution).collect();
        set.into_iter().collect()
    }

    /// Writes the manifest as JSON lines: entries first, then relevance.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
            out.push('\n');
        }
        for (query, rel) in &self.relevance {
            let line = serde_json::json!({
                "query": query,
                "positives": rel.positives,
                "junk": rel.junk,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Parses manifest text without touching the feature files.
pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let (manifest, _) = parse_with_lines(text, base_dir.into())?;
    Ok(manifest)
}

/// Source line of each `(id, resolution)` entry.
type EntryLines = HashMap<(String, u32), usize>;

fn parse_with_lines(text: &str, base_dir: PathBuf) -> Result<(DatasetManifest, EntryLines)> {
    let mut entries = Vec::new();
    let mut entry_lines: EntryLines = HashMap::new();
    let mut relevance_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(raw).map_err(|e| Error::ManifestParse {
            line,
            message: e.to_string(),
        })?;
        match parsed {
            Line::Entry(entry) => {
                if entry.resolution == 0 {
                    return Err(Error::ManifestParse {
                        line,
                        message: "resolution must be positive".into(),
                    });
                }
                let key = (entry.id.clone(), entry.resolution);
                if entry_lines.insert(key, line).is_some() {
                    return Err(Error::DuplicateEntry {
                        line,
                        id: entry.id,
                        resolution: entry.resolution,
                    });
                }
                entries.push(entry);
            }
            Line::Relevance(rel) => relevance_lines.push((line, rel)),
        }
    }

    let gallery: BTreeSet<&str> = entries
        .iter()
        .filter(|e| e.split == Split::Gallery)
        .map(|e| e.id.as_str())
        .collect();
    let mut relevance = BTreeMap::new();
    for (line, rel) in relevance_lines {
        for id in rel.positives.iter().chain(&rel.junk) {
            if !gallery.contains(id.as_str()) {
                return Err(Error::DanglingRelevance {
                    line,
                    query: rel.query,
                    id: id.clone(),
                });
            }
        }
        let record = Relevance {
            positives: rel.positives.into_iter().collect(),
            junk: rel.junk.into_iter().collect(),
        };
        if relevance.insert(rel.query.clone(), record).is_some() {
            return Err(Error::ManifestParse {
                line,
                message: format!("duplicate relevance record for {}", rel.query),
            });
        }
    }

    entries.sort();
    Ok((
        DatasetManifest {
            base_dir,
            entries,
            relevance,
            channels: None,
        },
        entry_lines,
    ))
}

/// Loads and eagerly validates a manifest, including every feature file
/// header.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (mut manifest, lines) = parse_with_lines(&text, base_dir)?;

    // Check files in original line order so the first offending line is named.
    let mut by_line: Vec<(usize, &ManifestEntry)> = manifest
        .entries
        .iter()
        .map(|e| (lines[&(e.id.clone(), e.resolution)], e))
        .collect();
    by_line.sort_by_key(|(line, _)| *line);

    let mut channels: Option<usize> = None;
    for (line, entry) in by_line {
        let file = manifest.base_dir.join(&entry.path);
        let shape = read_tensor_shape(&file).map_err(|e| Error::DanglingPath {
            line,
            path: entry.path.clone(),
            reason: e.to_string(),
        })?;
        if shape.len() != 3 {
            return Err(Error::DanglingPath {
                line,
                path: entry.path.clone(),
                reason: format!("expected a rank-3 feature map, found shape {shape:?}"),
            });
        }
        match channels {
            None => channels = Some(shape[2]),
            Some(expected) if expected != shape[2] => {
                return Err(Error::ChannelMismatch {
                    line,
                    path: entry.path.clone(),
                    expected,
                    found: shape[2],
                })
            }
            Some(_) => {}
        }
    }
    manifest.channels = channels;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tensor::write_tensor;

    fn fixture(dir: &Path) {
        write_tensor(dir.join("a.msvf"), &[3, 3, 2], &[0.5; 18]).unwrap();
        write_tensor(dir.join("b.msvf"), &[4, 3, 2], &[1.0; 24]).unwrap();
        write_tensor(dir.join("c.msvf"), &[3, 3, 5], &[1.0; 45]).unwrap();
    }

    const THREE: &str = r#"{"id":"a","label":0,"split":"train","resolution":336,"path":"a.msvf"}
{"id":"b","label":1,"split":"gallery","resolution":336,"path":"b.msvf"}
{"id":"q","label":1,"split":"query","resolution":336,"path":"a.msvf"}
"#;

    #[test]
    fn three_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let path = dir.path().join("m.jsonl");
        fs::write(&path, THREE).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.channels, Some(2));
        assert_eq!(m.ids(Split::Gallery), vec!["b"]);
        let map = m.load_map(m.find("b", 336).unwrap()).unwrap();
        assert_eq!((map.height(), map.width(), map.channels()), (4, 3, 2));
    }

    #[test]
    fn duplicate_id_resolution() {
        let text = format!(
            "{THREE}{}",
            r#"{"id":"a","label":0,"split":"train","resolution":336,"path":"b.msvf"}"#
        );
        let err = parse_manifest(&text, ".").unwrap_err();
        assert!(
            matches!(err, Error::DuplicateEntry { line: 4, ref id, resolution: 336 } if id == "a")
        );
    }

    #[test]
    fn same_id_at_other_resolution_is_fine() {
        let text = format!(
            "{THREE}{}",
            r#"{"id":"a","label":0,"split":"train","resolution":504,"path":"b.msvf"}"#
        );
        assert_eq!(parse_manifest(&text, ".").unwrap().entries.len(), 4);
    }

    #[test]
    fn relevance_to_unknown_gallery_id() {
        let text = format!("{THREE}{}", r#"{"query":"q","positives":["b","zzz"]}"#);
        let err = parse_manifest(&text, ".").unwrap_err();
        assert!(matches!(err, Error::DanglingRelevance { line: 4, ref id, .. } if id == "zzz"));

        // train ids are not gallery ids either
        let text = format!(
            "{THREE}{}",
            r#"{"query":"q","positives":["b"],"junk":["a"]}"#
        );
        assert!(matches!(
            parse_manifest(&text, "."),
            Err(Error::DanglingRelevance { .. })
        ));
    }

    #[test]
    fn relevance_junk_defaults_empty() {
        let text = format!("{THREE}{}", r#"{"query":"q","positives":["b"]}"#);
        let m = parse_manifest(&text, ".").unwrap();
        assert!(m.relevance["q"].junk.is_empty());
        assert!(m.relevance["q"].positives.contains("b"));
    }

    #[test]
    fn dangling_path_names_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let text = THREE.replace("b.msvf", "missing.msvf");
        let path = dir.path().join("m.jsonl");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::DanglingPath { line: 2, .. })
        ));
    }

    #[test]
    fn channel_mismatch_names_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let text = THREE.replace("b.msvf", "c.msvf");
        let path = dir.path().join("m.jsonl");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::ChannelMismatch {
                line: 2,
                expected: 2,
                found: 5,
                ..
            })
        ));
    }

    #[test]
    fn malformed_line() {
        let err = parse_manifest("{\"id\": 3}\n", ".").unwrap_err();
        assert!(matches!(err, Error::ManifestParse { line: 1, .. }));
        let err = parse_manifest(
            r#"{"id":"a","label":0,"split":"holdout","resolution":336,"path":"a"}"#,
            ".",
        )
        .unwrap_err();
        assert!(matches!(err, Error::ManifestParse { line: 1, .. }));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = format!("{THREE}{}", r#"{"query":"q","positives":["b"]}"#);
        let m = parse_manifest(&text, ".").unwrap();
        let again = parse_manifest(&m.to_jsonl(), ".").unwrap();
        assert_eq!(m, again);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn permuting_lines_gives_equal_manifest(
                perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle()
            ) {
                let mut lines = Vec::new();
                for i in 0..6 {
                    let split = if i % 2 == 0 { "gallery" } else { "train" };
                    lines.push(format!(
                        r#"{{"id":"img{i}","label":{},"split":"{split}","resolution":224,"path":"f{i}.msvf"}}"#,
                        i % 3
                    ));
                }
                lines.push(r#"{"id":"q0","label":0,"split":"query","resolution":224,"path":"q.msvf"}"#.into());
                lines.push(r#"{"query":"q0","positives":["img0","img2"],"junk":["img4"]}"#.into());
                let base = parse_manifest(&lines.join("\n"), ".").unwrap();
                let shuffled: Vec<&str> = perm.iter().map(|&i| lines[i].as_str()).collect();
                let other = parse_manifest(&shuffled.join("\n"), ".").unwrap();
                prop_assert_eq!(base, other);
            }
        }
    }
}
