//! Dataset layout on disk.
//!
//! ```text
//! <split>/<clip_id>.json
//! <split>/attention/<clip_id>__t<t>__a<annotation>__<subject|object>.json
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttentionMap, EntitySide, VideoClip};
use crate::error::{Error, Result};

/// Identifies one attention sidecar within a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttentionKey {
    pub t: usize,
    pub annotation: usize,
    pub side: EntitySide,
}

impl AttentionKey {
    pub fn file_name(&self, clip_id: &str) -> String {
        format!("{clip_id}__t{}__a{}__{}.json", self.t, self.annotation, self.side.as_str())
    }

    /// Inverse of [`AttentionKey::file_name`].
    pub fn parse_file_name(name: &str) -> Option<(String, AttentionKey)> {
        let stem = name.strip_suffix(".json")?;
        let mut parts = stem.rsplitn(4, "__");
        let side = match parts.next()? {
            "subject" => EntitySide::Subject,
            "object" => EntitySide::Object,
            _ => return None,
        };
        let annotation = parts.next()?.strip_prefix('a')?.parse().ok()?;
        let t = parts.next()?.strip_prefix('t')?.parse().ok()?;
        let clip_id = parts.next()?.to_string();
        Some((clip_id, AttentionKey { t, annotation, side }))
    }
}

/// A clip with its attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip: VideoClip,
    pub attention: BTreeMap<AttentionKey, AttentionMap>,
}

impl ClipRecord {
    pub fn map(&self, annotation: usize, side: EntitySide) -> Option<&AttentionMap> {
        self.attention.get(&AttentionKey {
            t: self.clip.middle_frame().t,
            annotation,
            side,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes the clip document and its sidecars under `split_dir`.
pub fn write_clip(split_dir: &Path, record: &ClipRecord) -> Result<Vec<PathBuf>> {
    let att_dir = split_dir.join("attention");
    fs::create_dir_all(&att_dir).map_err(|e| Error::io(&att_dir, e))?;
    let mut written = Vec::with_capacity(1 + record.attention.len());
    let path = split_dir.join(format!("{}.json", record.clip.clip_id));
    write_json(&path, &record.clip)?;
    written.push(path);
    for (key, map) in &record.attention {
        let path = att_dir.join(key.file_name(&record.clip.clip_id));
        write_json(&path, map)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every clip of a split directory, sorted by clip id.
pub fn read_split(split_dir: &Path) -> Result<Vec<ClipRecord>> {
    let entries = fs::read_dir(split_dir).map_err(|e| Error::io(split_dir, e))?;
    let mut clip_paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(split_dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            clip_paths.push(path);
        }
    }
    clip_paths.sort();

    let mut records: BTreeMap<String, ClipRecord> = BTreeMap::new();
    for path in clip_paths {
        let clip: VideoClip = read_json(&path)?;
        clip.validate()?;
        records.insert(
            clip.clip_id.clone(),
            ClipRecord {
                clip,
                attention: BTreeMap::new(),
            },
        );
    }

    let att_dir = split_dir.join("attention");
    if att_dir.is_dir() {
        let entries = fs::read_dir(&att_dir).map_err(|e| Error::io(&att_dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&att_dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some((clip_id, key)) = AttentionKey::parse_file_name(name) else {
                continue;
            };
            let Some(record) = records.get_mut(&clip_id) else {
                return Err(Error::Data(format!("attention file {name} has no clip {clip_id}")));
            };
            let map: AttentionMap = read_json(&path)?;
            map.validate()?;
            record.attention.insert(key, map);
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(records.into_values().collect())
}
