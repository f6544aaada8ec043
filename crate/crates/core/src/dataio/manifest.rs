use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{read_pgm, read_ppm};
use super::VideoClip;
use crate::error::{Error, Result};

/// `manifest.json`; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub frames: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<usize, String>,
}

/// A fully loaded and validated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn clip(&self, id: &str) -> Option<&VideoClip> {
        self.clips.iter().find(|c| c.id == id)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `path` (a manifest file, or a directory holding `manifest.json`)
/// and loads every referenced frame and label, checking sizes and classes.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path.push("manifest.json");
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if manifest.num_classes < 2 || manifest.num_classes > 255 {
        return Err(Error::Format(format!(
            "{}: num_classes {} out of range 2..=255",
            path.display(),
            manifest.num_classes
        )));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut clips = Vec::with_capacity(manifest.videos.len());
    for video in &manifest.videos {
        if video.frames.is_empty() {
            return Err(Error::Format(format!("clip {}: no frames", video.id)));
        }
        let mut frames = Vec::with_capacity(video.frames.len());
        for rel in &video.frames {
            let file = root.join(rel);
            let img = read_ppm(&file)?;
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Format(format!(
                    "{}: frame is {}x{}, manifest says {h}x{w}",
                    file.display(),
                    img.height(),
                    img.width()
                )));
            }
            frames.push(img.to_tensor());
        }
        let mut labels = BTreeMap::new();
        for (&idx, rel) in &video.labels {
            if idx >= video.frames.len() {
                return Err(Error::Format(format!(
                    "clip {}: label index {idx} out of range for {} frames",
                    video.id,
                    video.frames.len()
                )));
            }
            let file = root.join(rel);
            let map = read_pgm(&file)?;
            if (map.height(), map.width()) != (h, w) {
                return Err(Error::Format(format!(
                    "{}: label is {}x{}, manifest says {h}x{w}",
                    file.display(),
                    map.height(),
                    map.width()
                )));
            }
            map.validate(manifest.num_classes)
                .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
            labels.insert(idx, map);
        }
        clips.push(VideoClip {
            id: video.id.clone(),
            frames,
            labels,
        });
    }
    Ok(Dataset {
        root,
        manifest,
        clips,
    })
}
