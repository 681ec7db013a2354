//! Keypoint records, dataset manifests and seed selection.
//!
//! A dataset is a JSON manifest listing images, each pointing at a JSON Lines
//! file with one keypoint per line. Keypoints are assumed to be already
//! restricted to the object's bounding box.

use std::cmp::Ordering;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub orientation: f64,
    pub response: f64,
    pub descriptor: Vec<f64>,
}

impl KeyPoint {
    fn validate(&self) -> std::result::Result<(), String> {
        let finite = [self.x, self.y, self.scale, self.orientation, self.response]
            .iter()
            .chain(self.descriptor.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        if self.scale <= 0.0 {
            return Err(format!("scale must be positive, got {}", self.scale));
        }
        if self.response < 0.0 {
            return Err(format!("response must be nonnegative, got {}", self.response));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub object_label: String,
    pub scene_id: String,
    pub split: Split,
    pub keypoints: Vec<KeyPoint>,
}

/// Indices of the seed keypoints of one image, highest response first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub seed_indices: Vec<usize>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.seed_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seed_indices.is_empty()
    }
}

/// Orders keypoints by ascending `(y, x)`, then index. Shared tie-break for
/// seed selection and neighbor search.
pub(crate) fn position_order(points: &[KeyPoint], a: usize, b: usize) -> Ordering {
    let (pa, pb) = (&points[a], &points[b]);
    pa.y.total_cmp(&pb.y)
        .then(pa.x.total_cmp(&pb.x))
        .then(a.cmp(&b))
}

/// Picks the `n_seeds` keypoints with the highest response.
///
/// Equal responses are ordered by ascending `(y, x)` and then by input index,
/// so the selection is fully deterministic. When the image has fewer points
/// than requested every point becomes a seed.
pub fn select_seeds(keypoints: &[KeyPoint], n_seeds: usize) -> Result<SeedSet> {
    if n_seeds == 0 {
        return Err(Error::Argument("n_seeds must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..keypoints.len()).collect();
    order.sort_by(|&a, &b| {
        keypoints[b]
            .response
            .total_cmp(&keypoints[a].response)
            .then_with(|| position_order(keypoints, a, b))
    });
    order.truncate(n_seeds);
    Ok(SeedSet {
        seed_indices: order,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub object_label: String,
    pub scene_id: String,
    pub split: Split,
    pub keypoint_file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub descriptor_dim: usize,
    pub images: Vec<ManifestEntry>,
}

/// A loaded dataset: the descriptor dimension plus all records in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub descriptor_dim: usize,
    pub records: Vec<ImageRecord>,
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn read_keypoints(path: &Path, image_id: &str, descriptor_dim: usize) -> Result<Vec<KeyPoint>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = || format!("image {image_id} ({}:{})", path.display(), lineno + 1);
        let kp: KeyPoint =
            serde_json::from_str(&line).map_err(|e| Error::format(location(), e.to_string()))?;
        if kp.descriptor.len() != descriptor_dim {
            return Err(Error::format(
                location(),
                format!(
                    "descriptor length {} does not match dataset descriptor_dim {}",
                    kp.descriptor.len(),
                    descriptor_dim
                ),
            ));
        }
        kp.validate().map_err(|m| Error::format(location(), m))?;
        points.push(kp);
    }
    Ok(points)
}

/// Loads a manifest and every keypoint file it references.
///
/// Keypoint file paths are resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::with_capacity(manifest.images.len());
    for entry in manifest.images {
        if !seen.insert(entry.image_id.clone()) {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("duplicate image_id {}", entry.image_id),
            ));
        }
        let kp_path = base.join(&entry.keypoint_file);
        let keypoints = read_keypoints(&kp_path, &entry.image_id, manifest.descriptor_dim)?;
        records.push(ImageRecord {
            image_id: entry.image_id,
            object_label: entry.object_label,
            scene_id: entry.scene_id,
            split: entry.split,
            keypoints,
        });
    }
    Ok(Dataset {
        descriptor_dim: manifest.descriptor_dim,
        records,
    })
}

/// Writes `manifest.json` and one `keypoints/<image_id>.jsonl` per record
/// under `dir`. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let kp_dir = dir.join("keypoints");
    fs::create_dir_all(&kp_dir).map_err(|e| Error::io(&kp_dir, e))?;

    let mut images = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        if let Some(kp) = record
            .keypoints
            .iter()
            .find(|kp| kp.descriptor.len() != dataset.descriptor_dim)
        {
            return Err(Error::format(
                format!("image {}", record.image_id),
                format!(
                    "descriptor length {} does not match dataset descriptor_dim {}",
                    kp.descriptor.len(),
                    dataset.descriptor_dim
                ),
            ));
        }
        let rel = PathBuf::from("keypoints").join(format!("{}.jsonl", record.image_id));
        let path = dir.join(&rel);
        write_jsonl(&path, &record.keypoints)?;
        images.push(ManifestEntry {
            image_id: record.image_id.clone(),
            object_label: record.object_label.clone(),
            scene_id: record.scene_id.clone(),
            split: record.split,
            keypoint_file: rel,
        });
    }

    let manifest = Manifest {
        descriptor_dim: dataset.descriptor_dim,
        images,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("row serializes");
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
