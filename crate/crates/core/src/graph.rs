//! Nested graph features.
//!
//! Every seed yields one graph per layer. Layer `ℓ` holds the seed plus its
//! `neighbor_counts[ℓ]` nearest keypoints in the image plane, connected by the
//! Delaunay triangulation of those points. Neighbor lists are prefixes of one
//! another, so a seed's node sets are nested across layers.

use serde::{Deserialize, Serialize};

use crate::delaunay::{delaunay_edges, EdgeSet};
use crate::error::{Error, Result};
use crate::keypoint::{position_order, ImageRecord, KeyPoint, SeedSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerSpec {
    neighbor_counts: Vec<usize>,
}

impl LayerSpec {
    pub fn new(neighbor_counts: Vec<usize>) -> Result<Self> {
        if neighbor_counts.first() != Some(&0) {
            return Err(Error::Argument(
                "layer neighbor counts must start with 0 (the isolated seed)".into(),
            ));
        }
        if neighbor_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "layer neighbor counts must be strictly increasing".into(),
            ));
        }
        Ok(LayerSpec { neighbor_counts })
    }

    pub fn neighbor_counts(&self) -> &[usize] {
        &self.neighbor_counts
    }

    pub fn len(&self) -> usize {
        self.neighbor_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_counts.is_empty()
    }

    pub fn max_neighbors(&self) -> usize {
        *self.neighbor_counts.last().unwrap_or(&0)
    }
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec {
            neighbor_counts: vec![0, 3, 6, 9],
        }
    }
}

impl TryFrom<Vec<usize>> for LayerSpec {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        LayerSpec::new(v)
    }
}

impl From<LayerSpec> for Vec<usize> {
    fn from(l: LayerSpec) -> Self {
        l.neighbor_counts
    }
}

/// One graph word candidate: a seed and its spatial neighborhood at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFeature {
    pub image_id: String,
    pub layer: usize,
    pub seed_index: usize,
    /// Keypoint indices; the seed first, then neighbors by ascending distance.
    pub node_indices: Vec<usize>,
    /// Edges over positions in `node_indices`.
    pub edges: EdgeSet,
    pub node_descriptors: Vec<Vec<f64>>,
    /// Set when the image had fewer points than the layer asks for.
    #[serde(default)]
    pub short: bool,
}

impl GraphFeature {
    pub fn node_count(&self) -> usize {
        self.node_indices.len()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.node_descriptors.first().map_or(0, Vec::len)
    }
}

/// Debug dump row for one graph feature (descriptors omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDumpRecord {
    pub image_id: String,
    pub seed_index: usize,
    pub layer: usize,
    pub node_indices: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub short: bool,
}

impl From<&GraphFeature> for FeatureDumpRecord {
    fn from(f: &GraphFeature) -> Self {
        FeatureDumpRecord {
            image_id: f.image_id.clone(),
            seed_index: f.seed_index,
            layer: f.layer,
            node_indices: f.node_indices.clone(),
            edges: f.edges.iter().collect(),
            short: f.short,
        }
    }
}

impl FeatureDumpRecord {
    /// Rebuilds the full feature by copying descriptors from the image.
    pub fn to_feature(&self, keypoints: &[KeyPoint]) -> Result<GraphFeature> {
        let location = || format!("feature of image {} seed {}", self.image_id, self.seed_index);
        if let Some(&bad) = self.node_indices.iter().find(|&&i| i >= keypoints.len()) {
            return Err(Error::format(
                location(),
                format!("node index {bad} out of range ({} keypoints)", keypoints.len()),
            ));
        }
        let n = self.node_indices.len();
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n || a == b) {
            return Err(Error::format(location(), format!("invalid edge ({a}, {b})")));
        }
        Ok(GraphFeature {
            image_id: self.image_id.clone(),
            layer: self.layer,
            seed_index: self.seed_index,
            node_indices: self.node_indices.clone(),
            edges: self.edges.iter().copied().collect(),
            node_descriptors: self
                .node_indices
                .iter()
                .map(|&i| keypoints[i].descriptor.clone())
                .collect(),
            short: self.short,
        })
    }
}

/// The `k` keypoints nearest to the seed (Euclidean, image plane), closest first.
///
/// Equal distances are ordered by ascending `(y, x)`, then index. Returns
/// every other point when fewer than `k` exist.
pub fn knn_neighbors(seed_index: usize, keypoints: &[KeyPoint], k: usize) -> Vec<usize> {
    let seed = &keypoints[seed_index];
    let dist2 = |i: usize| {
        let dx = keypoints[i].x - seed.x;
        let dy = keypoints[i].y - seed.y;
        dx * dx + dy * dy
    };
    let mut candidates: Vec<(f64, usize)> = (0..keypoints.len())
        .filter(|&i| i != seed_index)
        .map(|i| (dist2(i), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| position_order(keypoints, a.1, b.1))
    };
    if k < candidates.len() {
        if k == 0 {
            return Vec::new();
        }
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_by(cmp);
    candidates.into_iter().map(|(_, i)| i).collect()
}

/// Builds every `(seed, layer)` graph for one image, seed-major.
pub fn build_graph_features(
    image: &ImageRecord,
    seeds: &SeedSet,
    layers: &LayerSpec,
) -> Result<Vec<GraphFeature>> {
    let kps = &image.keypoints;
    let mut out = Vec::with_capacity(seeds.len() * layers.len());
    for &seed in &seeds.seed_indices {
        if seed >= kps.len() {
            return Err(Error::Argument(format!(
                "seed index {seed} out of range for image {} ({} keypoints)",
                image.image_id,
                kps.len()
            )));
        }
        let neighbors = knn_neighbors(seed, kps, layers.max_neighbors());
        for (layer, &k) in layers.neighbor_counts().iter().enumerate() {
            let take = k.min(neighbors.len());
            let node_indices: Vec<usize> = std::iter::once(seed)
                .chain(neighbors[..take].iter().copied())
                .collect();
            let edges = if layer == 0 {
                EdgeSet::new()
            } else {
                let pts: Vec<(f64, f64)> =
                    node_indices.iter().map(|&i| (kps[i].x, kps[i].y)).collect();
                delaunay_edges(&pts)
            };
            let node_descriptors = node_indices.iter().map(|&i| kps[i].descriptor.clone()).collect();
            out.push(GraphFeature {
                image_id: image.image_id.clone(),
                layer,
                seed_index: seed,
                node_indices,
                edges,
                node_descriptors,
                short: take < k,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoint::{select_seeds, Split};

    fn kp(x: f64, y: f64) -> KeyPoint {
        KeyPoint {
            x,
            y,
            scale: 1.0,
            orientation: 0.0,
            response: 1.0,
            descriptor: vec![x, y],
        }
    }

    fn image(points: Vec<KeyPoint>) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            object_label: "obj".into(),
            scene_id: "s".into(),
            split: Split::Train,
            keypoints: points,
        }
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::new(vec![0, 3, 6, 9]).is_ok());
        assert!(LayerSpec::new(vec![1, 3]).is_err());
        assert!(LayerSpec::new(vec![0, 3, 3]).is_err());
        assert!(LayerSpec::new(vec![]).is_err());
        let parsed: std::result::Result<LayerSpec, _> = serde_json::from_str("[0, 5, 2]");
        assert!(parsed.is_err());
    }

    #[test]
    fn knn_orders_by_distance() {
        let pts = vec![kp(0.0, 0.0), kp(3.0, 0.0), kp(0.0, 1.0), kp(2.0, 0.0)];
        assert_eq!(knn_neighbors(0, &pts, 2), vec![2, 3]);
        assert_eq!(knn_neighbors(0, &pts, 10), vec![2, 3, 1]);
        assert!(knn_neighbors(0, &pts, 0).is_empty());
    }

    #[test]
    fn knn_tie_break_prefers_smaller_y_then_x() {
        // (1,0) and (0,1) and (-1,0) are all at distance 1 from the origin.
        let pts = vec![kp(0.0, 0.0), kp(0.0, 1.0), kp(1.0, 0.0), kp(-1.0, 0.0)];
        assert_eq!(knn_neighbors(0, &pts, 1), vec![3]);
        assert_eq!(knn_neighbors(0, &pts, 3), vec![3, 2, 1]);
        // reversed input order, same geometric answer
        let rev: Vec<KeyPoint> = pts.iter().rev().cloned().collect();
        let got: Vec<(f64, f64)> = knn_neighbors(3, &rev, 3)
            .into_iter()
            .map(|i| (rev[i].x, rev[i].y))
            .collect();
        assert_eq!(got, vec![(-1.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
    }

    #[test]
    fn one_seed_two_layers() {
        let img = image(vec![kp(0.0, 0.0), kp(1.0, 0.1), kp(0.2, 1.0), kp(-1.0, 0.3), kp(5.0, 5.0)]);
        let seeds = SeedSet {
            seed_indices: vec![0],
        };
        let feats = build_graph_features(&img, &seeds, &LayerSpec::new(vec![0, 3]).unwrap()).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].node_indices, vec![0]);
        assert!(feats[0].edges.is_empty());
        assert_eq!(feats[1].node_count(), 4);
        assert!(!feats[1].edges.is_empty());
        assert!(!feats[1].short);
        assert_eq!(feats[1].node_descriptors[2], img.keypoints[feats[1].node_indices[2]].descriptor);
    }

    #[test]
    fn short_graph_is_flagged() {
        let img = image(vec![kp(0.0, 0.0), kp(1.0, 0.0), kp(0.0, 1.0)]);
        let seeds = SeedSet {
            seed_indices: vec![0],
        };
        let feats = build_graph_features(&img, &seeds, &LayerSpec::new(vec![0, 3]).unwrap()).unwrap();
        assert_eq!(feats[1].node_count(), 3);
        assert!(feats[1].short);
        assert!(!feats[0].short);
        assert_eq!(feats[1].edges.len(), 3);
    }

    #[test]
    fn layers_are_nested_prefixes() {
        let pts: Vec<KeyPoint> = (0..30)
            .map(|i| kp((i * 37 % 101) as f64, (i * 53 % 97) as f64))
            .collect();
        let img = image(pts);
        let seeds = select_seeds(&img.keypoints, 5).unwrap();
        let feats = build_graph_features(&img, &seeds, &LayerSpec::default()).unwrap();
        assert_eq!(feats.len(), 20);
        for chunk in feats.chunks(4) {
            for w in chunk.windows(2) {
                assert_eq!(w[1].node_count(), w[0].node_count() + 3);
                assert_eq!(&w[1].node_indices[..w[0].node_count()], &w[0].node_indices[..]);
            }
            for f in chunk {
                for (a, b) in f.edges.iter() {
                    assert!(a < b && b < f.node_count());
                }
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let pts: Vec<KeyPoint> = (0..12).map(|i| kp((i * 7 % 11) as f64, (i * 5 % 13) as f64)).collect();
        let img = image(pts);
        let seeds = select_seeds(&img.keypoints, 3).unwrap();
        for f in build_graph_features(&img, &seeds, &LayerSpec::default()).unwrap() {
            let dump = FeatureDumpRecord::from(&f);
            let text = serde_json::to_string(&dump).unwrap();
            let back: FeatureDumpRecord = serde_json::from_str(&text).unwrap();
            assert_eq!(back.to_feature(&img.keypoints).unwrap(), f);
        }
    }
}
