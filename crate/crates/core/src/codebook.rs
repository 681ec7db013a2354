//! Per-layer visual dictionaries built by two-pass agglomerative clustering.
//!
//! Pass one clusters the features of each object separately and keeps the
//! medoid of every cluster. Pass two pools the medoids of all objects and
//! clusters them again; the surviving medoids are the dictionary words, so
//! every word is an actual training feature.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdk::{layer_dissimilarity, CdkParams};
use crate::cluster::{cluster_matrix, cluster_matrix_at_sizes, DistanceMatrix, Linkage};
use crate::error::{Error, Result};
use crate::graph::{build_graph_features, GraphFeature, LayerSpec};
use crate::keypoint::{select_seeds, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictionaryParams {
    pub first_pass_k: usize,
    pub cdk: CdkParams,
    pub linkage: Linkage,
}

impl Default for DictionaryParams {
    fn default() -> Self {
        DictionaryParams {
            first_pass_k: 500,
            cdk: CdkParams::default(),
            linkage: Linkage::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPass {
    pub object_label: String,
    pub feature_count: usize,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub objects: Vec<ObjectPass>,
    /// Objects without a single feature on this layer.
    pub skipped_objects: Vec<String>,
    pub first_pass_k: usize,
    pub pass2_inputs: usize,
    pub requested_size: usize,
    pub final_size: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub layer: usize,
    pub params: CdkParams,
    pub linkage: Linkage,
    pub words: Vec<GraphFeature>,
    pub build_manifest: BuildManifest,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Medoids of the per-object first pass, pooled in object-label order.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstPass {
    pub layer: usize,
    pub medoids: Vec<GraphFeature>,
    pub objects: Vec<ObjectPass>,
    pub skipped_objects: Vec<String>,
    pub first_pass_k: usize,
}

fn pairwise(features: &[GraphFeature], params: &CdkParams) -> Result<DistanceMatrix> {
    DistanceMatrix::try_from_fn(features.len(), |i, j| {
        layer_dissimilarity(&features[i], &features[j], params)
    })
}

/// Clusters each object's `layer` features into `params.first_pass_k` groups.
pub fn first_pass(
    features_by_object: &BTreeMap<String, Vec<GraphFeature>>,
    layer: usize,
    params: &DictionaryParams,
) -> Result<FirstPass> {
    if params.first_pass_k == 0 {
        return Err(Error::Argument("first_pass_k must be at least 1".into()));
    }
    params.cdk.validate()?;

    let per_object: Vec<(String, Vec<GraphFeature>)> = features_by_object
        .iter()
        .map(|(label, feats)| {
            let on_layer = feats.iter().filter(|f| f.layer == layer).cloned().collect();
            (label.clone(), on_layer)
        })
        .collect();

    let results: Vec<Option<(ObjectPass, Vec<GraphFeature>)>> = per_object
        .into_par_iter()
        .map(|(label, feats)| {
            if feats.is_empty() {
                return Ok(None);
            }
            let dist = pairwise(&feats, &params.cdk)?;
            let clusters = cluster_matrix(&dist, params.first_pass_k, params.linkage)?;
            let medoids = clusters.iter().map(|c| feats[c.medoid].clone()).collect();
            Ok(Some((
                ObjectPass {
                    object_label: label,
                    feature_count: feats.len(),
                    clusters: clusters.len(),
                },
                medoids,
            )))
        })
        .collect::<Result<_>>()?;

    let mut out = FirstPass {
        layer,
        medoids: Vec::new(),
        objects: Vec::new(),
        skipped_objects: Vec::new(),
        first_pass_k: params.first_pass_k,
    };
    for (label, result) in features_by_object.keys().zip(results) {
        match result {
            Some((pass, medoids)) => {
                out.objects.push(pass);
                out.medoids.extend(medoids);
            }
            None => {
                log::warn!("object {label} has no features on layer {layer}; skipped");
                out.skipped_objects.push(label.clone());
            }
        }
    }
    Ok(out)
}

/// Clusters the pooled first-pass medoids once and cuts the hierarchy at each
/// requested size, returning one codebook per entry of `final_sizes`.
pub fn second_pass(first: &FirstPass, final_sizes: &[usize], params: &DictionaryParams) -> Result<Vec<Codebook>> {
    if first.medoids.is_empty() {
        return Err(Error::Argument(format!(
            "no training features on layer {}",
            first.layer
        )));
    }
    if final_sizes.contains(&0) {
        return Err(Error::Argument("dictionary size must be at least 1".into()));
    }
    let dist = pairwise(&first.medoids, &params.cdk)?;
    let partitions = cluster_matrix_at_sizes(&dist, final_sizes, params.linkage)?;

    Ok(final_sizes
        .iter()
        .zip(partitions)
        .map(|(&requested, clusters)| {
            let mut warnings = Vec::new();
            if clusters.len() < requested {
                let msg = format!(
                    "layer {}: requested {requested} words but only {} pooled medoids are available",
                    first.layer,
                    first.medoids.len()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            for label in &first.skipped_objects {
                warnings.push(format!("object {label} has no features on layer {}", first.layer));
            }
            Codebook {
                layer: first.layer,
                params: params.cdk,
                linkage: params.linkage,
                words: clusters.iter().map(|c| first.medoids[c.medoid].clone()).collect(),
                build_manifest: BuildManifest {
                    objects: first.objects.clone(),
                    skipped_objects: first.skipped_objects.clone(),
                    first_pass_k: first.first_pass_k,
                    pass2_inputs: first.medoids.len(),
                    requested_size: requested,
                    final_size: clusters.len(),
                    warnings,
                },
            }
        })
        .collect())
}

/// Groups features by the object label of their source image.
pub fn group_by_object<'a>(
    images: impl IntoIterator<Item = (&'a ImageRecord, Vec<GraphFeature>)>,
) -> BTreeMap<String, Vec<GraphFeature>> {
    let mut map: BTreeMap<String, Vec<GraphFeature>> = BTreeMap::new();
    for (image, feats) in images {
        map.entry(image.object_label.clone()).or_default().extend(feats);
    }
    map
}

/// Extracts features from `training` and builds the `layer` dictionary.
pub fn build_dictionary(
    training: &[ImageRecord],
    layers: &LayerSpec,
    n_seeds: usize,
    layer: usize,
    final_size: usize,
    params: &DictionaryParams,
) -> Result<Codebook> {
    if training.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if layer >= layers.len() {
        return Err(Error::Argument(format!(
            "layer {layer} not in a {}-layer spec",
            layers.len()
        )));
    }
    let extracted: Vec<Vec<GraphFeature>> = training
        .par_iter()
        .map(|img| {
            let seeds = select_seeds(&img.keypoints, n_seeds)?;
            let feats = build_graph_features(img, &seeds, layers)?;
            Ok(feats.into_iter().filter(|f| f.layer == layer).collect())
        })
        .collect::<Result<_>>()?;
    let grouped = group_by_object(training.iter().zip(extracted));
    let first = first_pass(&grouped, layer, params)?;
    Ok(second_pass(&first, &[final_size], params)?.remove(0))
}

/// Index of the closest word; ties go to the smaller index.
pub fn assign_word(feature: &GraphFeature, codebook: &Codebook) -> Result<usize> {
    if codebook.words.is_empty() {
        return Err(Error::Config(format!("codebook for layer {} is empty", codebook.layer)));
    }
    if feature.layer != codebook.layer {
        return Err(Error::Argument(format!(
            "feature on layer {} cannot use the layer-{} codebook",
            feature.layer, codebook.layer
        )));
    }
    let mut best = (f64::INFINITY, usize::MAX);
    for (idx, word) in codebook.words.iter().enumerate() {
        let d = layer_dissimilarity(feature, word, &codebook.params)?;
        if d < best.0 || best.1 == usize::MAX {
            best = (d, idx);
        }
    }
    Ok(best.1)
}
