//! Bag-of-graph-words signatures.

use serde::{Deserialize, Serialize};

use crate::codebook::{assign_word, Codebook};
use crate::error::{Error, Result};
use crate::graph::GraphFeature;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    RawCounts,
    #[default]
    L1Normalized,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    L1,
    L2,
    Hamming,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Hamming => "hamming",
        })
    }
}

/// Bins closer than this count as equal under the Hamming metric.
pub const HAMMING_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub layers: Vec<LayerHistogram>,
    pub normalization: Normalization,
}

impl Signature {
    pub fn layer(&self, layer: usize) -> Option<&LayerHistogram> {
        self.layers.iter().find(|h| h.layer == layer)
    }
}

/// Histograms of closest-word assignments, one per codebook.
///
/// `features` may mix layers; each feature is counted against the codebook of
/// its own layer. Every feature lands in exactly one bin.
pub fn compute_signature(
    features: &[GraphFeature],
    codebooks: &[Codebook],
    normalization: Normalization,
) -> Result<Signature> {
    let mut layers: Vec<LayerHistogram> = codebooks
        .iter()
        .map(|cb| LayerHistogram {
            layer: cb.layer,
            histogram: vec![0.0; cb.len()],
        })
        .collect();

    for feature in features {
        let slot = codebooks
            .iter()
            .position(|cb| cb.layer == feature.layer)
            .ok_or_else(|| Error::Config(format!("no codebook for layer {}", feature.layer)))?;
        let word = assign_word(feature, &codebooks[slot])?;
        layers[slot].histogram[word] += 1.0;
    }

    if normalization == Normalization::L1Normalized {
        for h in &mut layers {
            let total: f64 = h.histogram.iter().sum();
            if total > 0.0 {
                h.histogram.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    Ok(Signature {
        layers,
        normalization,
    })
}

/// Concatenates the histograms of `layer_subset` (strictly ascending) in layer order.
pub fn nested_concat(signature: &Signature, layer_subset: &[usize]) -> Result<Vec<f64>> {
    if layer_subset.is_empty() {
        return Err(Error::Argument("layer subset is empty".into()));
    }
    if layer_subset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!(
            "layer subset {layer_subset:?} must be strictly ascending"
        )));
    }
    let mut out = Vec::new();
    for &layer in layer_subset {
        let h = signature
            .layer(layer)
            .ok_or_else(|| Error::Argument(format!("signature has no layer {layer}")))?;
        out.extend_from_slice(&h.histogram);
    }
    Ok(out)
}

pub fn signature_distance(u: &[f64], v: &[f64], metric: Metric) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Argument(format!(
            "signature lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let pairs = u.iter().zip(v);
    Ok(match metric {
        Metric::L1 => pairs.map(|(a, b)| (a - b).abs()).sum(),
        Metric::L2 => pairs.map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        Metric::Hamming => pairs.filter(|(a, b)| (*a - *b).abs() > HAMMING_TOLERANCE).count() as f64,
    })
}

/// One line of a signature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureRecord {
    pub image_id: String,
    pub object_label: String,
    pub split: crate::keypoint::Split,
    pub normalization: Normalization,
    pub layers: Vec<LayerHistogram>,
}

impl SignatureRecord {
    pub fn signature(&self) -> Signature {
        Signature {
            layers: self.layers.clone(),
            normalization: self.normalization,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdk::{CdkParams, DistanceFlavor};
    use crate::cluster::Linkage;
    use crate::codebook::BuildManifest;
    use crate::delaunay::EdgeSet;
    use proptest::prelude::*;

    fn point(value: f64) -> GraphFeature {
        GraphFeature {
            image_id: "i".into(),
            layer: 0,
            seed_index: 0,
            node_indices: vec![0],
            edges: EdgeSet::new(),
            node_descriptors: vec![vec![value]],
            short: false,
        }
    }

    fn book(layer: usize, values: &[f64]) -> Codebook {
        Codebook {
            layer,
            params: CdkParams {
                distance_flavor: DistanceFlavor::L2,
                ..CdkParams::default()
            },
            linkage: Linkage::Average,
            words: values
                .iter()
                .map(|&v| GraphFeature {
                    layer,
                    ..point(v)
                })
                .collect(),
            build_manifest: BuildManifest {
                objects: vec![],
                skipped_objects: vec![],
                first_pass_k: 1,
                pass2_inputs: values.len(),
                requested_size: values.len(),
                final_size: values.len(),
                warnings: vec![],
            },
        }
    }

    #[test]
    fn all_features_on_one_word() {
        let feats: Vec<_> = (0..4).map(|i| point(0.01 * i as f64)).collect();
        let books = [book(0, &[0.0, 5.0, 9.0])];
        let raw = compute_signature(&feats, &books, Normalization::RawCounts).unwrap();
        assert_eq!(raw.layers[0].histogram, vec![4.0, 0.0, 0.0]);
        let l1 = compute_signature(&feats, &books, Normalization::L1Normalized).unwrap();
        assert_eq!(l1.layers[0].histogram, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_layer_stays_zero() {
        let books = [book(0, &[0.0, 1.0])];
        let sig = compute_signature(&[], &books, Normalization::L1Normalized).unwrap();
        assert_eq!(sig.layers[0].histogram, vec![0.0, 0.0]);
    }

    #[test]
    fn missing_codebook_is_a_config_error() {
        let mut f = point(0.0);
        f.layer = 2;
        assert!(matches!(
            compute_signature(&[f], &[book(0, &[0.0])], Normalization::RawCounts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn concat_prefix_and_length() {
        let sig = Signature {
            layers: (0..4)
                .map(|l| LayerHistogram {
                    layer: l,
                    histogram: (0..50).map(|i| (l * 100 + i) as f64).collect(),
                })
                .collect(),
            normalization: Normalization::RawCounts,
        };
        assert_eq!(nested_concat(&sig, &[2]).unwrap(), sig.layers[2].histogram);
        let short = nested_concat(&sig, &[0, 1]).unwrap();
        let long = nested_concat(&sig, &[0, 1, 2]).unwrap();
        assert_eq!(&long[..short.len()], &short[..]);
        assert_eq!(nested_concat(&sig, &[0, 1, 2, 3]).unwrap().len(), 200);
        assert!(nested_concat(&sig, &[]).is_err());
        assert!(nested_concat(&sig, &[1, 0]).is_err());
        assert!(nested_concat(&sig, &[7]).is_err());
    }

    #[test]
    fn distances_by_hand() {
        let (u, v) = ([0.5, 0.5], [1.0, 0.0]);
        assert_eq!(signature_distance(&u, &v, Metric::L1).unwrap(), 1.0);
        assert!((signature_distance(&u, &v, Metric::L2).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(signature_distance(&u, &v, Metric::Hamming).unwrap(), 2.0);
        for m in [Metric::L1, Metric::L2, Metric::Hamming] {
            assert_eq!(signature_distance(&u, &u, m).unwrap(), 0.0);
        }
        assert!(signature_distance(&[1.0], &[1.0, 2.0], Metric::L1).is_err());
    }

    proptest! {
        #[test]
        fn raw_counts_conserve_mass(values in prop::collection::vec(-10.0f64..10.0, 0..40)) {
            let feats: Vec<_> = values.iter().map(|&v| point(v)).collect();
            let sig = compute_signature(&feats, &[book(0, &[-5.0, 0.0, 3.0, 7.5])], Normalization::RawCounts).unwrap();
            prop_assert_eq!(sig.layers[0].histogram.iter().sum::<f64>(), values.len() as f64);
            prop_assert!(sig.layers[0].histogram.iter().all(|c| c.fract() == 0.0));
        }

        #[test]
        fn l1_triangle_inequality(
            a in prop::collection::vec(0.0f64..1.0, 8),
            b in prop::collection::vec(0.0f64..1.0, 8),
            c in prop::collection::vec(0.0f64..1.0, 8),
        ) {
            let d = |x: &[f64], y: &[f64]| signature_distance(x, y, Metric::L1).unwrap();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }
    }
}
