//! Nearest-neighbour retrieval, mean average precision and dataset splits.

use std::collections::{BTreeMap, BTreeSet};

use num_integer::Integer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoint::{ImageRecord, Split};
use crate::signature::{signature_distance, Metric, Normalization};

/// A signature vector tagged with its image and object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVector {
    pub image_id: String,
    pub object_label: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub object_label: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

/// Orders the whole corpus by ascending distance to `query`, breaking ties by image id.
pub fn rank(query: &LabeledVector, corpus: &[LabeledVector], metric: Metric) -> Result<RankedList> {
    if corpus.is_empty() {
        return Err(Error::Argument("cannot rank against an empty corpus".into()));
    }
    let mut entries = corpus
        .iter()
        .map(|c| {
            Ok(RankedEntry {
                image_id: c.image_id.clone(),
                object_label: c.object_label.clone(),
                distance: signature_distance(&query.vector, &c.vector, metric)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(RankedList {
        query_id: query.image_id.clone(),
        entries,
    })
}

/// Non-interpolated average precision over a full relevance list.
///
/// Returns 0 (with a warning) when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let hits = relevant.iter().filter(|&&r| r).count();
    if hits == 0 {
        log::warn!("average precision requested for a list with no relevant items");
        return 0.0;
    }
    exact_average_precision(relevant, hits).unwrap_or_else(|| {
        let mut seen = 0usize;
        let mut sum = 0.0;
        for (i, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
            seen += 1;
            sum += seen as f64 / (i + 1) as f64;
        }
        sum / hits as f64
    })
}

/// Rational evaluation, correctly rounded when numerator and denominator stay
/// below 2^53. `None` once the fraction no longer fits in `u128`.
fn exact_average_precision(relevant: &[bool], hits: usize) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    let mut seen = 0u128;
    for (i, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        seen += 1;
        let rank = (i + 1) as u128;
        let g = den.gcd(&rank);
        let lcm = den.checked_mul(rank / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(seen.checked_mul(lcm / rank)?)?;
        den = lcm;
        let g = num.gcd(&den);
        (num, den) = (num / g, den / g);
    }
    let den = den.checked_mul(hits as u128)?;
    let g = num.gcd(&den);
    Some((num / g) as f64 / (den / g) as f64)
}

/// Expected average precision of a uniformly random ranking of `n` items of
/// which `r` are relevant.
pub fn random_ranking_expected_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 <= r <= n");
    if n == 1 {
        return 1.0;
    }
    let (nf, rf) = (n as f64, r as f64);
    let harmonic: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    (harmonic + (rf - 1.0) / (nf - 1.0) * (nf - harmonic)) / nf
}

/// Average precision variant echoed in every report.
pub const AP_VARIANT: &str = "non_interpolated_full_ranking";
/// Split rounding rule echoed in every report.
pub const SPLIT_ROUNDING: &str = "train_ceil_per_object";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub layers: Vec<usize>,
    pub dict_size: Option<usize>,
    pub metric: Metric,
    pub normalization: Option<Normalization>,
    pub ap_variant: String,
    pub split_rounding: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            layers: Vec::new(),
            dict_size: None,
            metric: Metric::default(),
            normalization: None,
            ap_variant: AP_VARIANT.into(),
            split_rounding: SPLIT_ROUNDING.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_object_map: BTreeMap<String, f64>,
    /// Test objects with no training image; they are excluded from the mean.
    pub undefined_objects: Vec<String>,
    pub overall_mean: f64,
    pub queries: usize,
    pub config: ReportConfig,
}

/// Ranks every test vector against the training corpus and reports per-object MAP.
pub fn evaluate(test: &[LabeledVector], train: &[LabeledVector], metric: Metric) -> Result<EvalReport> {
    if train.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|t| t.image_id.as_str()).collect();
    if let Some(dup) = test.iter().find(|t| train_ids.contains(t.image_id.as_str())) {
        return Err(Error::Argument(format!(
            "image {} appears in both train and test",
            dup.image_id
        )));
    }
    let train_objects: BTreeSet<&str> = train.iter().map(|t| t.object_label.as_str()).collect();

    let scored: Vec<(&str, &str, Option<f64>)> = test
        .par_iter()
        .map(|q| {
            if !train_objects.contains(q.object_label.as_str()) {
                return Ok((q.object_label.as_str(), q.image_id.as_str(), None));
            }
            let ranked = rank(q, train, metric)?;
            let flags: Vec<bool> = ranked
                .entries
                .iter()
                .map(|e| e.object_label == q.object_label)
                .collect();
            Ok((q.object_label.as_str(), q.image_id.as_str(), Some(average_precision(&flags))))
        })
        .collect::<Result<_>>()?;

    // Sum in image-id order so the result does not depend on input order.
    let mut per_object: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut undefined = BTreeSet::new();
    for (label, id, ap) in scored {
        match ap {
            Some(ap) => {
                per_object.entry(label).or_default().insert(id, ap);
            }
            None => {
                undefined.insert(label.to_string());
            }
        }
    }
    for label in &undefined {
        log::warn!("object {label} has no training images; MAP undefined");
    }
    let per_object_map: BTreeMap<String, f64> = per_object
        .into_iter()
        .map(|(label, aps)| (label.to_string(), aps.values().sum::<f64>() / aps.len() as f64))
        .collect();
    let overall_mean = if per_object_map.is_empty() {
        0.0
    } else {
        per_object_map.values().sum::<f64>() / per_object_map.len() as f64
    };
    Ok(EvalReport {
        per_object_map,
        undefined_objects: undefined.into_iter().collect(),
        overall_mean,
        queries: test.len(),
        config: ReportConfig {
            metric,
            ..ReportConfig::default()
        },
    })
}

/// Number of training images for an object with `n` images.
pub fn train_count(n: usize, fraction: f64) -> usize {
    match n {
        0 => 0,
        1 => 1,
        _ => ((fraction * n as f64).ceil() as usize).clamp(1, n - 1),
    }
}

/// Stratified per-object split; `fraction` of each object's images go to train.
///
/// The result does not depend on the order of `records`. Returned records keep
/// their input order with `split` rewritten.
pub fn split_dataset(
    records: &[ImageRecord],
    fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let mut by_object: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_object.entry(r.object_label.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut is_train = vec![false; records.len()];
    for (label, mut members) in by_object {
        members.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
        members.shuffle(&mut rng);
        if members.len() == 1 {
            log::warn!("object {label} has a single image; it goes to train only");
        }
        for &m in &members[..train_count(members.len(), fraction)] {
            is_train[m] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(is_train) {
        let mut r = r.clone();
        if t {
            r.split = Split::Train;
            train.push(r);
        } else {
            r.split = Split::Test;
            test.push(r);
        }
    }
    Ok((train, test))
}
