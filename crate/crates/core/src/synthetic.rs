//! Synthetic keypoint scenes.
//!
//! A scene is a template constellation of points, each tagged with a
//! descriptor prototype. Each generated image applies a random similarity
//! transform plus positional jitter to the template and draws descriptors as
//! prototype + Gaussian noise. Everything is driven by a caller-supplied seed.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoint::{Dataset, ImageRecord, KeyPoint, Split};
use crate::retrieval::split_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePoint {
    pub x: f64,
    pub y: f64,
    /// Index into [`SceneSpec::prototypes`].
    pub prototype: usize,
    pub response: f64,
    pub scale: f64,
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: String,
    pub object_label: String,
    pub scene_id: String,
    pub prototypes: Vec<Vec<f64>>,
    pub template: Vec<TemplatePoint>,
    /// Standard deviation of the per-component descriptor noise.
    pub descriptor_noise: f64,
    /// Standard deviation of the positional jitter, in pixels.
    pub jitter: f64,
    pub response_noise: f64,
    pub rotation_range: (f64, f64),
    pub scale_range: (f64, f64),
    pub translation_x: (f64, f64),
    pub translation_y: (f64, f64),
}

impl SceneSpec {
    /// A spec that reproduces `template` exactly: no noise, identity transform.
    pub fn verbatim(
        image_id: impl Into<String>,
        object_label: impl Into<String>,
        prototypes: Vec<Vec<f64>>,
        template: Vec<TemplatePoint>,
    ) -> Self {
        SceneSpec {
            image_id: image_id.into(),
            object_label: object_label.into(),
            scene_id: "synthetic".into(),
            prototypes,
            template,
            descriptor_noise: 0.0,
            jitter: 0.0,
            response_noise: 0.0,
            rotation_range: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            translation_x: (0.0, 0.0),
            translation_y: (0.0, 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.template.is_empty() {
            return Err(Error::Argument("scene must contain at least one point".into()));
        }
        let dim = self.prototypes.first().map_or(0, Vec::len);
        if dim == 0 || self.prototypes.iter().any(|p| p.len() != dim) {
            return Err(Error::Argument(
                "prototypes must be nonempty and share one dimension".into(),
            ));
        }
        if let Some(tp) = self.template.iter().find(|t| t.prototype >= self.prototypes.len()) {
            return Err(Error::Argument(format!(
                "template point references prototype {} of {}",
                tp.prototype,
                self.prototypes.len()
            )));
        }
        if self.template.iter().any(|t| t.scale <= 0.0 || t.response < 0.0) {
            return Err(Error::Argument(
                "template points need positive scale and nonnegative response".into(),
            ));
        }
        let ranges = [
            self.rotation_range,
            self.scale_range,
            self.translation_x,
            self.translation_y,
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) || self.scale_range.0 <= 0.0 {
            return Err(Error::Argument("invalid transform range".into()));
        }
        if !(self.descriptor_noise >= 0.0 && self.jitter >= 0.0 && self.response_noise >= 0.0) {
            return Err(Error::Argument("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// Generates one image from `spec`. Identical arguments give identical output.
pub fn generate_synthetic_scene(spec: &SceneSpec, rng_seed: u64) -> Result<ImageRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let theta = uniform(&mut rng, spec.rotation_range);
    let scale = uniform(&mut rng, spec.scale_range);
    let tx = uniform(&mut rng, spec.translation_x);
    let ty = uniform(&mut rng, spec.translation_y);
    let (sin, cos) = theta.sin_cos();

    let keypoints = spec
        .template
        .iter()
        .map(|tp| {
            let x = scale * (cos * tp.x - sin * tp.y) + tx + gaussian(&mut rng, spec.jitter);
            let y = scale * (sin * tp.x + cos * tp.y) + ty + gaussian(&mut rng, spec.jitter);
            let descriptor = spec.prototypes[tp.prototype]
                .iter()
                .map(|&v| v + gaussian(&mut rng, spec.descriptor_noise))
                .collect();
            let response = (tp.response + gaussian(&mut rng, spec.response_noise)).max(0.0);
            KeyPoint {
                x,
                y,
                scale: tp.scale * scale,
                orientation: (tp.orientation + theta).rem_euclid(TAU),
                response,
                descriptor,
            }
        })
        .collect();

    Ok(ImageRecord {
        image_id: spec.image_id.clone(),
        object_label: spec.object_label.clone(),
        scene_id: spec.scene_id.clone(),
        split: Split::Train,
        keypoints,
    })
}

/// Parameters of the bundled four-class benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub images_per_class: usize,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub jitter: f64,
    pub split_fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            images_per_class: 20,
            descriptor_dim: 16,
            descriptor_noise: 0.03,
            jitter: 0.5,
            split_fraction: 0.5,
        }
    }
}

/// Class labels of the bundled benchmark. The first two share one descriptor
/// pool and differ only in how the descriptors are arranged in the plane; the
/// last two share the arrangement and differ only in descriptors.
pub const CONSTELLATION_CLASSES: [&str; 2] = ["constellation_mixed", "constellation_sorted"];
pub const DESCRIPTOR_CLASSES: [&str; 2] = ["descriptor_q", "descriptor_r"];

const PROTOTYPES_PER_POOL: usize = 6;
const BLOB_SPACING: f64 = 40.0;
const BLOB_RADIUS: f64 = 6.0;

fn unit_vectors(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| gaussian(rng, 1.0)).collect();
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            v.into_iter().map(|c| c / norm).collect()
        })
        .collect()
}

fn ring(center: (f64, f64), count: usize, phase: f64) -> impl Iterator<Item = (f64, f64)> {
    (0..count).map(move |i| {
        let a = phase + TAU * i as f64 / count as f64;
        (center.0 + BLOB_RADIUS * a.cos(), center.1 + BLOB_RADIUS * a.sin())
    })
}

/// Four blobs of six points; every blob holds one point of each prototype.
fn mixed_layout() -> Vec<(f64, f64, usize)> {
    let centers = [(0.0, 0.0), (BLOB_SPACING, 0.0), (0.0, BLOB_SPACING), (BLOB_SPACING, BLOB_SPACING * 1.1)];
    centers
        .iter()
        .enumerate()
        .flat_map(|(b, &c)| {
            ring(c, PROTOTYPES_PER_POOL, 0.3 * b as f64)
                .enumerate()
                .map(move |(i, (x, y))| (x, y, (i + b) % PROTOTYPES_PER_POOL))
        })
        .collect()
}

/// Six blobs of four points; every blob holds a single prototype.
fn sorted_layout() -> Vec<(f64, f64, usize)> {
    (0..PROTOTYPES_PER_POOL)
        .flat_map(|b| {
            let c = ((b % 3) as f64 * BLOB_SPACING, (b / 3) as f64 * BLOB_SPACING * 1.1);
            ring(c, 4, 0.25 * b as f64).map(move |(x, y)| (x, y, b))
        })
        .collect()
}

fn template_from(rng: &mut impl Rng, layout: &[(f64, f64, usize)]) -> Vec<TemplatePoint> {
    layout
        .iter()
        .map(|&(x, y, prototype)| TemplatePoint {
            x,
            y,
            prototype,
            response: uniform(rng, (10.0, 100.0)),
            scale: uniform(rng, (1.5, 4.0)),
            orientation: uniform(rng, (0.0, TAU)),
        })
        .collect()
}

/// Builds the bundled benchmark, split per object by `split_fraction`.
pub fn bundled_benchmark(spec: &BenchmarkSpec, rng_seed: u64) -> Result<Dataset> {
    if spec.images_per_class == 0 || spec.descriptor_dim == 0 {
        return Err(Error::Argument(
            "benchmark needs at least one image per class and a positive descriptor_dim".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shared_pool = unit_vectors(&mut rng, PROTOTYPES_PER_POOL, spec.descriptor_dim);
    let pool_q = unit_vectors(&mut rng, PROTOTYPES_PER_POOL, spec.descriptor_dim);
    let pool_r = unit_vectors(&mut rng, PROTOTYPES_PER_POOL, spec.descriptor_dim);
    let mixed = template_from(&mut rng, &mixed_layout());
    let sorted = template_from(&mut rng, &sorted_layout());

    let classes = [
        (CONSTELLATION_CLASSES[0], &shared_pool, &mixed),
        (CONSTELLATION_CLASSES[1], &shared_pool, &sorted),
        (DESCRIPTOR_CLASSES[0], &pool_q, &mixed),
        (DESCRIPTOR_CLASSES[1], &pool_r, &mixed),
    ];

    // Image ids carry no class information, so distance ties broken by id
    // do not favour any class.
    let total = classes.len() * spec.images_per_class;
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut rng);
    let width = total.to_string().len().max(3);

    let mut records = Vec::new();
    for (c, (label, pool, template)) in classes.into_iter().enumerate() {
        for i in 0..spec.images_per_class {
            let scene = SceneSpec {
                image_id: format!("img_{:0width$}", ids[c * spec.images_per_class + i]),
                object_label: label.to_string(),
                scene_id: format!("scene_{:02}", i % 10),
                prototypes: pool.clone(),
                template: template.clone(),
                descriptor_noise: spec.descriptor_noise,
                jitter: spec.jitter,
                response_noise: 5.0,
                rotation_range: (0.0, TAU),
                scale_range: (0.8, 1.25),
                translation_x: (0.0, 200.0),
                translation_y: (0.0, 200.0),
            };
            records.push(generate_synthetic_scene(&scene, rng.gen())?);
        }
    }

    let (train, test) = split_dataset(&records, spec.split_fraction, rng_seed)?;
    let train_ids: std::collections::HashSet<&str> =
        train.iter().map(|r| r.image_id.as_str()).collect();
    debug_assert_eq!(train.len() + test.len(), records.len());
    for record in &mut records {
        record.split = if train_ids.contains(record.image_id.as_str()) {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        descriptor_dim: spec.descriptor_dim,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        let prototypes = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let template = (0..10)
            .map(|i| TemplatePoint {
                x: i as f64 * 3.0,
                y: (i * i) as f64,
                prototype: i % 2,
                response: 10.0 + i as f64,
                scale: 2.0,
                orientation: 0.5,
            })
            .collect();
        SceneSpec::verbatim("img", "obj", prototypes, template)
    }

    #[test]
    fn zero_noise_identity_reproduces_template() {
        let spec = small_spec();
        let rec = generate_synthetic_scene(&spec, 7).unwrap();
        assert_eq!(rec.keypoints.len(), 10);
        for (kp, tp) in rec.keypoints.iter().zip(&spec.template) {
            assert_eq!((kp.x, kp.y), (tp.x, tp.y));
            assert_eq!(kp.descriptor, spec.prototypes[tp.prototype]);
            assert_eq!(kp.response, tp.response);
            assert_eq!(kp.scale, tp.scale);
            assert_eq!(kp.orientation, tp.orientation);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut spec = small_spec();
        spec.descriptor_noise = 0.1;
        spec.jitter = 1.0;
        spec.rotation_range = (0.0, 3.0);
        spec.translation_x = (-5.0, 5.0);
        let a = generate_synthetic_scene(&spec, 42).unwrap();
        let b = generate_synthetic_scene(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_template_is_rejected() {
        let mut spec = small_spec();
        spec.template.clear();
        assert!(matches!(generate_synthetic_scene(&spec, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn layouts_share_prototype_counts() {
        let count = |layout: Vec<(f64, f64, usize)>| {
            let mut c = [0usize; PROTOTYPES_PER_POOL];
            for (_, _, p) in layout {
                c[p] += 1;
            }
            c
        };
        assert_eq!(count(mixed_layout()), count(sorted_layout()));
    }

    #[test]
    fn benchmark_is_deterministic_and_split_per_class() {
        let spec = BenchmarkSpec {
            images_per_class: 5,
            ..BenchmarkSpec::default()
        };
        let a = bundled_benchmark(&spec, 3).unwrap();
        let b = bundled_benchmark(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 20);
        for label in CONSTELLATION_CLASSES.iter().chain(&DESCRIPTOR_CLASSES) {
            let train = a
                .records
                .iter()
                .filter(|r| r.object_label == *label && r.split == Split::Train)
                .count();
            assert_eq!(train, 3, "{label}");
        }
    }
}
