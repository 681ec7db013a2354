//! Staged, file-backed orchestration of the whole pipeline.
//!
//! Each command reads the artifacts of the previous stage from the output
//! directory and writes its own:
//!
//! ```text
//! <output_dir>/config.json                    resolved config and stage hashes
//! <output_dir>/features/index.json            per-image feature files
//! <output_dir>/features/<image_id>.jsonl
//! <output_dir>/codebooks/layer<L>_size<S>.json
//! <output_dir>/signatures/size<S>.jsonl
//! <output_dir>/reports/report.json
//! <output_dir>/reports/report.csv
//! ```
//!
//! Every artifact carries the hash of the configuration that produced it.
//! Hashes are staged: changing the metric leaves codebooks valid, changing
//! the CDK parameters invalidates codebooks, signatures and reports.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdk::{CdkParams, DistanceFlavor};
use crate::cluster::Linkage;
use crate::codebook::{first_pass, group_by_object, second_pass, Codebook, DictionaryParams};
use crate::error::{Error, Result};
use crate::graph::{build_graph_features, FeatureDumpRecord, GraphFeature, LayerSpec};
use crate::keypoint::{load_dataset, save_dataset, select_seeds, write_jsonl, Dataset, ImageRecord, Split};
use crate::retrieval::{evaluate, split_dataset, EvalReport, LabeledVector};
use crate::signature::{compute_signature, nested_concat, Metric, Normalization, SignatureRecord};
use crate::synthetic::{bundled_benchmark, BenchmarkSpec};

/// Where the train/test assignment comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    /// Stratified re-split with `split_fraction` and `rng_seed`.
    #[default]
    Resplit,
    /// Use the `split` field of each manifest entry.
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub n_seeds: usize,
    pub layers: LayerSpec,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub distance_flavor: DistanceFlavor,
    pub linkage: Linkage,
    pub first_pass_k: usize,
    pub dict_sizes: Vec<usize>,
    pub normalization: Normalization,
    pub metric: Metric,
    pub split_source: SplitSource,
    pub split_fraction: f64,
    pub rng_seed: u64,
    /// Only used by `synth`.
    pub benchmark: BenchmarkSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let cdk = CdkParams::default();
        PipelineConfig {
            manifest: PathBuf::from("data/manifest.json"),
            output_dir: PathBuf::from("out"),
            n_seeds: 300,
            layers: LayerSpec::default(),
            alpha: cdk.alpha,
            beta: cdk.beta,
            iterations: cdk.iterations,
            distance_flavor: cdk.distance_flavor,
            linkage: Linkage::Average,
            first_pass_k: 500,
            dict_sizes: vec![50, 100, 500, 1000, 2000, 5000],
            normalization: Normalization::L1Normalized,
            metric: Metric::L1,
            split_source: SplitSource::Resplit,
            split_fraction: 0.5,
            rng_seed: 0,
            benchmark: BenchmarkSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn cdk(&self) -> CdkParams {
        CdkParams {
            alpha: self.alpha,
            beta: self.beta,
            iterations: self.iterations,
            distance_flavor: self.distance_flavor,
        }
    }

    pub fn dictionary_params(&self) -> DictionaryParams {
        DictionaryParams {
            first_pass_k: self.first_pass_k,
            cdk: self.cdk(),
            linkage: self.linkage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_seeds == 0 {
            return fail("n_seeds must be at least 1".into());
        }
        if self.first_pass_k == 0 {
            return fail("first_pass_k must be at least 1".into());
        }
        if self.dict_sizes.is_empty() || self.dict_sizes.contains(&0) {
            return fail(format!("dict_sizes must be nonempty and positive, got {:?}", self.dict_sizes));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return fail(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        self.cdk().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Every layer subset that gets a report: each layer alone, then the
    /// nested prefixes `{0,1}`, `{0,1,2}`, ...
    pub fn layer_subsets(&self) -> Vec<Vec<usize>> {
        let n = self.layers.len();
        let singles = (0..n).map(|l| vec![l]);
        let nested = (2..=n).map(|k| (0..k).collect());
        singles.chain(nested).collect()
    }
}

/// Reads a JSON (`.json`) or TOML (`.toml`) config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
        _ => return Err(Error::Config(format!("{}: expected a .json or .toml file", path.display()))),
    };
    parsed.map_err(|m| Error::Config(format!("{}: {m}", path.display())))
}

fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hash input serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Configuration hashes of the three artifact-producing stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub dataset: String,
    pub features: String,
    pub codebooks: String,
    pub signatures: String,
}

impl StageHashes {
    /// `dataset` is hashed as loaded, before any re-split.
    fn compute(config: &PipelineConfig, dataset: &Dataset) -> Self {
        let dataset_hash = digest(&(dataset.descriptor_dim, &dataset.records));
        let features = digest(&(&dataset_hash, config.n_seeds, &config.layers));
        let codebooks = digest(&(
            &features,
            config.split_source,
            config.split_fraction,
            config.rng_seed,
            config.dictionary_params(),
        ));
        let signatures = digest(&(&codebooks, config.normalization));
        StageHashes {
            dataset: dataset_hash,
            features,
            codebooks,
            signatures,
        }
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config: &'a PipelineConfig,
    hashes: &'a StageHashes,
}

/// A loaded dataset with its split resolved, plus the stage hashes.
pub struct Workspace {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub hashes: StageHashes,
}

impl Workspace {
    pub fn open(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut dataset = load_dataset(&config.manifest)?;
        let hashes = StageHashes::compute(config, &dataset);
        if config.split_source == SplitSource::Resplit {
            let (train, test) = split_dataset(&dataset.records, config.split_fraction, config.rng_seed)?;
            let split_of: std::collections::HashMap<String, Split> = train
                .into_iter()
                .chain(test)
                .map(|r| (r.image_id, r.split))
                .collect();
            for r in &mut dataset.records {
                r.split = split_of[&r.image_id];
            }
        }
        let ws = Workspace {
            config: config.clone(),
            dataset,
            hashes,
        };
        fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
        let resolved = ResolvedConfig {
            config,
            hashes: &ws.hashes,
        };
        write_json(&ws.path("config.json"), &resolved)?;
        Ok(ws)
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.output_dir.join(rel)
    }

    fn train(&self) -> impl Iterator<Item = (usize, &ImageRecord)> {
        self.dataset
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                what: what.into(),
                path: path.into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                what: what.into(),
                path: path.into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

fn check_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::StaleArtifact {
            path: path.into(),
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub image_id: String,
    pub file: PathBuf,
    pub features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub config_hash: String,
    pub images: Vec<FeatureIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookFile {
    pub config_hash: String,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureRow {
    pub config_hash: String,
    #[serde(flatten)]
    pub record: SignatureRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
}

pub fn codebook_path(output_dir: &Path, layer: usize, size: usize) -> PathBuf {
    output_dir.join("codebooks").join(format!("layer{layer}_size{size}.json"))
}

pub fn signature_path(output_dir: &Path, size: usize) -> PathBuf {
    output_dir.join("signatures").join(format!("size{size}.jsonl"))
}

/// Writes the bundled benchmark as `<dir>/manifest.json`, where `dir` defaults
/// to the directory of the configured manifest.
pub fn cmd_synth(config: &PipelineConfig, dir: Option<&Path>) -> Result<PathBuf> {
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => config.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dataset = bundled_benchmark(&config.benchmark, config.rng_seed)?;
    let path = save_dataset(&dataset, &dir)?;
    log::info!("wrote {} images to {}", dataset.records.len(), path.display());
    Ok(path)
}

/// Writes one feature file per image. Returns the total number of features.
pub fn cmd_extract(config: &PipelineConfig) -> Result<usize> {
    let ws = Workspace::open(config)?;
    let dir = ws.path("features");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let entries: Vec<FeatureIndexEntry> = ws
        .dataset
        .records
        .par_iter()
        .map(|record| {
            if record.keypoints.is_empty() {
                log::warn!("image {} has no keypoints; writing an empty feature file", record.image_id);
            }
            let seeds = select_seeds(&record.keypoints, config.n_seeds)?;
            let features = build_graph_features(record, &seeds, &config.layers)?;
            let dump: Vec<FeatureDumpRecord> = features.iter().map(FeatureDumpRecord::from).collect();
            let file = PathBuf::from(format!("{}.jsonl", record.image_id));
            write_jsonl(&dir.join(&file), &dump)?;
            Ok(FeatureIndexEntry {
                image_id: record.image_id.clone(),
                file,
                features: dump.len(),
            })
        })
        .collect::<Result<_>>()?;

    let total = entries.iter().map(|e| e.features).sum();
    let index = FeatureIndex {
        config_hash: ws.hashes.features.clone(),
        images: entries,
    };
    write_json(&dir.join("index.json"), &index)?;
    log::info!("extracted {total} features from {} images", index.images.len());
    Ok(total)
}

/// Loads the extracted features of every record, in record order.
fn load_features(ws: &Workspace) -> Result<Vec<Vec<GraphFeature>>> {
    let dir = ws.path("features");
    let index_path = dir.join("index.json");
    let index: FeatureIndex = read_json(&index_path, "feature index (run extract first)")?;
    check_hash(&index_path, &ws.hashes.features, &index.config_hash)?;
    let files: std::collections::HashMap<&str, &Path> = index
        .images
        .iter()
        .map(|e| (e.image_id.as_str(), e.file.as_path()))
        .collect();

    ws.dataset
        .records
        .par_iter()
        .map(|record| {
            let file = files.get(record.image_id.as_str()).ok_or_else(|| Error::MissingArtifact {
                what: format!("features for image {}", record.image_id),
                path: index_path.clone(),
            })?;
            let path = dir.join(file);
            let rows: Vec<FeatureDumpRecord> =
                read_jsonl(&path, &format!("features for image {}", record.image_id))?;
            rows.iter()
                .map(|row| {
                    if row.image_id != record.image_id {
                        return Err(Error::format(
                            path.display().to_string(),
                            format!("feature of image {} in the file of {}", row.image_id, record.image_id),
                        ));
                    }
                    row.to_feature(&record.keypoints)
                })
                .collect()
        })
        .collect()
}

/// Builds codebooks for `layer` (default: every layer) at `size` (default:
/// every configured size). Returns the written paths.
pub fn cmd_build_dict(config: &PipelineConfig, layer: Option<usize>, size: Option<usize>) -> Result<Vec<PathBuf>> {
    let ws = Workspace::open(config)?;
    let layers: Vec<usize> = match layer {
        Some(l) if l >= config.layers.len() => {
            return Err(Error::Argument(format!(
                "layer {l} does not exist; configured layers are 0..{}",
                config.layers.len()
            )))
        }
        Some(l) => vec![l],
        None => (0..config.layers.len()).collect(),
    };
    let sizes = match size {
        Some(0) => return Err(Error::Argument("dictionary size must be at least 1".into())),
        Some(s) => vec![s],
        None => config.dict_sizes.clone(),
    };

    let features = load_features(&ws)?;
    let train: Vec<(&ImageRecord, &Vec<GraphFeature>)> = ws.train().map(|(i, r)| (r, &features[i])).collect();
    if train.is_empty() {
        return Err(Error::Argument("the training split is empty".into()));
    }
    let params = config.dictionary_params();
    let mut written = Vec::new();
    for &l in &layers {
        let grouped = group_by_object(
            train
                .iter()
                .map(|(r, f)| (*r, f.iter().filter(|g| g.layer == l).cloned().collect())),
        );
        let first = first_pass(&grouped, l, &params)?;
        for codebook in second_pass(&first, &sizes, &params)? {
            let path = codebook_path(&config.output_dir, l, codebook.build_manifest.requested_size);
            let file = CodebookFile {
                config_hash: ws.hashes.codebooks.clone(),
                codebook,
            };
            write_json(&path, &file)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn load_codebooks(ws: &Workspace, size: usize) -> Result<Vec<Codebook>> {
    (0..ws.config.layers.len())
        .map(|l| {
            let path = codebook_path(&ws.config.output_dir, l, size);
            let file: CodebookFile = read_json(&path, &format!("codebook for layer {l} at size {size}"))?;
            check_hash(&path, &ws.hashes.codebooks, &file.config_hash)?;
            if file.codebook.layer != l {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("holds the layer {} codebook, expected layer {l}", file.codebook.layer),
                ));
            }
            Ok(file.codebook)
        })
        .collect()
}

/// Writes one signature file per configured dictionary size.
pub fn cmd_signatures(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let ws = Workspace::open(config)?;
    // Check every codebook before the expensive feature load.
    let codebooks: Vec<Vec<Codebook>> = config
        .dict_sizes
        .iter()
        .map(|&s| load_codebooks(&ws, s))
        .collect::<Result<_>>()?;
    let features = load_features(&ws)?;

    let mut written = Vec::new();
    for (&size, books) in config.dict_sizes.iter().zip(&codebooks) {
        let rows: Vec<SignatureRow> = ws
            .dataset
            .records
            .par_iter()
            .zip(&features)
            .map(|(record, feats)| {
                let sig = compute_signature(feats, books, config.normalization)?;
                Ok(SignatureRow {
                    config_hash: ws.hashes.signatures.clone(),
                    record: SignatureRecord {
                        image_id: record.image_id.clone(),
                        object_label: record.object_label.clone(),
                        split: record.split,
                        normalization: sig.normalization,
                        layers: sig.layers,
                    },
                })
            })
            .collect::<Result<_>>()?;
        let path = signature_path(&config.output_dir, size);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
        write_jsonl(&path, &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// One report per (dictionary size, layer subset); also written as JSON and CSV.
pub fn cmd_evaluate(config: &PipelineConfig) -> Result<Vec<EvalReport>> {
    let ws = Workspace::open(config)?;
    let mut reports = Vec::new();
    for &size in &config.dict_sizes {
        let path = signature_path(&config.output_dir, size);
        let rows: Vec<SignatureRow> = read_jsonl(&path, &format!("signatures at size {size}"))?;
        for row in &rows {
            check_hash(&path, &ws.hashes.signatures, &row.config_hash)?;
        }
        for subset in config.layer_subsets() {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for row in &rows {
                let v = LabeledVector {
                    image_id: row.record.image_id.clone(),
                    object_label: row.record.object_label.clone(),
                    vector: nested_concat(&row.record.signature(), &subset)?,
                };
                match row.record.split {
                    Split::Train => train.push(v),
                    Split::Test => test.push(v),
                }
            }
            let mut report = evaluate(&test, &train, config.metric)?;
            report.config.layers = subset;
            report.config.dict_size = Some(size);
            report.config.normalization = Some(config.normalization);
            reports.push(report);
        }
    }
    let file = ReportFile {
        config_hash: ws.hashes.signatures.clone(),
        reports,
    };
    write_json(&ws.path("reports/report.json"), &file)?;
    let csv_path = ws.path("reports/report.csv");
    fs::write(&csv_path, report_csv(&file.reports)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(file.reports)
}

/// Label of the per-report mean row in the CSV.
pub const OVERALL_ROW: &str = "overall_mean";

/// Flat CSV: one row per object and one mean row per report. Layer subsets
/// are joined with `+`; undefined objects get an empty MAP.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["object_label", "map", "dict_size", "layers", "metric"])
        .expect("in-memory write");
    for r in reports {
        let size = r.config.dict_size.map(|s| s.to_string()).unwrap_or_default();
        let layers = r.config.layers.iter().map(usize::to_string).collect::<Vec<_>>().join("+");
        let metric = r.config.metric.to_string();
        let rows = r
            .per_object_map
            .iter()
            .map(|(label, map)| (label.as_str(), map.to_string()))
            .chain(r.undefined_objects.iter().map(|label| (label.as_str(), String::new())))
            .chain(std::iter::once((OVERALL_ROW, r.overall_mean.to_string())));
        for (label, map) in rows {
            out.write_record([label, &map, &size, &layers, &metric]).expect("in-memory write");
        }
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Extract, build every codebook, compute signatures and evaluate.
pub fn cmd_run(config: &PipelineConfig) -> Result<Vec<EvalReport>> {
    cmd_extract(config)?;
    cmd_build_dict(config, None, None)?;
    cmd_signatures(config)?;
    cmd_evaluate(config)
}
