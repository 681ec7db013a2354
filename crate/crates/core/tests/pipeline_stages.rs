use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use graph_words::error::Error;
use graph_words::graph::{FeatureDumpRecord, LayerSpec};
use graph_words::keypoint::{load_dataset, save_dataset, Dataset};
use graph_words::pipeline::*;
use graph_words::retrieval::{evaluate, LabeledVector};
use graph_words::signature::{Metric, Normalization};
use graph_words::synthetic::{bundled_benchmark, BenchmarkSpec};

/// Four images, one per benchmark class.
fn tiny_config(root: &Path) -> PipelineConfig {
    PipelineConfig {
        manifest: root.join("data/manifest.json"),
        output_dir: root.join("out"),
        n_seeds: 6,
        first_pass_k: 4,
        dict_sizes: vec![8],
        benchmark: BenchmarkSpec {
            images_per_class: 2,
            ..BenchmarkSpec::default()
        },
        rng_seed: 3,
        ..PipelineConfig::default()
    }
}

fn read_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn extract_writes_one_file_per_image_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.benchmark.images_per_class = 1;
    cmd_synth(&config, None).unwrap();
    let total = cmd_extract(&config).unwrap();
    assert_eq!(total, 4 * 6 * 4);
    let feature_dir = config.output_dir.join("features");
    let files: Vec<_> = fs::read_dir(&feature_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    assert_eq!(files.len(), 4);
    for f in &files {
        let rows = read_lines(f);
        assert_eq!(rows.len(), 24);
        let first: FeatureDumpRecord = serde_json::from_str(&rows[0]).unwrap();
        assert_eq!(first.layer, 0);
    }

    let snapshot = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.display().to_string(), fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let before = snapshot(&feature_dir);
    cmd_extract(&config).unwrap();
    assert_eq!(snapshot(&feature_dir), before);
}

#[test]
fn empty_image_gives_empty_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let mut dataset = bundled_benchmark(&config.benchmark, 3).unwrap();
    dataset.records[0].keypoints.clear();
    let empty_id = dataset.records[0].image_id.clone();
    save_dataset(&dataset, config.manifest.parent().unwrap()).unwrap();
    cmd_extract(&config).unwrap();
    let path = config.output_dir.join("features").join(format!("{empty_id}.jsonl"));
    assert_eq!(fs::read(path).unwrap(), Vec::<u8>::new());
}

#[test]
fn dictionary_words_come_from_training_features() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_synth(&config, None).unwrap();
    cmd_extract(&config).unwrap();
    let written = cmd_build_dict(&config, Some(2), Some(8)).unwrap();
    assert_eq!(written, vec![codebook_path(&config.output_dir, 2, 8)]);
    let file: CodebookFile = serde_json::from_str(&fs::read_to_string(&written[0]).unwrap()).unwrap();
    assert_eq!(file.codebook.len(), 8);
    assert_eq!(file.codebook.layer, 2);

    // Every word must be the graph of an actual training image seed.
    let dataset = load_dataset(&config.manifest).unwrap();
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(config.output_dir.join("config.json")).unwrap()).unwrap();
    assert!(resolved["hashes"]["codebooks"].is_string());
    let (train, _) =
        graph_words::retrieval::split_dataset(&dataset.records, config.split_fraction, config.rng_seed).unwrap();
    let train_ids: BTreeSet<&str> = train.iter().map(|r| r.image_id.as_str()).collect();
    for word in &file.codebook.words {
        assert!(train_ids.contains(word.image_id.as_str()), "{} is not a training image", word.image_id);
        let dump_path = config.output_dir.join("features").join(format!("{}.jsonl", word.image_id));
        let dumps: Vec<FeatureDumpRecord> =
            read_lines(&dump_path).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        let as_dump = FeatureDumpRecord::from(word);
        assert!(dumps.contains(&as_dump));
    }

    let again = fs::read(&written[0]).unwrap();
    cmd_build_dict(&config, Some(2), Some(8)).unwrap();
    assert_eq!(fs::read(&written[0]).unwrap(), again);
}

#[test]
fn oversized_dictionary_is_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_synth(&config, None).unwrap();
    cmd_extract(&config).unwrap();
    // 4 objects x first_pass_k 4 = 16 pooled medoids
    let written = cmd_build_dict(&config, Some(1), Some(100)).unwrap();
    let file: CodebookFile = serde_json::from_str(&fs::read_to_string(&written[0]).unwrap()).unwrap();
    assert_eq!(file.codebook.len(), 16);
    assert_eq!(file.codebook.build_manifest.requested_size, 100);
    assert!(!file.codebook.build_manifest.warnings.is_empty());
}

#[test]
fn build_dict_needs_features() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_synth(&config, None).unwrap();
    let err = cmd_build_dict(&config, None, None).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);

    cmd_extract(&config).unwrap();
    let dataset = load_dataset(&config.manifest).unwrap();
    let victim = &dataset.records[1].image_id;
    fs::remove_file(config.output_dir.join("features").join(format!("{victim}.jsonl"))).unwrap();
    let err = cmd_build_dict(&config, None, None).unwrap_err();
    assert!(err.to_string().contains(victim.as_str()), "{err}");

    assert!(matches!(cmd_build_dict(&config, Some(9), None), Err(Error::Argument(_))));
}

#[test]
fn signatures_have_nested_length_and_tagged_mode() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_synth(&config, None).unwrap();
    cmd_extract(&config).unwrap();
    cmd_build_dict(&config, None, None).unwrap();
    let paths = cmd_signatures(&config).unwrap();
    let rows: Vec<SignatureRow> = read_lines(&paths[0]).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 8);
    for row in &rows {
        assert_eq!(row.record.normalization, Normalization::L1Normalized);
        let full = graph_words::signature::nested_concat(&row.record.signature(), &[0, 1, 2, 3]).unwrap();
        assert_eq!(full.len(), 32);
        for h in &row.record.layers {
            assert!((h.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    let raw = PipelineConfig {
        normalization: Normalization::RawCounts,
        ..config.clone()
    };
    // Codebooks do not depend on normalization, so they stay valid.
    let paths = cmd_signatures(&raw).unwrap();
    let rows: Vec<SignatureRow> = read_lines(&paths[0]).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    for row in &rows {
        assert_eq!(row.record.normalization, Normalization::RawCounts);
        assert_eq!(row.record.layers[0].histogram.iter().sum::<f64>(), 6.0);
    }
}

#[test]
fn missing_codebook_names_its_layer() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_synth(&config, None).unwrap();
    cmd_extract(&config).unwrap();
    cmd_build_dict(&config, None, None).unwrap();
    fs::remove_file(codebook_path(&config.output_dir, 2, 8)).unwrap();
    let err = cmd_signatures(&config).unwrap_err();
    assert!(err.to_string().contains("layer 2"), "{err}");
    assert_ne!(err.exit_code(), 0);
}

#[test]
fn mixing_configurations_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_synth(&config, None).unwrap();
    cmd_extract(&config).unwrap();
    cmd_build_dict(&config, None, None).unwrap();

    let other_kernel = PipelineConfig {
        beta: 0.2,
        ..config.clone()
    };
    assert!(matches!(cmd_signatures(&other_kernel), Err(Error::StaleArtifact { .. })));

    let other_layers = PipelineConfig {
        layers: LayerSpec::new(vec![0, 2, 4, 6]).unwrap(),
        ..config.clone()
    };
    assert!(matches!(cmd_build_dict(&other_layers, None, None), Err(Error::StaleArtifact { .. })));

    cmd_signatures(&config).unwrap();
    let other_norm = PipelineConfig {
        normalization: Normalization::RawCounts,
        ..config.clone()
    };
    assert!(matches!(cmd_evaluate(&other_norm), Err(Error::StaleArtifact { .. })));
    // the metric only affects evaluation
    let other_metric = PipelineConfig {
        metric: Metric::L2,
        ..config.clone()
    };
    cmd_evaluate(&other_metric).unwrap();
}

#[test]
fn evaluate_writes_reports_per_size_and_subset() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.benchmark.images_per_class = 4;
    config.dict_sizes = vec![4, 8];
    cmd_synth(&config, None).unwrap();
    let reports = cmd_run(&config).unwrap();
    assert_eq!(reports.len(), 2 * 7);

    let csv = fs::read_to_string(config.output_dir.join("reports/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("object_label,map,dict_size,layers,metric"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // four objects plus a mean row per report
    assert_eq!(rows.len(), 14 * 5);
    for row in &rows {
        let map: f64 = row[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&map));
        assert!(row[2] == "4" || row[2] == "8");
        assert_eq!(row[4], "l1");
    }
    let subsets: BTreeSet<&str> = rows.iter().map(|r| r[3]).collect();
    assert_eq!(subsets, ["0", "1", "2", "3", "0+1", "0+1+2", "0+1+2+3"].into_iter().collect());

    let file: ReportFile =
        serde_json::from_str(&fs::read_to_string(config.output_dir.join("reports/report.json")).unwrap()).unwrap();
    assert_eq!(file.reports, reports);
}

#[test]
fn single_layer_zero_is_plain_bag_of_words() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.benchmark.images_per_class = 4;
    cmd_synth(&config, None).unwrap();
    let reports = cmd_run(&config).unwrap();
    let layer0 = reports.iter().find(|r| r.config.layers == [0]).unwrap();

    // Quantize every seed descriptor against the layer-0 words directly.
    let book: CodebookFile =
        serde_json::from_str(&fs::read_to_string(codebook_path(&config.output_dir, 0, 8)).unwrap()).unwrap();
    let words: Vec<&Vec<f64>> = book.codebook.words.iter().map(|w| &w.node_descriptors[0]).collect();
    let dataset: Dataset = load_dataset(&config.manifest).unwrap();
    let (train_recs, test_recs) =
        graph_words::retrieval::split_dataset(&dataset.records, config.split_fraction, config.rng_seed).unwrap();
    let bovw = |recs: &[graph_words::keypoint::ImageRecord]| -> Vec<LabeledVector> {
        recs.iter()
            .map(|r| {
                let seeds = graph_words::keypoint::select_seeds(&r.keypoints, config.n_seeds).unwrap();
                let mut h = vec![0.0; words.len()];
                for &s in &seeds.seed_indices {
                    let d = &r.keypoints[s].descriptor;
                    let dist = |w: &Vec<f64>| w.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    let best = (0..words.len())
                        .min_by(|&a, &b| dist(words[a]).total_cmp(&dist(words[b])).then(a.cmp(&b)))
                        .unwrap();
                    h[best] += 1.0;
                }
                let total: f64 = h.iter().sum();
                LabeledVector {
                    image_id: r.image_id.clone(),
                    object_label: r.object_label.clone(),
                    vector: h.into_iter().map(|c| c / total).collect(),
                }
            })
            .collect()
    };
    let plain = evaluate(&bovw(&test_recs), &bovw(&train_recs), Metric::L1).unwrap();
    assert_eq!(plain.per_object_map, layer0.per_object_map);
}

#[test]
fn config_files_load_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("c.toml");
    fs::write(&toml_path, "n_seeds = 50\ndict_sizes = [10, 20]\nlinkage = \"complete\"\n").unwrap();
    let c = load_config(&toml_path).unwrap();
    assert_eq!((c.n_seeds, c.dict_sizes.clone()), (50, vec![10, 20]));

    let json_path = dir.path().join("c.json");
    fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(load_config(&json_path).unwrap(), c);

    let yaml = dir.path().join("c.yaml");
    fs::write(&yaml, "n_seeds: 3").unwrap();
    assert!(matches!(load_config(&yaml), Err(Error::Config(_))));
    fs::write(&toml_path, "n_seeds = \"many\"").unwrap();
    assert!(matches!(load_config(&toml_path), Err(Error::Config(_))));
}
