//! On-disk dataset layout: one feature file per scene under `features/`,
//! one annotation file per split, and a manifest recording how everything
//! was generated.

use oia_core::data::annotations::{load_annotations, save_annotations, Annotation};
use oia_core::data::features::{load_features, write_features};
use oia_core::data::synthetic::{generate_synthetic, CausalRuleTable, Profile, SyntheticConfig};
use oia_core::data::{split_indices, validate_record, SceneRecord, ValidationOutcome};
use oia_core::model::ModelConfig;
use oia_core::{OiaError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Everything needed to regenerate or re-interpret a dataset directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scenes: usize,
    pub profile: String,
    pub noise_sigma: f64,
    pub causal_range: (usize, usize),
    pub distractor_range: (usize, usize),
    pub split_percents: (u32, u32, u32),
    pub split_counts: (usize, usize, usize),
    pub rule_table: String,
    pub rule_table_sha256: String,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

fn feature_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join("features").join(format!("{scene_id}.oiaf"))
}

/// Generate a dataset directory: features, split annotation files, manifest.
pub fn generate(
    out: &Path,
    scenes: usize,
    seed: u64,
    profile: &str,
    noise: f64,
    percents: (u32, u32, u32),
) -> Result<Manifest> {
    let profile = Profile::parse(profile)?;
    let mut config = SyntheticConfig::new(scenes, seed);
    config.noise_sigma = noise;
    config.profile = profile;
    let table = CausalRuleTable::default_table();
    let generated = generate_synthetic(&config, &table)?;

    fs::create_dir_all(out.join("features"))?;
    for g in &generated {
        write_features(
            &feature_path(out, &g.record.scene_id),
            &g.record.backbone,
            &g.record.proposals,
        )?;
    }

    let (train, val, test) = split_indices(scenes, percents, seed)?;
    for (name, indices) in SPLITS.iter().zip([&train, &val, &test]) {
        let annotations: Vec<Annotation> = indices
            .iter()
            .map(|&i| {
                let r = &generated[i].record;
                (r.scene_id.clone(), r.action, r.explanation)
            })
            .collect();
        save_annotations(&split_path(out, name), &annotations)?;
    }

    let manifest = Manifest {
        seed,
        scenes,
        profile: profile.name().to_string(),
        noise_sigma: config.noise_sigma,
        causal_range: config.causal_range,
        distractor_range: config.distractor_range,
        split_percents: percents,
        split_counts: (train.len(), val.len(), test.len()),
        rule_table: table.canonical_string(),
        rule_table_sha256: table.sha256_hex(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| OiaError::Format(format!("manifest: {e}")))?;
    fs::write(manifest_path(out), text + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path)
        .map_err(|e| OiaError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| OiaError::Format(format!("{}: {e}", path.display())))
}

/// The model configuration a dataset was generated for.
pub fn model_config(manifest: &Manifest) -> Result<ModelConfig> {
    Ok(Profile::parse(&manifest.profile)?.model_config())
}

/// Load one split's scene records, validating each against `config`.
/// Proposal-free scenes are skipped with a warning rather than failing the
/// whole split.
pub fn load_split(dir: &Path, split: &str, config: &ModelConfig) -> Result<Vec<SceneRecord>> {
    if !SPLITS.contains(&split) {
        return Err(OiaError::Config(format!(
            "unknown split {split:?}; expected train, val or test"
        )));
    }
    let annotations = load_annotations(&split_path(dir, split))?;
    let mut records = Vec::with_capacity(annotations.len());
    for (scene_id, action, explanation) in annotations {
        let (backbone, proposals) = load_features(&feature_path(dir, &scene_id))?;
        let record = SceneRecord {
            scene_id,
            backbone,
            proposals,
            action,
            explanation,
        };
        match validate_record(&record, config)? {
            ValidationOutcome::Ok => records.push(record),
            ValidationOutcome::SkipEmptyScene => {
                eprintln!("warning: empty scene {} skipped", record.scene_id);
            }
        }
    }
    Ok(records)
}
