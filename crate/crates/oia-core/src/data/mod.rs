//! Scene ingestion, validation, persistence, and synthetic generation.
//!
//! A scene is a bag of frozen detector features plus its labels. Features
//! live in a binary file per scene, labels in one tab-separated annotation
//! file per split; both formats are defined here and round-trip bit-exactly.

pub mod annotations;
pub mod checkpoint;
pub mod features;
pub mod synthetic;

use crate::error::{OiaError, Result};
use crate::labels::{ActionLabel, ExplanationLabel, NUM_ACTIONS, NUM_EXPLANATIONS};
use crate::model::ModelConfig;
use crate::seeding;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One annotated scene: a backbone feature map, N proposal feature blocks,
/// and the action/explanation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    /// c_backbone x H_b x W_b.
    pub backbone: Tensor,
    /// N blocks of c_local x spatial x spatial.
    pub proposals: Vec<Tensor>,
    pub action: ActionLabel,
    pub explanation: ExplanationLabel,
}

/// Result of validating a record against a model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationOutcome {
    Ok,
    /// The scene has no proposals; the policy is to skip it with a warning
    /// rather than invent objects or fail the whole split.
    SkipEmptyScene,
}

/// Check a record's geometry and numeric sanity against `config`.
pub fn validate_record(record: &SceneRecord, config: &ModelConfig) -> Result<ValidationOutcome> {
    let b = &record.backbone;
    if b.rank() != 3 {
        return Err(OiaError::shape(
            "validate_record",
            format!("scene {}: backbone rank {} != 3", record.scene_id, b.rank()),
        ));
    }
    if b.shape()[0] != config.c_backbone {
        return Err(OiaError::shape(
            "validate_record",
            format!(
                "scene {}: backbone channels expected {}, actual {}",
                record.scene_id,
                config.c_backbone,
                b.shape()[0]
            ),
        ));
    }
    if b.shape()[1] < config.spatial || b.shape()[2] < config.spatial {
        return Err(OiaError::shape(
            "validate_record",
            format!(
                "scene {}: backbone {}x{} smaller than pooled size {}",
                record.scene_id,
                b.shape()[1],
                b.shape()[2],
                config.spatial
            ),
        ));
    }
    if !b.is_finite() {
        return Err(OiaError::Numeric(format!(
            "scene {}: non-finite backbone value",
            record.scene_id
        )));
    }
    for (i, p) in record.proposals.iter().enumerate() {
        let want = [config.c_local, config.spatial, config.spatial];
        if p.shape() != want {
            return Err(OiaError::shape(
                "validate_record",
                format!(
                    "scene {}: proposal {i} shape {:?}, expected {:?}",
                    record.scene_id,
                    p.shape(),
                    want
                ),
            ));
        }
        if !p.is_finite() {
            return Err(OiaError::Numeric(format!(
                "scene {}: non-finite value in proposal {i}",
                record.scene_id
            )));
        }
    }
    if record.proposals.is_empty() {
        return Ok(ValidationOutcome::SkipEmptyScene);
    }
    Ok(ValidationOutcome::Ok)
}

/// Positive-flag counts per action and per explanation category.
pub fn dataset_stats<'a, I>(annotations: I) -> ([u64; NUM_ACTIONS], [u64; NUM_EXPLANATIONS])
where
    I: IntoIterator<Item = &'a (String, ActionLabel, ExplanationLabel)>,
{
    let mut actions = [0u64; NUM_ACTIONS];
    let mut explanations = [0u64; NUM_EXPLANATIONS];
    for (_, a, e) in annotations {
        for (j, count) in actions.iter_mut().enumerate() {
            if a.bit(j) {
                *count += 1;
            }
        }
        for (j, count) in explanations.iter_mut().enumerate() {
            if e.bit(j) {
                *count += 1;
            }
        }
    }
    (actions, explanations)
}

/// Deterministic disjoint split of `n` items into train/val/test index sets.
/// `percents` must sum to 100; sizes are floor(n*p/100) for train and val,
/// the remainder goes to test.
pub fn split_indices(
    n: usize,
    percents: (u32, u32, u32),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (tr, va, te) = percents;
    if tr + va + te != 100 {
        return Err(OiaError::Config(format!(
            "split percentages {tr}/{va}/{te} do not sum to 100"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, u64::from_le_bytes(*b"splitter")));
    order.shuffle(&mut rng);
    let n_train = n * tr as usize / 100;
    let n_val = n * va as usize / 100;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n_proposals: usize, cfg: &ModelConfig) -> SceneRecord {
        let s = cfg.spatial;
        SceneRecord {
            scene_id: "s00000".into(),
            backbone: Tensor::zeros(&[cfg.c_backbone, s + 1, s + 2]),
            proposals: (0..n_proposals)
                .map(|_| Tensor::zeros(&[cfg.c_local, s, s]))
                .collect(),
            action: ActionLabel::from_mask("1000").unwrap(),
            explanation: ExplanationLabel::from_mask(&"0".repeat(21)).unwrap(),
        }
    }

    #[test]
    fn well_formed_record_passes() {
        let cfg = ModelConfig::scaled();
        assert_eq!(
            validate_record(&record(3, &cfg), &cfg).unwrap(),
            ValidationOutcome::Ok
        );
    }

    #[test]
    fn empty_scene_is_flagged_for_skipping() {
        let cfg = ModelConfig::scaled();
        assert_eq!(
            validate_record(&record(0, &cfg), &cfg).unwrap(),
            ValidationOutcome::SkipEmptyScene
        );
    }

    #[test]
    fn channel_mismatch_names_both_sides() {
        let cfg = ModelConfig::scaled();
        let mut r = record(2, &cfg);
        r.proposals[1] = Tensor::zeros(&[cfg.c_local + 1, cfg.spatial, cfg.spatial]);
        let err = validate_record(&r, &cfg).unwrap_err().to_string();
        assert!(err.contains("expected"), "{err}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let cfg = ModelConfig::scaled();
        let mut r = record(1, &cfg);
        r.proposals[0].values_mut()[0] = f64::NAN;
        assert!(validate_record(&r, &cfg).is_err());
    }

    #[test]
    fn stats_count_positive_flags() {
        let annos = vec![
            (
                "s1".to_string(),
                ActionLabel::from_mask("1000").unwrap(),
                ExplanationLabel::from_mask("100000000000000000000").unwrap(),
            ),
            (
                "s2".to_string(),
                ActionLabel::from_mask("1100").unwrap(),
                ExplanationLabel::from_mask("000100000000000000000").unwrap(),
            ),
        ];
        let (a, e) = dataset_stats(&annos);
        assert_eq!(a, [2, 1, 0, 0]);
        assert_eq!(e[0], 1);
        assert_eq!(e[3], 1);
        assert_eq!(e.iter().sum::<u64>(), 2);

        // Order of scenes does not matter.
        let reversed: Vec<_> = annos.iter().rev().cloned().collect();
        assert_eq!(dataset_stats(&reversed), (a, e));
    }

    #[test]
    fn split_is_disjoint_exact_and_covering() {
        let (tr, va, te) = split_indices(100, (70, 10, 20), 9).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 10, 20));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // Same seed reproduces the same split.
        assert_eq!(split_indices(100, (70, 10, 20), 9).unwrap(), (tr, va, te));
    }

    #[test]
    fn split_percentages_must_sum_to_100() {
        assert!(split_indices(10, (70, 10, 10), 0).is_err());
    }
}
