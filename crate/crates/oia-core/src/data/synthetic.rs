//! Synthetic scenes with planted causal structure.
//!
//! Each of the 21 explanation categories has a causal archetype: an object
//! whose presence turns that explanation bit on and pushes action bits
//! according to a rule table (e.g. the red-light archetype sets stop and
//! clears move-forward). Distractor archetypes carry features but no label
//! effect. A scene's labels are therefore a known deterministic function of
//! which causal archetypes it contains, so "does explanation supervision
//! help action prediction" is testable with full ground truth.
//!
//! Every archetype owns a fixed random embedding; a proposal block is its
//! archetype's embedding broadcast over the spatial grid plus Gaussian
//! noise, and the backbone map scatters all object embeddings at random
//! cells plus noise. All values are quantized to binary32 so in-memory
//! tensors match their on-disk representation bit for bit.

use crate::data::SceneRecord;
use crate::error::{OiaError, Result};
use crate::labels::{
    ActionLabel, ExplanationLabel, EXPLANATION_NAMES, NUM_ACTIONS, NUM_EXPLANATIONS,
};
use crate::model::ModelConfig;
use crate::seeding::mix3;
use crate::tensor::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Channel/size profile for generated data and the matching model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-scale dimensions (2048-channel features, 24x40 backbone).
    Full,
    /// Desk-scale dimensions for fast experiments.
    Scaled,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "scaled" => Ok(Profile::Scaled),
            other => Err(OiaError::Config(format!(
                "unknown profile {other:?}; expected full or scaled"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Scaled => "scaled",
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        match self {
            Profile::Full => ModelConfig::full(),
            Profile::Scaled => ModelConfig::scaled(),
        }
    }

    /// Backbone map height and width produced by the generator.
    pub fn backbone_hw(&self) -> (usize, usize) {
        match self {
            Profile::Full => (24, 40),
            Profile::Scaled => (6, 6),
        }
    }
}

/// One archetype's label effect: which explanation bit it proves and which
/// action bits it sets or clears.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchetypeRule {
    pub name: String,
    pub explanation_bit: usize,
    pub sets: Vec<usize>,
    pub clears: Vec<usize>,
}

/// The full archetype vocabulary: one rule per explanation category plus a
/// count of label-neutral distractor archetypes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalRuleTable {
    pub rules: Vec<ArchetypeRule>,
    pub num_distractors: usize,
}

const F: usize = 0;
const S: usize = 1;
const L: usize = 2;
const R: usize = 3;

impl CausalRuleTable {
    /// Default table mirroring the label vocabulary's semantics:
    /// forward-evidence sets F; stop-evidence sets S and clears F; turn
    /// blockers clear their turn bit and set F (the road ahead stays the
    /// option); turn enablers set their turn bit. Clears dominate sets, so
    /// no archetype combination is order-dependent, and every archetype
    /// sets a bit that nothing in its possible companions can fully erase,
    /// so actions are never all zero.
    pub fn default_table() -> Self {
        let effect = |bit: usize| -> (Vec<usize>, Vec<usize>) {
            match bit {
                0..=2 => (vec![F], vec![]),
                3..=8 => (vec![S], vec![F]),
                9..=11 => (vec![F], vec![L]),
                12..=14 => (vec![L], vec![]),
                15..=17 => (vec![F], vec![R]),
                18..=20 => (vec![R], vec![]),
                _ => unreachable!("explanation bit out of range"),
            }
        };
        let rules = (0..NUM_EXPLANATIONS)
            .map(|bit| {
                let (sets, clears) = effect(bit);
                ArchetypeRule {
                    name: EXPLANATION_NAMES[bit].to_string(),
                    explanation_bit: bit,
                    sets,
                    clears,
                }
            })
            .collect();
        CausalRuleTable {
            rules,
            num_distractors: 12,
        }
    }

    /// Total archetype count: causal rules plus distractors.
    pub fn num_archetypes(&self) -> usize {
        self.rules.len() + self.num_distractors
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(OiaError::Empty("causal rule table"));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.explanation_bit >= NUM_EXPLANATIONS {
                return Err(OiaError::Config(format!(
                    "rule {i}: explanation bit {} out of range",
                    rule.explanation_bit
                )));
            }
            for &a in rule.sets.iter().chain(&rule.clears) {
                if a >= NUM_ACTIONS {
                    return Err(OiaError::Config(format!(
                        "rule {i}: action bit {a} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Labels implied by a multiset of causal archetype ids. Explanations
    /// are the union of the archetypes' bits; actions are the union of all
    /// set directives minus the union of all clear directives.
    pub fn apply(&self, causal: &[usize]) -> Result<(ActionLabel, ExplanationLabel)> {
        let mut expl = [false; NUM_EXPLANATIONS];
        let mut set = [false; NUM_ACTIONS];
        let mut clear = [false; NUM_ACTIONS];
        for &id in causal {
            let rule = self.rules.get(id).ok_or_else(|| {
                OiaError::Invalid(format!(
                    "archetype id {id} out of range for {} rules",
                    self.rules.len()
                ))
            })?;
            expl[rule.explanation_bit] = true;
            for &a in &rule.sets {
                set[a] = true;
            }
            for &a in &rule.clears {
                clear[a] = true;
            }
        }
        let mut action = [false; NUM_ACTIONS];
        for j in 0..NUM_ACTIONS {
            action[j] = set[j] && !clear[j];
        }
        Ok((ActionLabel(action), ExplanationLabel(expl)))
    }

    /// Stable textual form of the table, one rule per line; hashed into the
    /// dataset manifest so consumers can verify which rules produced it.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.rules.iter().enumerate() {
            out.push_str(&format!(
                "rule {i}: expl={} sets={:?} clears={:?} name={}\n",
                r.explanation_bit, r.sets, r.clears, r.name
            ));
        }
        out.push_str(&format!("distractors: {}\n", self.num_distractors));
        out
    }

    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Generator parameters. Each scene carries between `causal_range` causal
/// objects and `distractor_range` distractors (both ranges inclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub scenes: usize,
    pub causal_range: (usize, usize),
    pub distractor_range: (usize, usize),
    pub noise_sigma: f64,
    /// Extra noise multiplier for the backbone map only. Values above 1
    /// blur the scene-level shortcut, forcing models to identify objects
    /// through the proposal branch instead.
    pub backbone_noise_factor: f64,
    pub profile: Profile,
    pub seed: u64,
    /// Relative sampling weight per causal archetype; uniform when `None`.
    pub archetype_weights: Option<Vec<f64>>,
}

impl SyntheticConfig {
    pub fn new(scenes: usize, seed: u64) -> Self {
        SyntheticConfig {
            scenes,
            causal_range: (1, 4),
            distractor_range: (0, 12),
            noise_sigma: 0.1,
            backbone_noise_factor: 1.0,
            profile: Profile::Scaled,
            seed,
            archetype_weights: None,
        }
    }

    fn validate(&self, table: &CausalRuleTable) -> Result<()> {
        let (clo, chi) = self.causal_range;
        let (dlo, dhi) = self.distractor_range;
        if clo < 1 || clo > chi {
            return Err(OiaError::Config(format!(
                "causal range {clo}..={chi} must be non-empty and start at 1 or more"
            )));
        }
        if dlo > dhi {
            return Err(OiaError::Config(format!(
                "distractor range {dlo}..={dhi} is empty"
            )));
        }
        if dhi > 0 && table.num_distractors == 0 {
            return Err(OiaError::Config(
                "distractor range requires distractor archetypes in the table".into(),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(OiaError::Config(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !self.backbone_noise_factor.is_finite() || self.backbone_noise_factor < 0.0 {
            return Err(OiaError::Config(format!(
                "backbone noise factor must be finite and >= 0, got {}",
                self.backbone_noise_factor
            )));
        }
        if let Some(w) = &self.archetype_weights {
            if w.len() != table.rules.len() {
                return Err(OiaError::Config(format!(
                    "{} archetype weights for {} rules",
                    w.len(),
                    table.rules.len()
                )));
            }
            if w.iter().any(|&x| !x.is_finite() || x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(OiaError::Config(
                    "archetype weights must be non-negative with positive sum".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A generated scene plus the hidden ground truth that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub record: SceneRecord,
    /// Causal archetype ids, in draw order (may repeat).
    pub causal: Vec<usize>,
    /// Distractor archetype ids, in draw order.
    pub distractors: Vec<usize>,
}

const STREAM_EMBEDDING: u64 = 1;
const STREAM_SCENE: u64 = 2;

fn quantize(v: f64) -> f64 {
    (v as f32) as f64
}

/// Fixed per-archetype embedding, independent of scene count and position.
fn archetype_embedding(seed: u64, archetype: usize, c_local: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, STREAM_EMBEDDING, archetype as u64));
    (0..c_local)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Produce `config.scenes` deterministic scenes. Scene i depends only on
/// (seed, i), so prefixes agree across different scene counts.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    table: &CausalRuleTable,
) -> Result<Vec<GeneratedScene>> {
    table.validate()?;
    config.validate(table)?;
    let model = config.profile.model_config();
    let c_local = model.c_local;
    let (h_b, w_b) = config.profile.backbone_hw();
    let spatial = model.spatial;

    let embeddings: Vec<Vec<f64>> = (0..table.num_archetypes())
        .map(|a| archetype_embedding(config.seed, a, c_local))
        .collect();
    let weighted = config
        .archetype_weights
        .as_ref()
        .map(|w| WeightedIndex::new(w).map_err(|e| OiaError::Config(e.to_string())))
        .transpose()?;

    let mut scenes = Vec::with_capacity(config.scenes);
    for i in 0..config.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(config.seed, STREAM_SCENE, i as u64));
        let n_causal = rng.random_range(config.causal_range.0..=config.causal_range.1);
        let n_distr = rng.random_range(config.distractor_range.0..=config.distractor_range.1);
        let causal: Vec<usize> = (0..n_causal)
            .map(|_| match &weighted {
                Some(w) => w.sample(&mut rng),
                None => rng.random_range(0..table.rules.len()),
            })
            .collect();
        let distractors: Vec<usize> = (0..n_distr)
            .map(|_| rng.random_range(0..table.num_distractors))
            .collect();
        let (action, explanation) = table.apply(&causal)?;

        // Objects in randomized presentation order, each tagged with its
        // archetype's embedding index.
        let mut objects: Vec<usize> = causal
            .iter()
            .copied()
            .chain(distractors.iter().map(|&d| table.rules.len() + d))
            .collect();
        objects.shuffle(&mut rng);

        let mut backbone = vec![0.0f64; c_local * h_b * w_b];
        for &arch in &objects {
            let y = rng.random_range(0..h_b);
            let x = rng.random_range(0..w_b);
            for (ch, &e) in embeddings[arch].iter().enumerate() {
                backbone[(ch * h_b + y) * w_b + x] += e;
            }
        }
        let backbone_sigma = config.noise_sigma * config.backbone_noise_factor;
        for v in backbone.iter_mut() {
            *v = quantize(*v + rng.sample::<f64, _>(StandardNormal) * backbone_sigma);
        }

        let proposals: Vec<Tensor> = objects
            .iter()
            .map(|&arch| {
                let emb = &embeddings[arch];
                Tensor::from_fn(&[c_local, spatial, spatial], |idx| {
                    let ch = idx / (spatial * spatial);
                    quantize(emb[ch] + rng.sample::<f64, _>(StandardNormal) * config.noise_sigma)
                })
            })
            .collect();

        scenes.push(GeneratedScene {
            record: SceneRecord {
                scene_id: format!("s{i:05}"),
                backbone: Tensor::new(vec![c_local, h_b, w_b], backbone)?,
                proposals,
                action,
                explanation,
            },
            causal,
            distractors,
        });
    }
    Ok(scenes)
}
