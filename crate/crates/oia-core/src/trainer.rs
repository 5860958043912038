//! Training and evaluation loops.
//!
//! One run is fully determined by its [`TrainRunConfig`]: parameter init,
//! epoch shuffles and the random-selector draws all derive from the run
//! seed through counter-style mixing, so identical configs reproduce
//! identical parameter trajectories bit for bit. Within a batch, per-scene
//! losses and gradients are computed in parallel but reduced sequentially
//! in scene order, keeping the update independent of thread scheduling.

use crate::data::{validate_record, SceneRecord, ValidationOutcome};
use crate::error::{OiaError, Result};
use crate::labels::{NUM_ACTIONS, NUM_EXPLANATIONS};
use crate::metrics::{
    f1_all, mf1_from_class_scores, per_class_f1, threshold_predict, MetricsBundle,
};
use crate::model::{
    argmax, bind, global_module_forward, model_forward, Ablation, ModelConfig, ModelParams,
    SelectionMode, NUM_PARAM_TENSORS,
};
use crate::objectives::{multitask_loss, single_action_loss};
use crate::optim::{AdamHyper, AdamState, Schedule};
use crate::seeding::{fnv1a64, mix, mix3};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

/// Epoch tag for random-selector draws outside any training epoch.
const EVAL_EPOCH_TAG: u64 = u64::MAX;

/// Everything that varies between runs on the same dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub lambda: f64,
    pub k: usize,
    pub ablation: Ablation,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam: AdamHyper,
}

impl TrainRunConfig {
    pub fn new(seed: u64) -> Self {
        TrainRunConfig {
            seed,
            lambda: 1.0,
            k: 10,
            ablation: Ablation::Full,
            epochs: 30,
            batch_size: 16,
            schedule: Schedule::default(),
            adam: AdamHyper::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(OiaError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(OiaError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsBundle,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters after the final epoch.
    pub params: ModelParams,
    /// Parameters from the epoch with the best validation score.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Per-scene evaluation record for prediction dumps and attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub scene_id: String,
    pub action_pred: [bool; NUM_ACTIONS],
    pub expl_pred: [bool; NUM_EXPLANATIONS],
    /// Selector distribution over the scene's proposals.
    pub scores: Vec<f64>,
    /// Proposal indices fed to the head, highest score first.
    pub selected: Vec<usize>,
    /// Channel-mean of the pooled scene descriptor, row-major
    /// spatial x spatial; only populated on request.
    pub global_mean_map: Option<Vec<f64>>,
}

/// The model configuration a run actually trains: the dataset's base
/// geometry with the run's objective weight and selection width.
pub fn effective_config(base: &ModelConfig, run: &TrainRunConfig) -> ModelConfig {
    let mut cfg = *base;
    cfg.lambda = run.lambda;
    cfg.k = run.k;
    cfg
}

/// Deterministic stand-in for the learned selector: a seeded shuffle of the
/// proposal indices, truncated to the selection width. Depends only on
/// (run seed, epoch tag, scene id), so repeated evaluation is stable while
/// training sees fresh draws each epoch.
pub fn random_selection(
    run_seed: u64,
    epoch_tag: u64,
    scene_id: &str,
    n: usize,
    k: usize,
) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix3(run_seed, epoch_tag, fnv1a64(scene_id.as_bytes())));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n.min(k));
    idx
}

fn scene_loss_and_grads(
    scene: &SceneRecord,
    params: &ModelParams,
    cfg: &ModelConfig,
    run: &TrainRunConfig,
    epoch: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let given = match run.ablation {
        Ablation::RandomSelector => Some(random_selection(
            run.seed,
            epoch as u64,
            &scene.scene_id,
            scene.proposals.len(),
            cfg.k,
        )),
        _ => None,
    };
    let mode = match &given {
        Some(idx) => SelectionMode::Given(idx),
        None => SelectionMode::TopK,
    };
    let forward_ablation = match run.ablation {
        Ablation::RandomSelector | Ablation::SingleAction => Ablation::Full,
        other => other,
    };
    let out = model_forward(&mut tape, scene, &bound, cfg, forward_ablation, mode)?;
    let loss = if run.ablation == Ablation::SingleAction {
        single_action_loss(
            &mut tape,
            out.action_logits,
            out.expl_logits,
            &scene.action,
            &scene.explanation,
            cfg.lambda,
        )?
    } else {
        multitask_loss(
            &mut tape,
            out.action_logits,
            out.expl_logits,
            &scene.action,
            &scene.explanation,
            cfg.lambda,
        )?
    };
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(OiaError::Numeric(format!(
            "non-finite loss {loss_val} on scene {}",
            scene.scene_id
        )));
    }
    tape.backward(loss)?;
    let grads = bound
        .leaf_ids()
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).numel()],
        })
        .collect();
    Ok((loss_val, grads))
}

/// Indices of scenes that enter training/evaluation: structurally valid for
/// the configuration and carrying at least one proposal.
fn usable_scenes(split: &[SceneRecord], cfg: &ModelConfig) -> Result<Vec<usize>> {
    let mut keep = Vec::with_capacity(split.len());
    for (i, scene) in split.iter().enumerate() {
        match validate_record(scene, cfg)? {
            ValidationOutcome::Ok => keep.push(i),
            ValidationOutcome::SkipEmptyScene => {}
        }
    }
    Ok(keep)
}

/// Train on `train_split`, validating on `val_split` once per epoch.
pub fn train(
    train_split: &[SceneRecord],
    val_split: &[SceneRecord],
    base: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<TrainResult> {
    run.validate()?;
    let cfg = effective_config(base, run);
    cfg.validate()?;
    let train_idx = usable_scenes(train_split, &cfg)?;
    if train_idx.is_empty() {
        return Err(OiaError::Empty("training split"));
    }
    let mut params = ModelParams::init(&cfg, mix(run.seed, STREAM_INIT))?;
    let mut adam = AdamState::new(&params.tensors(), run.adam);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(run.epochs);

    for epoch in 0..run.epochs {
        let lr = run.schedule.lr_at_epoch(epoch)?;
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(run.seed, STREAM_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(run.batch_size) {
            let results: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| scene_loss_and_grads(&train_split[i], &params, &cfg, run, epoch))
                .collect::<Result<_>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut mean_grads: Vec<Vec<f64>> = Vec::with_capacity(NUM_PARAM_TENSORS);
            for t in 0..NUM_PARAM_TENSORS {
                let mut acc = vec![0.0; results[0].1[t].len()];
                for (_, grads) in &results {
                    for (a, &g) in acc.iter_mut().zip(&grads[t]) {
                        *a += g;
                    }
                }
                for a in acc.iter_mut() {
                    *a *= scale;
                }
                mean_grads.push(acc);
            }
            loss_sum += results.iter().map(|(l, _)| l).sum::<f64>();
            adam.step(&mut params.tensors_mut(), &mean_grads, lr)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let val = evaluate(val_split, &params, &cfg, run.ablation, run.seed)?;
        // The explanation head is the only trained output under an infinite
        // objective weight, so model selection follows it there.
        let score = if cfg.lambda.is_infinite() {
            val.expl_f1_all
        } else {
            val.action_f1_all
        };
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best_params = params.clone();
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val,
        });
    }

    Ok(TrainResult {
        params,
        best_params,
        best_epoch,
        log,
    })
}

/// Metrics of `params` on a split.
pub fn evaluate(
    split: &[SceneRecord],
    params: &ModelParams,
    cfg: &ModelConfig,
    ablation: Ablation,
    run_seed: u64,
) -> Result<MetricsBundle> {
    evaluate_detailed(split, params, cfg, ablation, run_seed, false).map(|(m, _)| m)
}

fn scene_eval(
    scene: &SceneRecord,
    params: &ModelParams,
    cfg: &ModelConfig,
    ablation: Ablation,
    run_seed: u64,
    with_maps: bool,
) -> Result<SceneEval> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let given = match ablation {
        Ablation::RandomSelector => Some(random_selection(
            run_seed,
            EVAL_EPOCH_TAG,
            &scene.scene_id,
            scene.proposals.len(),
            cfg.k,
        )),
        _ => None,
    };
    let mode = match &given {
        Some(idx) => SelectionMode::Given(idx),
        None => SelectionMode::TopK,
    };
    let forward_ablation = match ablation {
        Ablation::RandomSelector | Ablation::SingleAction => Ablation::Full,
        other => other,
    };
    let out = model_forward(&mut tape, scene, &bound, cfg, forward_ablation, mode)?;
    let action_vals = tape.value(out.action_logits).values();
    let action_pred: [bool; NUM_ACTIONS] = if ablation == Ablation::SingleAction {
        let mut one_hot = [false; NUM_ACTIONS];
        one_hot[argmax(action_vals)] = true;
        one_hot
    } else {
        threshold_predict(action_vals)
            .try_into()
            .expect("action head arity")
    };
    let expl_pred: [bool; NUM_EXPLANATIONS] =
        threshold_predict(tape.value(out.expl_logits).values())
            .try_into()
            .expect("explanation head arity");
    let global_mean_map = if with_maps {
        Some(channel_mean_map(scene, params, cfg, ablation)?)
    } else {
        None
    };
    Ok(SceneEval {
        scene_id: scene.scene_id.clone(),
        action_pred,
        expl_pred,
        scores: tape.value(out.scores).values().to_vec(),
        selected: out.selected_indices,
        global_mean_map,
    })
}

/// Channel mean of the pooled scene descriptor (all zeros when the global
/// branch is disabled).
fn channel_mean_map(
    scene: &SceneRecord,
    params: &ModelParams,
    cfg: &ModelConfig,
    ablation: Ablation,
) -> Result<Vec<f64>> {
    let cells = cfg.spatial * cfg.spatial;
    if ablation == Ablation::LocalOnly {
        return Ok(vec![0.0; cells]);
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let backbone = tape.leaf(scene.backbone.clone(), false);
    let t_g = global_module_forward(&mut tape, backbone, &bound.g1, &bound.g2, cfg.spatial)?;
    let vals = tape.value(t_g).values();
    let mut map = vec![0.0; cells];
    for ch in 0..cfg.c_global {
        for (cell, m) in map.iter_mut().enumerate() {
            *m += vals[ch * cells + cell];
        }
    }
    for m in map.iter_mut() {
        *m /= cfg.c_global as f64;
    }
    Ok(map)
}

/// Metrics plus per-scene predictions, in split order (empty scenes are
/// skipped). `with_maps` additionally extracts each scene's pooled-descriptor
/// mean map.
pub fn evaluate_detailed(
    split: &[SceneRecord],
    params: &ModelParams,
    cfg: &ModelConfig,
    ablation: Ablation,
    run_seed: u64,
    with_maps: bool,
) -> Result<(MetricsBundle, Vec<SceneEval>)> {
    let idx = usable_scenes(split, cfg)?;
    if idx.is_empty() {
        return Err(OiaError::Empty("evaluation split"));
    }
    let evals: Vec<SceneEval> = idx
        .par_iter()
        .map(|&i| scene_eval(&split[i], params, cfg, ablation, run_seed, with_maps))
        .collect::<Result<_>>()?;

    let action_preds: Vec<Vec<bool>> = evals.iter().map(|e| e.action_pred.to_vec()).collect();
    let action_truths: Vec<Vec<bool>> = idx.iter().map(|&i| split[i].action.0.to_vec()).collect();
    let expl_preds: Vec<Vec<bool>> = evals.iter().map(|e| e.expl_pred.to_vec()).collect();
    let expl_truths: Vec<Vec<bool>> = idx
        .iter()
        .map(|&i| split[i].explanation.0.to_vec())
        .collect();

    let per_action = per_class_f1(&action_preds, &action_truths)?;
    let metrics = MetricsBundle {
        per_action_f1: per_action
            .clone()
            .try_into()
            .expect("four action classes"),
        action_mf1: mf1_from_class_scores(&per_action)?,
        action_f1_all: f1_all(&action_preds, &action_truths)?,
        expl_mf1: mf1_from_class_scores(&per_class_f1(&expl_preds, &expl_truths)?)?,
        expl_f1_all: f1_all(&expl_preds, &expl_truths)?,
    };
    Ok((metrics, evals))
}
