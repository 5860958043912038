//! The prediction network: global context module, object-scene tensor
//! construction, learned top-k object selection, and the shared head that
//! emits 4 action and 21 explanation logits.
//!
//! Selection is hard (the k largest scores are chosen) but each chosen block
//! is multiplied by its softmax score, so the selector is trained by the
//! overall loss even though ranking itself has no gradient.

use crate::data::SceneRecord;
use crate::error::{OiaError, Result};
use crate::labels::{NUM_ACTIONS, NUM_EXPLANATIONS};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Architecture hyperparameters. `lambda` is the explanation-loss weight; it
/// rides along here because checkpoints must restore the exact objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub c_backbone: usize,
    pub c_local: usize,
    pub c_global: usize,
    /// Intermediate width of the global module's first convolution.
    pub global_mid: usize,
    /// Side length proposals are pooled to and the global map is reduced to.
    pub spatial: usize,
    /// Number of objects kept by the selector.
    pub k: usize,
    /// Widths of the selector's first two convolutions (the third emits 1).
    pub selector_mid: (usize, usize),
    /// Hidden widths of the fully connected head.
    pub head_dims: (usize, usize),
    /// Explanation-loss weight; 0 ignores explanations, `f64::INFINITY`
    /// trains on explanations alone.
    pub lambda: f64,
}

impl ModelConfig {
    /// Full-scale configuration: 2048-channel features, 256-channel global
    /// context, 7x7 pooling, top-10 selection.
    pub fn full() -> Self {
        ModelConfig {
            c_backbone: 2048,
            c_local: 2048,
            c_global: 256,
            global_mid: 512,
            spatial: 7,
            k: 10,
            selector_mid: (256, 64),
            head_dims: (1024, 256),
            lambda: 1.0,
        }
    }

    /// Desk-scale configuration for fast experiments and gradient checks.
    pub fn scaled() -> Self {
        ModelConfig {
            c_backbone: 16,
            c_local: 16,
            c_global: 8,
            global_mid: 16,
            spatial: 3,
            k: 10,
            selector_mid: (16, 8),
            head_dims: (64, 32),
            lambda: 1.0,
        }
    }

    /// Object-scene channel count: local plus global channels.
    pub fn c(&self) -> usize {
        self.c_local + self.c_global
    }

    /// Length of the flattened head input: k pooled object-scene vectors.
    pub fn head_input_len(&self) -> usize {
        self.k * self.c()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.c_global < 1 || self.spatial < 1 {
            return Err(OiaError::Config(format!(
                "k ({}), c_global ({}) and spatial ({}) must all be >= 1",
                self.k, self.c_global, self.spatial
            )));
        }
        if self.c_backbone < 1
            || self.c_local < 1
            || self.global_mid < 1
            || self.selector_mid.0 < 1
            || self.selector_mid.1 < 1
            || self.head_dims.0 < 1
            || self.head_dims.1 < 1
        {
            return Err(OiaError::Config("all channel widths must be >= 1".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(OiaError::Config(format!(
                "lambda must be >= 0 or infinity, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Weights and bias of one convolution, with its fixed stride and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Weights and bias of one fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

fn init_conv(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    padding: usize,
) -> ConvParams {
    let fan_in = (c_in * kernel * kernel) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = c_out * c_in * kernel * kernel;
    let w: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    ConvParams {
        w: Tensor::new(vec![c_out, c_in, kernel, kernel], w).expect("conv weight shape"),
        b: Tensor::zeros(&[c_out]),
        stride: 1,
        padding,
    }
}

fn init_linear(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize) -> LinearParams {
    let std = (2.0 / d_in as f64).sqrt();
    let w: Vec<f64> = (0..d_out * d_in)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    LinearParams {
        w: Tensor::new(vec![d_out, d_in], w).expect("linear weight shape"),
        b: Tensor::zeros(&[d_out]),
    }
}

/// Two 3x3 convolutions (ReLU between) followed by adaptive average pooling
/// down to spatial x spatial; compresses the backbone map into the global
/// context tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModuleParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

/// Three convolutions reducing an object-scene block to one score logit.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

/// Three fully connected layers mapping the k pooled object-scene vectors to
/// 25 logits, split 4 actions / 21 explanations.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub fc_out: LinearParams,
}

/// All trainable parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub global: GlobalModuleParams,
    pub selector: SelectorParams,
    pub head: HeadParams,
}

pub const NUM_PARAM_TENSORS: usize = 16;

/// Stable names for the 16 parameter tensors, in canonical order.
pub fn tensor_names() -> [&'static str; NUM_PARAM_TENSORS] {
    [
        "global.conv1.w",
        "global.conv1.b",
        "global.conv2.w",
        "global.conv2.b",
        "selector.conv1.w",
        "selector.conv1.b",
        "selector.conv2.w",
        "selector.conv2.b",
        "selector.conv3.w",
        "selector.conv3.b",
        "head.fc1.w",
        "head.fc1.b",
        "head.fc2.w",
        "head.fc2.b",
        "head.fc_out.w",
        "head.fc_out.b",
    ]
}

impl ModelParams {
    /// He-normal weights, zero biases, fully determined by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.c();
        let global = GlobalModuleParams {
            conv1: init_conv(&mut rng, config.global_mid, config.c_backbone, 3, 1),
            conv2: init_conv(&mut rng, config.c_global, config.global_mid, 3, 1),
        };
        let selector = SelectorParams {
            conv1: init_conv(&mut rng, config.selector_mid.0, c, 1, 0),
            conv2: init_conv(&mut rng, config.selector_mid.1, config.selector_mid.0, 3, 1),
            conv3: init_conv(&mut rng, 1, config.selector_mid.1, 1, 0),
        };
        let head = HeadParams {
            fc1: init_linear(&mut rng, config.head_dims.0, config.head_input_len()),
            fc2: init_linear(&mut rng, config.head_dims.1, config.head_dims.0),
            fc_out: init_linear(
                &mut rng,
                NUM_ACTIONS + NUM_EXPLANATIONS,
                config.head_dims.1,
            ),
        };
        Ok(ModelParams {
            config: *config,
            global,
            selector,
            head,
        })
    }

    /// The 16 parameter tensors in canonical order (see [`tensor_names`]).
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.global.conv1.w,
            &self.global.conv1.b,
            &self.global.conv2.w,
            &self.global.conv2.b,
            &self.selector.conv1.w,
            &self.selector.conv1.b,
            &self.selector.conv2.w,
            &self.selector.conv2.b,
            &self.selector.conv3.w,
            &self.selector.conv3.b,
            &self.head.fc1.w,
            &self.head.fc1.b,
            &self.head.fc2.w,
            &self.head.fc2.b,
            &self.head.fc_out.w,
            &self.head.fc_out.b,
        ]
    }

    /// Mutable view of the same tensors, same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.global.conv1.w,
            &mut self.global.conv1.b,
            &mut self.global.conv2.w,
            &mut self.global.conv2.b,
            &mut self.selector.conv1.w,
            &mut self.selector.conv1.b,
            &mut self.selector.conv2.w,
            &mut self.selector.conv2.b,
            &mut self.selector.conv3.w,
            &mut self.selector.conv3.b,
            &mut self.head.fc1.w,
            &mut self.head.fc1.b,
            &mut self.head.fc2.w,
            &mut self.head.fc2.b,
            &mut self.head.fc_out.w,
            &mut self.head.fc_out.b,
        ]
    }

    /// Rebuild parameters from the 16 canonical tensors (checkpoint loading).
    /// Shapes are validated against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != NUM_PARAM_TENSORS {
            return Err(OiaError::shape(
                "from_tensors",
                format!("expected {NUM_PARAM_TENSORS} tensors, got {}", tensors.len()),
            ));
        }
        let expected = Self::expected_shapes(config);
        for (i, (t, shape)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(OiaError::shape(
                    "from_tensors",
                    format!(
                        "{}: shape {:?}, expected {:?}",
                        tensor_names()[i],
                        t.shape(),
                        shape
                    ),
                ));
            }
        }
        let mut it = tensors.into_iter();
        let mut conv = |padding: usize| ConvParams {
            w: it.next().unwrap(),
            b: it.next().unwrap(),
            stride: 1,
            padding,
        };
        let global = GlobalModuleParams {
            conv1: conv(1),
            conv2: conv(1),
        };
        let selector = SelectorParams {
            conv1: conv(0),
            conv2: conv(1),
            conv3: conv(0),
        };
        let mut lin = || LinearParams {
            w: it.next().unwrap(),
            b: it.next().unwrap(),
        };
        let head = HeadParams {
            fc1: lin(),
            fc2: lin(),
            fc_out: lin(),
        };
        Ok(ModelParams {
            config: *config,
            global,
            selector,
            head,
        })
    }

    /// Expected shapes of the canonical tensors under `config`; used to
    /// validate checkpoints.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let c = config.c();
        vec![
            vec![config.global_mid, config.c_backbone, 3, 3],
            vec![config.global_mid],
            vec![config.c_global, config.global_mid, 3, 3],
            vec![config.c_global],
            vec![config.selector_mid.0, c, 1, 1],
            vec![config.selector_mid.0],
            vec![config.selector_mid.1, config.selector_mid.0, 3, 3],
            vec![config.selector_mid.1],
            vec![1, config.selector_mid.1, 1, 1],
            vec![1],
            vec![config.head_dims.0, config.head_input_len()],
            vec![config.head_dims.0],
            vec![config.head_dims.1, config.head_dims.0],
            vec![config.head_dims.1],
            vec![NUM_ACTIONS + NUM_EXPLANATIONS, config.head_dims.1],
            vec![NUM_ACTIONS + NUM_EXPLANATIONS],
        ]
    }
}

/// Tape handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: TensorId,
    pub b: TensorId,
    pub stride: usize,
    pub padding: usize,
}

/// Tape handles for one fully connected layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: TensorId,
    pub b: TensorId,
}

/// All parameters registered as leaves on one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub g1: BoundConv,
    pub g2: BoundConv,
    pub s1: BoundConv,
    pub s2: BoundConv,
    pub s3: BoundConv,
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
    pub fc_out: BoundLinear,
}

impl BoundModel {
    /// Leaf ids in the canonical tensor order, for gradient extraction.
    pub fn leaf_ids(&self) -> [TensorId; NUM_PARAM_TENSORS] {
        [
            self.g1.w,
            self.g1.b,
            self.g2.w,
            self.g2.b,
            self.s1.w,
            self.s1.b,
            self.s2.w,
            self.s2.b,
            self.s3.w,
            self.s3.b,
            self.fc1.w,
            self.fc1.b,
            self.fc2.w,
            self.fc2.b,
            self.fc_out.w,
            self.fc_out.b,
        ]
    }
}

/// Register every parameter tensor on `tape`. `trainable = false` gives a
/// gradient-free evaluation pass.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> BoundModel {
    let mut conv = |c: &ConvParams| BoundConv {
        w: tape.leaf(c.w.clone(), trainable),
        b: tape.leaf(c.b.clone(), trainable),
        stride: c.stride,
        padding: c.padding,
    };
    let g1 = conv(&params.global.conv1);
    let g2 = conv(&params.global.conv2);
    let s1 = conv(&params.selector.conv1);
    let s2 = conv(&params.selector.conv2);
    let s3 = conv(&params.selector.conv3);
    let mut lin = |l: &LinearParams| BoundLinear {
        w: tape.leaf(l.w.clone(), trainable),
        b: tape.leaf(l.b.clone(), trainable),
    };
    let fc1 = lin(&params.head.fc1);
    let fc2 = lin(&params.head.fc2);
    let fc_out = lin(&params.head.fc_out);
    BoundModel {
        g1,
        g2,
        s1,
        s2,
        s3,
        fc1,
        fc2,
        fc_out,
    }
}

fn conv(tape: &mut Tape, x: TensorId, c: &BoundConv) -> Result<TensorId> {
    tape.conv2d(x, c.w, c.b, c.stride, c.padding)
}

/// Backbone map -> conv/ReLU twice -> adaptive average pool to the shared
/// spatial size. Output: c_global x spatial x spatial.
pub fn global_module_forward(
    tape: &mut Tape,
    backbone: TensorId,
    g1: &BoundConv,
    g2: &BoundConv,
    spatial: usize,
) -> Result<TensorId> {
    let h1 = conv(tape, backbone, g1)?;
    let h1 = tape.relu(h1);
    let h2 = conv(tape, h1, g2)?;
    let h2 = tape.relu(h2);
    tape.adaptive_avg_pool2d(h2, spatial, spatial)
}

/// Channel-concatenate each proposal block with the shared global tensor.
/// Block i has the proposal in channels [0, c_local) and the global context
/// in [c_local, c).
pub fn build_object_scene_tensors(
    tape: &mut Tape,
    proposals: &[TensorId],
    t_g: TensorId,
) -> Result<Vec<TensorId>> {
    if proposals.is_empty() {
        return Err(OiaError::Empty("scene proposals"));
    }
    proposals
        .iter()
        .map(|&p| tape.concat_channels(p, t_g))
        .collect()
}

/// Score every object-scene block with the three-convolution stack, reduce
/// each to a scalar by spatial mean, and softmax across the N objects.
pub fn selector_scores(
    tape: &mut Tape,
    object_scene: &[TensorId],
    s1: &BoundConv,
    s2: &BoundConv,
    s3: &BoundConv,
) -> Result<TensorId> {
    if object_scene.is_empty() {
        return Err(OiaError::Empty("object-scene blocks"));
    }
    let mut raw = Vec::with_capacity(object_scene.len());
    for &block in object_scene {
        let h = conv(tape, block, s1)?;
        let h = tape.relu(h);
        let h = conv(tape, h, s2)?;
        let h = tape.relu(h);
        let h = conv(tape, h, s3)?;
        raw.push(tape.spatial_mean(h)?);
    }
    let logits = tape.concat_vecs(&raw)?;
    tape.softmax(logits)
}

/// Indices sorted by score descending, ties broken by lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("non-finite selector score")
            .then(a.cmp(&b))
    });
    order
}

/// Outcome of object selection: the chosen object indices in slot order and
/// exactly k blocks (score-weighted, zero-padded when the scene has fewer
/// than k objects).
#[derive(Debug, Clone)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub blocks: Vec<TensorId>,
}

fn select_given(
    tape: &mut Tape,
    scores: TensorId,
    object_scene: &[TensorId],
    k: usize,
    chosen: &[usize],
) -> Result<Selection> {
    let n = object_scene.len();
    let block_shape = tape.value(object_scene[0]).shape().to_vec();
    let mut blocks = Vec::with_capacity(k);
    for &i in chosen {
        if i >= n {
            return Err(OiaError::Invalid(format!(
                "selected index {i} out of range for {n} objects"
            )));
        }
        let s = tape.gather1(scores, i)?;
        blocks.push(tape.mul_scalar(object_scene[i], s)?);
    }
    while blocks.len() < k {
        blocks.push(tape.leaf(Tensor::zeros(&block_shape), false));
    }
    Ok(Selection {
        indices: chosen.to_vec(),
        blocks,
    })
}

/// Keep the k largest-score objects (slot order: descending score, ties by
/// lower index), each multiplied by its score; pad with zero blocks when
/// N < k.
pub fn select_top_k(
    tape: &mut Tape,
    scores: TensorId,
    object_scene: &[TensorId],
    k: usize,
) -> Result<Selection> {
    if k < 1 {
        return Err(OiaError::Config("top-k selection requires k >= 1".into()));
    }
    if object_scene.is_empty() {
        return Err(OiaError::Empty("object-scene blocks"));
    }
    let vals = tape.value(scores).values().to_vec();
    if vals.len() != object_scene.len() {
        return Err(OiaError::shape(
            "select_top_k",
            format!("{} scores vs {} blocks", vals.len(), object_scene.len()),
        ));
    }
    let order = rank_by_score(&vals);
    let chosen: Vec<usize> = order.into_iter().take(k.min(vals.len())).collect();
    select_given(tape, scores, object_scene, k, &chosen)
}

/// Pool each selected block over space, concatenate in slot order, and run
/// the fully connected trunk. Returns (action logits, explanation logits).
pub fn head_predict(
    tape: &mut Tape,
    selected: &[TensorId],
    k: usize,
    fc1: &BoundLinear,
    fc2: &BoundLinear,
    fc_out: &BoundLinear,
) -> Result<(TensorId, TensorId)> {
    if selected.len() != k {
        return Err(OiaError::shape(
            "head_predict",
            format!("expected {k} selected blocks, got {}", selected.len()),
        ));
    }
    let mut pooled = Vec::with_capacity(k);
    for &b in selected {
        pooled.push(tape.spatial_mean(b)?);
    }
    let flat = tape.concat_vecs(&pooled)?;
    let h = tape.linear(flat, fc1.w, fc1.b)?;
    let h = tape.relu(h);
    let h = tape.linear(h, fc2.w, fc2.b)?;
    let h = tape.relu(h);
    let out = tape.linear(h, fc_out.w, fc_out.b)?;
    let action = tape.slice_vec(out, 0, NUM_ACTIONS)?;
    let expl = tape.slice_vec(out, NUM_ACTIONS, NUM_EXPLANATIONS)?;
    Ok((action, expl))
}

/// Structural variants used by the experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Global context + selected local objects (the full model).
    Full,
    /// Global context zeroed out; only local object features drive the head.
    LocalOnly,
    /// Proposals ignored; the head sees k copies of the global tensor with
    /// zeroed local channels.
    GlobalOnly,
    /// Selector scores are still computed, but which objects feed the head
    /// is chosen at random instead of by score.
    RandomSelector,
    /// Same trunk as Full; the four action logits are committed to a single
    /// action through a softmax at the objective/prediction stage.
    SingleAction,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "local-only" => Ablation::LocalOnly,
            "global-only" => Ablation::GlobalOnly,
            "random-selector" => Ablation::RandomSelector,
            "single-action" => Ablation::SingleAction,
            other => {
                return Err(OiaError::Config(format!(
                    "unknown ablation {other:?}; expected full, local-only, global-only, random-selector or single-action"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::LocalOnly => "local-only",
            Ablation::GlobalOnly => "global-only",
            Ablation::RandomSelector => "random-selector",
            Ablation::SingleAction => "single-action",
        }
    }
}

/// How the k head slots are filled.
#[derive(Debug, Clone, Copy)]
pub enum SelectionMode<'a> {
    /// The k largest-score objects.
    TopK,
    /// Externally chosen object indices (the random-selector ablation).
    Given(&'a [usize]),
}

/// Everything a forward pass produces, as tape handles plus the chosen
/// object indices. `selected_indices` lists only real objects (fewer than k
/// entries when the scene has fewer than k proposals).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub action_logits: TensorId,
    pub expl_logits: TensorId,
    pub scores: TensorId,
    pub selected_indices: Vec<usize>,
}

/// Run the full network on one scene. Scene features enter the tape as
/// frozen leaves; parameters must already be bound.
pub fn model_forward(
    tape: &mut Tape,
    scene: &SceneRecord,
    bound: &BoundModel,
    config: &ModelConfig,
    ablation: Ablation,
    mode: SelectionMode,
) -> Result<ForwardOutput> {
    let n = scene.proposals.len();
    if n == 0 {
        return Err(OiaError::Empty("scene proposals"));
    }
    let proposals: Vec<TensorId> = scene
        .proposals
        .iter()
        .map(|p| tape.leaf(p.clone(), false))
        .collect();

    if ablation == Ablation::GlobalOnly {
        let backbone = tape.leaf(scene.backbone.clone(), false);
        let t_g = global_module_forward(tape, backbone, &bound.g1, &bound.g2, config.spatial)?;
        let zeros_local = tape.leaf(
            Tensor::zeros(&[config.c_local, config.spatial, config.spatial]),
            false,
        );
        let block = tape.concat_channels(zeros_local, t_g)?;
        let selected: Vec<TensorId> = vec![block; config.k];
        let (action, expl) = head_predict(
            tape,
            &selected,
            config.k,
            &bound.fc1,
            &bound.fc2,
            &bound.fc_out,
        )?;
        let uniform = tape.leaf(
            Tensor::new(vec![n], vec![1.0 / n as f64; n])?,
            false,
        );
        return Ok(ForwardOutput {
            action_logits: action,
            expl_logits: expl,
            scores: uniform,
            selected_indices: (0..n.min(config.k)).collect(),
        });
    }

    let t_g = if ablation == Ablation::LocalOnly {
        tape.leaf(
            Tensor::zeros(&[config.c_global, config.spatial, config.spatial]),
            false,
        )
    } else {
        let backbone = tape.leaf(scene.backbone.clone(), false);
        global_module_forward(tape, backbone, &bound.g1, &bound.g2, config.spatial)?
    };

    let blocks = build_object_scene_tensors(tape, &proposals, t_g)?;
    let scores = selector_scores(tape, &blocks, &bound.s1, &bound.s2, &bound.s3)?;
    let selection = match mode {
        SelectionMode::TopK => select_top_k(tape, scores, &blocks, config.k)?,
        SelectionMode::Given(idx) => {
            if idx.len() > config.k {
                return Err(OiaError::Invalid(format!(
                    "{} given indices exceed k = {}",
                    idx.len(),
                    config.k
                )));
            }
            select_given(tape, scores, &blocks, config.k, idx)?
        }
    };
    let (action, expl) = head_predict(
        tape,
        &selection.blocks,
        config.k,
        &bound.fc1,
        &bound.fc2,
        &bound.fc_out,
    )?;
    Ok(ForwardOutput {
        action_logits: action,
        expl_logits: expl,
        scores,
        selected_indices: selection.indices,
    })
}

/// Single-action variant: identical trunk, then a softmax over the 4 action
/// logits. Returns the distribution handle alongside the raw outputs.
pub fn single_action_forward(
    tape: &mut Tape,
    scene: &SceneRecord,
    bound: &BoundModel,
    config: &ModelConfig,
    mode: SelectionMode,
) -> Result<(TensorId, ForwardOutput)> {
    let out = model_forward(tape, scene, bound, config, Ablation::Full, mode)?;
    let dist = tape.softmax(out.action_logits)?;
    Ok((dist, out))
}

/// Index of the largest element (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
