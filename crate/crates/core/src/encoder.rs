//! Dual encoder: a text transformer over prompt tokens and an image
//! transformer over patch grids, both projected into a shared unit sphere.
//!
//! The image encoder carries learnable visual prompt tokens. In shallow mode
//! one set of `K` prompts is appended to the projected patches at the input.
//! In deep mode every image block `l` gets its own prompts `p^l`: before the
//! block runs, the `K` prompt slots left by the previous block are dropped
//! and replaced by `p^l`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::RenderedPrompt;
use crate::tensor::{dot, Graph, Tensor, Var};
use crate::train::TrainerState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// ln(1/0.07)
pub const INITIAL_LOGIT_SCALE: f64 = 2.659_260_036_932_778_4;
/// ln(100)
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Shallow,
    Deep,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(PromptMode::Shallow),
            "deep" => Ok(PromptMode::Deep),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    /// Width of the shared embedding space.
    pub d_embed: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_text_layers: usize,
    pub n_image_layers: usize,
    /// Patches per image (`L`).
    pub patch_count: usize,
    /// Features per patch.
    pub patch_dim: usize,
    pub prompt_mode: PromptMode,
    /// Visual prompt tokens per prompted layer (`K`).
    pub n_prompts: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary and image geometry.
    pub fn desk(vocab_size: usize, patch_count: usize, patch_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_len: crate::prompt::DEFAULT_CONTEXT_LEN,
            d_model: 32,
            d_embed: 16,
            n_heads: 4,
            mlp_ratio: 4,
            n_text_layers: 2,
            n_image_layers: 2,
            patch_count,
            patch_dim,
            prompt_mode: PromptMode::Shallow,
            n_prompts: 3,
            init_seed: 0,
        }
    }

    /// The smallest configuration used for exhaustive gradient checks.
    pub fn tiny(vocab_size: usize, patch_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_len: crate::prompt::DEFAULT_CONTEXT_LEN,
            d_model: 8,
            d_embed: 8,
            n_heads: 2,
            mlp_ratio: 2,
            n_text_layers: 1,
            n_image_layers: 1,
            patch_count: 4,
            patch_dim,
            prompt_mode: PromptMode::Shallow,
            n_prompts: 2,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("d_model", self.d_model),
            ("d_embed", self.d_embed),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_count", self.patch_count),
            ("patch_dim", self.patch_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.prompt_mode == PromptMode::Deep && self.n_image_layers < 2 {
            return Err(Error::Config(
                "deep prompt tuning needs at least 2 image layers".into(),
            ));
        }
        Ok(())
    }

    /// Number of visual prompt parameters: `K·d_model` shallow,
    /// `n_image_layers·K·d_model` deep.
    pub fn prompt_parameter_count(&self) -> usize {
        let per_layer = self.n_prompts * self.d_model;
        match self.prompt_mode {
            PromptMode::Shallow => per_layer,
            PromptMode::Deep => self.n_image_layers * per_layer,
        }
    }

    fn seq_len(&self) -> usize {
        self.patch_count + self.n_prompts
    }
}

/// Which part of the model an array belongs to; trainable scopes are sets
/// of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextBackbone,
    TextProjection,
    ImageBackbone,
    ImageProjection,
    VisualPrompt,
    LogitScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    token_embedding: ParamId,
    text_position: ParamId,
    text_blocks: Vec<BlockIds>,
    text_ln_g: ParamId,
    text_ln_b: ParamId,
    text_projection: ParamId,
    patch_projection: ParamId,
    image_position: ParamId,
    image_blocks: Vec<BlockIds>,
    image_ln_g: ParamId,
    image_ln_b: ParamId,
    image_projection: ParamId,
    prompts: Vec<ParamId>,
    logit_scale: ParamId,
}

struct Builder {
    arrays: Vec<ParamArray>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, group: ParamGroup, value: Tensor) -> ParamId {
        self.arrays.push(ParamArray { name, group, value });
        ParamId(self.arrays.len() - 1)
    }

    fn normal(&mut self, name: String, group: ParamGroup, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches");
        self.push(name, group, t)
    }

    fn constant(&mut self, name: String, group: ParamGroup, shape: &[usize], v: f64) -> ParamId {
        self.push(name, group, Tensor::full(shape, v))
    }

    fn block(&mut self, prefix: &str, group: ParamGroup, cfg: &ModelConfig) -> BlockIds {
        let dm = cfg.d_model;
        let hidden = dm * cfg.mlp_ratio;
        let s = 1.0 / (dm as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        BlockIds {
            ln1_g: self.constant(format!("{prefix}.ln1.gamma"), group, &[dm], 1.0),
            ln1_b: self.constant(format!("{prefix}.ln1.beta"), group, &[dm], 0.0),
            wq: self.normal(format!("{prefix}.attn.wq"), group, &[dm, dm], s),
            wk: self.normal(format!("{prefix}.attn.wk"), group, &[dm, dm], s),
            wv: self.normal(format!("{prefix}.attn.wv"), group, &[dm, dm], s),
            wo: self.normal(format!("{prefix}.attn.wo"), group, &[dm, dm], s),
            ln2_g: self.constant(format!("{prefix}.ln2.gamma"), group, &[dm], 1.0),
            ln2_b: self.constant(format!("{prefix}.ln2.beta"), group, &[dm], 0.0),
            w1: self.normal(format!("{prefix}.mlp.w1"), group, &[dm, hidden], s),
            b1: self.constant(format!("{prefix}.mlp.b1"), group, &[hidden], 0.0),
            w2: self.normal(format!("{prefix}.mlp.w2"), group, &[hidden, dm], sh),
            b2: self.constant(format!("{prefix}.mlp.b2"), group, &[dm], 0.0),
        }
    }
}

/// All learnable arrays of the dual encoder, in a fixed order.
#[derive(Clone, Debug)]
pub struct DualEncoderParams {
    config: ModelConfig,
    arrays: Vec<ParamArray>,
    layout: Layout,
}

impl PartialEq for DualEncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.arrays == other.arrays
    }
}

impl DualEncoderParams {
    /// Randomly initialised parameters, deterministic in `config.init_seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            arrays: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let dm = config.d_model;
        let s = 1.0 / (dm as f64).sqrt();
        use ParamGroup::*;

        let token_embedding = b.normal(
            "text.token_embedding".into(),
            TextBackbone,
            &[config.vocab_size, dm],
            1.0,
        );
        let text_position = b.normal(
            "text.position".into(),
            TextBackbone,
            &[config.context_len, dm],
            0.5,
        );
        let text_blocks = (0..config.n_text_layers)
            .map(|l| b.block(&format!("text.block{l}"), TextBackbone, &config))
            .collect();
        let text_ln_g = b.constant("text.ln_final.gamma".into(), TextBackbone, &[dm], 1.0);
        let text_ln_b = b.constant("text.ln_final.beta".into(), TextBackbone, &[dm], 0.0);
        let text_projection = b.normal(
            "text.projection".into(),
            TextProjection,
            &[dm, config.d_embed],
            s,
        );

        let patch_projection = b.normal(
            "image.patch_projection".into(),
            ImageBackbone,
            &[config.patch_dim, dm],
            1.0 / (config.patch_dim as f64).sqrt(),
        );
        let image_position = b.normal(
            "image.position".into(),
            ImageBackbone,
            &[config.seq_len(), dm],
            0.5,
        );
        let image_blocks = (0..config.n_image_layers)
            .map(|l| b.block(&format!("image.block{l}"), ImageBackbone, &config))
            .collect();
        let image_ln_g = b.constant("image.ln_final.gamma".into(), ImageBackbone, &[dm], 1.0);
        let image_ln_b = b.constant("image.ln_final.beta".into(), ImageBackbone, &[dm], 0.0);
        let image_projection = b.normal(
            "image.projection".into(),
            ImageProjection,
            &[dm, config.d_embed],
            s,
        );

        let prompt_layers = match config.prompt_mode {
            PromptMode::Shallow => 1,
            PromptMode::Deep => config.n_image_layers,
        };
        let prompts = (0..prompt_layers)
            .map(|l| {
                let name = match config.prompt_mode {
                    PromptMode::Shallow => "image.prompts".to_string(),
                    PromptMode::Deep => format!("image.prompts.layer{l}"),
                };
                b.normal(name, VisualPrompt, &[config.n_prompts, dm], 0.5)
            })
            .collect();
        let logit_scale = b.push(
            "logit_scale".into(),
            LogitScale,
            Tensor::scalar(INITIAL_LOGIT_SCALE),
        );

        let layout = Layout {
            token_embedding,
            text_position,
            text_blocks,
            text_ln_g,
            text_ln_b,
            text_projection,
            patch_projection,
            image_position,
            image_blocks,
            image_ln_g,
            image_ln_b,
            image_projection,
            prompts,
            logit_scale,
        };
        let params = DualEncoderParams {
            config,
            arrays: b.arrays,
            layout,
        };
        debug_assert_eq!(
            params.group_size(ParamGroup::VisualPrompt),
            params.config.prompt_parameter_count()
        );
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.arrays
    }

    pub fn array(&self, id: ParamId) -> &Tensor {
        &self.arrays[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.arrays
            .iter()
            .position(|a| a.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::Lookup(format!("no parameter array named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.array(self.find(name)?))
    }

    /// Replace an array's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.find(name)?;
        let slot = &mut self.arrays[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.arrays[id.0].value.data_mut()
    }

    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.arrays
            .iter()
            .filter(|a| a.group == group)
            .map(|a| a.value.numel())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays.iter().map(|a| a.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.value.is_finite())
    }

    pub fn logit_scale(&self) -> f64 {
        self.array(self.layout.logit_scale).item()
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.layout.logit_scale
    }

    pub fn to_checkpoint(&self, trainer: Option<TrainerState>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| NamedArray {
                    name: a.name.clone(),
                    shape: a.value.shape().to_vec(),
                    data: a.value.data().to_vec(),
                })
                .collect(),
            trainer,
        }
    }

    /// Rebuild parameters from a checkpoint. When `expected` is given the
    /// stored configuration must match it exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        if let Some(exp) = expected {
            if exp != &ckpt.config {
                return Err(Error::Config(format!(
                    "checkpoint config does not match: stored {:?}, expected {:?}",
                    ckpt.config, exp
                )));
            }
        }
        let mut params = DualEncoderParams::init(ckpt.config.clone())?;
        if ckpt.arrays.len() != params.arrays.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, config implies {}",
                ckpt.arrays.len(),
                params.arrays.len()
            )));
        }
        for (slot, stored) in params.arrays.iter_mut().zip(&ckpt.arrays) {
            if slot.name != stored.name {
                return Err(Error::Config(format!(
                    "checkpoint array {:?} where {:?} was expected",
                    stored.name, slot.name
                )));
            }
            let t = Tensor::new(stored.shape.clone(), stored.data.clone())?;
            if t.shape() != slot.value.shape() {
                return Err(Error::shape("checkpoint", slot.value.shape(), t.shape()));
            }
            slot.value = t;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path, trainer: Option<TrainerState>) -> Result<()> {
        self.to_checkpoint(trainer).save(path)
    }

    pub fn load(
        path: &Path,
        expected: Option<&ModelConfig>,
    ) -> Result<(Self, Option<TrainerState>)> {
        let ckpt = Checkpoint::load(path)?;
        let params = DualEncoderParams::from_checkpoint(&ckpt, expected)?;
        Ok((params, ckpt.trainer))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON container of all named arrays plus the model config and,
/// for training checkpoints, optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub arrays: Vec<NamedArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// One synthetic image: an `L × patch_dim` grid of patch features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTokens {
    pub patches: Tensor,
}

impl ImageTokens {
    pub fn new(patches: Tensor) -> Result<Self> {
        let (_, _) = patches.dims2()?;
        if !patches.is_finite() {
            return Err(Error::Numeric("image patches must be finite".into()));
        }
        Ok(ImageTokens { patches })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.shape()[0]
    }
}

/// Binds parameter arrays to graph leaves on first use. Arrays outside the
/// trainable set become constants, so no gradient is computed for them.
pub struct Binder<'p> {
    params: &'p DualEncoderParams,
    trainable: Vec<bool>,
    vars: Vec<Option<Var>>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p DualEncoderParams, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let trainable = params.arrays.iter().map(|a| trainable(a.group)).collect();
        Binder {
            params,
            trainable,
            vars: vec![None; params.arrays.len()],
        }
    }

    /// Every array frozen: forward evaluation only.
    pub fn frozen(params: &'p DualEncoderParams) -> Self {
        Binder::new(params, |_| false)
    }

    pub fn params(&self) -> &'p DualEncoderParams {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.params.arrays[id.0].value.clone();
        let v = if self.trainable[id.0] {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// `(param, leaf)` for every trainable array that was bound.
    pub fn bound_trainable(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.trainable[i]).map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn group_trainable(&self, group: ParamGroup) -> bool {
        self.params
            .arrays
            .iter()
            .zip(&self.trainable)
            .any(|(a, t)| a.group == group && *t)
    }

    fn block(&mut self, g: &mut Graph, ids: &BlockIds, x: Var, segments: &[usize]) -> Result<Var> {
        let heads = self.params.config.n_heads;
        let (ln1_g, ln1_b) = (self.var(g, ids.ln1_g), self.var(g, ids.ln1_b));
        let h = g.layer_norm(x, ln1_g, ln1_b)?;
        let (wq, wk, wv, wo) = (
            self.var(g, ids.wq),
            self.var(g, ids.wk),
            self.var(g, ids.wv),
            self.var(g, ids.wo),
        );
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let a = g.attention(q, k, v, heads, segments)?;
        let a = g.matmul(a, wo)?;
        let x = g.add(x, a)?;

        let (ln2_g, ln2_b) = (self.var(g, ids.ln2_g), self.var(g, ids.ln2_b));
        let h = g.layer_norm(x, ln2_g, ln2_b)?;
        let (w1, b1, w2, b2) = (
            self.var(g, ids.w1),
            self.var(g, ids.b1),
            self.var(g, ids.w2),
            self.var(g, ids.b2),
        );
        let m = g.matmul(h, w1)?;
        let m = g.add_tiled(m, b1)?;
        let m = g.gelu(m);
        let m = g.matmul(m, w2)?;
        let m = g.add_tiled(m, b2)?;
        g.add(x, m)
    }

    /// Mean-pooled text features before projection, `[prompts × d_model]`.
    pub fn text_features(&mut self, g: &mut Graph, prompts: &[&RenderedPrompt]) -> Result<Var> {
        let cfg = &self.params.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(prompts.len());
        for p in prompts {
            if p.tokens.len() > cfg.context_len {
                return Err(Error::Contract(format!(
                    "prompt has {} tokens, context length is {}",
                    p.tokens.len(),
                    cfg.context_len
                )));
            }
            let active = p.active_tokens();
            if let Some(bad) = active.iter().find(|t| **t as usize >= cfg.vocab_size) {
                return Err(Error::Lookup(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            ids.extend(active.iter().map(|t| *t as usize));
            positions.extend(0..active.len());
            segments.push(active.len());
        }
        let layout = self.params.layout.clone();
        let table = self.var(g, layout.token_embedding);
        let pos_table = self.var(g, layout.text_position);
        let x = g.gather_rows(table, &ids)?;
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;
        for block in &layout.text_blocks {
            x = self.block(g, block, x, &segments)?;
        }
        let (lg, lb) = (self.var(g, layout.text_ln_g), self.var(g, layout.text_ln_b));
        let x = g.layer_norm(x, lg, lb)?;
        g.mean_pool(x, &segments)
    }

    /// Project pooled text features and normalise: `[prompts × d_embed]`.
    pub fn text_head(&mut self, g: &mut Graph, features: Var) -> Result<Var> {
        let proj = self.var(g, self.params.layout.text_projection);
        let z = g.matmul(features, proj)?;
        g.l2_normalize(z)
    }

    pub fn encode_text(&mut self, g: &mut Graph, prompts: &[&RenderedPrompt]) -> Result<Var> {
        let f = self.text_features(g, prompts)?;
        self.text_head(g, f)
    }

    /// Unit image embeddings, `[images × d_embed]`.
    pub fn encode_images(&mut self, g: &mut Graph, images: &[&ImageTokens]) -> Result<Var> {
        let cfg = self.params.config.clone();
        let (l, k) = (cfg.patch_count, cfg.n_prompts);
        let mut data = Vec::with_capacity(images.len() * l * cfg.patch_dim);
        for img in images {
            let (rows, cols) = img.patches.dims2()?;
            if rows != l || cols != cfg.patch_dim {
                return Err(Error::shape(
                    "encode_image",
                    &[l, cfg.patch_dim],
                    img.patches.shape(),
                ));
            }
            data.extend_from_slice(img.patches.data());
        }
        let layout = self.params.layout.clone();
        let patches = g.constant(Tensor::new(vec![images.len() * l, cfg.patch_dim], data)?);
        let proj = self.var(g, layout.patch_projection);
        let mut x = g.matmul(patches, proj)?;
        if k > 0 {
            let p0 = self.var(g, layout.prompts[0]);
            x = g.seg_append(x, p0, l)?;
        }
        let pos = self.var(g, layout.image_position);
        x = g.add_tiled(x, pos)?;
        let segments = vec![l + k; images.len()];
        for (i, block) in layout.image_blocks.iter().enumerate() {
            if cfg.prompt_mode == PromptMode::Deep && i > 0 && k > 0 {
                x = g.seg_take(x, l + k, l)?;
                let pl = self.var(g, layout.prompts[i]);
                x = g.seg_append(x, pl, l)?;
            }
            x = self.block(g, block, x, &segments)?;
        }
        let (lg, lb) = (
            self.var(g, layout.image_ln_g),
            self.var(g, layout.image_ln_b),
        );
        let x = g.layer_norm(x, lg, lb)?;
        let pooled = g.mean_pool(x, &segments)?;
        let head = self.var(g, layout.image_projection);
        let z = g.matmul(pooled, head)?;
        g.l2_normalize(z)
    }

    /// `exp(logit_scale) · image · textᵀ`, `[images × prompts]`.
    pub fn logits(&mut self, g: &mut Graph, image_emb: Var, text_emb: Var) -> Result<Var> {
        let tt = g.transpose(text_emb)?;
        let cos = g.matmul(image_emb, tt)?;
        let ls = self.var(g, self.params.layout.logit_scale);
        let scale = g.exp(ls);
        g.scale_by(cos, scale)
    }
}

/// Unit text embeddings for `prompts`, one row each.
pub fn encode_text(params: &DualEncoderParams, prompts: &[&RenderedPrompt]) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let v = b.encode_text(&mut g, prompts)?;
    Ok(g.value(v).clone())
}

/// Pooled, unprojected text features for `prompts`.
pub fn text_features(params: &DualEncoderParams, prompts: &[&RenderedPrompt]) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let v = b.text_features(&mut g, prompts)?;
    Ok(g.value(v).clone())
}

/// Unit image embeddings, one row per image.
pub fn encode_images(params: &DualEncoderParams, images: &[&ImageTokens]) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let v = b.encode_images(&mut g, images)?;
    Ok(g.value(v).clone())
}

/// Scaled cosine similarity between one image and one prompt.
pub fn score(
    params: &DualEncoderParams,
    img: &ImageTokens,
    prompt: &RenderedPrompt,
) -> Result<f64> {
    let t = encode_text(params, &[prompt])?;
    let i = encode_images(params, &[img])?;
    Ok(params.logit_scale().exp() * dot(t.data(), i.data()))
}
