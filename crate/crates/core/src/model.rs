//! Frozen dual encoder, trainable frame adapter and action injection.
//!
//! ```text
//!   I_t1 ──► adapter ─┐
//!                      ├─ mean ─► e_action ──► replace verb rows of e ─► text encoder ─► p
//!   I_t2 ──► adapter ─┘
//!   I_t  ──► image encoder ─► v_t
//! ```
//!
//! Only the adapter's parameters are ever updated; encoder parameters enter
//! every graph as constants.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_flat_weights, write_flat_weights, Blob, CheckpointError};
use crate::frame::{RgbaFrame, ShapeMismatch};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Init, ParamSet, TextShape, TextTransformer, VisionTransformer, VitShape};

/// Scale of the frozen token table. Small relative to the block outputs so the
/// final position reads the whole prompt, and shared by the adapter readout so
/// a fresh action embedding starts out token-sized.
const TOKEN_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    ShapeMismatch(#[from] ShapeMismatch),
    #[error("invalid tokens: {0}")]
    Tokens(String),
    #[error("action mask has length {mask} but the prompt has {tokens} tokens")]
    MaskLength { mask: usize, tokens: usize },
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Architecture hyperparameters. `embed_dim` is both the token-embedding
/// width and the shared output dimensionality of the two encoders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_width: usize,
    pub encoder_depth: usize,
    pub text_depth: usize,
    pub adapter_width: usize,
    pub adapter_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Seed standing in for "pretrained" encoder weights.
    pub encoder_seed: u64,
}

impl ModelConfig {
    /// 2-layer, D=64, 32×32 input with 8×8 patches.
    pub fn toy() -> Self {
        Self {
            profile: "toy".into(),
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            encoder_width: 64,
            encoder_depth: 2,
            text_depth: 2,
            adapter_width: 64,
            adapter_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 1024,
            context_length: 16,
            encoder_seed: 0,
        }
    }

    /// ViT-B/16-sized encoders with a 12-layer adapter.
    pub fn paper_shape() -> Self {
        Self {
            profile: "paper".into(),
            image_size: 224,
            patch_size: 16,
            embed_dim: 512,
            encoder_width: 768,
            encoder_depth: 12,
            text_depth: 12,
            adapter_width: 768,
            adapter_depth: 12,
            heads: 8,
            mlp_ratio: 4,
            vocab_size: 49_408,
            context_length: 77,
            encoder_seed: 0,
        }
    }

    pub fn from_profile(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" => Some(Self::paper_shape()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("patch_size must divide image_size");
        }
        for (w, what) in [
            (self.embed_dim, "embed_dim"),
            (self.encoder_width, "encoder_width"),
            (self.adapter_width, "adapter_width"),
        ] {
            if self.heads == 0 || w % self.heads != 0 {
                return Err(ModelError::Config(format!("{what} must be divisible by heads")));
            }
        }
        if self.context_length < 3 || self.vocab_size < 4 {
            return bad("context_length >= 3 and vocab_size >= 4 required");
        }
        Ok(())
    }

    fn image_shape(&self) -> VitShape {
        VitShape {
            image_size: self.image_size,
            patch_size: self.patch_size,
            width: self.encoder_width,
            depth: self.encoder_depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            out_dim: self.embed_dim,
        }
    }

    fn adapter_shape(&self) -> VitShape {
        VitShape {
            width: self.adapter_width,
            depth: self.adapter_depth,
            ..self.image_shape()
        }
    }

    fn text_shape(&self) -> TextShape {
        TextShape {
            vocab_size: self.vocab_size,
            context_length: self.context_length,
            width: self.embed_dim,
            depth: self.text_depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            out_dim: self.embed_dim,
        }
    }

    /// Number of adapter scalars, counted layer by layer.
    pub fn adapter_parameter_count(&self) -> usize {
        let w = self.adapter_width;
        let p = self.patch_size;
        let tokens = (self.image_size / p).pow(2) + 1;
        let hidden = w * self.mlp_ratio;
        let patch_proj = 4 * p * p * w;
        let class_and_pos = w + tokens * w;
        let layer_norm = 2 * w;
        let block = layer_norm
            + 4 * (w * w + w)
            + layer_norm
            + (w * hidden + hidden)
            + (hidden * w + w);
        let readout = w * self.embed_dim;
        patch_proj + class_and_pos + layer_norm + self.adapter_depth * block + layer_norm + readout
    }
}

/// Frozen image and text encoders sharing an output dimension.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    config: ModelConfig,
    params: ParamSet,
    image: VisionTransformer,
    text: TextTransformer,
}

impl DualEncoder {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder_seed);
        let mut params = ParamSet::new();
        let mut init = Init::new(&mut rng, &mut params);
        let readout_std = (config.encoder_width as f64).powf(-0.5);
        let image = init.scoped("image", |i| {
            VisionTransformer::new(i, config.image_shape(), readout_std)
        });
        let text = init.scoped("text", |i| {
            TextTransformer::new(i, config.text_shape(), TOKEN_STD)
        });
        params.round_to_f32();
        Ok(Self {
            config: config.clone(),
            params,
            image,
            text,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for weight loading only; training never calls this.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encode_image(&self, frame: &RgbaFrame) -> Result<Array1<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = self.image_graph(&mut g, &p, frame)?;
        Ok(g.value(v).row(0).to_owned())
    }

    /// `B × D`; row `i` is `encode_image(frames[i])`.
    pub fn encode_images(&self, frames: &[&RgbaFrame]) -> Result<Array2<f64>, ModelError> {
        let mut out = Array2::zeros((frames.len(), self.config.embed_dim));
        for (i, f) in frames.iter().enumerate() {
            out.row_mut(i).assign(&self.encode_image(f)?);
        }
        Ok(out)
    }

    pub fn image_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        frame: &RgbaFrame,
    ) -> Result<Var, ModelError> {
        Ok(self.image.forward(g, p, frame)?)
    }

    /// Frozen token-table lookup: `L × D`.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Array2<f64>, ModelError> {
        self.text
            .embed(&self.params, tokens)
            .map_err(ModelError::Tokens)
    }

    /// Text encoder applied to an `L × D` embedding sequence.
    pub fn text_graph(&self, g: &mut Graph, p: &Bound, embeddings: Var) -> Var {
        self.text.forward(g, p, embeddings)
    }

    /// Plain text embedding of a prompt, no action injection.
    pub fn encode_prompt(&self, tokens: &[u32]) -> Result<Array1<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let e = g.constant(self.embed_tokens(tokens)?);
        let out = self.text_graph(&mut g, &p, e);
        Ok(g.value(out).row(0).to_owned())
    }

    /// `p = f_text(inject_action(embed(tokens), mask, e_action))`.
    pub fn encode_prompt_with_action(
        &self,
        tokens: &[u32],
        action_mask: &[u8],
        e_action: &Array1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        let e = self.embed_tokens(tokens)?;
        let injected = inject_action(&e, action_mask, e_action)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let e = g.constant(injected);
        let out = self.text_graph(&mut g, &p, e);
        Ok(g.value(out).row(0).to_owned())
    }

    pub fn to_blobs(&self) -> Vec<Blob> {
        self.params
            .iter()
            .map(|(n, v)| Blob::from_array(n, v))
            .collect()
    }

    /// Replaces encoder weights from a flat weight file. Every parameter must
    /// be present with a matching shape.
    pub fn load_flat_weights(&mut self, path: &Path) -> Result<(), ModelError> {
        let blobs = read_flat_weights(path)?;
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let blob = blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| ModelError::Weights(format!("missing {name}")))?;
            self.params
                .assign(&name, blob.to_array())
                .map_err(ModelError::Weights)?;
        }
        Ok(())
    }

    pub fn save_flat_weights(&self, path: &Path) -> Result<(), ModelError> {
        Ok(write_flat_weights(path, &self.to_blobs())?)
    }
}

/// The trainable frame adapter `s_φ`: a 4-channel vision transformer whose
/// class-token readout lives in token-embedding space.
#[derive(Debug, Clone)]
pub struct AdapterNetwork {
    params: ParamSet,
    vit: VisionTransformer,
}

impl AdapterNetwork {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let readout_std = TOKEN_STD * (config.adapter_width as f64).powf(-0.5);
        let vit = VisionTransformer::new(
            &mut Init::new(&mut rng, &mut params),
            config.adapter_shape(),
            readout_std,
        );
        params.round_to_f32();
        Ok(Self { params, vit })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        frame: &RgbaFrame,
    ) -> Result<Var, ModelError> {
        Ok(self.vit.forward(g, p, frame)?)
    }

    pub fn forward(&self, frame: &RgbaFrame) -> Result<Array1<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = self.forward_graph(&mut g, &p, frame)?;
        Ok(g.value(v).row(0).to_owned())
    }

    /// `(s(I_t1) + s(I_t2)) / 2`.
    pub fn action_embedding(
        &self,
        first: &RgbaFrame,
        second: &RgbaFrame,
    ) -> Result<Array1<f64>, ModelError> {
        let a = self.forward(first)?;
        let b = self.forward(second)?;
        Ok((a + b) * 0.5)
    }

    /// Graph version of [`Self::action_embedding`]; `1 × D`.
    pub fn action_embedding_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        first: &RgbaFrame,
        second: &RgbaFrame,
    ) -> Result<Var, ModelError> {
        let a = self.forward_graph(g, p, first)?;
        let b = self.forward_graph(g, p, second)?;
        let sum = g.add(a, b);
        Ok(g.scale(sum, 0.5))
    }
}

/// `e' = e ⊙ (1 − m) + e_action ⊙ m`, evaluated by row selection so that
/// unmasked rows are copied bit-for-bit.
pub fn inject_action(
    e: &Array2<f64>,
    mask: &[u8],
    e_action: &Array1<f64>,
) -> Result<Array2<f64>, ModelError> {
    if mask.len() != e.nrows() {
        return Err(ModelError::MaskLength {
            mask: mask.len(),
            tokens: e.nrows(),
        });
    }
    if e_action.len() != e.ncols() {
        return Err(ShapeMismatch {
            expected: (1, e.ncols()),
            actual: (1, e_action.len()),
        }
        .into());
    }
    let mut out = e.clone();
    for (k, &m) in mask.iter().enumerate() {
        if m != 0 {
            out.row_mut(k).assign(e_action);
        }
    }
    Ok(out)
}

/// Encoders plus adapter.
#[derive(Debug, Clone)]
pub struct RoboticClip {
    pub encoder: DualEncoder,
    pub adapter: AdapterNetwork,
}

impl RoboticClip {
    pub fn new(config: &ModelConfig, adapter_seed: u64) -> Result<Self, ModelError> {
        Ok(Self {
            encoder: DualEncoder::new(config)?,
            adapter: AdapterNetwork::new(config, adapter_seed)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.encoder.config()
    }

    /// Exactly the adapter's parameters.
    pub fn trainable_parameters(&self) -> &ParamSet {
        self.adapter.params()
    }

    pub fn action_embedding(
        &self,
        first: &RgbaFrame,
        second: &RgbaFrame,
    ) -> Result<Array1<f64>, ModelError> {
        self.adapter.action_embedding(first, second)
    }

    /// Prompt embedding with the action embedding of `(first, second)`.
    pub fn encode_prompt_for_pair(
        &self,
        tokens: &[u32],
        action_mask: &[u8],
        first: &RgbaFrame,
        second: &RgbaFrame,
    ) -> Result<Array1<f64>, ModelError> {
        let e_action = self.action_embedding(first, second)?;
        self.encoder
            .encode_prompt_with_action(tokens, action_mask, &e_action)
    }

    /// Builds `p` on `g` with adapter parameters bound by `adapter` and
    /// encoder parameters bound (as constants) by `encoder`. Returns `1 × D`.
    pub fn prompt_graph(
        &self,
        g: &mut Graph,
        encoder: &Bound,
        adapter: &Bound,
        tokens: &[u32],
        action_mask: &[u8],
        first: &RgbaFrame,
        second: &RgbaFrame,
    ) -> Result<Var, ModelError> {
        let e = self.encoder.embed_tokens(tokens)?;
        if action_mask.len() != e.nrows() {
            return Err(ModelError::MaskLength {
                mask: action_mask.len(),
                tokens: e.nrows(),
            });
        }
        let e = g.constant(e);
        let e_action = self.adapter.action_embedding_graph(g, adapter, first, second)?;
        let mask: Vec<bool> = action_mask.iter().map(|&m| m != 0).collect();
        let injected = g.inject_rows(e, e_action, &mask);
        Ok(self.encoder.text_graph(g, encoder, injected))
    }
}

/// Stacks row vectors into a matrix.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal row lengths")
}
