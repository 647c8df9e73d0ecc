//! Named parameter storage and the transformer building blocks.
//!
//! Layers only hold [`ParamId`]s. A forward pass binds a [`ParamSet`] onto a
//! [`Graph`] (as trainable leaves or as constants) and the layers look their
//! parameters up in the resulting [`Bound`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::frame::{RgbaFrame, ShapeMismatch};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Overwrites an existing parameter; the shape must match.
    pub fn assign(&mut self, name: &str, value: Array2<f64>) -> Result<(), String> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[i].dim() != value.dim() {
            return Err(format!(
                "{name}: expected {:?}, got {:?}",
                self.values[i].dim(),
                value.dim()
            ));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// Rounds every value to the nearest `f32` so that 32-bit serialization
    /// is lossless.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update((*x as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Graph handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Seeded parameter initializer that prefixes every name.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
    pub set: &'a mut ParamSet,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(rng: &'a mut R, set: &'a mut ParamSet) -> Self {
        Self {
            rng,
            set,
            prefix: String::new(),
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut *self.rng));
        let full = self.full(name);
        self.set.push(full, value)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, fill: f64) -> ParamId {
        let full = self.full(name);
        self.set.push(full, Array2::from_elem((rows, cols), fill))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
    ) -> Self {
        init.scoped(name, |init| Linear {
            weight: init.normal("weight", fan_in, fan_out, std),
            bias: bias.then(|| init.constant("bias", 1, fan_out, 0.0)),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.weight));
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Self {
        init.scoped(name, |init| LayerNorm {
            gamma: init.constant("gamma", 1, width, 1.0),
            beta: init.constant("beta", 1, width, 0.0),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x);
        let scaled = g.mul_row(n, p.var(self.gamma));
        g.add_row(scaled, p.var(self.beta))
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
    causal: bool,
}

impl Attention {
    fn new<R: Rng>(
        init: &mut Init<'_, R>,
        width: usize,
        heads: usize,
        depth: usize,
        causal: bool,
    ) -> Self {
        assert_eq!(width % heads, 0, "width must divide into heads");
        let std = (width as f64).powf(-0.5);
        let out_std = std * ((2 * depth) as f64).powf(-0.5);
        init.scoped("attn", |init| Attention {
            query: Linear::new(init, "query", width, width, std, true),
            key: Linear::new(init, "key", width, width, std, true),
            value: Linear::new(init, "value", width, width, std, true),
            out: Linear::new(init, "out", width, width, out_std, true),
            heads,
            head_dim: width / heads,
            causal,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let len = g.value(x).nrows();
        let q = self.query.forward(g, p, x);
        let k = self.key.forward(g, p, x);
        let v = self.value.forward(g, p, x);
        let mask = self.causal.then(|| causal_mask(len));
        let scale = (self.head_dim as f64).powf(-0.5);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.slice_cols(q, start, self.head_dim);
            let kh = g.slice_cols(k, start, self.head_dim);
            let vh = g.slice_cols(v, start, self.head_dim);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = &mask {
                scores = g.add_const(scores, m);
            }
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let merged = g.concat_cols(&outs);
        self.out.forward(g, p, merged)
    }
}

fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| {
        if j > i {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Pre-norm residual block: attention then a GELU MLP.
#[derive(Debug, Clone)]
pub struct Block {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_mlp: LayerNorm,
    fc_in: Linear,
    fc_out: Linear,
}

impl Block {
    fn new<R: Rng>(
        init: &mut Init<'_, R>,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
        causal: bool,
    ) -> Self {
        let hidden = width * mlp_ratio;
        let fc_std = (width as f64).powf(-0.5);
        let proj_std = (hidden as f64).powf(-0.5) * ((2 * depth) as f64).powf(-0.5);
        Block {
            ln_attn: LayerNorm::new(init, "ln_attn", width),
            attn: Attention::new(init, width, heads, depth, causal),
            ln_mlp: LayerNorm::new(init, "ln_mlp", width),
            fc_in: Linear::new(init, "fc_in", width, hidden, fc_std, true),
            fc_out: Linear::new(init, "fc_out", hidden, width, proj_std, true),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.ln_attn.forward(g, p, x);
        let h = self.attn.forward(g, p, h);
        let x = g.add(x, h);
        let h = self.ln_mlp.forward(g, p, x);
        let h = self.fc_in.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc_out.forward(g, p, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                init.scoped(&format!("blocks.{i}"), |init| {
                    Block::new(init, width, heads, mlp_ratio, depth, causal)
                })
            })
            .collect();
        Self { blocks }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Var {
        for b in &self.blocks {
            x = b.forward(g, p, x);
        }
        x
    }
}

/// Shape of a vision transformer over 4-channel frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitShape {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub out_dim: usize,
}

impl VitShape {
    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        4 * self.patch_size * self.patch_size
    }
}

/// Patch projection over RGBA, class token, learned positions, transformer
/// trunk and a class-token readout.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    shape: VitShape,
    patch_proj: Linear,
    class_token: ParamId,
    positions: ParamId,
    ln_pre: LayerNorm,
    trunk: Transformer,
    ln_post: LayerNorm,
    readout: Linear,
}

impl VisionTransformer {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, shape: VitShape, readout_std: f64) -> Self {
        assert_eq!(shape.image_size % shape.patch_size, 0, "patch must tile the image");
        let w = shape.width;
        let emb_std = (w as f64).powf(-0.5);
        VisionTransformer {
            shape,
            patch_proj: Linear::new(
                init,
                "patch_proj",
                shape.patch_dim(),
                w,
                (shape.patch_dim() as f64).powf(-0.5),
                false,
            ),
            class_token: init.normal("class_token", 1, w, emb_std),
            positions: init.normal("positions", shape.patches() + 1, w, emb_std),
            ln_pre: LayerNorm::new(init, "ln_pre", w),
            trunk: init.scoped("trunk", |init| {
                Transformer::new(init, w, shape.depth, shape.heads, shape.mlp_ratio, false)
            }),
            ln_post: LayerNorm::new(init, "ln_post", w),
            readout: Linear::new(init, "readout", w, shape.out_dim, readout_std, false),
        }
    }

    pub fn shape(&self) -> VitShape {
        self.shape
    }

    /// Returns a `1 × out_dim` embedding.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        frame: &RgbaFrame,
    ) -> Result<Var, ShapeMismatch> {
        let patches = patchify(frame, self.shape.image_size, self.shape.patch_size)?;
        let x = g.constant(patches);
        let tokens = self.patch_proj.forward(g, p, x);
        let x = g.concat_rows(&[p.var(self.class_token), tokens]);
        let x = g.add(x, p.var(self.positions));
        let x = self.ln_pre.forward(g, p, x);
        let x = self.trunk.forward(g, p, x);
        let cls = g.slice_rows(x, 0, 1);
        let cls = self.ln_post.forward(g, p, cls);
        Ok(self.readout.forward(g, p, cls))
    }
}

/// Flattens non-overlapping patches in raster order; each row holds
/// (row, col, channel) values mapped from [0, 1] to [-1, 1].
pub fn patchify(
    frame: &RgbaFrame,
    image_size: usize,
    patch: usize,
) -> Result<Array2<f64>, ShapeMismatch> {
    if frame.dims() != (image_size, image_size) {
        return Err(ShapeMismatch {
            expected: (image_size, image_size),
            actual: frame.dims(),
        });
    }
    let per_side = image_size / patch;
    let mut out = Array2::zeros((per_side * per_side, 4 * patch * patch));
    for py in 0..per_side {
        for px in 0..per_side {
            let mut row = out.row_mut(py * per_side + px);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let v = frame.pixel(py * patch + y, px * patch + x);
                    for c in v {
                        row[k] = (c as f64 - 0.5) / 0.5;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Shape of the causal text transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextShape {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub out_dim: usize,
}

/// Token table, learned positions, causal trunk and a readout at the final
/// (EOS) position.
#[derive(Debug, Clone)]
pub struct TextTransformer {
    shape: TextShape,
    token_table: ParamId,
    positions: ParamId,
    trunk: Transformer,
    ln_final: LayerNorm,
    readout: Linear,
}

impl TextTransformer {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, shape: TextShape, token_std: f64) -> Self {
        let w = shape.width;
        TextTransformer {
            shape,
            token_table: init.normal("token_table", shape.vocab_size, w, token_std),
            positions: init.normal("positions", shape.context_length, w, 0.1 * token_std),
            trunk: init.scoped("trunk", |init| {
                Transformer::new(init, w, shape.depth, shape.heads, shape.mlp_ratio, true)
            }),
            ln_final: LayerNorm::new(init, "ln_final", w),
            readout: Linear::new(init, "readout", w, shape.out_dim, (w as f64).powf(-0.5), false),
        }
    }

    pub fn shape(&self) -> TextShape {
        self.shape
    }

    /// Looks tokens up in the (frozen) table: `L × width`.
    pub fn embed(&self, params: &ParamSet, tokens: &[u32]) -> Result<Array2<f64>, String> {
        if tokens.is_empty() || tokens.len() > self.shape.context_length {
            return Err(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                self.shape.context_length
            ));
        }
        let table = params.get(self.token_table);
        let mut out = Array2::zeros((tokens.len(), self.shape.width));
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.shape.vocab_size {
                return Err(format!("token id {t} outside vocabulary"));
            }
            out.row_mut(i).assign(&table.row(t));
        }
        Ok(out)
    }

    /// Encodes an `L × width` embedding sequence into `1 × out_dim`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, embeddings: Var) -> Var {
        let len = g.value(embeddings).nrows();
        let pos = g.slice_rows(p.var(self.positions), 0, len);
        let x = g.add(embeddings, pos);
        let x = self.trunk.forward(g, p, x);
        let last = g.slice_rows(x, len - 1, 1);
        let last = self.ln_final.forward(g, p, last);
        self.readout.forward(g, p, last)
    }
}
