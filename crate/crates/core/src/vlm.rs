//! Frozen toy vision-language backbone: a seeded patch transformer with a
//! dense feature head, a hashed-word text encoder behind a fixed prompt
//! template, and cosine matching between the two.
//!
//! All weights are drawn deterministically from the config seed and never
//! change. Adapters are injected per forward pass through an
//! [`AdapterOverlay`]; the model itself holds no mutable state.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::maps::ProbMap;
use crate::numerics::{RandomStream, Tape, Tensor, Value};

const LN_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;
const MAGIC: &[u8; 8] = b"SEECOVLM";
const FORMAT_VERSION: u32 = 1;

/// Structural configuration of the frozen backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub positional_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            vocab_size: 4096,
            positional_embeddings: true,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::ConfigError(
                "image and patch size must be positive".into(),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::ConfigError(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::ConfigError(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::ConfigError("need at least one block".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::ConfigError("vocab size must be positive".into()));
        }
        Ok(())
    }

    /// Tokens per side of the patch grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    fn hidden_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Frozen dense sublayer; weight stored as [d_in x d_out].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    fn init(rng: &mut RandomStream, d_in: usize, d_out: usize) -> DenseLayer {
        DenseLayer {
            weight: Tensor::new(vec![d_in, d_out], rng.fill_normal(d_in * d_out, WEIGHT_STD)),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// One transformer block. The two feed-forward sublayers `fc1`/`fc2` are
/// the dense layers exposed for adapter attachment.
#[derive(Debug, Clone)]
pub struct Block {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    wq: DenseLayer,
    wk: DenseLayer,
    wv: DenseLayer,
    wo: DenseLayer,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

/// Which of a block's two dense sublayers an adapter targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FcSlot {
    Fc1,
    Fc2,
}

/// Low-rank deltas bound to tape values for one forward pass. Keyed by
/// (block index, sublayer); the layer computes frozen(x) + scale * (x Aᵀ) Bᵀ.
pub struct BoundAdapter {
    pub a: Value,
    pub b: Value,
    pub scale: f64,
}

#[derive(Default)]
pub struct AdapterOverlay {
    entries: HashMap<(usize, FcSlot), BoundAdapter>,
}

impl AdapterOverlay {
    pub fn new() -> AdapterOverlay {
        AdapterOverlay::default()
    }

    pub fn insert(&mut self, block: usize, slot: FcSlot, adapter: BoundAdapter) {
        self.entries.insert((block, slot), adapter);
    }

    fn get(&self, block: usize, slot: FcSlot) -> Option<&BoundAdapter> {
        self.entries.get(&(block, slot))
    }
}

/// Dense visual features at patch-grid resolution; every row is unit norm.
#[derive(Debug, Clone)]
pub struct DenseFeatureMap {
    grid_h: usize,
    grid_w: usize,
    features: Tensor,
}

impl DenseFeatureMap {
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Flat [tokens x dim] feature matrix, tokens in row-major grid order.
    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

/// Unit-norm text embeddings, one row per category.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    rows: Tensor,
    names: Vec<String>,
}

impl TextEmbeddings {
    pub fn new(rows: Tensor, names: Vec<String>) -> Result<TextEmbeddings> {
        if names.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (j, _) = rows.dims2()?;
        if j != names.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embedding rows for {} categories",
                j,
                names.len()
            )));
        }
        Ok(TextEmbeddings { rows, names })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// The frozen backbone. Immutable after construction; safe to share.
#[derive(Debug)]
pub struct FrozenModel {
    cfg: ModelConfig,
    patch_embed: DenseLayer,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    final_gamma: Tensor,
    final_beta: Tensor,
    head: DenseLayer,
    token_embed: Tensor,
    text_proj: DenseLayer,
}

/// Builds the frozen model with all weights drawn from the config seed.
pub fn build_model(cfg: &ModelConfig) -> Result<FrozenModel> {
    cfg.validate()?;
    let mut rng = RandomStream::new(cfg.seed);
    let d = cfg.embed_dim;
    let n = cfg.tokens();

    // Draw order is normative: it defines both reproducibility and the
    // tensor order of the serialized format.
    let patch_embed = DenseLayer::init(&mut rng, cfg.patch_dim(), d);
    let pos_embed = Tensor::new(vec![n, d], rng.fill_normal(n * d, WEIGHT_STD));
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for _ in 0..cfg.num_blocks {
        blocks.push(Block {
            ln1_gamma: Tensor::filled(vec![d], 1.0),
            ln1_beta: Tensor::zeros(vec![d]),
            wq: DenseLayer::init(&mut rng, d, d),
            wk: DenseLayer::init(&mut rng, d, d),
            wv: DenseLayer::init(&mut rng, d, d),
            wo: DenseLayer::init(&mut rng, d, d),
            ln2_gamma: Tensor::filled(vec![d], 1.0),
            ln2_beta: Tensor::zeros(vec![d]),
            fc1: DenseLayer::init(&mut rng, d, cfg.hidden_dim()),
            fc2: DenseLayer::init(&mut rng, cfg.hidden_dim(), d),
        });
    }
    let final_gamma = Tensor::filled(vec![d], 1.0);
    let final_beta = Tensor::zeros(vec![d]);
    let head = DenseLayer::init(&mut rng, d, d);
    let token_embed = Tensor::new(
        vec![cfg.vocab_size, d],
        rng.fill_normal(cfg.vocab_size * d, WEIGHT_STD),
    );
    let text_proj = DenseLayer::init(&mut rng, d, d);

    Ok(FrozenModel {
        cfg: cfg.clone(),
        patch_embed,
        pos_embed,
        blocks,
        final_gamma,
        final_beta,
        head,
        token_embed,
        text_proj,
    })
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn unit_rows_checked(t: &Tensor, what: &str) -> Result<()> {
    let (rows, cols) = t.row_view();
    for r in 0..rows {
        let norm: f64 = t.data()[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Internal(format!(
                "{what}: row {r} norm {norm} violates the unit-norm contract"
            )));
        }
    }
    Ok(())
}

impl FrozenModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Flattens non-overlapping patches into a [tokens x patch_dim] matrix.
    fn patches(&self, img: &Tensor) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if img.shape() != [s, s, 3] {
            return Err(Error::ShapeMismatch(format!(
                "image must be [{s}x{s}x3], got {:?}",
                img.shape()
            )));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid_side();
        let src = img.data();
        let mut out = Vec::with_capacity(self.cfg.tokens() * self.cfg.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    let y = gy * p + dy;
                    let base = (y * s + gx * p) * 3;
                    out.extend_from_slice(&src[base..base + p * 3]);
                }
            }
        }
        Ok(Tensor::new(
            vec![self.cfg.tokens(), self.cfg.patch_dim()],
            out,
        ))
    }

    fn dense(
        &self,
        tape: &Tape,
        x: &Value,
        layer: &DenseLayer,
        adapter: Option<&BoundAdapter>,
    ) -> Result<Value> {
        let w = Tape::constant(layer.weight.clone());
        let b = Tape::constant(layer.bias.clone());
        let y = tape.add_row_broadcast(&tape.matmul(x, &w)?, &b)?;
        match adapter {
            None => Ok(y),
            Some(lora) => {
                let xa = tape.matmul_bt(x, &lora.a)?;
                let delta = tape.matmul_bt(&xa, &lora.b)?;
                tape.add(&y, &tape.scale(&delta, lora.scale)?)
            }
        }
    }

    fn attention(&self, tape: &Tape, x: &Value, block: &Block) -> Result<Value> {
        let y = tape.layer_norm(
            x,
            &Tape::constant(block.ln1_gamma.clone()),
            &Tape::constant(block.ln1_beta.clone()),
            LN_EPS,
        )?;
        let q = self.dense(tape, &y, &block.wq, None)?;
        let k = self.dense(tape, &y, &block.wk, None)?;
        let v = self.dense(tape, &y, &block.wv, None)?;
        let dh = self.cfg.embed_dim / self.cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = tape.slice_cols(&q, h * dh, dh)?;
            let kh = tape.slice_cols(&k, h * dh, dh)?;
            let vh = tape.slice_cols(&v, h * dh, dh)?;
            let scores = tape.scale(&tape.matmul_bt(&qh, &kh)?, scale)?;
            let attn = tape.softmax_rows(&scores, 1.0)?;
            heads.push(tape.matmul(&attn, &vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let proj = self.dense(tape, &merged, &block.wo, None)?;
        tape.add(x, &proj)
    }

    fn feed_forward(
        &self,
        tape: &Tape,
        x: &Value,
        block_idx: usize,
        block: &Block,
        overlay: Option<&AdapterOverlay>,
    ) -> Result<Value> {
        let y = tape.layer_norm(
            x,
            &Tape::constant(block.ln2_gamma.clone()),
            &Tape::constant(block.ln2_beta.clone()),
            LN_EPS,
        )?;
        let a1 = overlay.and_then(|o| o.get(block_idx, FcSlot::Fc1));
        let h = tape.gelu(&self.dense(tape, &y, &block.fc1, a1)?)?;
        let a2 = overlay.and_then(|o| o.get(block_idx, FcSlot::Fc2));
        let f = self.dense(tape, &h, &block.fc2, a2)?;
        tape.add(x, &f)
    }

    /// Full visual forward pass to unit-norm token features [tokens x dim].
    /// With no overlay every input is constant and nothing is recorded.
    pub fn features_value(
        &self,
        tape: &Tape,
        img: &Tensor,
        overlay: Option<&AdapterOverlay>,
    ) -> Result<Value> {
        let patches = Tape::constant(self.patches(img)?);
        let w = Tape::constant(self.patch_embed.weight.clone());
        let b = Tape::constant(self.patch_embed.bias.clone());
        let mut x = tape.add_row_broadcast(&tape.matmul(&patches, &w)?, &b)?;
        if self.cfg.positional_embeddings {
            x = tape.add(&x, &Tape::constant(self.pos_embed.clone()))?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            x = self.attention(tape, &x, block)?;
            x = self.feed_forward(tape, &x, i, block, overlay)?;
        }
        let xf = tape.layer_norm(
            &x,
            &Tape::constant(self.final_gamma.clone()),
            &Tape::constant(self.final_beta.clone()),
            LN_EPS,
        )?;
        let f = self.dense(tape, &xf, &self.head, None)?;
        tape.l2_normalize_rows(&f)
    }

    /// Frozen dense feature map of an image at patch-grid resolution.
    pub fn encode_image(&self, img: &Tensor) -> Result<DenseFeatureMap> {
        let tape = Tape::new();
        let value = self.features_value(&tape, img, None)?;
        let features = tape.detach(&value);
        unit_rows_checked(&features, "encode_image")?;
        Ok(DenseFeatureMap {
            grid_h: self.cfg.grid_side(),
            grid_w: self.cfg.grid_side(),
            features,
        })
    }

    /// Unit-norm embedding of one category name through the fixed prompt
    /// template "an aerial photo of a {category}.".
    pub fn encode_text(&self, category: &str) -> Result<Tensor> {
        if category.trim().is_empty() {
            return Err(Error::EmptyCategory);
        }
        let prompt = format!("an aerial photo of a {category}.").to_lowercase();
        let d = self.cfg.embed_dim;
        let mut pooled = vec![0.0; d];
        let mut count = 0usize;
        for word in prompt.split_whitespace() {
            let token = (fnv1a64(word.as_bytes()) % self.cfg.vocab_size as u64) as usize;
            let row = &self.token_embed.data()[token * d..(token + 1) * d];
            for (p, &v) in pooled.iter_mut().zip(row.iter()) {
                *p += v;
            }
            count += 1;
        }
        let inv = 1.0 / count as f64;
        let mean = Tensor::new(vec![1, d], pooled.into_iter().map(|v| v * inv).collect());
        let projected = crate::numerics::matmul(&mean, &self.text_proj.weight)?;
        let mut with_bias = projected;
        for (v, &b) in with_bias
            .data_mut()
            .iter_mut()
            .zip(self.text_proj.bias.data())
        {
            *v += b;
        }
        let normed = crate::numerics::l2_normalize_rows(&with_bias);
        unit_rows_checked(&normed, "encode_text")?;
        Ok(normed.reshaped(vec![d]))
    }

    /// Embeddings for a category list, one row each.
    pub fn text_embeddings(&self, categories: &[String]) -> Result<TextEmbeddings> {
        if categories.is_empty() {
            return Err(Error::EmptyInput);
        }
        let d = self.cfg.embed_dim;
        let mut rows = Vec::with_capacity(categories.len() * d);
        for c in categories {
            rows.extend_from_slice(self.encode_text(c)?.data());
        }
        TextEmbeddings::new(
            Tensor::new(vec![categories.len(), d], rows),
            categories.to_vec(),
        )
    }

    /// Prediction at pixel resolution: cosine similarity upsampled by
    /// nearest-neighbor patch replication.
    pub fn predict(&self, img: &Tensor, text: &TextEmbeddings) -> Result<ProbMap> {
        let features = self.encode_image(img)?;
        let grid = similarity(&features, text)?;
        Ok(grid.upsample_nearest(self.cfg.patch_size))
    }

    // ----- serialization -----

    fn tensors(&self) -> Vec<&Tensor> {
        let mut list: Vec<&Tensor> = vec![
            &self.patch_embed.weight,
            &self.patch_embed.bias,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            list.extend([
                &b.ln1_gamma,
                &b.ln1_beta,
                &b.wq.weight,
                &b.wq.bias,
                &b.wk.weight,
                &b.wk.bias,
                &b.wv.weight,
                &b.wv.bias,
                &b.wo.weight,
                &b.wo.bias,
                &b.ln2_gamma,
                &b.ln2_beta,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        list.extend([
            &self.final_gamma,
            &self.final_beta,
            &self.head.weight,
            &self.head.bias,
            &self.token_embed,
            &self.text_proj.weight,
            &self.text_proj.bias,
        ]);
        list
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut list: Vec<&mut Tensor> = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            list.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.wq.weight,
                &mut b.wq.bias,
                &mut b.wk.weight,
                &mut b.wk.bias,
                &mut b.wv.weight,
                &mut b.wv.bias,
                &mut b.wo.weight,
                &mut b.wo.bias,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        list.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.head.weight,
            &mut self.head.bias,
            &mut self.token_embed,
            &mut self.text_proj.weight,
            &mut self.text_proj.bias,
        ]);
        list
    }

    /// Flat binary encoding: magic, version, config block, then all
    /// tensors in declaration order as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.cfg.image_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.patch_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.num_blocks as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.num_heads as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.vocab_size as u32).to_le_bytes());
        out.push(self.cfg.positional_embeddings as u8);
        out.extend_from_slice(&self.cfg.seed.to_le_bytes());
        for t in self.tensors() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FrozenModel> {
        let bad = |msg: &str| Error::FormatError {
            line: 0,
            reason: format!("model file: {msg}"),
        };
        if bytes.len() < 8 + 4 || &bytes[..8] != MAGIC {
            return Err(bad("missing SEECOVLM magic"));
        }
        let mut off = 8;
        let read_u32 = |off: &mut usize| -> Result<u32> {
            let end = *off + 4;
            if end > bytes.len() {
                return Err(bad("truncated header"));
            }
            let v = u32::from_le_bytes(bytes[*off..end].try_into().unwrap());
            *off = end;
            Ok(v)
        };
        let version = read_u32(&mut off)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let image_size = read_u32(&mut off)? as usize;
        let patch_size = read_u32(&mut off)? as usize;
        let embed_dim = read_u32(&mut off)? as usize;
        let num_blocks = read_u32(&mut off)? as usize;
        let num_heads = read_u32(&mut off)? as usize;
        let vocab_size = read_u32(&mut off)? as usize;
        if off + 1 + 8 > bytes.len() {
            return Err(bad("truncated header"));
        }
        let positional_embeddings = bytes[off] != 0;
        off += 1;
        let seed = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;

        let cfg = ModelConfig {
            image_size,
            patch_size,
            embed_dim,
            num_blocks,
            num_heads,
            vocab_size,
            positional_embeddings,
            seed,
        };
        // Shapes come from the config; build a model then overwrite weights.
        let mut model = build_model(&cfg)?;
        for tensor in model.tensors_mut() {
            let n = tensor.len();
            let end = off + n * 8;
            if end > bytes.len() {
                return Err(bad("truncated tensor data"));
            }
            let data = tensor.data_mut();
            for (i, chunk) in bytes[off..end].chunks_exact(8).enumerate() {
                data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            if !tensor.is_all_finite() {
                return Err(Error::NonFinite("model weight on load".into()));
            }
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FrozenModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        FrozenModel::from_bytes(&bytes)
    }
}

/// Cosine similarity scores between features and text embeddings, at grid
/// resolution. Both sides are unit norm, so the dot product is the cosine.
pub fn similarity(features: &DenseFeatureMap, text: &TextEmbeddings) -> Result<ProbMap> {
    if features.dim() != text.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs text dim {}",
            features.dim(),
            text.dim()
        )));
    }
    let scores = crate::numerics::matmul_bt(features.features(), text.rows())?;
    ProbMap::from_flat(features.grid_h(), features.grid_w(), text.count(), scores)
}

/// Tracked similarity for values produced by [`FrozenModel::features_value`].
pub fn similarity_value(tape: &Tape, features: &Value, text_rows: &Value) -> Result<Value> {
    tape.matmul_bt(features, text_rows)
}

/// Wraps a feature matrix produced elsewhere; used by tests and by the
/// adaptation loop when features already live on a tape.
pub fn feature_map_from_tensor(
    grid_h: usize,
    grid_w: usize,
    features: Tensor,
) -> Result<DenseFeatureMap> {
    let (rows, _) = features.dims2()?;
    if rows != grid_h * grid_w {
        return Err(Error::ShapeMismatch(format!(
            "{rows} feature rows for a {grid_h}x{grid_w} grid"
        )));
    }
    Ok(DenseFeatureMap {
        grid_h,
        grid_w,
        features,
    })
}

/// Shared text rows as a constant tape value.
pub fn text_rows_value(text: &TextEmbeddings) -> Value {
    Tape::constant_arc(Arc::new(text.rows().clone()))
}
