//! Seeded, frozen toy encoders standing in for a pretrained vision-language
//! backbone.
//!
//! Both encoders are small transformer-style stacks with seeded random
//! weights. They are immutable after construction and never appear in the
//! trainable parameter set. The text encoder additionally supports a
//! backward pass with respect to its *input* token embeddings, which is how
//! gradients reach the learnable prompt components.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

// f64 inherent math methods live in std; route through the trait so the
// no_std build resolves them via libm.
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ops::{
    l2_normalize, l2_normalize_backward, matmul, matmul_backward, mean_rows, mean_rows_backward,
    normalize_rows, normalize_rows_backward, relu, relu_backward, softmax, softmax_backward,
};
use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

const VISION_STREAM: u64 = 0x7669_7331;
const TEXT_STREAM: u64 = 0x7478_7431;

/// Geometry and dimensions of the frozen encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    /// Number of vision transformer blocks.
    pub depth: usize,
    /// Number of text transformer blocks.
    pub text_depth: usize,
    /// Vision feature width (D_x).
    pub d_visual: usize,
    /// Prompt token width (D).
    pub d_token: usize,
    /// Joint image-text embedding width.
    pub d_joint: usize,
    /// 1-indexed vision blocks whose patch features feed the detector.
    pub layer_taps: Vec<usize>,
    /// Maximum prompt length accepted by the text encoder.
    pub context_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_h: 64,
            image_w: 64,
            patch_size: 8,
            depth: 4,
            text_depth: 2,
            d_visual: 48,
            d_token: 32,
            d_joint: 32,
            layer_taps: alloc::vec![1, 2, 3, 4],
            context_len: 32,
            seed: 17,
        }
    }
}

impl EncoderConfig {
    /// Tiny configuration for gradient checks and fast tests.
    pub fn micro() -> Self {
        EncoderConfig {
            image_h: 16,
            image_w: 16,
            patch_size: 8,
            depth: 2,
            text_depth: 2,
            d_visual: 12,
            d_token: 8,
            d_joint: 8,
            layer_taps: alloc::vec![1, 2],
            context_len: 24,
            seed: 17,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_h / self.patch_size,
            self.image_w / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_h % self.patch_size != 0
            || self.image_w % self.patch_size != 0
        {
            return Err(CoreError::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.layer_taps.is_empty() {
            return Err(CoreError::Config("layer_taps must be non-empty".into()));
        }
        for &l in &self.layer_taps {
            if l == 0 || l > self.depth {
                return Err(CoreError::Config(format!(
                    "layer tap {l} outside 1..={}",
                    self.depth
                )));
            }
        }
        if self.d_visual == 0 || self.d_token == 0 || self.d_joint == 0 {
            return Err(CoreError::Config("zero feature dimension".into()));
        }
        Ok(())
    }
}

/// Per-layer patch features plus the global image feature.
///
/// `per_layer[l]` has shape `(HW+1) × d_visual` with the global feature as
/// the final row; rows `0..HW` are patches in row-major grid order.
#[derive(Debug, Clone)]
pub struct VisionFeatures<T> {
    pub per_layer: BTreeMap<usize, Tensor<T>>,
    pub global_cls: Tensor<T>,
    pub grid: (usize, usize),
}

/// A prompt as a sequence of token embeddings (`L × d_token`).
#[derive(Debug, Clone)]
pub struct PromptTokens<T> {
    pub tokens: Tensor<T>,
}

pub(crate) fn randn_tensor<T: Real>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v: f64 = StandardNormal.sample(rng);
        data.push(real::<T>(v * std));
    }
    Tensor::from_vec(shape, data).expect("finite gaussian draws")
}

/// One frozen transformer block: single-head self-attention and a two-layer
/// MLP, both with residual connections.
#[derive(Debug, Clone)]
struct TransformerBlock<T> {
    w_q: Tensor<T>,
    w_k: Tensor<T>,
    w_v: Tensor<T>,
    w_o: Tensor<T>,
    w_1: Tensor<T>,
    b_1: Tensor<T>,
    w_2: Tensor<T>,
}

#[derive(Debug)]
struct BlockCache<T> {
    x_in: Tensor<T>,
    attn: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    x_mid: Tensor<T>,
    h_pre: Tensor<T>,
}

impl<T: Real> TransformerBlock<T> {
    fn seeded(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let hidden = 2 * dim;
        let proj_std = 1.0 / (dim as f64).sqrt();
        TransformerBlock {
            w_q: randn_tensor(rng, &[dim, dim], proj_std),
            w_k: randn_tensor(rng, &[dim, dim], proj_std),
            w_v: randn_tensor(rng, &[dim, dim], proj_std),
            w_o: randn_tensor(rng, &[dim, dim], 0.5 * proj_std),
            w_1: randn_tensor(rng, &[dim, hidden], proj_std),
            b_1: randn_tensor(rng, &[hidden], 0.1),
            w_2: randn_tensor(rng, &[hidden, dim], 0.5 / (hidden as f64).sqrt()),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let dim = x.cols();
        let q = matmul(x, &self.w_q).expect("block shapes");
        let k = matmul(x, &self.w_k).expect("block shapes");
        let v = matmul(x, &self.w_v).expect("block shapes");
        let scores = matmul(&q, &k.transpose()).expect("block shapes");
        let attn = softmax(&scores, 1, real::<T>((dim as f64).sqrt())).expect("softmax");
        let mixed = matmul(&attn, &v).expect("block shapes");
        let mut x_mid = x.clone();
        x_mid
            .add_scaled(&matmul(&mixed, &self.w_o).expect("block shapes"), T::one())
            .expect("residual");

        let mut h_pre = matmul(&x_mid, &self.w_1).expect("block shapes");
        for r in 0..h_pre.rows() {
            let row = h_pre.row_mut(r);
            for (j, val) in row.iter_mut().enumerate() {
                *val = *val + self.b_1.data()[j];
            }
        }
        let h = relu(&h_pre);
        let mut x_out = x_mid.clone();
        x_out
            .add_scaled(&matmul(&h, &self.w_2).expect("block shapes"), T::one())
            .expect("residual");
        (
            x_out,
            BlockCache {
                x_in: x.clone(),
                attn,
                q,
                k,
                v,
                x_mid,
                h_pre,
            },
        )
    }

    /// Gradient with respect to the block input; weights stay untouched.
    fn backward_input(&self, cache: &BlockCache<T>, d_out: &Tensor<T>) -> Tensor<T> {
        let dim = cache.x_in.cols();
        // MLP branch.
        let h = relu(&cache.h_pre);
        let (d_h, _) = matmul_backward(d_out, &h, &self.w_2);
        let d_h_pre = relu_backward(&d_h, &cache.h_pre);
        let (d_mid_mlp, _) = matmul_backward(&d_h_pre, &cache.x_mid, &self.w_1);
        let mut d_mid = d_out.clone();
        d_mid.add_scaled(&d_mid_mlp, T::one()).expect("shape");

        // Attention branch: x_mid = x_in + (attn · v) · w_o.
        let mixed = matmul(&cache.attn, &cache.v).expect("shape");
        let (d_mixed, _) = matmul_backward(&d_mid, &mixed, &self.w_o);
        let (d_attn, d_v) = matmul_backward(&d_mixed, &cache.attn, &cache.v);
        let d_scores = softmax_backward(&d_attn, &cache.attn, 1, real::<T>((dim as f64).sqrt()));
        let (d_q, d_kt) = matmul_backward(&d_scores, &cache.q, &cache.k.transpose());
        let d_k = d_kt.transpose();

        let mut d_in = d_mid;
        let (d_from_q, _) = matmul_backward(&d_q, &cache.x_in, &self.w_q);
        let (d_from_k, _) = matmul_backward(&d_k, &cache.x_in, &self.w_k);
        let (d_from_v, _) = matmul_backward(&d_v, &cache.x_in, &self.w_v);
        d_in.add_scaled(&d_from_q, T::one()).expect("shape");
        d_in.add_scaled(&d_from_k, T::one()).expect("shape");
        d_in.add_scaled(&d_from_v, T::one()).expect("shape");
        d_in
    }

    fn mix_fingerprint(&self, acc: &mut u64) {
        for t in [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.b_1, &self.w_2,
        ] {
            for &v in t.data() {
                *acc = acc
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add(v.to_f64_c().to_bits());
            }
        }
    }
}

/// Frozen patch-feature extractor.
#[derive(Debug, Clone)]
pub struct VisionEncoder<T> {
    cfg: EncoderConfig,
    patch_embed: Tensor<T>,
    cls_token: Tensor<T>,
    pos: Tensor<T>,
    blocks: Vec<TransformerBlock<T>>,
}

impl<T: Real> VisionEncoder<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VISION_STREAM);
        let patch_in = cfg.patch_size * cfg.patch_size * 3;
        let hw = cfg.num_patches();
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch_embed: randn_tensor(&mut rng, &[patch_in, cfg.d_visual], {
                1.0 / (patch_in as f64).sqrt()
            }),
            cls_token: randn_tensor(&mut rng, &[1, cfg.d_visual], 0.3),
            pos: randn_tensor(&mut rng, &[hw + 1, cfg.d_visual], 0.3),
            blocks: (0..cfg.depth)
                .map(|_| TransformerBlock::seeded(&mut rng, cfg.d_visual))
                .collect(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Extracts per-layer patch features and the global feature from an
    /// `h × w × 3` image with values in `[0, 1]`.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<VisionFeatures<T>> {
        let cfg = &self.cfg;
        if image.shape() != [cfg.image_h, cfg.image_w, 3] {
            return Err(CoreError::Input(format!(
                "expected image shape [{}, {}, 3], got {:?}",
                cfg.image_h,
                cfg.image_w,
                image.shape()
            )));
        }
        if !image
            .data()
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
        {
            return Err(CoreError::Input("image values outside [0, 1]".into()));
        }

        let (gh, gw) = cfg.grid();
        let p = cfg.patch_size;
        let patch_in = p * p * 3;
        let mut patch_rows = Tensor::zeros(&[gh * gw, patch_in]);
        for pi in 0..gh {
            for pj in 0..gw {
                let row = patch_rows.row_mut(pi * gw + pj);
                let mut idx = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            let flat = ((pi * p + dy) * cfg.image_w + (pj * p + dx)) * 3 + c;
                            row[idx] = image.data()[flat];
                            idx += 1;
                        }
                    }
                }
            }
        }
        let embedded = matmul(&patch_rows, &self.patch_embed)?;
        let mut x = Tensor::concat_rows(&[&self.cls_token, &embedded])?;
        x.add_scaled(&self.pos, T::one())?;

        let mut tapped: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let (next, _) = block.forward(&x);
            x = next;
            let layer = bi + 1;
            if cfg.layer_taps.contains(&layer) {
                tapped.insert(layer, x.slice_rows(1, x.rows()));
            }
        }
        let global = x.slice_rows(0, 1);

        let mut per_layer = BTreeMap::new();
        for (layer, patches) in tapped {
            per_layer.insert(layer, Tensor::concat_rows(&[&patches, &global])?);
        }
        Ok(VisionFeatures {
            per_layer,
            global_cls: global.reshape(&[cfg.d_visual])?,
            grid: (gh, gw),
        })
    }

    /// Digest of all frozen weights; lets callers assert the encoder never
    /// changes across training.
    pub fn weights_fingerprint(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325u64;
        for t in [&self.patch_embed, &self.cls_token, &self.pos] {
            for &v in t.data() {
                acc = acc
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add(v.to_f64_c().to_bits());
            }
        }
        for b in &self.blocks {
            b.mix_fingerprint(&mut acc);
        }
        acc
    }
}

/// Saved intermediates of one [`TextEncoder::encode`] call; consumed by
/// [`TextEncoder::backward`].
#[derive(Debug)]
pub struct TextCache<T> {
    blocks: Vec<BlockCache<T>>,
    x_final: Tensor<T>,
    pooled: Tensor<T>,
    unit: Tensor<T>,
    norm: T,
    length: usize,
}

/// Frozen prompt-sequence embedder into the joint image-text space.
#[derive(Debug, Clone)]
pub struct TextEncoder<T> {
    cfg: EncoderConfig,
    pos: Tensor<T>,
    blocks: Vec<TransformerBlock<T>>,
    w_out: Tensor<T>,
}

impl<T: Real> TextEncoder<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TEXT_STREAM);
        Ok(TextEncoder {
            cfg: cfg.clone(),
            pos: randn_tensor(&mut rng, &[cfg.context_len, cfg.d_token], 0.3),
            blocks: (0..cfg.text_depth)
                .map(|_| TransformerBlock::seeded(&mut rng, cfg.d_token))
                .collect(),
            w_out: randn_tensor(&mut rng, &[cfg.d_token, cfg.d_joint], {
                1.0 / (cfg.d_token as f64).sqrt()
            }),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Maps a prompt to its unit-norm joint-space embedding.
    pub fn encode(&self, prompt: &PromptTokens<T>) -> Result<(Tensor<T>, TextCache<T>)> {
        let tokens = &prompt.tokens;
        if tokens.rank() != 2 || tokens.cols() != self.cfg.d_token {
            return Err(CoreError::Input(format!(
                "prompt tokens must be L x {}, got {:?}",
                self.cfg.d_token,
                tokens.shape()
            )));
        }
        let length = tokens.rows();
        if length == 0 || length > self.cfg.context_len {
            return Err(CoreError::Input(format!(
                "prompt length {length} outside 1..={}",
                self.cfg.context_len
            )));
        }
        if !tokens.is_finite() {
            return Err(CoreError::Input("non-finite prompt tokens".into()));
        }

        let mut x = tokens.clone();
        x.add_scaled(&self.pos.slice_rows(0, length), T::one())?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x);
            caches.push(cache);
            x = next;
        }
        let pooled = mean_rows(&x);
        let embedded = matmul(
            &pooled.clone().reshape(&[1, self.cfg.d_token])?,
            &self.w_out,
        )?
        .reshape(&[self.cfg.d_joint])?;
        let (unit, norm) = l2_normalize(&embedded)?;
        Ok((
            unit.clone(),
            TextCache {
                blocks: caches,
                x_final: x,
                pooled,
                unit,
                norm,
                length,
            },
        ))
    }

    /// Gradient of the embedding with respect to the input tokens. The
    /// encoder's own weights are frozen and receive nothing.
    pub fn backward(&self, cache: &TextCache<T>, d_out: &Tensor<T>) -> Tensor<T> {
        let d_embedded = l2_normalize_backward(d_out, &cache.unit, cache.norm);
        let (d_pooled, _) = matmul_backward(
            &d_embedded
                .clone()
                .reshape(&[1, self.cfg.d_joint])
                .expect("shape"),
            &cache
                .pooled
                .clone()
                .reshape(&[1, self.cfg.d_token])
                .expect("shape"),
            &self.w_out,
        );
        let d_pooled = d_pooled.reshape(&[self.cfg.d_token]).expect("shape");
        let mut d_x = mean_rows_backward(&d_pooled, cache.x_final.rows());
        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            d_x = block.backward_input(bc, &d_x);
        }
        debug_assert_eq!(d_x.rows(), cache.length);
        d_x
    }

    pub fn weights_fingerprint(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325u64;
        for t in [&self.pos, &self.w_out] {
            for &v in t.data() {
                acc = acc
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add(v.to_f64_c().to_bits());
            }
        }
        for b in &self.blocks {
            b.mix_fingerprint(&mut acc);
        }
        acc
    }
}

/// Cache for [`project_patches`] holding the raw rows and normalization
/// state needed by the backward pass.
#[derive(Debug)]
pub struct ProjectionCache<T> {
    pub raw_rows: Tensor<T>,
    pub normalized: Tensor<T>,
    pub norms: Vec<T>,
}

/// Projects one tapped layer's feature rows (patches plus the global row)
/// into the joint space and L2-normalizes each row. The projection matrix
/// is the only trainable piece.
pub fn project_patches<T: Real>(
    features: &VisionFeatures<T>,
    layer: usize,
    projection: &Tensor<T>,
) -> Result<(Tensor<T>, ProjectionCache<T>)> {
    let rows = features
        .per_layer
        .get(&layer)
        .ok_or_else(|| CoreError::Param(format!("layer {layer} is not among the tapped layers")))?;
    let projected = matmul(rows, projection)?;
    let (normalized, norms) = normalize_rows(&projected)?;
    Ok((
        normalized.clone(),
        ProjectionCache {
            raw_rows: rows.clone(),
            normalized,
            norms,
        },
    ))
}

/// Gradient of [`project_patches`] with respect to the projection matrix.
pub fn project_patches_backward<T: Real>(
    cache: &ProjectionCache<T>,
    d_normalized: &Tensor<T>,
) -> Tensor<T> {
    let d_projected = normalize_rows_backward(d_normalized, &cache.normalized, &cache.norms);
    matmul(&cache.raw_rows.transpose(), &d_projected).expect("projection backward shapes")
}
