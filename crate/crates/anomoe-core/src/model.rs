//! The assembled detector: frozen encoders, per-layer prompt mixtures,
//! scoring, and the hand-derived backward pass through the full training
//! loss.
//!
//! All trainable state lives in a [`ParamSet`]; the model itself holds
//! parameter handles plus the frozen encoders. Forward methods read from a
//! caller-supplied parameter set so the finite-difference checker can
//! re-evaluate the loss at perturbed points without touching the model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    project_patches, project_patches_backward, randn_tensor, EncoderConfig, ProjectionCache,
    PromptTokens, TextCache, TextEncoder, VisionEncoder, VisionFeatures,
};
use crate::gradcheck::{finite_diff_gradcheck, GradCheckReport};
use crate::loss::{
    balance_term, balance_term_backward, bce_score_backward, bce_score_loss, decouple_term,
    decouple_term_backward, dice_loss, dice_loss_backward, focal_loss, focal_loss_backward,
    LossBreakdown, LossConfig,
};
use crate::moe::{
    aggregate_experts, aggregate_experts_backward, assemble_abnormal_prompt,
    assemble_normal_prompt, cross_attention, cross_attention_backward, gates_backward_to_logits,
    pool_routing_vector, pool_routing_vector_backward, route, router_backward, router_logits,
    split_abnormal_grad, split_normal_grad, ActivationStats, CrossAttentionCache, PromptLayout,
    RouterCache, RoutingDecision, State,
};
use crate::ops::softmax_backward;
use crate::optim::{ParamId, ParamSet};
use crate::scoring::{
    gaussian_smooth, global_abnormal_prob, global_abnormal_prob_backward, layer_map,
    layer_map_backward, AnomalyOutput, GlobalTermCache, LayerMapCache, ScoringConfig,
};
use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

/// Sizes and ablation switches of the prompt-mixture head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of learnable cross-attention queries per branch.
    pub n_queries: usize,
    /// Pool size E per layer and state.
    pub experts: usize,
    /// Experts blended per decision.
    pub top_k: usize,
    /// Token length of a normal expert segment.
    pub m_normal: usize,
    /// Token length of an abnormal expert segment.
    pub m_abnormal: usize,
    /// Shared learnable context length.
    pub m_ctx: usize,
    pub heads: usize,
    pub router_hidden: usize,
    /// Ablation: one expert pool shared by both states.
    pub shared_pool: bool,
    /// Ablation: one cross-attention shared by both states.
    pub shared_cross_attention: bool,
    /// Ablation: a single monolithic prompt pair instead of the mixture.
    pub static_prompt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 8,
            experts: 8,
            top_k: 4,
            m_normal: 5,
            m_abnormal: 6,
            m_ctx: 8,
            heads: 4,
            router_hidden: 64,
            shared_pool: false,
            shared_cross_attention: false,
            static_prompt: false,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            n_queries: 4,
            experts: 4,
            top_k: 2,
            m_normal: 3,
            m_abnormal: 4,
            m_ctx: 2,
            heads: 2,
            router_hidden: 16,
            shared_pool: false,
            shared_cross_attention: false,
            static_prompt: false,
        }
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            m_normal: self.m_normal,
            m_abnormal: self.m_abnormal,
            m_ctx: self.m_ctx,
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(CoreError::Config(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.experts
            )));
        }
        if self.heads == 0 || enc.d_token % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_token {} not divisible by {} heads",
                enc.d_token, self.heads
            )));
        }
        if self.m_normal == 0 || self.m_abnormal == 0 {
            return Err(CoreError::Config("state segments need >= 1 token".into()));
        }
        if self.shared_pool && self.m_normal != self.m_abnormal {
            return Err(CoreError::Config(
                "shared_pool requires m_normal == m_abnormal (one segment length)".into(),
            ));
        }
        if self.layout().abnormal_len() > enc.context_len {
            return Err(CoreError::Config(format!(
                "abnormal prompt length {} exceeds context {}",
                self.layout().abnormal_len(),
                enc.context_len
            )));
        }
        if self.n_queries == 0 || self.router_hidden == 0 {
            return Err(CoreError::Config("zero-sized mixture component".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BranchHandles {
    queries: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    router_w1: ParamId,
    router_b1: ParamId,
    router_w2: ParamId,
    router_b2: ParamId,
    experts: Vec<ParamId>,
}

#[derive(Debug, Clone, Default)]
struct Handles {
    projections: BTreeMap<usize, ParamId>,
    branches: BTreeMap<(usize, State), BranchHandles>,
    ctx: Option<ParamId>,
    cls: Option<ParamId>,
    static_normal: Option<ParamId>,
    static_abnormal: Option<ParamId>,
}

/// The full detector.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub enc_cfg: EncoderConfig,
    pub cfg: ModelConfig,
    pub vision: VisionEncoder<T>,
    pub text: TextEncoder<T>,
    pub params: ParamSet<T>,
    handles: Handles,
}

impl<T: Real> Model<T> {
    /// Builds encoders (from `enc_cfg.seed`) and trainable parameters
    /// (from `seed`), in a fixed registration order.
    pub fn new(enc_cfg: &EncoderConfig, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        enc_cfg.validate()?;
        cfg.validate(enc_cfg)?;
        let vision = VisionEncoder::new(enc_cfg)?;
        let text = TextEncoder::new(enc_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465);
        let mut params = ParamSet::new();
        let mut handles = Handles::default();

        let (d, d_x, d_joint) = (enc_cfg.d_token, enc_cfg.d_visual, enc_cfg.d_joint);
        let proj_std = 1.0 / (d_x as f64).sqrt();
        let token_std = 0.2;

        for &layer in &enc_cfg.layer_taps {
            let id = params.register(
                format!("proj/layer{layer}"),
                randn_tensor(&mut rng, &[d_x, d_joint], proj_std),
            );
            handles.projections.insert(layer, id);
        }

        if cfg.static_prompt {
            handles.static_normal = Some(params.register(
                "static/normal",
                randn_tensor(&mut rng, &[cfg.m_normal, d], token_std),
            ));
            handles.static_abnormal = Some(params.register(
                "static/abnormal",
                randn_tensor(&mut rng, &[cfg.m_abnormal, d], token_std),
            ));
        } else {
            for &layer in &enc_cfg.layer_taps {
                let mut shared_attn: Option<(ParamId, ParamId, ParamId, ParamId)> = None;
                let mut shared_experts: Option<Vec<ParamId>> = None;
                for state in State::BOTH {
                    let prefix = if cfg.shared_cross_attention {
                        format!("shared/layer{layer}")
                    } else {
                        format!("{}/layer{layer}", state.tag())
                    };
                    let attn = if let (true, Some(ids)) = (cfg.shared_cross_attention, shared_attn)
                    {
                        ids
                    } else {
                        let ids = (
                            params.register(
                                format!("{prefix}/queries"),
                                randn_tensor(&mut rng, &[cfg.n_queries, d], 0.5),
                            ),
                            params.register(
                                format!("{prefix}/w_k"),
                                randn_tensor(&mut rng, &[d_x, d], proj_std),
                            ),
                            params.register(
                                format!("{prefix}/w_v"),
                                randn_tensor(&mut rng, &[d_x, d], proj_std),
                            ),
                            params.register(
                                format!("{prefix}/w_o"),
                                randn_tensor(&mut rng, &[d, d], 1.0 / (d as f64).sqrt()),
                            ),
                        );
                        shared_attn = Some(ids);
                        ids
                    };

                    let rprefix = format!("{}/layer{layer}", state.tag());
                    let router_w1 = params.register(
                        format!("{rprefix}/router_w1"),
                        randn_tensor(&mut rng, &[d, cfg.router_hidden], 1.0 / (d as f64).sqrt()),
                    );
                    let router_b1 = params.register(
                        format!("{rprefix}/router_b1"),
                        Tensor::zeros(&[cfg.router_hidden]),
                    );
                    let router_w2 = params.register(
                        format!("{rprefix}/router_w2"),
                        randn_tensor(
                            &mut rng,
                            &[cfg.router_hidden, cfg.experts],
                            1.0 / (cfg.router_hidden as f64).sqrt(),
                        ),
                    );
                    let router_b2 = params.register(
                        format!("{rprefix}/router_b2"),
                        Tensor::zeros(&[cfg.experts]),
                    );

                    let experts = if let (true, Some(ids)) =
                        (cfg.shared_pool, shared_experts.clone())
                    {
                        ids
                    } else {
                        let m_state = match state {
                            State::Normal => cfg.m_normal,
                            State::Abnormal => cfg.m_abnormal,
                        };
                        let pool_prefix = if cfg.shared_pool {
                            format!("sharedpool/layer{layer}")
                        } else {
                            rprefix.clone()
                        };
                        let ids: Vec<ParamId> = (0..cfg.experts)
                            .map(|j| {
                                params.register(
                                    format!("{pool_prefix}/expert{j}"),
                                    randn_tensor(&mut rng, &[m_state, d], token_std),
                                )
                            })
                            .collect();
                        shared_experts = Some(ids.clone());
                        ids
                    };

                    handles.branches.insert(
                        (layer, state),
                        BranchHandles {
                            queries: attn.0,
                            w_k: attn.1,
                            w_v: attn.2,
                            w_o: attn.3,
                            router_w1,
                            router_b1,
                            router_w2,
                            router_b2,
                            experts,
                        },
                    );
                }
            }
        }

        handles.ctx = Some(params.register(
            "ctx",
            randn_tensor(&mut rng, &[cfg.m_ctx.max(1), d], token_std),
        ));
        handles.cls = Some(params.register(
            "cls",
            randn_tensor(&mut rng, &[1, d], token_std),
        ));

        Ok(Model {
            enc_cfg: enc_cfg.clone(),
            cfg: cfg.clone(),
            vision,
            text,
            params,
            handles,
        })
    }

    fn ctx_id(&self) -> ParamId {
        self.handles.ctx.expect("ctx registered")
    }

    fn cls_id(&self) -> ParamId {
        self.handles.cls.expect("cls registered")
    }

    /// The layer whose text embeddings feed the global score term.
    pub fn final_layer(&self) -> usize {
        *self.enc_cfg.layer_taps.iter().max().expect("non-empty taps")
    }

    pub fn projection_id(&self, layer: usize) -> Option<ParamId> {
        self.handles.projections.get(&layer).copied()
    }

    pub fn expert_ids(&self, layer: usize, state: State) -> Option<&[ParamId]> {
        self.handles
            .branches
            .get(&(layer, state))
            .map(|b| b.experts.as_slice())
    }

    /// Mean embedding of every expert, in (layer, state, expert) order.
    /// Empty in static-prompt mode.
    pub fn expert_mean_rows(&self) -> Vec<ExpertMeanRow> {
        let mut out = Vec::new();
        for ((layer, state), b) in &self.handles.branches {
            for (j, &id) in b.experts.iter().enumerate() {
                let mean = crate::moe::expert_mean(self.params.value(id));
                out.push(ExpertMeanRow {
                    layer: *layer,
                    state: *state,
                    expert: j,
                    mean: mean.data().iter().map(|v| v.to_f64_c()).collect(),
                });
            }
        }
        out
    }

    /// Forward pass for one image with the model's own parameters.
    pub fn forward(
        &self,
        features: &VisionFeatures<T>,
        scoring: &ScoringConfig,
    ) -> Result<ImageForward<T>> {
        self.forward_with(&self.params, features, scoring)
    }

    /// Forward pass reading all trainable values from `params`.
    pub fn forward_with(
        &self,
        params: &ParamSet<T>,
        features: &VisionFeatures<T>,
        scoring: &ScoringConfig,
    ) -> Result<ImageForward<T>> {
        let taps = &self.enc_cfg.layer_taps;
        let out_hw = (self.enc_cfg.image_h, self.enc_cfg.image_w);
        let mut layers: BTreeMap<usize, LayerForward<T>> = BTreeMap::new();
        let mut map = Tensor::<T>::zeros(&[out_hw.0, out_hw.1]);
        let layer_weight = if scoring.normalize_by_layers {
            T::one() / real::<T>(taps.len() as f64)
        } else {
            T::one()
        };

        for &layer in taps {
            let prompts = self.layer_prompts(params, features, layer)?;
            let proj_id = self.handles.projections[&layer];
            let (rows, proj_cache) = project_patches(features, layer, params.value(proj_id))?;
            let (up, map_cache) = layer_map(
                &rows,
                &prompts.text_normal,
                &prompts.text_abnormal,
                scoring.tau,
                features.grid,
                out_hw,
            )?;
            map.add_scaled(&up, layer_weight)?;
            layers.insert(
                layer,
                LayerForward {
                    prompts,
                    rows,
                    proj_cache,
                    map_cache,
                    upsampled: up,
                },
            );
        }

        // Peak location (first maximum in row-major order).
        let mut max_pos = (0, 0);
        let mut max_v = T::neg_infinity();
        for r in 0..out_hw.0 {
            for c in 0..out_hw.1 {
                if map.at(r, c) > max_v {
                    max_v = map.at(r, c);
                    max_pos = (r, c);
                }
            }
        }

        let final_layer = self.final_layer();
        let fl = &layers[&final_layer];
        let hw = features.grid.0 * features.grid.1;
        let global_row = Tensor::from_vec(
            &[self.enc_cfg.d_joint],
            fl.rows.row(hw).to_vec(),
        )?;
        let (p_global, global_cache) = global_abnormal_prob(
            &global_row,
            &fl.prompts.text_normal,
            &fl.prompts.text_abnormal,
            scoring.tau_prime,
        )?;
        let score = real::<T>(0.5) * max_v + real::<T>(0.5) * p_global;

        Ok(ImageForward {
            layers,
            map,
            score,
            max_pos,
            p_global,
            global_cache,
        })
    }

    /// Inference entry point: aggregated map (optionally smoothed), image
    /// score, and the per-layer raw maps.
    pub fn score_image(
        &self,
        features: &VisionFeatures<T>,
        scoring: &ScoringConfig,
    ) -> Result<AnomalyOutput<T>> {
        let fwd = self.forward(features, scoring)?;
        let map = gaussian_smooth(&fwd.map, scoring.gaussian_sigma)?;
        Ok(AnomalyOutput {
            map,
            score: fwd.score,
            per_layer_raw: fwd
                .layers
                .iter()
                .map(|(l, lf)| (*l, lf.upsampled.clone()))
                .collect(),
        })
    }

    fn layer_prompts(
        &self,
        params: &ParamSet<T>,
        features: &VisionFeatures<T>,
        layer: usize,
    ) -> Result<LayerPrompts<T>> {
        let cls = params.value(self.cls_id()).clone();
        let ctx = params.value(self.ctx_id()).clone();
        let (s_n, s_a, branch_normal, branch_abnormal) = if self.cfg.static_prompt {
            (
                params.value(self.handles.static_normal.expect("static")).clone(),
                params.value(self.handles.static_abnormal.expect("static")).clone(),
                None,
                None,
            )
        } else {
            let bn = self.branch_forward(params, features, layer, State::Normal)?;
            let ba = self.branch_forward(params, features, layer, State::Abnormal)?;
            let (s_n, s_a) = (bn.s_agg.clone(), ba.s_agg.clone());
            (s_n, s_a, Some(bn), Some(ba))
        };

        let tokens_n = assemble_normal_prompt(&s_n, &cls, &ctx)?;
        let tokens_a = assemble_abnormal_prompt(&s_n, &s_a, &cls, &ctx)?;
        let (text_normal, cache_normal) = self.text.encode(&PromptTokens { tokens: tokens_n })?;
        let (text_abnormal, cache_abnormal) =
            self.text.encode(&PromptTokens { tokens: tokens_a })?;
        Ok(LayerPrompts {
            text_normal,
            text_abnormal,
            cache_normal,
            cache_abnormal,
            branch_normal,
            branch_abnormal,
        })
    }

    fn branch_forward(
        &self,
        params: &ParamSet<T>,
        features: &VisionFeatures<T>,
        layer: usize,
        state: State,
    ) -> Result<BranchForward<T>> {
        let b = &self.handles.branches[&(layer, state)];
        let feats = features
            .per_layer
            .get(&layer)
            .ok_or_else(|| CoreError::Internal(format!("missing features for layer {layer}")))?;
        let (attended, attn_cache) = cross_attention(
            feats,
            params.value(b.queries),
            params.value(b.w_k),
            params.value(b.w_v),
            params.value(b.w_o),
            self.cfg.heads,
        )?;
        let routing_vec = pool_routing_vector(&attended);
        let (logits, router_cache) = router_logits(
            &routing_vec,
            params.value(b.router_w1),
            params.value(b.router_b1),
            params.value(b.router_w2),
            params.value(b.router_b2),
        )?;
        let decision = route(logits, self.cfg.top_k, layer, state)?;
        let pool: Vec<Tensor<T>> = b.experts.iter().map(|&id| params.value(id).clone()).collect();
        let s_agg = aggregate_experts(&decision, &pool)?;
        Ok(BranchForward {
            attn_cache,
            router_cache,
            decision,
            pool,
            s_agg,
        })
    }

    /// Loss over a batch with the model's own parameters.
    pub fn training_loss(
        &self,
        batch: &[TrainItem<'_, T>],
        loss_cfg: &LossConfig,
        scoring: &ScoringConfig,
    ) -> Result<(LossBreakdown, BatchCache<T>)> {
        self.training_loss_with(&self.params, batch, loss_cfg, scoring)
    }

    /// Loss over a batch reading trainable values from `params`.
    pub fn training_loss_with(
        &self,
        params: &ParamSet<T>,
        batch: &[TrainItem<'_, T>],
        loss_cfg: &LossConfig,
        scoring: &ScoringConfig,
    ) -> Result<(LossBreakdown, BatchCache<T>)> {
        if batch.is_empty() {
            return Err(CoreError::Param("empty training batch".into()));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut bce = 0.0;
        let mut dice = 0.0;
        let mut focal = 0.0;
        let mut images = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for item in batch {
            let fwd = self.forward_with(params, item.features, scoring)?;
            let mask = match item.mask {
                Some(m) => {
                    if m.shape() != fwd.map.shape() {
                        return Err(CoreError::Input(format!(
                            "mask shape {:?} vs map {:?}",
                            m.shape(),
                            fwd.map.shape()
                        )));
                    }
                    m.clone()
                }
                None => Tensor::zeros(fwd.map.shape()),
            };
            bce += bce_score_loss(fwd.score, item.label).to_f64_c() * inv_b;
            dice += dice_loss(&fwd.map, &mask, loss_cfg.dice_epsilon)?.to_f64_c() * inv_b;
            focal += focal_loss(&fwd.map, &mask, loss_cfg.focal_gamma, loss_cfg.focal_alpha)?
                .to_f64_c()
                * inv_b;
            masks.push(mask);
            labels.push(item.label);
            images.push(fwd);
        }

        let mut balance = 0.0;
        let mut decouple = 0.0;
        if !self.cfg.static_prompt {
            for (_, probs) in self.balance_groups(&images) {
                balance += loss_cfg.alpha * balance_term(&probs)?.to_f64_c();
            }
            for pool in self.distinct_pools(params) {
                let (term, _) = decouple_term(&pool)?;
                decouple += loss_cfg.beta * term.to_f64_c();
            }
        }

        let breakdown = LossBreakdown::assemble(bce, dice, focal, balance, decouple);
        if !breakdown.is_finite() {
            return Err(CoreError::Eval("non-finite training loss".into()));
        }
        Ok((
            breakdown,
            BatchCache {
                images,
                masks,
                labels,
            },
        ))
    }

    /// Row-stacked routing probabilities per (layer, state), batch order.
    fn balance_groups(&self, images: &[ImageForward<T>]) -> Vec<((usize, State), Tensor<T>)> {
        let mut out = Vec::new();
        if images.is_empty() {
            return out;
        }
        for &layer in &self.enc_cfg.layer_taps {
            for state in State::BOTH {
                let e = self.cfg.experts;
                let mut stack = Tensor::zeros(&[images.len(), e]);
                for (i, img) in images.iter().enumerate() {
                    let branch = img.layers[&layer].prompts.branch(state);
                    stack
                        .row_mut(i)
                        .copy_from_slice(branch.decision.probs.data());
                }
                out.push(((layer, state), stack));
            }
        }
        out
    }

    /// Expert pools deduplicated under pool sharing, as value tensors.
    fn distinct_pools(&self, params: &ParamSet<T>) -> Vec<Vec<Tensor<T>>> {
        let mut seen: Vec<ParamId> = Vec::new();
        let mut pools = Vec::new();
        for b in self.handles.branches.values() {
            let first = b.experts[0];
            if seen.contains(&first) {
                continue;
            }
            seen.push(first);
            pools.push(
                b.experts
                    .iter()
                    .map(|&id| params.value(id).clone())
                    .collect(),
            );
        }
        pools
    }

    fn distinct_pool_handles(&self) -> Vec<Vec<ParamId>> {
        let mut seen: Vec<ParamId> = Vec::new();
        let mut pools = Vec::new();
        for b in self.handles.branches.values() {
            let first = b.experts[0];
            if seen.contains(&first) {
                continue;
            }
            seen.push(first);
            pools.push(b.experts.clone());
        }
        pools
    }

    /// Accumulates the gradient of the batch loss into `params.grad`.
    ///
    /// `cache` must come from [`Model::training_loss_with`] evaluated at the
    /// same parameter values.
    pub fn training_backward(
        &self,
        params: &mut ParamSet<T>,
        cache: &BatchCache<T>,
        loss_cfg: &LossConfig,
        scoring: &ScoringConfig,
    ) -> Result<()> {
        let b = cache.images.len();
        let inv_b = real::<T>(1.0 / b as f64);
        let layer_weight = if scoring.normalize_by_layers {
            T::one() / real::<T>(self.enc_cfg.layer_taps.len() as f64)
        } else {
            T::one()
        };
        let final_layer = self.final_layer();
        let hw = {
            let (gh, gw) = self.enc_cfg.grid();
            gh * gw
        };

        // Batch-level balance gradient, distributed to per-image logits.
        let mut balance_dlogits: BTreeMap<(usize, State), Vec<Tensor<T>>> = BTreeMap::new();
        if !self.cfg.static_prompt && loss_cfg.alpha != 0.0 {
            for ((layer, state), probs) in self.balance_groups(&cache.images) {
                let d_probs = balance_term_backward(&probs, real::<T>(loss_cfg.alpha));
                let mut rows = Vec::with_capacity(b);
                for i in 0..b {
                    let p_i = Tensor::from_vec(&[probs.cols()], probs.row(i).to_vec())?;
                    let d_i = Tensor::from_vec(&[probs.cols()], d_probs.row(i).to_vec())?;
                    rows.push(softmax_backward(&d_i, &p_i, 0, T::one()));
                }
                balance_dlogits.insert((layer, state), rows);
            }
        }

        for (i, img) in cache.images.iter().enumerate() {
            let mask = &cache.masks[i];
            let label = cache.labels[i];

            let d_score = bce_score_backward(img.score, label, inv_b);
            let mut d_map = dice_loss_backward(&img.map, mask, loss_cfg.dice_epsilon, inv_b);
            d_map
                .add_scaled(
                    &focal_loss_backward(
                        &img.map,
                        mask,
                        loss_cfg.focal_gamma,
                        loss_cfg.focal_alpha,
                        inv_b,
                    ),
                    T::one(),
                )
                .expect("shape");
            // Half of the score flows through the map's peak pixel.
            let (mr, mc) = img.max_pos;
            let bumped = d_map.at(mr, mc) + real::<T>(0.5) * d_score;
            d_map.set(mr, mc, bumped);

            // The other half flows through the global probability.
            let (d_global_row, d_tn_final, d_ta_final) =
                global_abnormal_prob_backward(&img.global_cache, real::<T>(0.5) * d_score);

            for (&layer, lf) in &img.layers {
                let d_up = d_map.scale(layer_weight);
                let (mut d_rows, mut d_tn, mut d_ta) = layer_map_backward(&lf.map_cache, &d_up);
                if layer == final_layer {
                    for (slot, v) in d_rows.row_mut(hw).iter_mut().enumerate() {
                        *v = *v + d_global_row.data()[slot];
                    }
                    d_tn.add_scaled(&d_tn_final, T::one()).expect("shape");
                    d_ta.add_scaled(&d_ta_final, T::one()).expect("shape");
                }
                let d_proj = project_patches_backward(&lf.proj_cache, &d_rows);
                params.accumulate_grad(self.handles.projections[&layer], &d_proj);

                // Through the frozen text encoder into the prompt tokens.
                let d_tokens_n = self.text.backward(&lf.prompts.cache_normal, &d_tn);
                let d_tokens_a = self.text.backward(&lf.prompts.cache_abnormal, &d_ta);
                let layout = self.cfg.layout();
                let (d_sn_a, d_sa, d_cls_a, d_ctx_a) = split_abnormal_grad(&d_tokens_a, &layout);
                let (mut d_sn, d_cls_n, d_ctx_n) = split_normal_grad(&d_tokens_n, &layout);
                d_sn.add_scaled(&d_sn_a, T::one()).expect("shape");

                params.accumulate_grad(self.cls_id(), &d_cls_n);
                params.accumulate_grad(self.cls_id(), &d_cls_a);
                params.accumulate_grad(self.ctx_id(), &d_ctx_n);
                params.accumulate_grad(self.ctx_id(), &d_ctx_a);

                if self.cfg.static_prompt {
                    params.accumulate_grad(self.handles.static_normal.expect("static"), &d_sn);
                    params.accumulate_grad(self.handles.static_abnormal.expect("static"), &d_sa);
                    continue;
                }

                for (state, d_s_agg) in [(State::Normal, d_sn), (State::Abnormal, d_sa)] {
                    let branch = lf.prompts.branch(state);
                    let handlesb = &self.handles.branches[&(layer, state)];
                    let (d_gates, d_expert_parts) =
                        aggregate_experts_backward(&branch.decision, &branch.pool, &d_s_agg);
                    for (idx, g) in d_expert_parts {
                        params.accumulate_grad(handlesb.experts[idx], &g);
                    }
                    let mut d_logits = gates_backward_to_logits(&branch.decision, &d_gates);
                    if let Some(rows) = balance_dlogits.get(&(layer, state)) {
                        d_logits.add_scaled(&rows[i], T::one()).expect("shape");
                    }
                    let rgrads = router_backward(&branch.router_cache, &d_logits);
                    params.accumulate_grad(handlesb.router_w1, &rgrads.d_w_1);
                    params.accumulate_grad(handlesb.router_b1, &rgrads.d_b_1);
                    params.accumulate_grad(handlesb.router_w2, &rgrads.d_w_2);
                    params.accumulate_grad(handlesb.router_b2, &rgrads.d_b_2);

                    let d_attended =
                        pool_routing_vector_backward(&rgrads.d_r, self.cfg.n_queries);
                    let agrads = cross_attention_backward(&branch.attn_cache, &d_attended);
                    params.accumulate_grad(handlesb.queries, &agrads.d_queries);
                    params.accumulate_grad(handlesb.w_k, &agrads.d_w_k);
                    params.accumulate_grad(handlesb.w_v, &agrads.d_w_v);
                    params.accumulate_grad(handlesb.w_o, &agrads.d_w_o);
                }
            }
        }

        // Decouple term: a pure function of the expert parameters.
        if !self.cfg.static_prompt && loss_cfg.beta != 0.0 {
            for ids in self.distinct_pool_handles() {
                let pool: Vec<Tensor<T>> =
                    ids.iter().map(|&id| params.value(id).clone()).collect();
                let (_, dc) = decouple_term(&pool)?;
                for (id, g) in ids.iter().zip(decouple_term_backward(&dc, real::<T>(loss_cfg.beta)))
                {
                    params.accumulate_grad(*id, &g);
                }
            }
        }
        Ok(())
    }

    /// Records every routing decision of one forward pass.
    pub fn record_decisions(&self, fwd: &ImageForward<T>, stats: &mut ActivationStats) {
        for lf in fwd.layers.values() {
            if let Some(b) = &lf.prompts.branch_normal {
                stats.record(&b.decision);
            }
            if let Some(b) = &lf.prompts.branch_abnormal {
                stats.record(&b.decision);
            }
        }
    }
}

impl Model<f64> {
    /// Verifies the analytic gradient of the full batch loss against
    /// central finite differences over every trainable parameter.
    pub fn check_gradients(
        &mut self,
        batch: &[TrainItem<'_, f64>],
        loss_cfg: &LossConfig,
        scoring: &ScoringConfig,
        epsilon: f64,
    ) -> Result<GradCheckReport> {
        let mut params = core::mem::take(&mut self.params);
        params.zero_grads();
        let result = (|| {
            let (_, cache) = self.training_loss_with(&params, batch, loss_cfg, scoring)?;
            self.training_backward(&mut params, &cache, loss_cfg, scoring)?;
            finite_diff_gradcheck(&mut params, epsilon, |p| {
                self.training_loss_with(p, batch, loss_cfg, scoring)
                    .map(|(b, _)| b.total)
            })
        })();
        self.params = params;
        result
    }
}

/// One training example: cached frozen features plus supervision.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a, T> {
    pub features: &'a VisionFeatures<T>,
    /// `None` for normal images.
    pub mask: Option<&'a Tensor<T>>,
    pub label: bool,
}

/// Saved forward state of one batch, consumed by the backward pass.
#[derive(Debug)]
pub struct BatchCache<T> {
    pub images: Vec<ImageForward<T>>,
    masks: Vec<Tensor<T>>,
    labels: Vec<bool>,
}

/// Forward state of one image.
#[derive(Debug)]
pub struct ImageForward<T> {
    pub layers: BTreeMap<usize, LayerForward<T>>,
    /// Aggregated training-path map (no smoothing).
    pub map: Tensor<T>,
    pub score: T,
    pub p_global: T,
    max_pos: (usize, usize),
    global_cache: GlobalTermCache<T>,
}

/// Forward state of one tapped layer.
#[derive(Debug)]
pub struct LayerForward<T> {
    pub prompts: LayerPrompts<T>,
    /// Projected, row-normalized feature rows (global row last).
    rows: Tensor<T>,
    proj_cache: ProjectionCache<T>,
    map_cache: LayerMapCache<T>,
    pub upsampled: Tensor<T>,
}

/// Prompt state of one layer: embeddings, text caches, and (in mixture
/// mode) the per-state branch forward state.
#[derive(Debug)]
pub struct LayerPrompts<T> {
    pub text_normal: Tensor<T>,
    pub text_abnormal: Tensor<T>,
    cache_normal: TextCache<T>,
    cache_abnormal: TextCache<T>,
    pub branch_normal: Option<BranchForward<T>>,
    pub branch_abnormal: Option<BranchForward<T>>,
}

impl<T> LayerPrompts<T> {
    fn branch(&self, state: State) -> &BranchForward<T> {
        match state {
            State::Normal => self.branch_normal.as_ref().expect("mixture mode"),
            State::Abnormal => self.branch_abnormal.as_ref().expect("mixture mode"),
        }
    }
}

/// Forward state of one (layer, state) mixture branch.
#[derive(Debug)]
pub struct BranchForward<T> {
    attn_cache: CrossAttentionCache<T>,
    router_cache: RouterCache<T>,
    pub decision: RoutingDecision<T>,
    pool: Vec<Tensor<T>>,
    pub s_agg: Tensor<T>,
}

/// Mean embedding of one expert, for numeric export.
#[derive(Debug, Clone)]
pub struct ExpertMeanRow {
    pub layer: usize,
    pub state: State,
    pub expert: usize,
    pub mean: Vec<f64>,
}
