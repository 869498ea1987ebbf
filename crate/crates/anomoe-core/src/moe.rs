//! Visually-guided sparse mixture of prompt experts.
//!
//! Per tapped encoder layer and per state (normal / abnormal), learnable
//! queries cross-attend into the layer's patch features; the pooled
//! attention output drives a small router MLP whose top-k gates blend a
//! pool of expert prompt segments into one aggregated state segment. The
//! aggregated segments, a shared category token, and shared context tokens
//! are concatenated into the two prompt sequences fed to the text encoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

// f64 inherent math methods live in std; route through the trait so the
// no_std build resolves them via libm.
#[allow(unused_imports)]
use num_traits::Float;

use crate::ops::{
    matmul, matmul_backward, mean_rows, mean_rows_backward, relu, relu_backward, softmax,
    softmax_backward, topk_select, topk_select_backward,
};
use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

/// Which prompt branch a component belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum State {
    Normal,
    Abnormal,
}

impl State {
    pub const BOTH: [State; 2] = [State::Normal, State::Abnormal];

    pub fn tag(self) -> &'static str {
        match self {
            State::Normal => "normal",
            State::Abnormal => "abnormal",
        }
    }
}

/// One routing outcome: full logits and probabilities plus the sparse
/// selection actually used for aggregation.
#[derive(Debug, Clone)]
pub struct RoutingDecision<T> {
    pub logits: Tensor<T>,
    /// Softmax over *all* logits; feeds the load-balance regularizer.
    pub probs: Tensor<T>,
    pub selected: Vec<usize>,
    /// Softmax over the selected logits only, aligned with `selected`.
    pub gates: Tensor<T>,
    pub layer: usize,
    pub state: State,
}

/// Multi-head cross-attention of learnable queries over feature rows.
///
/// `queries` is `N_q × D`; `w_k`, `w_v` are `D_x × D`; `w_o` is `D × D`.
/// Returns the attended queries (`N_q × D`) after the output projection.
pub fn cross_attention<T: Real>(
    features: &Tensor<T>,
    queries: &Tensor<T>,
    w_k: &Tensor<T>,
    w_v: &Tensor<T>,
    w_o: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, CrossAttentionCache<T>)> {
    let d = queries.cols();
    if heads == 0 || d % heads != 0 {
        return Err(CoreError::Config(format!(
            "token dim {d} not divisible by {heads} heads"
        )));
    }
    let d_head = d / heads;
    let keys = matmul(features, w_k)?;
    let values = matmul(features, w_v)?;
    let mut concat = Tensor::zeros(&[queries.rows(), d]);
    let mut head_attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let q_h = queries.slice_cols(lo, hi);
        let k_h = keys.slice_cols(lo, hi);
        let v_h = values.slice_cols(lo, hi);
        let scores = matmul(&q_h, &k_h.transpose())?;
        let attn = softmax(&scores, 1, real::<T>((d_head as f64).sqrt()))?;
        let mixed = matmul(&attn, &v_h)?;
        concat.paste_cols(lo, &mixed);
        head_attn.push(attn);
    }
    let output = matmul(&concat, w_o)?;
    Ok((
        output,
        CrossAttentionCache {
            features: features.clone(),
            queries: queries.clone(),
            keys,
            values,
            head_attn,
            concat,
            w_o: w_o.clone(),
            heads,
        },
    ))
}

#[derive(Debug)]
pub struct CrossAttentionCache<T> {
    pub features: Tensor<T>,
    queries: Tensor<T>,
    keys: Tensor<T>,
    values: Tensor<T>,
    /// Per-head attention weights, each `N_q × (HW+1)`.
    pub head_attn: Vec<Tensor<T>>,
    concat: Tensor<T>,
    w_o: Tensor<T>,
    heads: usize,
}

/// Gradients of [`cross_attention`] for all trainable inputs. Features are
/// frozen upstream, so no feature gradient is produced.
#[derive(Debug)]
pub struct CrossAttentionGrads<T> {
    pub d_queries: Tensor<T>,
    pub d_w_k: Tensor<T>,
    pub d_w_v: Tensor<T>,
    pub d_w_o: Tensor<T>,
}

pub fn cross_attention_backward<T: Real>(
    cache: &CrossAttentionCache<T>,
    d_output: &Tensor<T>,
) -> CrossAttentionGrads<T> {
    let d = cache.queries.cols();
    let d_head = d / cache.heads;
    let (d_concat, d_w_o) = matmul_backward(d_output, &cache.concat, &cache.w_o);

    let mut d_queries = Tensor::zeros(cache.queries.shape());
    let mut d_keys = Tensor::zeros(cache.keys.shape());
    let mut d_values = Tensor::zeros(cache.values.shape());
    for h in 0..cache.heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let q_h = cache.queries.slice_cols(lo, hi);
        let k_h = cache.keys.slice_cols(lo, hi);
        let v_h = cache.values.slice_cols(lo, hi);
        let attn = &cache.head_attn[h];
        let d_mixed = d_concat.slice_cols(lo, hi);
        let (d_attn, d_v_h) = matmul_backward(&d_mixed, attn, &v_h);
        let d_scores = softmax_backward(&d_attn, attn, 1, real::<T>((d_head as f64).sqrt()));
        let (d_q_h, d_kt) = matmul_backward(&d_scores, &q_h, &k_h.transpose());
        d_queries.paste_cols(lo, &d_q_h);
        d_keys.paste_cols(lo, &d_kt.transpose());
        d_values.paste_cols(lo, &d_v_h);
    }
    let features_t = cache.features.transpose();
    let d_w_k = matmul(&features_t, &d_keys).expect("shape");
    let d_w_v = matmul(&features_t, &d_values).expect("shape");
    CrossAttentionGrads {
        d_queries,
        d_w_k,
        d_w_v,
        d_w_o,
    }
}

/// Routing context: the mean over the attended query rows.
pub fn pool_routing_vector<T: Real>(attended: &Tensor<T>) -> Tensor<T> {
    mean_rows(attended)
}

/// Spreads the routing-vector gradient back over the attended rows.
pub fn pool_routing_vector_backward<T: Real>(d_r: &Tensor<T>, n_q: usize) -> Tensor<T> {
    mean_rows_backward(d_r, n_q)
}

/// Two-layer router MLP producing expert logits from the routing vector.
pub fn router_logits<T: Real>(
    r: &Tensor<T>,
    w_1: &Tensor<T>,
    b_1: &Tensor<T>,
    w_2: &Tensor<T>,
    b_2: &Tensor<T>,
) -> Result<(Tensor<T>, RouterCache<T>)> {
    let d = r.len();
    let row = r.clone().reshape(&[1, d])?;
    let mut h_pre = matmul(&row, w_1)?;
    for (j, v) in h_pre.data_mut().iter_mut().enumerate() {
        *v = *v + b_1.data()[j];
    }
    let h = relu(&h_pre);
    let mut z = matmul(&h, w_2)?;
    for (j, v) in z.data_mut().iter_mut().enumerate() {
        *v = *v + b_2.data()[j];
    }
    let e = z.len();
    let z = z.reshape(&[e])?;
    if !z.is_finite() {
        return Err(CoreError::Eval("non-finite routing logits".into()));
    }
    Ok((
        z,
        RouterCache {
            input_row: row,
            h_pre,
            w_1: w_1.clone(),
            w_2: w_2.clone(),
        },
    ))
}

#[derive(Debug)]
pub struct RouterCache<T> {
    input_row: Tensor<T>,
    h_pre: Tensor<T>,
    w_1: Tensor<T>,
    w_2: Tensor<T>,
}

#[derive(Debug)]
pub struct RouterGrads<T> {
    pub d_r: Tensor<T>,
    pub d_w_1: Tensor<T>,
    pub d_b_1: Tensor<T>,
    pub d_w_2: Tensor<T>,
    pub d_b_2: Tensor<T>,
}

pub fn router_backward<T: Real>(cache: &RouterCache<T>, d_z: &Tensor<T>) -> RouterGrads<T> {
    let e = d_z.len();
    let d_z_row = d_z.clone().reshape(&[1, e]).expect("shape");
    let h = relu(&cache.h_pre);
    let (d_h, d_w_2) = matmul_backward(&d_z_row, &h, &cache.w_2);
    let d_h_pre = relu_backward(&d_h, &cache.h_pre);
    let (d_input, d_w_1) = matmul_backward(&d_h_pre, &cache.input_row, &cache.w_1);
    let d = d_input.len();
    RouterGrads {
        d_r: d_input.reshape(&[d]).expect("shape"),
        d_w_1,
        d_b_1: d_h_pre.clone().reshape(&[cache.h_pre.len()]).expect("shape"),
        d_w_2,
        d_b_2: d_z.clone(),
    }
}

/// Full routing decision for one instance at one layer/state: logits from
/// the router, dense probabilities for the balance loss, and the sparse
/// top-k gates.
pub fn route<T: Real>(
    logits: Tensor<T>,
    k: usize,
    layer: usize,
    state: State,
) -> Result<RoutingDecision<T>> {
    let probs = softmax(&logits, 0, T::one())?;
    let (selected, gates) = topk_select(&logits, k)?;
    Ok(RoutingDecision {
        logits,
        probs,
        selected,
        gates,
        layer,
        state,
    })
}

/// Convex blend of the selected experts: `S_agg = Σ_i gate_i · expert_i`.
pub fn aggregate_experts<T: Real>(
    decision: &RoutingDecision<T>,
    pool: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let first = pool
        .first()
        .ok_or_else(|| CoreError::Internal("empty expert pool".into()))?;
    let mut agg = Tensor::zeros(first.shape());
    for (slot, &idx) in decision.selected.iter().enumerate() {
        let expert = pool.get(idx).ok_or_else(|| {
            CoreError::Internal(format!("expert index {idx} outside pool of {}", pool.len()))
        })?;
        agg.add_scaled(expert, decision.gates.data()[slot])?;
    }
    Ok(agg)
}

/// Gradients of [`aggregate_experts`]: per-slot gate gradients and the
/// gradient reaching each *selected* expert (others receive none).
pub fn aggregate_experts_backward<T: Real>(
    decision: &RoutingDecision<T>,
    pool: &[Tensor<T>],
    d_agg: &Tensor<T>,
) -> (Tensor<T>, Vec<(usize, Tensor<T>)>) {
    let k = decision.selected.len();
    let mut d_gates = Tensor::zeros(&[k]);
    let mut d_experts = Vec::with_capacity(k);
    for (slot, &idx) in decision.selected.iter().enumerate() {
        d_gates.data_mut()[slot] = d_agg.dot(&pool[idx]).expect("shape");
        d_experts.push((idx, d_agg.scale(decision.gates.data()[slot])));
    }
    (d_gates, d_experts)
}

/// Propagates gate gradients back to the dense logits (selected entries
/// only), matching the sparse forward.
pub fn gates_backward_to_logits<T: Real>(
    decision: &RoutingDecision<T>,
    d_gates: &Tensor<T>,
) -> Tensor<T> {
    topk_select_backward(
        d_gates,
        &decision.gates,
        &decision.selected,
        decision.logits.len(),
    )
}

/// Token counts of the two prompt layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub m_normal: usize,
    pub m_abnormal: usize,
    pub m_ctx: usize,
}

impl PromptLayout {
    pub fn normal_len(&self) -> usize {
        self.m_normal + 1 + self.m_ctx
    }

    pub fn abnormal_len(&self) -> usize {
        self.m_normal + self.m_abnormal + 1 + self.m_ctx
    }
}

/// `[S_agg^n][cls][Q_ctx]`
pub fn assemble_normal_prompt<T: Real>(
    s_n: &Tensor<T>,
    cls: &Tensor<T>,
    q_ctx: &Tensor<T>,
) -> Result<Tensor<T>> {
    Tensor::concat_rows(&[s_n, cls, q_ctx])
}

/// `[S_agg^n][S_agg^a][cls][Q_ctx]`
pub fn assemble_abnormal_prompt<T: Real>(
    s_n: &Tensor<T>,
    s_a: &Tensor<T>,
    cls: &Tensor<T>,
    q_ctx: &Tensor<T>,
) -> Result<Tensor<T>> {
    Tensor::concat_rows(&[s_n, s_a, cls, q_ctx])
}

/// Splits a normal-prompt token gradient back into its constituents.
pub fn split_normal_grad<T: Real>(
    d_tokens: &Tensor<T>,
    layout: &PromptLayout,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let m = layout.m_normal;
    (
        d_tokens.slice_rows(0, m),
        d_tokens.slice_rows(m, m + 1),
        d_tokens.slice_rows(m + 1, m + 1 + layout.m_ctx),
    )
}

/// Splits an abnormal-prompt token gradient back into its constituents.
pub fn split_abnormal_grad<T: Real>(
    d_tokens: &Tensor<T>,
    layout: &PromptLayout,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (mn, ma) = (layout.m_normal, layout.m_abnormal);
    (
        d_tokens.slice_rows(0, mn),
        d_tokens.slice_rows(mn, mn + ma),
        d_tokens.slice_rows(mn + ma, mn + ma + 1),
        d_tokens.slice_rows(mn + ma + 1, mn + ma + 1 + layout.m_ctx),
    )
}

/// Mean embedding of one expert segment (mean over its token rows).
pub fn expert_mean<T: Real>(expert: &Tensor<T>) -> Tensor<T> {
    mean_rows(expert)
}

/// Selection counts and gate masses per expert, keyed by layer and state.
#[derive(Debug, Clone, Default)]
pub struct ActivationStats {
    cells: BTreeMap<(usize, State), StatsCell>,
}

#[derive(Debug, Clone)]
pub struct StatsCell {
    pub counts: Vec<u64>,
    pub gate_sums: Vec<f64>,
    pub instances: u64,
}

/// One exported histogram row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRow {
    pub layer: usize,
    pub state: State,
    pub expert: usize,
    pub count: u64,
    /// Fraction of instances that selected this expert.
    pub frequency: f64,
    /// Mean gate weight over the selections of this expert (0 if never).
    pub mean_gate: f64,
    pub instances: u64,
}

impl ActivationStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<T: Real>(&mut self, decision: &RoutingDecision<T>) {
        let e = decision.logits.len();
        let cell = self
            .cells
            .entry((decision.layer, decision.state))
            .or_insert_with(|| StatsCell {
                counts: alloc::vec![0; e],
                gate_sums: alloc::vec![0.0; e],
                instances: 0,
            });
        cell.instances += 1;
        for (slot, &idx) in decision.selected.iter().enumerate() {
            cell.counts[idx] += 1;
            cell.gate_sums[idx] += decision.gates.data()[slot].to_f64_c();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, layer: usize, state: State) -> Option<&StatsCell> {
        self.cells.get(&(layer, state))
    }

    /// Flattened rows in (layer, state, expert) order.
    pub fn rows(&self) -> Vec<ActivationRow> {
        let mut out = Vec::new();
        for ((layer, state), cell) in &self.cells {
            for expert in 0..cell.counts.len() {
                let count = cell.counts[expert];
                out.push(ActivationRow {
                    layer: *layer,
                    state: *state,
                    expert,
                    count,
                    frequency: if cell.instances == 0 {
                        0.0
                    } else {
                        count as f64 / cell.instances as f64
                    },
                    mean_gate: if count == 0 {
                        0.0
                    } else {
                        cell.gate_sums[expert] / count as f64
                    },
                    instances: cell.instances,
                });
            }
        }
        out
    }
}
