//! Training losses.
//!
//! The anomaly map is supervised with Dice and focal losses against the
//! pixel mask, the image score with binary cross-entropy against the label,
//! and the expert machinery with two regularizers: a load-balance term that
//! evens out average routing probability mass, and a decoupling term that
//! pushes normalized expert-mean embeddings toward mutual orthogonality.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ops::{matmul, normalize_rows, normalize_rows_backward};
use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

/// Probability clamp used by the pointwise losses.
pub const PROB_CLAMP: f64 = 1e-6;

/// Loss weights and shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the load-balance regularizer.
    pub alpha: f64,
    /// Weight of the expert-decoupling regularizer.
    pub beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.01,
            beta: 0.005,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(CoreError::Config(
                "loss weights alpha/beta must be nonnegative".into(),
            ));
        }
        if self.dice_epsilon <= 0.0 {
            return Err(CoreError::Config("dice epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss report; `total` is the exact sum of the five parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub focal: f64,
    pub balance: f64,
    pub decouple: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(bce: f64, dice: f64, focal: f64, balance: f64, decouple: f64) -> Self {
        LossBreakdown {
            bce,
            dice,
            focal,
            balance,
            decouple,
            total: bce + dice + focal + balance + decouple,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Load-balance term for one layer/branch, without the `alpha` weight:
/// `E · Σ_j (mean_i p_ij)²` over a `B × E` matrix of routing probabilities.
pub fn balance_term<T: Real>(probs: &Tensor<T>) -> Result<T> {
    if probs.rank() != 2 || probs.rows() == 0 {
        return Err(CoreError::Param(
            "balance term needs a non-empty B x E probability matrix".into(),
        ));
    }
    let tol = real::<T>(1e-6);
    for i in 0..probs.rows() {
        let s = probs.row(i).iter().fold(T::zero(), |a, &v| a + v);
        if (s - T::one()).abs() > tol {
            return Err(CoreError::Param(format!(
                "routing probability row {i} does not sum to 1"
            )));
        }
    }
    let (b, e) = (probs.rows(), probs.cols());
    let inv_b = T::one() / real::<T>(b as f64);
    let mut acc = T::zero();
    for j in 0..e {
        let mut mean = T::zero();
        for i in 0..b {
            mean = mean + probs.at(i, j);
        }
        mean = mean * inv_b;
        acc = acc + mean * mean;
    }
    Ok(real::<T>(e as f64) * acc)
}

/// Gradient of [`balance_term`] with respect to the probability matrix.
pub fn balance_term_backward<T: Real>(probs: &Tensor<T>, upstream: T) -> Tensor<T> {
    let (b, e) = (probs.rows(), probs.cols());
    let inv_b = T::one() / real::<T>(b as f64);
    let mut col_means = Vec::with_capacity(e);
    for j in 0..e {
        let mut mean = T::zero();
        for i in 0..b {
            mean = mean + probs.at(i, j);
        }
        col_means.push(mean * inv_b);
    }
    let scale = upstream * real::<T>(2.0 * e as f64) * inv_b;
    let mut d = Tensor::zeros(probs.shape());
    for i in 0..b {
        for j in 0..e {
            d.set(i, j, scale * col_means[j]);
        }
    }
    d
}

/// Cached state for the decouple backward pass.
#[derive(Debug)]
pub struct DecoupleCache<T> {
    unit_means: Tensor<T>,
    norms: Vec<T>,
    gram_minus_identity: Tensor<T>,
    expert_rows: usize,
}

/// Decoupling term for one pool, without the `beta` weight:
/// `‖Ŝ Ŝᵀ − I‖_F²` where rows of `Ŝ` are unit-normalized expert means.
pub fn decouple_term<T: Real>(pool: &[Tensor<T>]) -> Result<(T, DecoupleCache<T>)> {
    if pool.is_empty() {
        return Err(CoreError::Param("decouple term over empty pool".into()));
    }
    let e = pool.len();
    let d = pool[0].cols();
    let expert_rows = pool[0].rows();
    let mut means = Tensor::zeros(&[e, d]);
    for (j, expert) in pool.iter().enumerate() {
        let m = crate::moe::expert_mean(expert);
        means.row_mut(j).copy_from_slice(m.data());
    }
    let (unit_means, norms) = normalize_rows(&means).map_err(|err| match err {
        CoreError::Eval(msg) => CoreError::Eval(format!("expert mean normalization: {msg}")),
        other => other,
    })?;
    let mut gram = matmul(&unit_means, &unit_means.transpose())?;
    for j in 0..e {
        let v = gram.at(j, j) - T::one();
        gram.set(j, j, v);
    }
    let loss = gram.dot(&gram)?;
    Ok((
        loss,
        DecoupleCache {
            unit_means,
            norms,
            gram_minus_identity: gram,
            expert_rows,
        },
    ))
}

/// Gradient of [`decouple_term`]: one tensor per expert in pool order.
pub fn decouple_term_backward<T: Real>(cache: &DecoupleCache<T>, upstream: T) -> Vec<Tensor<T>> {
    // d‖G−I‖² / dŜ = 4 (G−I) Ŝ for symmetric G.
    let d_unit = matmul(&cache.gram_minus_identity, &cache.unit_means)
        .expect("shape")
        .scale(real::<T>(4.0) * upstream);
    let d_means = normalize_rows_backward(&d_unit, &cache.unit_means, &cache.norms);
    let e = d_means.rows();
    let d = d_means.cols();
    let inv_rows = T::one() / real::<T>(cache.expert_rows as f64);
    (0..e)
        .map(|j| {
            let mut g = Tensor::zeros(&[cache.expert_rows, d]);
            for r in 0..cache.expert_rows {
                for c in 0..d {
                    g.set(r, c, d_means.at(j, c) * inv_rows);
                }
            }
            g
        })
        .collect()
}

/// Dice loss `1 − (2 Σ M·m + ε) / (Σ M + Σ m + ε)`.
pub fn dice_loss<T: Real>(map: &Tensor<T>, mask: &Tensor<T>, epsilon: f64) -> Result<T> {
    if map.shape() != mask.shape() {
        return Err(CoreError::Input(format!(
            "dice shapes differ: {:?} vs {:?}",
            map.shape(),
            mask.shape()
        )));
    }
    let eps = real::<T>(epsilon);
    let inter = map.dot(mask)?;
    let numer = real::<T>(2.0) * inter + eps;
    let denom = map.sum() + mask.sum() + eps;
    Ok(T::one() - numer / denom)
}

/// Gradient of [`dice_loss`] with respect to the map.
pub fn dice_loss_backward<T: Real>(
    map: &Tensor<T>,
    mask: &Tensor<T>,
    epsilon: f64,
    upstream: T,
) -> Tensor<T> {
    let eps = real::<T>(epsilon);
    let inter = map.dot(mask).expect("shape");
    let numer = real::<T>(2.0) * inter + eps;
    let denom = map.sum() + mask.sum() + eps;
    let inv_d2 = T::one() / (denom * denom);
    // d(1 - N/D)/dM_i = -(2 m_i D - N) / D^2
    mask.map(|m| -(real::<T>(2.0) * m * denom - numer) * inv_d2 * upstream)
}

fn clamp_prob<T: Real>(p: T) -> T {
    let lo = real::<T>(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Binary focal loss, mean over pixels: `−α_t (1−p_t)^γ log(p_t)` with
/// `p_t = M` on mask pixels and `1−M` elsewhere.
pub fn focal_loss<T: Real>(
    map: &Tensor<T>,
    mask: &Tensor<T>,
    gamma: f64,
    alpha_f: f64,
) -> Result<T> {
    if map.shape() != mask.shape() {
        return Err(CoreError::Input(format!(
            "focal shapes differ: {:?} vs {:?}",
            map.shape(),
            mask.shape()
        )));
    }
    let g = real::<T>(gamma);
    let a = real::<T>(alpha_f);
    let n = real::<T>(map.len() as f64);
    let mut acc = T::zero();
    for (&p, &m) in map.data().iter().zip(mask.data().iter()) {
        let positive = m > real::<T>(0.5);
        let p = clamp_prob(p);
        let (p_t, a_t) = if positive { (p, a) } else { (T::one() - p, T::one() - a) };
        acc = acc - a_t * (T::one() - p_t).powf(g) * p_t.ln();
    }
    Ok(acc / n)
}

/// Gradient of [`focal_loss`] with respect to the map. Pixels pinned by the
/// probability clamp receive zero gradient.
pub fn focal_loss_backward<T: Real>(
    map: &Tensor<T>,
    mask: &Tensor<T>,
    gamma: f64,
    alpha_f: f64,
    upstream: T,
) -> Tensor<T> {
    let g = real::<T>(gamma);
    let a = real::<T>(alpha_f);
    let inv_n = T::one() / real::<T>(map.len() as f64);
    let lo = real::<T>(PROB_CLAMP);
    let hi = T::one() - lo;
    let mut d = Tensor::zeros(map.shape());
    for i in 0..map.len() {
        let p_raw = map.data()[i];
        if p_raw < lo || p_raw > hi {
            continue;
        }
        let positive = mask.data()[i] > real::<T>(0.5);
        let (p_t, a_t, sign) = if positive {
            (p_raw, a, T::one())
        } else {
            (T::one() - p_raw, T::one() - a, -T::one())
        };
        let one_m = T::one() - p_t;
        // d/dp_t of  −a_t (1−p_t)^γ ln p_t
        let d_pt = a_t * g * one_m.powf(g - T::one()) * p_t.ln() - a_t * one_m.powf(g) / p_t;
        d.data_mut()[i] = d_pt * sign * inv_n * upstream;
    }
    d
}

/// Binary cross-entropy on the image score, with probability clamping.
pub fn bce_score_loss<T: Real>(score: T, label: bool) -> T {
    let s = clamp_prob(score);
    if label {
        -s.ln()
    } else {
        -(T::one() - s).ln()
    }
}

/// Gradient of [`bce_score_loss`] with respect to the score. Zero when the
/// score sits outside the clamp range.
pub fn bce_score_backward<T: Real>(score: T, label: bool, upstream: T) -> T {
    let lo = real::<T>(PROB_CLAMP);
    let hi = T::one() - lo;
    if score < lo || score > hi {
        return T::zero();
    }
    let d = if label {
        -T::one() / score
    } else {
        T::one() / (T::one() - score)
    };
    d * upstream
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_gradcheck;
    use crate::optim::ParamSet;

    fn wavy(shape: &[usize], salt: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| 0.35 * ((i as f64 * 0.63 + salt).sin()) + 0.5)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn balance_uniform_and_one_hot_closed_forms() {
        let e = 8;
        let b = 5;
        let alpha = 0.01;
        let uniform = Tensor::filled(&[b, e], 1.0 / e as f64);
        let loss = alpha * balance_term(&uniform).unwrap();
        assert!((loss - alpha).abs() < 1e-12, "uniform routing gives alpha");

        let mut one_hot = Tensor::<f64>::zeros(&[b, e]);
        for i in 0..b {
            one_hot.set(i, 1, 1.0);
        }
        let loss = alpha * balance_term(&one_hot).unwrap();
        assert!(
            (loss - alpha * e as f64).abs() < 1e-12,
            "collapsed routing gives alpha * E"
        );
    }

    #[test]
    fn balance_matches_independent_formula() {
        // Brute-force re-evaluation straight from the definition.
        let b = 4;
        let e = 6;
        let mut probs = Tensor::<f64>::zeros(&[b, e]);
        for i in 0..b {
            let mut row: Vec<f64> = (0..e).map(|j| ((i * e + j) as f64 * 0.77).sin().exp()).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            probs.row_mut(i).copy_from_slice(&row);
        }
        let mut expected = 0.0;
        for j in 0..e {
            let mut mean = 0.0;
            for i in 0..b {
                mean += probs.at(i, j);
            }
            mean /= b as f64;
            expected += mean * mean;
        }
        expected *= e as f64;
        assert!((balance_term(&probs).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn balance_rejects_empty_batch_and_bad_rows() {
        assert!(matches!(
            balance_term(&Tensor::<f64>::zeros(&[0, 4])).unwrap_err(),
            CoreError::Param(_)
        ));
        let bad = Tensor::from_vec(&[1, 2], vec![0.9, 0.3]).unwrap();
        assert!(balance_term(&bad).is_err());
    }

    #[test]
    fn balance_gradient_matches_finite_differences() {
        // Parameterize logits and softmax them inside the probe so the
        // perturbed matrices remain valid probability rows.
        let (b, e) = (3, 5);
        let mut params = ParamSet::new();
        let id = params.register("logits", wavy(&[b, e], 3.0));

        let probs = crate::ops::softmax(params.value(id), 1, 1.0).unwrap();
        let d_probs = balance_term_backward(&probs, 1.0);
        let d_logits = crate::ops::softmax_backward(&d_probs, &probs, 1, 1.0);
        params.accumulate_grad(id, &d_logits);

        let report = finite_diff_gradcheck(&mut params, 1e-5, |p| {
            let probs = crate::ops::softmax(p.value(p.id_by_name("logits").unwrap()), 1, 1.0)?;
            balance_term(&probs)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn decouple_orthonormal_and_identical_closed_forms() {
        // Orthogonal expert means: loss is zero.
        let e = 4;
        let d = 4;
        let pool: Vec<Tensor<f64>> = (0..e)
            .map(|j| {
                let mut t = Tensor::zeros(&[2, d]);
                t.set(0, j, 3.0);
                t.set(1, j, 1.0);
                t
            })
            .collect();
        let (loss, _) = decouple_term(&pool).unwrap();
        assert!(loss.abs() < 1e-9);

        // Identical experts: gram is all-ones, loss = E(E-1).
        let one = wavy(&[3, d], 1.0);
        let pool: Vec<Tensor<f64>> = (0..e).map(|_| one.clone()).collect();
        let (loss, _) = decouple_term(&pool).unwrap();
        assert!((loss - (e * (e - 1)) as f64).abs() < 1e-9);
    }

    #[test]
    fn decouple_matches_brute_force_gram() {
        let pool: Vec<Tensor<f64>> = (0..5).map(|j| wavy(&[3, 6], j as f64)).collect();
        let (loss, _) = decouple_term(&pool).unwrap();

        // Independent route: explicit loops over the definition.
        let mut means: Vec<Vec<f64>> = Vec::new();
        for p in &pool {
            let mut m = vec![0.0; p.cols()];
            for r in 0..p.rows() {
                for c in 0..p.cols() {
                    m[c] += p.at(r, c) / p.rows() as f64;
                }
            }
            let norm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter_mut().for_each(|v| *v /= norm);
            means.push(m);
        }
        let mut expected = 0.0;
        for a in 0..means.len() {
            for b in 0..means.len() {
                let dot: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                expected += (dot - target) * (dot - target);
            }
        }
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn decouple_reports_zero_norm_expert() {
        let pool = vec![Tensor::<f64>::zeros(&[2, 3]), wavy(&[2, 3], 1.0)];
        let err = decouple_term(&pool).unwrap_err();
        assert!(matches!(err, CoreError::Eval(_)));
        let msg = alloc::format!("{err}");
        assert!(msg.contains("row 0"), "error should name the expert: {msg}");
    }

    #[test]
    fn decouple_gradient_matches_finite_differences() {
        let mut params = ParamSet::new();
        let ids: Vec<_> = (0..3)
            .map(|j| params.register(alloc::format!("expert{j}"), wavy(&[2, 4], j as f64 + 0.2)))
            .collect();

        let pool: Vec<Tensor<f64>> = ids.iter().map(|&id| params.value(id).clone()).collect();
        let (_, cache) = decouple_term(&pool).unwrap();
        for (id, g) in ids.iter().zip(decouple_term_backward(&cache, 1.0)) {
            params.accumulate_grad(*id, &g);
        }

        let report = finite_diff_gradcheck(&mut params, 1e-5, |p| {
            let pool: Vec<Tensor<f64>> = (0..3)
                .map(|j| p.value(p.id_by_name(&alloc::format!("expert{j}")).unwrap()).clone())
                .collect();
            decouple_term(&pool).map(|(l, _)| l)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn dice_perfect_and_inverted() {
        let side = 64;
        let mut mask = Tensor::<f64>::zeros(&[side, side]);
        for i in 0..side {
            for j in 0..side / 2 {
                mask.set(i, j, 1.0);
            }
        }
        let loss = dice_loss(&mask, &mask, 1.0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-3, "perfect match near zero: {loss}");

        let inverted = mask.map(|v| 1.0 - v);
        let loss = dice_loss(&inverted, &mask, 1.0).unwrap();
        let hw = (side * side) as f64;
        assert!((loss - (1.0 - 1.0 / (hw + 1.0))).abs() < 1e-9);
    }

    #[test]
    fn dice_matches_direct_formula_and_grad() {
        let map = wavy(&[4, 4], 0.4).map(|v| v.clamp(0.05, 0.95));
        let mask = wavy(&[4, 4], 2.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let eps = 1.0;
        let inter: f64 = map
            .data()
            .iter()
            .zip(mask.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        let expected = 1.0 - (2.0 * inter + eps) / (map.sum() + mask.sum() + eps);
        assert!((dice_loss(&map, &mask, eps).unwrap() - expected).abs() < 1e-12);

        let mut params = ParamSet::new();
        let id = params.register("map", map.clone());
        params.accumulate_grad(id, &dice_loss_backward(&map, &mask, eps, 1.0));
        let report = finite_diff_gradcheck(&mut params, 1e-5, |p| {
            dice_loss(p.value(p.id_by_name("map").unwrap()), &mask, eps)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn focal_reduces_to_half_bce_at_gamma_zero() {
        let map = wavy(&[3, 3], 0.9).map(|v| v.clamp(0.1, 0.9));
        let mask = wavy(&[3, 3], 5.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let focal = focal_loss(&map, &mask, 0.0, 0.5).unwrap();
        let bce_mean: f64 = map
            .data()
            .iter()
            .zip(mask.data().iter())
            .map(|(&p, &m)| if m > 0.5 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / map.len() as f64;
        assert!((focal - 0.5 * bce_mean).abs() < 1e-12);
    }

    #[test]
    fn focal_confident_prediction_is_tiny() {
        let mask = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let map = mask.map(|m| if m > 0.5 { 0.9999 } else { 0.0001 });
        let loss = focal_loss(&map, &mask, 2.0, 0.25).unwrap();
        assert!(loss < 1e-4, "confident prediction: {loss}");
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let map = wavy(&[4, 4], 1.7).map(|v| v.clamp(0.1, 0.9));
        let mask = wavy(&[4, 4], 3.1).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let mut params = ParamSet::new();
        let id = params.register("map", map.clone());
        params.accumulate_grad(id, &focal_loss_backward(&map, &mask, 2.0, 0.25, 1.0));
        let report = finite_diff_gradcheck(&mut params, 1e-5, |p| {
            focal_loss(p.value(p.id_by_name("map").unwrap()), &mask, 2.0, 0.25)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn bce_reference_points() {
        assert!((bce_score_loss(0.5, true) - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_score_loss(0.5, false) - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_score_loss(1.0 - 1e-9, true) < 1e-5);
        assert!((bce_score_loss(0.9f64, false) - 2.302585).abs() < 1e-5);
    }

    #[test]
    fn permutation_invariance_of_pixel_losses() {
        let map = wavy(&[3, 4], 0.2).map(|v| v.clamp(0.05, 0.95));
        let mask = wavy(&[3, 4], 6.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        // A fixed permutation applied to both map and mask.
        let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let permute = |t: &Tensor<f64>| {
            let data: Vec<f64> = perm.iter().map(|&i| t.data()[i]).collect();
            Tensor::from_vec(&[3, 4], data).unwrap()
        };
        let d1 = dice_loss(&map, &mask, 1.0).unwrap();
        let d2 = dice_loss(&permute(&map), &permute(&mask), 1.0).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        let f1 = focal_loss(&map, &mask, 2.0, 0.25).unwrap();
        let f2 = focal_loss(&permute(&map), &permute(&mask), 2.0, 0.25).unwrap();
        assert!((f1 - f2).abs() < 1e-12);
    }

    #[test]
    fn breakdown_sums_exactly() {
        let b = LossBreakdown::assemble(0.1, 0.2, 0.3, 0.05, 0.01);
        assert!((b.total - (b.bce + b.dice + b.focal + b.balance + b.decouple)).abs() < 1e-9);
        let zero = LossBreakdown::assemble(0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(zero.total, 0.0);
    }
}
