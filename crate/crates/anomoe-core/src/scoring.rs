//! Pixel anomaly maps and image-level scores.
//!
//! Per tapped layer, projected patch features are compared against the
//! normal/abnormal text embeddings; a two-class softmax per spatial location
//! yields an abnormality probability which is bilinearly upsampled to image
//! resolution. Layer maps are averaged so the final map stays in `[0, 1]`.
//! The image score mixes the map's peak with a global image-text term.
//! Gaussian smoothing is applied at inference only.

use alloc::format;
use alloc::vec::Vec;

// f64 inherent math methods live in std; route through the trait so the
// no_std build resolves them via libm.
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::ops::{matmul, matmul_backward, softmax, softmax_backward};
use crate::tensor::{real, Real, Tensor};
use crate::{CoreError, Result};

/// Temperatures, smoothing, and map normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Pixel-level softmax temperature.
    pub tau: f64,
    /// Image-level softmax temperature.
    pub tau_prime: f64,
    /// Sigma of the inference-time Gaussian smoother (0 disables it).
    pub gaussian_sigma: f64,
    /// Divide the layer sum by |layers| so the map stays a probability.
    pub normalize_by_layers: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            tau: 0.07,
            tau_prime: 0.01,
            gaussian_sigma: 4.0,
            normalize_by_layers: true,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || self.tau_prime <= 0.0 {
            return Err(CoreError::Config("temperatures must be positive".into()));
        }
        if self.gaussian_sigma < 0.0 {
            return Err(CoreError::Config("gaussian sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of scoring one image.
#[derive(Debug, Clone)]
pub struct AnomalyOutput<T> {
    /// `h × w` abnormality probabilities.
    pub map: Tensor<T>,
    /// Image-level score in `[0, 1]`.
    pub score: T,
    /// Per-layer upsampled probability maps, for inspection.
    pub per_layer_raw: Vec<(usize, Tensor<T>)>,
}

/// Bilinear upsampling without corner alignment; output values are convex
/// combinations of inputs, hence bounded by the input range.
pub fn upsample_bilinear<T: Real>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if map.rank() != 2 {
        return Err(CoreError::Shape("upsample expects a rank-2 map".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::Param("upsample target must be non-zero".into()));
    }
    let (in_h, in_w) = (map.rows(), map.cols());
    let mut out = Tensor::zeros(&[out_h, out_w]);
    for oy in 0..out_h {
        let (y0, y1, wy) = sample_axis(oy, out_h, in_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = sample_axis(ox, out_w, in_w);
            let a = map.at(y0, x0).to_f64_c();
            let b = map.at(y0, x1).to_f64_c();
            let c = map.at(y1, x0).to_f64_c();
            let d = map.at(y1, x1).to_f64_c();
            let top = a * (1.0 - wx) + b * wx;
            let bot = c * (1.0 - wx) + d * wx;
            out.set(oy, ox, real::<T>(top * (1.0 - wy) + bot * wy));
        }
    }
    Ok(out)
}

/// Source rows/columns and interpolation weight for one output index.
fn sample_axis(out_idx: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let clamped = src.max(0.0).min((in_len - 1) as f64);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, clamped - i0 as f64)
}

/// Adjoint of [`upsample_bilinear`]: scatters the output gradient back to
/// the source grid with the same interpolation weights.
pub fn upsample_bilinear_backward<T: Real>(
    d_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Tensor<T> {
    let (out_h, out_w) = (d_out.rows(), d_out.cols());
    let mut d_in = Tensor::<T>::zeros(&[in_h, in_w]);
    for oy in 0..out_h {
        let (y0, y1, wy) = sample_axis(oy, out_h, in_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = sample_axis(ox, out_w, in_w);
            let g = d_out.at(oy, ox).to_f64_c();
            let mut add = |r: usize, c: usize, w: f64| {
                let cur = d_in.at(r, c).to_f64_c();
                d_in.set(r, c, real::<T>(cur + g * w));
            };
            add(y0, x0, (1.0 - wy) * (1.0 - wx));
            add(y0, x1, (1.0 - wy) * wx);
            add(y1, x0, wy * (1.0 - wx));
            add(y1, x1, wy * wx);
        }
    }
    d_in
}

/// Separable Gaussian blur with reflected borders; `sigma == 0` returns the
/// input bit-identically. Kernel radius is `ceil(3 sigma)`.
pub fn gaussian_smooth<T: Real>(map: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if sigma < 0.0 {
        return Err(CoreError::Param("gaussian sigma must be >= 0".into()));
    }
    if map.rank() != 2 {
        return Err(CoreError::Shape("gaussian smooth expects rank-2".into()));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }

    let (h, w) = (map.rows(), map.cols());
    let reflect = |idx: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = idx;
        // mirror with edge duplication: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
        while i < 0 || i >= len {
            if i < 0 {
                i = -i - 1;
            } else {
                i = 2 * len - 1 - i;
            }
        }
        i as usize
    };

    // Horizontal pass.
    let mut tmp = Tensor::<T>::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let src = reflect(c as isize + ki as isize - radius, w);
                acc += map.at(r, src).to_f64_c() * kw;
            }
            tmp.set(r, c, real::<T>(acc));
        }
    }
    // Vertical pass.
    let mut out = Tensor::<T>::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let src = reflect(r as isize + ki as isize - radius, h);
                acc += tmp.at(src, c).to_f64_c() * kw;
            }
            out.set(r, c, real::<T>(acc));
        }
    }
    Ok(out)
}

/// Cache of one per-layer similarity map computation.
#[derive(Debug)]
pub struct LayerMapCache<T> {
    /// Normalized projected rows, patches plus the trailing global row.
    rows: Tensor<T>,
    /// `d_joint × 2` stack of the normal/abnormal text embeddings.
    text_pair: Tensor<T>,
    /// `HW × 2` class probabilities at temperature tau.
    pub probs: Tensor<T>,
    grid: (usize, usize),
    out_hw: (usize, usize),
    tau: f64,
}

/// Computes one layer's abnormality probability map at image resolution.
///
/// `rows` holds the layer's projected, row-normalized features with the
/// global feature as the final row; the global row is excluded from the
/// spatial map. `text_normal` / `text_abnormal` are unit embeddings.
pub fn layer_map<T: Real>(
    rows: &Tensor<T>,
    text_normal: &Tensor<T>,
    text_abnormal: &Tensor<T>,
    tau: f64,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> Result<(Tensor<T>, LayerMapCache<T>)> {
    let hw = grid.0 * grid.1;
    if rows.rows() != hw + 1 {
        return Err(CoreError::Internal(format!(
            "expected {} feature rows for grid {:?}, got {}",
            hw + 1,
            grid,
            rows.rows()
        )));
    }
    let d_joint = rows.cols();
    let mut text_pair = Tensor::zeros(&[d_joint, 2]);
    for i in 0..d_joint {
        text_pair.set(i, 0, text_normal.data()[i]);
        text_pair.set(i, 1, text_abnormal.data()[i]);
    }
    let patches = rows.slice_rows(0, hw);
    let logits = matmul(&patches, &text_pair)?;
    let probs = softmax(&logits, 1, real::<T>(tau))?;
    let mut coarse = Tensor::zeros(&[grid.0, grid.1]);
    for p in 0..hw {
        coarse.data_mut()[p] = probs.at(p, 1);
    }
    let up = upsample_bilinear(&coarse, out_hw.0, out_hw.1)?;
    Ok((
        up,
        LayerMapCache {
            rows: rows.clone(),
            text_pair,
            probs,
            grid,
            out_hw,
            tau,
        },
    ))
}

/// Gradients of [`layer_map`]: feature-row gradient (global row zero) and
/// the two text-embedding gradients.
pub fn layer_map_backward<T: Real>(
    cache: &LayerMapCache<T>,
    d_up: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let hw = cache.grid.0 * cache.grid.1;
    debug_assert_eq!(d_up.shape(), [cache.out_hw.0, cache.out_hw.1]);
    let d_coarse = upsample_bilinear_backward(d_up, cache.grid.0, cache.grid.1);
    let mut d_probs = Tensor::zeros(&[hw, 2]);
    for p in 0..hw {
        d_probs.set(p, 1, d_coarse.data()[p]);
    }
    let d_logits = softmax_backward(&d_probs, &cache.probs, 1, real::<T>(cache.tau));
    let patches = cache.rows.slice_rows(0, hw);
    let (d_patches, d_text_pair) = matmul_backward(&d_logits, &patches, &cache.text_pair);

    let mut d_rows = Tensor::zeros(cache.rows.shape());
    for p in 0..hw {
        d_rows.row_mut(p).copy_from_slice(d_patches.row(p));
    }
    let d_joint = cache.rows.cols();
    let mut d_tn = Tensor::zeros(&[d_joint]);
    let mut d_ta = Tensor::zeros(&[d_joint]);
    for i in 0..d_joint {
        d_tn.data_mut()[i] = d_text_pair.at(i, 0);
        d_ta.data_mut()[i] = d_text_pair.at(i, 1);
    }
    (d_rows, d_tn, d_ta)
}

/// Cache of the global (image-level) class probability.
#[derive(Debug)]
pub struct GlobalTermCache<T> {
    global: Tensor<T>,
    text_pair: Tensor<T>,
    probs: Tensor<T>,
    tau_prime: f64,
}

/// Two-class softmax of the global feature against the final layer's text
/// embeddings; returns the abnormal-class probability.
pub fn global_abnormal_prob<T: Real>(
    global_row: &Tensor<T>,
    text_normal: &Tensor<T>,
    text_abnormal: &Tensor<T>,
    tau_prime: f64,
) -> Result<(T, GlobalTermCache<T>)> {
    let d_joint = global_row.len();
    let mut text_pair = Tensor::zeros(&[d_joint, 2]);
    for i in 0..d_joint {
        text_pair.set(i, 0, text_normal.data()[i]);
        text_pair.set(i, 1, text_abnormal.data()[i]);
    }
    let logits = matmul(&global_row.clone().reshape(&[1, d_joint])?, &text_pair)?;
    let probs = softmax(&logits, 1, real::<T>(tau_prime))?;
    Ok((
        probs.at(0, 1),
        GlobalTermCache {
            global: global_row.clone(),
            text_pair,
            probs,
            tau_prime,
        },
    ))
}

/// Gradients of [`global_abnormal_prob`] for the global feature row and the
/// two text embeddings.
pub fn global_abnormal_prob_backward<T: Real>(
    cache: &GlobalTermCache<T>,
    upstream: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut d_probs = Tensor::zeros(&[1, 2]);
    d_probs.set(0, 1, upstream);
    let d_logits = softmax_backward(&d_probs, &cache.probs, 1, real::<T>(cache.tau_prime));
    let d_joint = cache.global.len();
    let global_row = cache.global.clone().reshape(&[1, d_joint]).expect("shape");
    let (d_global, d_text_pair) = matmul_backward(&d_logits, &global_row, &cache.text_pair);
    let mut d_tn = Tensor::zeros(&[d_joint]);
    let mut d_ta = Tensor::zeros(&[d_joint]);
    for i in 0..d_joint {
        d_tn.data_mut()[i] = d_text_pair.at(i, 0);
        d_ta.data_mut()[i] = d_text_pair.at(i, 1);
    }
    (d_global.reshape(&[d_joint]).expect("shape"), d_tn, d_ta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wavy(shape: &[usize], salt: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| 0.45 * ((i as f64 * 0.59 + salt).sin()) + 0.5)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn upsample_constant_and_bounds() {
        let one = Tensor::from_vec(&[1, 1], vec![0.37]).unwrap();
        let up = upsample_bilinear(&one, 5, 7).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.37f64).abs() < 1e-15));

        let ramp = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&ramp, 2, 4).unwrap();
        for r in 0..2 {
            for c in 1..4 {
                assert!(up.at(r, c) >= up.at(r, c - 1), "monotone ramp");
            }
        }
        assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn upsample_2x2_matches_hand_interpolation() {
        let m = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&m, 4, 4).unwrap();
        // Independent re-derivation of align-corners-false sampling.
        let mut expected = Tensor::<f64>::zeros(&[4, 4]);
        for oy in 0..4 {
            for ox in 0..4 {
                let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = m.at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + m.at(y0, x1) * (1.0 - fy) * fx
                    + m.at(y1, x0) * fy * (1.0 - fx)
                    + m.at(y1, x1) * fy * fx;
                expected.set(oy, ox, v);
            }
        }
        assert!(up.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn upsample_rejects_zero_target() {
        let m = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(
            upsample_bilinear(&m, 0, 4).unwrap_err(),
            CoreError::Param(_)
        ));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <Up(x), y> must equal <x, Up^T(y)> for a linear operator.
        let x = wavy(&[3, 4], 0.1);
        let y = wavy(&[7, 9], 0.7);
        let up = upsample_bilinear(&x, 7, 9).unwrap();
        let down = upsample_bilinear_backward(&y, 3, 4);
        let lhs = up.dot(&y).unwrap();
        let rhs = x.dot(&down).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn gaussian_zero_sigma_identity_and_constant_preserved() {
        let m = wavy(&[6, 5], 0.2);
        let out = gaussian_smooth(&m, 0.0).unwrap();
        assert_eq!(out, m);

        let c = Tensor::filled(&[8, 8], 0.42);
        let out = gaussian_smooth(&c, 2.5).unwrap();
        assert!(out.max_abs_diff(&c) < 1e-9, "kernel is normalized");
    }

    #[test]
    fn gaussian_impulse_reproduces_kernel() {
        let sigma = 1.25;
        let n = 31;
        let mut m = Tensor::<f64>::zeros(&[n, n]);
        m.set(n / 2, n / 2, 1.0);
        let out = gaussian_smooth(&m, sigma).unwrap();

        // Analytic separable kernel, computed independently.
        let radius = (3.0 * sigma).ceil() as i64;
        let mut k = Vec::new();
        let mut sum = 0.0;
        for i in -radius..=radius {
            let w = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
            k.push(w);
            sum += w;
        }
        k.iter_mut().for_each(|w| *w /= sum);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let expect = k[(dy + radius) as usize] * k[(dx + radius) as usize];
                let got = out.at(
                    (n as i64 / 2 + dy) as usize,
                    (n as i64 / 2 + dx) as usize,
                );
                assert!((got - expect).abs() < 1e-6, "at ({dy},{dx})");
            }
        }
    }

    #[test]
    fn gaussian_preserves_mean_of_interior_map() {
        let n = 32;
        let mut m = Tensor::<f64>::zeros(&[n, n]);
        // Interior-supported bump, far from borders relative to the kernel.
        for r in 12..20 {
            for c in 12..20 {
                m.set(r, c, 0.8);
            }
        }
        let out = gaussian_smooth(&m, 1.5).unwrap();
        let mean_in = m.sum() / (n * n) as f64;
        let mean_out = out.sum() / (n * n) as f64;
        assert!((mean_in - mean_out).abs() < 1e-6);
    }

    #[test]
    fn layer_map_symmetry_and_monotonicity() {
        let (gh, gw, dj) = (2, 2, 6);
        let hw = gh * gw;
        // Equal similarities: every patch row orthogonal contributions equal.
        let rows = Tensor::filled(&[hw + 1, dj], 1.0 / (dj as f64).sqrt());
        let t = Tensor::filled(&[dj], 1.0 / (dj as f64).sqrt());
        let (map, cache) = layer_map(&rows, &t, &t, 0.07, (gh, gw), (8, 8)).unwrap();
        assert!(map.data().iter().all(|&v| (v - 0.5f64).abs() < 1e-9));
        // Per-location class probabilities sum to one.
        for p in 0..hw {
            let s = cache.probs.at(p, 0) + cache.probs.at(p, 1);
            assert!((s - 1.0).abs() < 1e-6);
        }

        // Make one patch clearly abnormal: map peaks inside its footprint.
        let mut rows2 = rows.clone();
        let t_n = Tensor::from_vec(&[dj], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t_a = Tensor::from_vec(&[dj], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        for p in 0..hw {
            let row = rows2.row_mut(p);
            row.fill(0.0);
            if p == 3 {
                row[1] = 1.0; // aligned with abnormal embedding
            } else {
                row[0] = 1.0;
            }
        }
        let (map2, _) = layer_map(&rows2, &t_n, &t_a, 0.07, (gh, gw), (8, 8)).unwrap();
        let mut max_pos = (0, 0);
        let mut max_v = -1.0;
        for r in 0..8 {
            for c in 0..8 {
                if map2.at(r, c) > max_v {
                    max_v = map2.at(r, c);
                    max_pos = (r, c);
                }
            }
        }
        // Patch 3 is the bottom-right cell of the 2x2 grid.
        assert!(max_pos.0 >= 4 && max_pos.1 >= 4, "peak at {max_pos:?}");
    }

    #[test]
    fn layer_map_micro_case_matches_hand_rolled_oracle() {
        // 2 patches (grid 1x2), one layer, tiny embedding dim.
        let dj = 3;
        let rows = Tensor::from_vec(
            &[3, dj],
            vec![
                0.6, 0.8, 0.0, // patch 0
                0.0, 0.6, 0.8, // patch 1
                1.0, 0.0, 0.0, // global (ignored)
            ],
        )
        .unwrap();
        let t_n = Tensor::from_vec(&[dj], vec![1.0, 0.0, 0.0]).unwrap();
        let t_a = Tensor::from_vec(&[dj], vec![0.0, 1.0, 0.0]).unwrap();
        let tau = 0.5;
        let (map, _) = layer_map(&rows, &t_n, &t_a, tau, (1, 2), (2, 4)).unwrap();

        // Oracle: softmax then bilinear, all scalar arithmetic.
        let prob = |sn: f64, sa: f64| {
            let (en, ea) = ((sn / tau).exp(), (sa / tau).exp());
            ea / (en + ea)
        };
        let p0 = prob(0.6, 0.8);
        let p1 = prob(0.0, 0.6);
        let coarse = [p0, p1];
        let mut expected = Tensor::<f64>::zeros(&[2, 4]);
        for oy in 0..2 {
            for ox in 0..4 {
                let sx = ((ox as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(1);
                let fx = sx - x0 as f64;
                expected.set(oy, ox, coarse[x0] * (1.0 - fx) + coarse[x1] * fx);
            }
        }
        assert!(map.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn layer_map_gradients_match_finite_differences() {
        use crate::gradcheck::finite_diff_gradcheck;
        use crate::optim::ParamSet;

        let (gh, gw, dj) = (2, 2, 4);
        let hw = gh * gw;
        let mut params = ParamSet::new();
        let rows_id = params.register("rows", wavy(&[hw + 1, dj], 0.3));
        let tn_id = params.register("t_n", wavy(&[dj], 1.0));
        let ta_id = params.register("t_a", wavy(&[dj], 2.0));
        let probe = wavy(&[6, 6], 4.0);

        let (map, cache) = layer_map(
            params.value(rows_id),
            params.value(tn_id),
            params.value(ta_id),
            0.2,
            (gh, gw),
            (6, 6),
        )
        .unwrap();
        let _ = map;
        let (d_rows, d_tn, d_ta) = layer_map_backward(&cache, &probe);
        params.accumulate_grad(rows_id, &d_rows);
        params.accumulate_grad(tn_id, &d_tn);
        params.accumulate_grad(ta_id, &d_ta);

        let report = finite_diff_gradcheck(&mut params, 1e-5, |p| {
            let (map, _) = layer_map(
                p.value(p.id_by_name("rows").unwrap()),
                p.value(p.id_by_name("t_n").unwrap()),
                p.value(p.id_by_name("t_a").unwrap()),
                0.2,
                (gh, gw),
                (6, 6),
            )?;
            map.dot(&probe)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
        // The global row must receive no spatial-map gradient.
        let g = params.grad(rows_id);
        assert!(g.row(hw).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_term_and_gradient() {
        use crate::gradcheck::finite_diff_gradcheck;
        use crate::optim::ParamSet;

        let dj = 5;
        let mut params = ParamSet::new();
        let g_id = params.register("g", wavy(&[dj], 0.4));
        let tn_id = params.register("t_n", wavy(&[dj], 1.4));
        let ta_id = params.register("t_a", wavy(&[dj], 2.4));

        let (p, cache) = global_abnormal_prob(
            params.value(g_id),
            params.value(tn_id),
            params.value(ta_id),
            0.3,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&p));
        let (d_g, d_tn, d_ta) = global_abnormal_prob_backward(&cache, 1.0);
        params.accumulate_grad(g_id, &d_g);
        params.accumulate_grad(tn_id, &d_tn);
        params.accumulate_grad(ta_id, &d_ta);

        let report = finite_diff_gradcheck(&mut params, 1e-5, |pp| {
            let (p, _) = global_abnormal_prob(
                pp.value(pp.id_by_name("g").unwrap()),
                pp.value(pp.id_by_name("t_n").unwrap()),
                pp.value(pp.id_by_name("t_a").unwrap()),
                0.3,
            )?;
            Ok(p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn scoring_config_validation() {
        let mut cfg = ScoringConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScoringConfig::default();
        cfg.gaussian_sigma = -1.0;
        assert!(cfg.validate().is_err());
    }
}
