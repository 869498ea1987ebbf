//! Detection and localization metrics.
//!
//! Image-level: AUROC (Mann-Whitney with half credit for ties) and average
//! precision (step-wise area under the precision-recall curve). Pixel-level:
//! AUROC over the pooled pixel population and PRO, the per-region overlap
//! integrated over false-positive rate up to a cap and normalized by it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Threshold policy for [`pro_score`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Every distinct map value; exact but O(n) thresholds.
    Exhaustive,
    /// The given number of evenly spaced quantiles of the pooled values.
    Quantiles(usize),
}

fn validate_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::Input(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Input("non-finite score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum formulation; tied scores
/// contribute half credit.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    validate_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::UndefinedMetric(
            "auroc needs both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks within tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: `Σ (R_i − R_{i−1}) · P_i` over descending distinct
/// score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    validate_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(CoreError::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Consume a whole tie group before evaluating precision/recall.
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

fn validate_map_mask_pairs(maps: &[Tensor<f64>], masks: &[Tensor<f64>]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(CoreError::Input(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (i, (map, mask)) in maps.iter().zip(masks.iter()).enumerate() {
        if map.shape() != mask.shape() {
            return Err(CoreError::Input(format!(
                "pair {i}: map {:?} vs mask {:?}",
                map.shape(),
                mask.shape()
            )));
        }
    }
    Ok(())
}

/// AUROC over the pooled pixels of all map/mask pairs.
pub fn pixel_auroc(maps: &[Tensor<f64>], masks: &[Tensor<f64>]) -> Result<f64> {
    validate_map_mask_pairs(maps, masks)?;
    let total: usize = maps.iter().map(|m| m.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (map, mask) in maps.iter().zip(masks.iter()) {
        scores.extend_from_slice(map.data());
        labels.extend(mask.data().iter().map(|&v| v > 0.5));
    }
    auroc(&scores, &labels)
}

/// One anomalous connected component: pixel indices of a single region.
#[derive(Debug, Clone)]
pub struct Component {
    pub image: usize,
    pub pixels: Vec<(usize, usize)>,
}

/// Labels the 8-connected components of a binary mask.
pub fn connected_components(mask: &Tensor<f64>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.rows(), mask.cols());
    let mut seen = alloc::vec![false; h * w];
    let mut components = Vec::new();
    for start_r in 0..h {
        for start_c in 0..w {
            if seen[start_r * w + start_c] || mask.at(start_r, start_c) <= 0.5 {
                continue;
            }
            // Breadth-first flood fill over the 8-neighborhood.
            let mut pixels = Vec::new();
            let mut queue = alloc::collections::VecDeque::new();
            queue.push_back((start_r, start_c));
            seen[start_r * w + start_c] = true;
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[nr * w + nc] && mask.at(nr, nc) > 0.5 {
                            seen[nr * w + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            components.push(pixels);
        }
    }
    components
}

/// Area under the per-region-overlap curve up to `fpr_limit`, normalized by
/// `fpr_limit`.
///
/// At each threshold, the overlap of one ground-truth component is the
/// fraction of its pixels scoring at or above the threshold; the curve mean
/// of these overlaps is integrated (trapezoid) against the global false
/// positive rate on normal pixels.
pub fn pro_score(
    maps: &[Tensor<f64>],
    masks: &[Tensor<f64>],
    fpr_limit: f64,
    mode: ThresholdMode,
) -> Result<f64> {
    validate_map_mask_pairs(maps, masks)?;
    if !(0.0 < fpr_limit && fpr_limit <= 1.0) {
        return Err(CoreError::Param(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }

    let mut components: Vec<Component> = Vec::new();
    let mut normal_values: Vec<f64> = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks.iter()).enumerate() {
        for pixels in connected_components(mask) {
            components.push(Component { image: i, pixels });
        }
        for (idx, &m) in mask.data().iter().enumerate() {
            if m <= 0.5 {
                normal_values.push(map.data()[idx]);
            }
        }
    }
    if components.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "pro needs at least one anomalous component".into(),
        ));
    }
    if normal_values.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "pro needs at least one normal pixel".into(),
        ));
    }

    let mut pooled: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    pooled.sort_unstable_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = match mode {
        ThresholdMode::Exhaustive => {
            let mut t = pooled.clone();
            t.dedup();
            t
        }
        ThresholdMode::Quantiles(n) => {
            let n = n.max(2);
            let mut t: Vec<f64> = (0..n)
                .map(|i| {
                    let q = i as f64 / (n - 1) as f64;
                    let pos = q * (pooled.len() - 1) as f64;
                    pooled[pos.round() as usize]
                })
                .collect();
            t.dedup();
            t
        }
    };
    // Descending thresholds give a nondecreasing FPR sweep.
    thresholds.reverse();

    normal_values.sort_unstable_by(f64::total_cmp);
    let n_normal = normal_values.len() as f64;
    // Count of normal pixels >= t via binary search on the sorted values.
    let fpr_at = |t: f64| -> f64 {
        let idx = normal_values.partition_point(|&v| v < t);
        (normal_values.len() - idx) as f64 / n_normal
    };
    // Pre-sort each component's values so overlaps are a binary search too.
    let comp_values: Vec<Vec<f64>> = components
        .iter()
        .map(|c| {
            let mut v: Vec<f64> = c
                .pixels
                .iter()
                .map(|&(r, col)| maps[c.image].at(r, col))
                .collect();
            v.sort_unstable_by(f64::total_cmp);
            v
        })
        .collect();
    let mean_overlap_at = |t: f64| -> f64 {
        let mut acc = 0.0;
        for values in &comp_values {
            let idx = values.partition_point(|&v| v < t);
            acc += (values.len() - idx) as f64 / values.len() as f64;
        }
        acc / comp_values.len() as f64
    };

    // Curve starts at the empty prediction: (fpr 0, overlap 0).
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len() + 1);
    points.push((0.0, 0.0));
    for &t in &thresholds {
        points.push((fpr_at(t), mean_overlap_at(t)));
    }

    let mut area = 0.0;
    for win in points.windows(2) {
        let (f0, o0) = win[0];
        let (f1, o1) = win[1];
        if f1 <= f0 {
            continue;
        }
        if f1 <= fpr_limit {
            area += (f1 - f0) * (o0 + o1) / 2.0;
        } else if f0 < fpr_limit {
            let o_lim = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0);
            area += (fpr_limit - f0) * (o0 + o_lim) / 2.0;
            break;
        } else {
            break;
        }
    }
    Ok(area / fpr_limit)
}

/// Metrics for one slice of the evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub image_auroc: f64,
    pub image_ap: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub n_images: usize,
    pub n_anomalous: usize,
}

/// Full evaluation report: pooled metrics, macro average over classes, and
/// the per-class table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: ClassMetrics,
    pub class_average: ClassMetrics,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

/// One scored test image ready for metric computation.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub score: f64,
    pub label: bool,
    pub map: Tensor<f64>,
    /// `None` for normal images (treated as an all-negative mask).
    pub mask: Option<Tensor<f64>>,
    pub class_id: String,
}

fn metrics_for(samples: &[&EvalSample], fpr_limit: f64, mode: ThresholdMode) -> Result<ClassMetrics> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let maps: Vec<Tensor<f64>> = samples.iter().map(|s| s.map.clone()).collect();
    let masks: Vec<Tensor<f64>> = samples
        .iter()
        .map(|s| match &s.mask {
            Some(m) => m.clone(),
            None => Tensor::zeros(s.map.shape()),
        })
        .collect();
    Ok(ClassMetrics {
        image_auroc: auroc(&scores, &labels)?,
        image_ap: average_precision(&scores, &labels)?,
        pixel_auroc: pixel_auroc(&maps, &masks)?,
        pro: pro_score(&maps, &masks, fpr_limit, mode)?,
        n_images: samples.len(),
        n_anomalous: labels.iter().filter(|&&l| l).count(),
    })
}

/// Computes the full report. Classes appear in sorted-id order.
pub fn evaluate(
    samples: &[EvalSample],
    fpr_limit: f64,
    mode: ThresholdMode,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CoreError::Input("no evaluation samples".into()));
    }
    let all: Vec<&EvalSample> = samples.iter().collect();
    let overall = metrics_for(&all, fpr_limit, mode)?;

    let mut by_class: BTreeMap<String, Vec<&EvalSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.class_id.clone()).or_default().push(s);
    }
    let mut per_class = BTreeMap::new();
    for (class, group) in &by_class {
        per_class.insert(class.clone(), metrics_for(group, fpr_limit, mode)?);
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / n;
    let class_average = ClassMetrics {
        image_auroc: mean(|m| m.image_auroc),
        image_ap: mean(|m| m.image_ap),
        pixel_auroc: mean(|m| m.pixel_auroc),
        pro: mean(|m| m.pro),
        n_images: samples.len(),
        n_anomalous: samples.iter().filter(|s| s.label).count(),
    };
    Ok(EvalReport {
        overall,
        class_average,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_reference_cases() {
        let r = auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r, 1.0);

        // 3 of 4 positive-negative pairs concordant.
        let r = auroc(&[0.9, 0.2, 0.8, 0.4], &[true, false, false, true]).unwrap();
        assert!((r - 0.75).abs() < 1e-12);

        let r = auroc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_rejects_single_class() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]).unwrap_err(),
            CoreError::UndefinedMetric(_)
        ));
    }

    #[test]
    fn auroc_matches_pairwise_brute_force() {
        // Independent oracle: count concordant pairs with half credit.
        let scores = [0.3, 0.3, 0.9, 0.1, 0.5, 0.72, 0.5, 0.11];
        let labels = [true, false, true, false, true, false, false, true];
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        acc += 1.0;
                    } else if scores[i] == scores[j] {
                        acc += 0.5;
                    }
                }
            }
        }
        let expected = acc / pairs;
        assert!((auroc(&scores, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn auroc_complement_identity_and_monotone_invariance() {
        let scores = [0.11, 0.52, 0.3, 0.97, 0.64, 0.08];
        let labels = [false, true, false, true, false, true];
        let a = auroc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auroc(&neg, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);

        let squashed: Vec<f64> = scores.iter().map(|s| (5.0 * s).tanh()).collect();
        let c = auroc(&squashed, &labels).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn average_precision_reference_cases() {
        let r = average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r, 1.0);

        let r = average_precision(&[0.9, 0.2, 0.8, 0.4], &[true, false, false, true]).unwrap();
        assert!((r - 0.8333333).abs() < 1e-4);

        // Single positive ranked last among n: AP = 1/n.
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 * 0.1).collect();
        let mut labels = alloc::vec![false; n];
        labels[n - 1] = true;
        let r = average_precision(&scores, &labels).unwrap();
        assert!((r - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn average_precision_matches_threshold_oracle() {
        // Independent oracle: recompute precision/recall by brute-force
        // counting at every distinct threshold.
        let scores = [0.4, 0.2, 0.4, 0.9, 0.55, 0.3, 0.77, 0.2];
        let labels = [false, false, true, true, false, true, true, false];
        let mut distinct: Vec<f64> = scores.to_vec();
        distinct.sort_unstable_by(f64::total_cmp);
        distinct.dedup();
        distinct.reverse();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut expected = 0.0;
        let mut prev_r = 0.0;
        for &t in &distinct {
            let tp = scores
                .iter()
                .zip(labels.iter())
                .filter(|(&s, &l)| s >= t && l)
                .count() as f64;
            let pp = scores.iter().filter(|&&s| s >= t).count() as f64;
            let r = tp / n_pos;
            let p = tp / pp;
            expected += (r - prev_r) * p;
            prev_r = r;
        }
        let got = average_precision(&scores, &labels).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn pixel_auroc_pools_images() {
        let m1 = Tensor::from_vec(&[2, 2], alloc::vec![0.9, 0.1, 0.2, 0.3]).unwrap();
        let k1 = Tensor::from_vec(&[2, 2], alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m2 = Tensor::from_vec(&[2, 2], alloc::vec![0.8, 0.7, 0.6, 0.05]).unwrap();
        let k2 = Tensor::from_vec(&[2, 2], alloc::vec![1.0, 1.0, 0.0, 0.0]).unwrap();

        let pooled = pixel_auroc(&[m1.clone(), m2.clone()], &[k1.clone(), k2.clone()]).unwrap();
        // Concatenation oracle.
        let mut scores = m1.data().to_vec();
        scores.extend_from_slice(m2.data());
        let labels: Vec<bool> = k1
            .data()
            .iter()
            .chain(k2.data().iter())
            .map(|&v| v > 0.5)
            .collect();
        let expected = auroc(&scores, &labels).unwrap();
        assert_eq!(pooled, expected);

        // Perfect and constant maps.
        assert_eq!(pixel_auroc(&[k1.clone()], &[k1.clone()]).unwrap(), 1.0);
        let flat = Tensor::filled(&[2, 2], 0.5);
        assert!((pixel_auroc(&[flat], &[k1]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn connected_components_eight_connectivity() {
        // Two diagonally-touching plus one distant region.
        let mask = Tensor::from_vec(
            &[4, 4],
            alloc::vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let comps = connected_components(&mask);
        assert_eq!(comps.len(), 2, "diagonal pixels join under 8-connectivity");
        let sizes: Vec<usize> = comps.iter().map(|c| c.len()).collect();
        assert!(sizes.contains(&2) && sizes.contains(&1));
    }

    #[test]
    fn pro_perfect_and_inverted() {
        let mut mask = Tensor::<f64>::zeros(&[8, 8]);
        for r in 1..3 {
            for c in 1..3 {
                mask.set(r, c, 1.0);
            }
        }
        for r in 5..7 {
            for c in 5..8 {
                mask.set(r, c, 1.0);
            }
        }
        let pro = pro_score(
            &[mask.clone()],
            &[mask.clone()],
            0.3,
            ThresholdMode::Exhaustive,
        )
        .unwrap();
        assert!((pro - 1.0).abs() < 1e-9, "map == mask gives 1.0, got {pro}");

        let inverted = mask.map(|v| 1.0 - v);
        let pro = pro_score(&[inverted], &[mask], 0.3, ThresholdMode::Exhaustive).unwrap();
        assert!(pro.abs() < 1e-9, "components only covered past the cap");
    }

    #[test]
    fn pro_matches_exhaustive_sweep_oracle() {
        // 8x8 map with two mask components; oracle re-derives the whole
        // curve with its own component labeling (fixpoint propagation) and
        // explicit per-threshold counting.
        let mut mask = Tensor::<f64>::zeros(&[8, 8]);
        for c in 1..4 {
            mask.set(1, c, 1.0);
        }
        for r in 4..7 {
            for c in 5..7 {
                mask.set(r, c, 1.0);
            }
        }
        let map_data: Vec<f64> = (0..64)
            .map(|i| 0.5 + 0.45 * ((i as f64 * 0.83).sin()))
            .collect();
        let map = Tensor::from_vec(&[8, 8], map_data).unwrap();
        let fpr_limit = 0.3;

        let got = pro_score(
            &[map.clone()],
            &[mask.clone()],
            fpr_limit,
            ThresholdMode::Exhaustive,
        )
        .unwrap();

        // --- oracle ---
        // Fixpoint label propagation (independent of the BFS in the impl).
        let (h, w) = (8usize, 8usize);
        let mut labels: Vec<usize> = (0..h * w)
            .map(|i| if mask.data()[i] > 0.5 { i + 1 } else { 0 })
            .collect();
        loop {
            let mut changed = false;
            for r in 0..h {
                for c in 0..w {
                    if labels[r * w + c] == 0 {
                        continue;
                    }
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                                continue;
                            }
                            let n = labels[nr as usize * w + nc as usize];
                            if n != 0 && n < labels[r * w + c] {
                                labels[r * w + c] = n;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 {
                groups.entry(l).or_default().push(i);
            }
        }
        assert_eq!(groups.len(), 2);

        let mut thresholds: Vec<f64> = map.data().to_vec();
        thresholds.sort_unstable_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.reverse();
        let normal_total = labels.iter().filter(|&&l| l == 0).count() as f64;
        let mut points = alloc::vec![(0.0, 0.0)];
        for &t in &thresholds {
            let fp = (0..h * w)
                .filter(|&i| labels[i] == 0 && map.data()[i] >= t)
                .count() as f64;
            let mut overlap = 0.0;
            for pix in groups.values() {
                let hit = pix.iter().filter(|&&i| map.data()[i] >= t).count() as f64;
                overlap += hit / pix.len() as f64;
            }
            points.push((fp / normal_total, overlap / groups.len() as f64));
        }
        let mut expected = 0.0;
        for win in points.windows(2) {
            let ((f0, o0), (f1, o1)) = (win[0], win[1]);
            if f1 <= f0 {
                continue;
            }
            if f1 <= fpr_limit {
                expected += (f1 - f0) * (o0 + o1) / 2.0;
            } else if f0 < fpr_limit {
                let o = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0);
                expected += (fpr_limit - f0) * (o0 + o) / 2.0;
                break;
            }
        }
        expected /= fpr_limit;

        assert!(
            (got - expected).abs() < 1e-6,
            "pro {got} vs oracle {expected}"
        );
    }

    #[test]
    fn pro_monotone_in_fpr_limit_and_needs_components() {
        let mut mask = Tensor::<f64>::zeros(&[6, 6]);
        mask.set(2, 2, 1.0);
        mask.set(2, 3, 1.0);
        let map = Tensor::from_vec(
            &[6, 6],
            (0..36).map(|i| 0.5 + 0.4 * ((i as f64) * 0.41).cos()).collect(),
        )
        .unwrap();
        let p1 = pro_score(&[map.clone()], &[mask.clone()], 0.1, ThresholdMode::Exhaustive)
            .unwrap();
        let p2 = pro_score(&[map.clone()], &[mask.clone()], 0.3, ThresholdMode::Exhaustive)
            .unwrap();
        let p3 = pro_score(&[map.clone()], &[mask.clone()], 1.0, ThresholdMode::Exhaustive)
            .unwrap();
        assert!(p1 <= p2 + 1e-12 && p2 <= p3 + 1e-12);

        let empty = Tensor::<f64>::zeros(&[6, 6]);
        assert!(matches!(
            pro_score(&[map], &[empty], 0.3, ThresholdMode::Exhaustive).unwrap_err(),
            CoreError::UndefinedMetric(_)
        ));
    }

    #[test]
    fn evaluate_builds_per_class_table() {
        let mk = |score: f64, label: bool, peak: f64, class: &str| {
            let mut map = Tensor::filled(&[4, 4], 0.1);
            let mut mask = None;
            if label {
                map.set(1, 1, peak);
                let mut m = Tensor::zeros(&[4, 4]);
                m.set(1, 1, 1.0);
                mask = Some(m);
            }
            EvalSample {
                score,
                label,
                map,
                mask,
                class_id: class.into(),
            }
        };
        let samples = alloc::vec![
            mk(0.9, true, 0.95, "a"),
            mk(0.2, false, 0.0, "a"),
            mk(0.8, true, 0.9, "a"),
            mk(0.7, true, 0.85, "b"),
            mk(0.1, false, 0.0, "b"),
            mk(0.3, false, 0.0, "b"),
        ];
        let report = evaluate(&samples, 0.3, ThresholdMode::Exhaustive).unwrap();
        assert_eq!(report.per_class.len(), 2);
        assert!(report.overall.image_auroc > 0.99);
        assert!(report.class_average.image_auroc > 0.99);
        assert_eq!(report.overall.n_images, 6);
        assert_eq!(report.overall.n_anomalous, 3);
        for m in report.per_class.values() {
            for v in [m.image_auroc, m.image_ap, m.pixel_auroc, m.pro] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
