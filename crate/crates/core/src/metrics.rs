//! Normalization, binarization and quality metrics for expert anomaly maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Decision;
use crate::map_io::{AnomalyMap, BinaryMask};

/// Per-map min-max scaling to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize_map(map: &AnomalyMap) -> AnomalyMap {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let scores = if range > 0.0 {
        map.scores()
            .iter()
            .map(|&s| ((s - lo) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; map.scores().len()]
    };
    AnomalyMap::from_parts_unchecked(
        map.width(),
        map.height(),
        scores,
        true,
        map.source_expert().to_string(),
    )
}

/// Binarizes a normalized map.
///
/// A positive threshold marks pixels scoring strictly above it. A negative
/// threshold `-q` marks the `floor(q * n)` lowest-scoring pixels of the map,
/// ranking ties by row-major position so the count is exact.
pub fn binarize(map: &AnomalyMap, threshold: f64) -> Result<BinaryMask> {
    if !map.is_normalized() {
        return Err(Error::Argument("binarize expects a normalized map".into()));
    }
    if threshold == 0.0 || !threshold.is_finite() || threshold.abs() > 1.0 {
        return Err(Error::Argument(format!(
            "threshold must lie in [-1, 1] excluding 0, got {threshold}"
        )));
    }
    let scores = map.scores();
    let bits = if threshold > 0.0 {
        scores.iter().map(|&s| s > threshold).collect()
    } else {
        let k = lowest_quantile_count(scores.len(), -threshold);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut bits = vec![false; scores.len()];
        for &i in &order[..k] {
            bits[i] = true;
        }
        bits
    };
    BinaryMask::new(map.width(), map.height(), bits)
}

/// Rank cutoff for the lowest-`fraction` quantile of `n` pixels.
pub(crate) fn lowest_quantile_count(n: usize, fraction: f64) -> usize {
    // Tolerance absorbs products like 0.3 * 10 = 3.0000000000000004 and 0.29 * 100 = 28.999999999999996.
    ((fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Pixel-level confusion counts and rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRates {
    pub tpr: f64,
    pub fpr: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PixelRates {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let rate = |num: usize, den: usize| if den > 0 { num as f64 / den as f64 } else { 0.0 };
        Self {
            tpr: rate(tp, tp + fn_),
            fpr: rate(fp, fp + tn),
            tp,
            fp,
            tn,
            fn_,
        }
    }

    /// Sums the counts of two confusion tables and recomputes rates.
    pub fn pooled(self, other: PixelRates) -> Self {
        Self::from_counts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.tn + other.tn,
            self.fn_ + other.fn_,
        )
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!(
            "{what} dimension mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

pub fn pixel_rates(pred: &BinaryMask, gt: &BinaryMask) -> Result<PixelRates> {
    check_dims(
        (pred.width(), pred.height()),
        (gt.width(), gt.height()),
        "prediction/ground-truth",
    )?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(PixelRates::from_counts(tp, fp, tn, fn_))
}

/// Pixel AUROC pooled over every (map, mask) pair.
///
/// Uses the Mann-Whitney rank statistic with midranks, which equals the
/// fraction of positive/negative pixel pairs ordered correctly, ties
/// counting one half.
pub fn pixel_auroc(pairs: &[(&AnomalyMap, &BinaryMask)]) -> Result<f64> {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    for (map, mask) in pairs {
        check_dims(
            (map.width(), map.height()),
            (mask.width(), mask.height()),
            "map/mask",
        )?;
        pooled.extend(map.scores().iter().copied().zip(mask.bits().iter().copied()));
    }
    auroc_from_scores(&mut pooled)
}

pub(crate) fn auroc_from_scores(pooled: &mut [(f64, bool)]) -> Result<f64> {
    let n_pos = pooled.iter().filter(|(_, p)| *p).count();
    let n_neg = pooled.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs positive and negative pixels, got {n_pos} positive and {n_neg} negative"
        )));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let positives = pooled[i..j].iter().filter(|(_, p)| *p).count();
        rank_sum += midrank * positives as f64;
        i = j;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// Image-level call from a raw map under evaluation-set min-max normalization.
pub fn image_decision(
    map: &AnomalyMap,
    global_min: f64,
    global_max: f64,
    threshold: f64,
) -> Result<Decision> {
    if !(global_min < global_max) {
        return Err(Error::Argument(format!(
            "global range [{global_min}, {global_max}] is empty"
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!(
            "image threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (_, peak) = map.min_max();
    let scaled = (peak - global_min) / (global_max - global_min);
    Ok(if scaled > threshold {
        Decision::Defect
    } else {
        Decision::Normal
    })
}

/// Evaluation-set `(min, max)` over every raw score.
pub fn global_range<'a>(maps: impl IntoIterator<Item = &'a AnomalyMap>) -> Option<(f64, f64)> {
    maps.into_iter()
        .map(AnomalyMap::min_max)
        .reduce(|(a, b), (c, d)| (a.min(c), b.max(d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    /// `< 0.01` small, `[0.01, 0.1]` medium, `> 0.1` large.
    pub fn from_ratio(ratio: f64) -> Self {
        if ratio < 0.01 {
            SizeBucket::Small
        } else if ratio <= 0.1 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub value: SizeBucket,
    pub area_ratio: f64,
}

/// Defect size bucket of a ground-truth mask by area fraction.
pub fn defect_size_class(gt: &BinaryMask) -> Result<SizeClass> {
    let positives = gt.count_true();
    let total = gt.len();
    if positives == 0 {
        return Err(Error::Argument(
            "defect size is undefined for a mask without positives".into(),
        ));
    }
    // Integer comparisons keep the closed boundaries exact.
    let value = if positives * 100 < total {
        SizeBucket::Small
    } else if positives * 10 <= total {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    };
    Ok(SizeClass {
        value,
        area_ratio: positives as f64 / total as f64,
    })
}

/// One row of a pooled threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub rates: PixelRates,
}

/// Binarizes every normalized map at each threshold and pools the confusion
/// counts against the ground truth.
pub fn threshold_sweep(
    pairs: &[(&AnomalyMap, &BinaryMask)],
    thresholds: &[f64],
) -> Result<Vec<ThresholdRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let mut pooled = PixelRates::from_counts(0, 0, 0, 0);
            for (map, gt) in pairs {
                let pred = binarize(map, t)?;
                pooled = pooled.pooled(pixel_rates(&pred, gt)?);
            }
            Ok(ThresholdRow {
                threshold: t,
                rates: pooled,
            })
        })
        .collect()
}

/// Image accuracy at one threshold, using global normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub threshold: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

pub fn image_accuracy_sweep(
    samples: &[(&AnomalyMap, Decision)],
    thresholds: &[f64],
) -> Result<Vec<AccuracyRow>> {
    let (lo, hi) = global_range(samples.iter().map(|(m, _)| *m))
        .ok_or_else(|| Error::UndefinedMetric("no samples for image accuracy".into()))?;
    thresholds
        .iter()
        .map(|&t| {
            let mut correct = 0;
            for (map, truth) in samples {
                if image_decision(map, lo, hi, t)? == *truth {
                    correct += 1;
                }
            }
            Ok(AccuracyRow {
                threshold: t,
                accuracy: correct as f64 / samples.len() as f64,
                correct,
                total: samples.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(scores: Vec<f64>) -> AnomalyMap {
        let n = scores.len();
        AnomalyMap::new(n, 1, scores, true, "t").unwrap()
    }

    fn mask(bits: &[bool]) -> BinaryMask {
        BinaryMask::new(bits.len(), 1, bits.to_vec()).unwrap()
    }

    /// Fraction of (positive, negative) pairs ordered correctly; ties count half.
    fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn normalize_examples() {
        let m = normalize_map(&AnomalyMap::raw(3, 1, vec![2.0, 4.0, 6.0]).unwrap());
        assert_eq!(m.scores(), &[0.0, 0.5, 1.0]);
        assert!(m.is_normalized());
        let c = normalize_map(&AnomalyMap::raw(3, 1, vec![5.0; 3]).unwrap());
        assert_eq!(c.scores(), &[0.0; 3]);
        let id = normalize_map(&norm(vec![0.0, 1.0]));
        assert_eq!(id.scores(), &[0.0, 1.0]);
    }

    #[test]
    fn binarize_positive_threshold() {
        let b = binarize(&norm(vec![0.95, 0.5, 0.91]), 0.9).unwrap();
        assert_eq!(b.bits(), &[true, false, true]);
        // strict inequality
        let b = binarize(&norm(vec![0.9]), 0.9).unwrap();
        assert_eq!(b.bits(), &[false]);
    }

    #[test]
    fn binarize_negative_threshold_matches_rank_oracle() {
        // Oracle: sort the pixel indices by (score, index) and take the first |t|*n.
        let scores = vec![0.1, 0.5, 0.9, 1.0];
        let mut idx: Vec<usize> = (0..4).collect();
        idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        let expected: Vec<bool> = (0..4).map(|i| idx[..1].contains(&i)).collect();
        assert_eq!(expected, vec![true, false, false, false]);
        assert_eq!(binarize(&norm(scores), -0.25).unwrap().bits(), &expected[..]);
    }

    #[test]
    fn binarize_negative_ties_cut_by_position() {
        let b = binarize(&norm(vec![0.2, 0.2, 0.2, 0.2]), -0.5).unwrap();
        assert_eq!(b.bits(), &[true, true, false, false]);
    }

    #[test]
    fn binarize_rejects_bad_thresholds() {
        let m = norm(vec![0.5]);
        assert!(matches!(binarize(&m, 0.0), Err(Error::Argument(_))));
        assert!(matches!(binarize(&m, 1.5), Err(Error::Argument(_))));
        assert!(matches!(binarize(&m, -1.01), Err(Error::Argument(_))));
        let raw = AnomalyMap::raw(1, 1, vec![0.5]).unwrap();
        assert!(matches!(binarize(&raw, 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn quantile_count_is_robust_to_float_products() {
        assert_eq!(lowest_quantile_count(10, 0.3), 3);
        assert_eq!(lowest_quantile_count(100, 0.29), 29);
        assert_eq!(lowest_quantile_count(10, 0.1), 1);
        assert_eq!(lowest_quantile_count(7, 1.0), 7);
    }

    #[test]
    fn pixel_rates_examples() {
        let gt = mask(&[true, true, false, false]);
        let r = pixel_rates(&gt, &gt).unwrap();
        assert_eq!((r.tpr, r.fpr), (1.0, 0.0));
        let r = pixel_rates(&mask(&[true; 4]), &gt).unwrap();
        assert_eq!((r.tpr, r.fpr), (1.0, 1.0));
        let r = pixel_rates(&mask(&[true, false, true, false]), &gt).unwrap();
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1, 1, 1, 1));
        assert_eq!((r.tpr, r.fpr), (0.5, 0.5));
        assert!(pixel_rates(&mask(&[true]), &gt).is_err());
        // empty denominators are defined as 0
        let r = pixel_rates(&mask(&[false, false]), &mask(&[false, false])).unwrap();
        assert_eq!((r.tpr, r.fpr), (0.0, 0.0));
    }

    #[test]
    fn auroc_examples() {
        let gt = mask(&[true, false, true, false]);
        let m = norm(vec![0.9, 0.8, 0.3, 0.1]);
        let oracle = pairwise_auroc(m.scores(), gt.bits());
        assert_eq!(oracle, 0.75);
        assert!((pixel_auroc(&[(&m, &gt)]).unwrap() - oracle).abs() < 1e-12);

        let sep = norm(vec![0.9, 0.1, 0.8, 0.2]);
        assert_eq!(pixel_auroc(&[(&sep, &gt)]).unwrap(), 1.0);
        let flat = norm(vec![0.4; 4]);
        assert_eq!(pixel_auroc(&[(&flat, &gt)]).unwrap(), 0.5);
        let all_pos = mask(&[true; 4]);
        assert!(matches!(
            pixel_auroc(&[(&flat, &all_pos)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn image_decision_examples() {
        let hi = AnomalyMap::raw(2, 1, vec![0.0, 9.0]).unwrap();
        let lo = AnomalyMap::raw(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(image_decision(&hi, 0.0, 10.0, 0.5).unwrap(), Decision::Defect);
        assert_eq!(image_decision(&lo, 0.0, 10.0, 0.5).unwrap(), Decision::Normal);
        assert!(image_decision(&lo, 1.0, 1.0, 0.5).is_err());
        assert!(image_decision(&lo, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn accuracy_sweep_is_step_function() {
        // Peaks at 2, 4, 6, 8, 10 within global range [0, 10].
        let maps: Vec<AnomalyMap> = [2.0, 4.0, 6.0, 8.0, 10.0]
            .iter()
            .map(|&p| AnomalyMap::raw(2, 1, vec![0.0, p]).unwrap())
            .collect();
        let truth = [
            Decision::Normal,
            Decision::Normal,
            Decision::Defect,
            Decision::Defect,
            Decision::Defect,
        ];
        let samples: Vec<(&AnomalyMap, Decision)> = maps.iter().zip(truth).collect();
        let ts: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
        let rows = image_accuracy_sweep(&samples, &ts).unwrap();
        // Enumerated by hand: a sample is called defect iff peak/10 > t.
        let expected: Vec<usize> = ts
            .iter()
            .map(|&t| {
                [2.0, 4.0, 6.0, 8.0, 10.0]
                    .iter()
                    .zip(truth)
                    .filter(|(&p, d)| (p / 10.0 > t) == (*d == Decision::Defect))
                    .count()
            })
            .collect();
        let got: Vec<usize> = rows.iter().map(|r| r.correct).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![3, 4, 4, 5, 5, 4, 4, 3, 3]);
    }

    #[test]
    fn size_class_examples() {
        let mut m = BinaryMask::empty(10, 10);
        m.set(3, 3, true);
        let c = defect_size_class(&m).unwrap();
        assert_eq!((c.value, c.area_ratio), (SizeBucket::Medium, 0.01));
        let mut m = BinaryMask::empty(20, 10);
        m.set(0, 0, true);
        assert_eq!(defect_size_class(&m).unwrap().value, SizeBucket::Small);
        let m = BinaryMask::new(2, 1, vec![true, false]).unwrap();
        assert_eq!(defect_size_class(&m).unwrap().value, SizeBucket::Large);
        assert!(defect_size_class(&BinaryMask::empty(3, 3)).is_err());
        assert_eq!(SizeBucket::from_ratio(0.1), SizeBucket::Medium);
    }

    proptest! {
        #[test]
        fn auroc_equals_pairwise(v in prop::collection::vec((0u8..20, any::<bool>()), 2..120)) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64 / 19.0).collect();
            let labels: Vec<bool> = v.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let m = norm(scores.clone());
            let g = mask(&labels);
            let got = pixel_auroc(&[(&m, &g)]).unwrap();
            prop_assert!((got - pairwise_auroc(&scores, &labels)).abs() < 1e-9);
        }

        #[test]
        fn normalize_is_affine_invariant(
            v in prop::collection::vec(-100.0f64..100.0, 2..50),
            a in 0.01f64..50.0,
            b in -100.0f64..100.0,
        ) {
            let n = v.len();
            let base = normalize_map(&AnomalyMap::raw(n, 1, v.clone()).unwrap());
            let moved = normalize_map(&AnomalyMap::raw(n, 1, v.iter().map(|x| a * x + b).collect()).unwrap());
            for (x, y) in base.scores().iter().zip(moved.scores()) {
                prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            let twice = normalize_map(&base);
            for (x, y) in base.scores().iter().zip(twice.scores()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn binarize_is_antitone(v in prop::collection::vec(0.0f64..=1.0, 1..60), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m = norm(v);
            let a = binarize(&m, lo).unwrap();
            let b = binarize(&m, hi).unwrap();
            for (x, y) in a.bits().iter().zip(b.bits()) {
                prop_assert!(!*y || *x);
            }
        }

        #[test]
        fn image_decision_invariant_under_increasing_transform(
            v in prop::collection::vec(0.0f64..10.0, 1..20),
            t in 0.05f64..0.95,
        ) {
            let (lo, hi) = (-1.0, 11.0);
            let peak = v.iter().cloned().fold(f64::MIN, f64::max);
            let cut = lo + t * (hi - lo);
            prop_assume!((peak - cut).abs() > 1e-6);
            let m = AnomalyMap::raw(v.len(), 1, v.clone()).unwrap();
            let d = image_decision(&m, lo, hi, t).unwrap();
            // Strictly increasing, nonlinear; the raw cut point moves with it.
            let f = |x: f64| (x + 2.0).powi(3) + x;
            let m2 = AnomalyMap::raw(v.len(), 1, v.iter().map(|&x| f(x)).collect()).unwrap();
            let t2 = (f(cut) - f(lo)) / (f(hi) - f(lo));
            let d2 = image_decision(&m2, f(lo), f(hi), t2).unwrap();
            prop_assert_eq!(d, d2);
        }
    }
}
