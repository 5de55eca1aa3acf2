//! Frame- and pixel-level evaluation: ROC, AUC and equal error rate.

use std::fmt::Write as _;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::scoring::{AnomalyMask, EnergyMap};
use crate::patches::TEST_STRIDE;

/// Fraction of the ground-truth region a detection must cover.
pub const PIXEL_OVERLAP: f64 = 0.40;

/// One operating point: items with score `> threshold` are flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points ordered from `threshold = +∞` (0, 0) down to `-∞` (1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

/// Frame score: the largest cell energy, so a frame is flagged at `θ`
/// exactly when its thresholded mask is non-empty.
pub fn frame_scores(maps: &[EnergyMap]) -> Vec<f64> {
    maps.iter().map(EnergyMap::max).collect()
}

/// Outcome of the pixel-level criterion on one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    TruePositive,
    Miss,
    FalsePositive,
    TrueNegative,
}

/// A positive frame is detected when the mask covers more than 40% of the
/// ground-truth pixels; a negative frame is a false alarm when anything is
/// flagged.
pub fn pixel_level_decision(mask: &AnomalyMask, gt: &[bool], positive: bool) -> Result<Verdict> {
    if gt.len() != mask.pixels.len() {
        return Err(dim_err!("mask has {} pixels, ground truth {}", mask.pixels.len(), gt.len()));
    }
    if !positive {
        return Ok(if mask.is_empty() { Verdict::TrueNegative } else { Verdict::FalsePositive });
    }
    let area = gt.iter().filter(|&&g| g).count();
    if area == 0 {
        return Err(Error::Data(format!("frame {} is labelled anomalous but its mask is empty", mask.frame)));
    }
    let hit = gt.iter().zip(&mask.pixels).filter(|(g, m)| **g && **m).count();
    Ok(if hit as f64 / area as f64 > PIXEL_OVERLAP {
        Verdict::TruePositive
    } else {
        Verdict::Miss
    })
}

/// Sweep statistic for the pixel-level criterion: the frame passes at `θ`
/// iff this value is `> θ`. Negative frames use the max cell; positive
/// frames the smallest energy among the fewest top cells that cover more
/// than 40% of the ground truth (`-∞` if impossible). `gt` is `H×W` with
/// `H = rows·28`, `W = cols·28`.
pub fn pixel_score(map: &EnergyMap, gt: &[bool], positive: bool) -> Result<f64> {
    let (h, w) = (map.rows * TEST_STRIDE, map.cols * TEST_STRIDE);
    if gt.len() != h * w {
        return Err(dim_err!("ground truth has {} pixels, grid covers {h}×{w}", gt.len()));
    }
    if !positive {
        return Ok(map.max());
    }
    let area = gt.iter().filter(|&&g| g).count();
    if area == 0 {
        return Err(Error::Data(format!("frame {} is labelled anomalous but its mask is empty", map.frame)));
    }
    let mut cells: Vec<(f64, usize)> = (0..map.rows * map.cols)
        .map(|i| {
            let (r, c) = (i / map.cols, i % map.cols);
            let covered = (r * TEST_STRIDE..(r + 1) * TEST_STRIDE)
                .map(|y| gt[y * w + c * TEST_STRIDE..y * w + (c + 1) * TEST_STRIDE].iter().filter(|&&g| g).count())
                .sum();
            (map.values[i], covered)
        })
        .collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut covered = 0;
    for (e, n) in cells {
        covered += n;
        if covered as f64 / area as f64 > PIXEL_OVERLAP {
            return Ok(e);
        }
    }
    Ok(f64::NEG_INFINITY)
}

/// ROC over unique score values plus `±∞`, ties grouped, repeated
/// operating points dropped.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(contract_err!("ROC needs both classes ({positives} positive, {negatives} negative)"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // the threshold at `s` flags everything strictly above it
        push_point(&mut points, s, fp as f64 / n, tp as f64 / p);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    push_point(&mut points, f64::NEG_INFINITY, fp as f64 / n, tp as f64 / p);
    Ok(RocCurve {
        points,
        positives,
        negatives,
    })
}

fn push_point(points: &mut Vec<RocPoint>, threshold: f64, fpr: f64, tpr: f64) {
    let last = points.last().expect("seeded");
    if last.fpr != fpr || last.tpr != tpr {
        points.push(RocPoint { threshold, fpr, tpr });
    }
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// FPR where `FPR = 1 − TPR`, linearly interpolated along the curve.
pub fn eer(curve: &RocCurve) -> f64 {
    let d = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for w in curve.points.windows(2) {
        let (a, b) = (d(&w[0]), d(&w[1]));
        if a == 0.0 {
            return w[0].fpr;
        }
        if a < 0.0 && b >= 0.0 {
            let t = a / (a - b);
            return w[0].fpr + t * (w[1].fpr - w[0].fpr);
        }
    }
    curve.points.last().map_or(0.5, |p| p.fpr)
}

/// Two-column `fpr tpr` table with a header, one line per point.
pub fn roc_table(curve: &RocCurve) -> String {
    let mut out = String::from("# fpr tpr threshold\n");
    for p in &curve.points {
        let _ = writeln!(out, "{:.6} {:.6} {}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// AUC and EER of one criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub auc: f64,
    pub eer: f64,
    pub curve: RocCurve,
}

pub fn summarize(scores: &[f64], labels: &[bool]) -> Result<Summary> {
    let curve = roc_curve(scores, labels)?;
    Ok(Summary {
        auc: auc(&curve),
        eer: eer(&curve),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::Stream;
    use crate::scoring::threshold_mask;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>, rows: usize, cols: usize) -> EnergyMap {
        EnergyMap::new(rows, cols, values, 0, None).unwrap()
    }

    #[test]
    fn frame_score_examples() {
        assert_eq!(frame_scores(&[map(vec![1.5; 6], 2, 3)]), vec![1.5]);
        assert_eq!(frame_scores(&[map(vec![0.0, 0.0, 7.0, 0.0], 2, 2)]), vec![7.0]);
    }

    #[test]
    fn frame_score_agrees_with_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let maps: Vec<EnergyMap> = (0..10)
            .map(|_| map((0..6).map(|_| rng.gen_range(0..5) as f64).collect(), 2, 3))
            .collect();
        let scores = frame_scores(&maps);
        for theta in [-1.0, 0.0, 0.5, 1.0, 2.0, 3.0, 3.5, 4.0, 9.0] {
            for (m, s) in maps.iter().zip(&scores) {
                assert_eq!(!threshold_mask(m, theta).is_empty(), *s > theta);
            }
        }
    }

    fn gt_rect(rows: usize, cols: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<bool> {
        let w = cols * 28;
        (0..rows * 28 * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
    }

    #[test]
    fn forty_percent_rule() {
        // gt spans two cells side by side: 56×28
        let gt = gt_rect(1, 4, 0, 28, 28, 84);
        let half = threshold_mask(&map(vec![0.0, 5.0, 0.0, 0.0], 1, 4), 1.0);
        assert_eq!(pixel_level_decision(&half, &gt, true).unwrap(), Verdict::TruePositive);
        // 30% coverage: gt 28×(28+x) with 28 of it flagged → choose gt width 93 ⇒ 30.1%
        let gt30 = gt_rect(1, 4, 0, 28, 28, 28 + 93);
        let cov = threshold_mask(&map(vec![0.0, 5.0, 0.0, 0.0], 1, 4), 1.0);
        assert_eq!(pixel_level_decision(&cov, &gt30, true).unwrap(), Verdict::Miss);
        let exact: Vec<bool> = cov.pixels.clone();
        assert_eq!(pixel_level_decision(&cov, &exact, true).unwrap(), Verdict::TruePositive);
        let empty = vec![false; exact.len()];
        assert!(matches!(pixel_level_decision(&cov, &empty, true), Err(Error::Data(_))));
        assert_eq!(pixel_level_decision(&cov, &empty, false).unwrap(), Verdict::FalsePositive);
        let none = threshold_mask(&map(vec![0.0; 4], 1, 4), 1.0);
        assert_eq!(pixel_level_decision(&none, &empty, false).unwrap(), Verdict::TrueNegative);
        assert!(pixel_level_decision(&none, &empty[1..], false).is_err());
    }

    #[test]
    fn pixel_score_reproduces_threshold_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..40 {
            let m = map((0..12).map(|_| rng.gen_range(0..6) as f64).collect(), 3, 4);
            let (y0, x0) = (rng.gen_range(0..60), rng.gen_range(0..90));
            let gt = gt_rect(3, 4, y0, y0 + rng.gen_range(1..24), x0, x0 + rng.gen_range(1..22));
            let positive = rng.gen_bool(0.7);
            let s = pixel_score(&m, &gt, positive).unwrap();
            for theta in [-0.5, 0.5, 1.5, 2.5, 3.5, 4.5, 5.5] {
                let v = pixel_level_decision(&threshold_mask(&m, theta), &gt, positive).unwrap();
                let flagged = matches!(v, Verdict::TruePositive | Verdict::FalsePositive);
                assert_eq!(flagged, s > theta);
            }
        }
    }

    /// Confusion matrix at every candidate threshold, computed directly.
    fn brute_force_roc(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let mut thresholds = vec![f64::INFINITY];
        thresholds.extend(ts);
        thresholds.push(f64::NEG_INFINITY);
        let p = labels.iter().filter(|&&l| l).count() as f64;
        let n = labels.len() as f64 - p;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for t in thresholds {
            let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s > t).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s > t).count() as f64;
            let pt = (fp / n, tp / p);
            if out.last() != Some(&pt) {
                out.push(pt);
            }
        }
        out
    }

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
        let mut u = 0.0;
        for p in &pos {
            for n in &neg {
                u += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        u / (pos.len() * neg.len()) as f64
    }

    /// Scan FPR on a 10⁵ grid for the crossing of `x = 1 − TPR(x)`.
    fn dense_eer(curve: &RocCurve) -> f64 {
        let pts = &curve.points;
        let tpr_at = |x: f64| -> f64 {
            let mut best = 0.0f64;
            for w in pts.windows(2) {
                let (a, b) = (w[0], w[1]);
                if x >= a.fpr && x <= b.fpr {
                    let t = if b.fpr > a.fpr { (x - a.fpr) / (b.fpr - a.fpr) } else { 1.0 };
                    best = best.max(a.tpr + t * (b.tpr - a.tpr));
                }
            }
            best
        };
        let g = |x: f64| x - (1.0 - tpr_at(x));
        if g(0.0) >= 0.0 {
            return 0.0;
        }
        let n = 100_000;
        let mut lo = 0.0;
        for i in 1..=n {
            let x = i as f64 / n as f64;
            if g(x) >= 0.0 {
                // g is non-decreasing: bisect the bracketing cell
                let mut hi = x;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if g(mid) >= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return hi;
            }
            lo = x;
        }
        1.0
    }

    #[test]
    fn trivial_curves() {
        let c = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&c), 1.0);
        assert_eq!(eer(&c), 0.0);
        let t = roc_curve(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
        let xy: Vec<(f64, f64)> = t.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&t), 0.5);
        assert_eq!(eer(&t), 0.5);
        assert!(roc_curve(&[1.0, 2.0], &[true, true]).is_err());
        assert!(roc_curve(&[1.0], &[true, false]).is_err());
        let table = roc_table(&t);
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn matches_oracles_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 * 0.5).collect();
            let c = roc_curve(&scores, &labels).unwrap();
            let xy: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
            assert_eq!(xy, brute_force_roc(&scores, &labels));
            assert!((auc(&c) - mann_whitney(&scores, &labels)).abs() < 1e-12);
            for w in c.points.windows(2) {
                assert!(w[0].threshold > w[1].threshold && w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
            }
        }
    }

    #[test]
    fn eer_matches_dense_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..30 {
            let n = rng.gen_range(4..30);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = labels.iter().map(|&l| rng.gen_range(0.0..1.0) + if l { 0.3 } else { 0.0 }).collect();
            let c = roc_curve(&scores, &labels).unwrap();
            let (e, d) = (eer(&c), dense_eer(&c));
            assert!((e - d).abs() < 1e-6, "{e} vs {d}");
            assert!((0.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn stream_maps_survive_evaluation() {
        let m = EnergyMap::new(1, 1, vec![2.0], 3, Some(Stream::Motion)).unwrap();
        assert_eq!(frame_scores(&[m]), vec![2.0]);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            data in prop::collection::vec((-10.0..10.0f64, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc(&roc_curve(&scores, &labels).unwrap());
            let t: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp() * 2.0 + 1.0).collect();
            prop_assert!((a - auc(&roc_curve(&t, &labels).unwrap())).abs() < 1e-12);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() == scores.len() {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((a + auc(&roc_curve(&neg, &labels).unwrap()) - 1.0).abs() < 1e-12);
            }
        }
    }
}
