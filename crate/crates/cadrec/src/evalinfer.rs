//! Inference strategies and evaluation metrics.
//!
//! Both selection strategies are pure post-processing over one
//! PredictionSet: the threshold rule keeps a query when every non-pad
//! token clears its bar, the density rule keeps the N highest-CLS
//! queries where N is the rounded density mass. Counting error is
//! MAE/RMSE over pairs; localization matches points one-to-one by
//! minimum total Euclidean distance and thresholds pair distances.

use std::io::Write;

use crate::cadgen::DensityMap;
use crate::decoder::PredictionSet;
use crate::losses::hungarian_match;
use crate::scenegen::Scene;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// CLS probability bar for the threshold strategy.
pub const CLS_THRESHOLD: f64 = 0.25;
/// Bar for every remaining non-pad token.
pub const TOKEN_THRESHOLD: f64 = 0.35;
/// Whole-image count above which evaluation falls back to quadrants.
pub const CROP_TRIGGER: f64 = 600.0;
/// Localization match radius in image pixels; one kernel footprint.
pub const DEFAULT_TAU: f64 = 15.0;

/// Inference strategy selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Threshold,
    Density,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Threshold => write!(f, "threshold"),
            Strategy::Density => write!(f, "density"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "threshold" => Ok(Strategy::Threshold),
            "density" => Ok(Strategy::Density),
            other => Err(Error::Invalid {
                context: "evalinfer::strategy",
                message: format!("unknown strategy {other:?}"),
            }),
        }
    }
}

/// Evaluation knobs shared by every evaluation entry point.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub strategy: Strategy,
    pub tau: f64,
    pub cls_threshold: f64,
    pub token_threshold: f64,
    pub crop_trigger: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            strategy: Strategy::Threshold,
            tau: DEFAULT_TAU,
            cls_threshold: CLS_THRESHOLD,
            token_threshold: TOKEN_THRESHOLD,
            crop_trigger: CROP_TRIGGER,
        }
    }
}

/// Keeps query k iff `ŷ_CLS ≥ cls_thresh` and every non-pad non-CLS
/// token probability is `≥ token_thresh`. Returns ascending indices.
pub fn threshold_select(
    pred: &PredictionSet,
    n_real: usize,
    cls_thresh: f64,
    token_thresh: f64,
) -> Result<Vec<usize>> {
    let n = pred.probs.shape()[1];
    if n_real == 0 || n_real > n {
        return Err(Error::Invalid {
            context: "evalinfer::threshold_select",
            message: format!("{n_real} non-pad tokens outside 1..={n}"),
        });
    }
    let mut kept = Vec::new();
    for k in 0..pred.k() {
        let cls_ok = pred.probs.at2(k, 0) >= cls_thresh;
        let tokens_ok = (1..n_real).all(|i| pred.probs.at2(k, i) >= token_thresh);
        if cls_ok && tokens_ok {
            kept.push(k);
        }
    }
    Ok(kept)
}

/// Keeps the N highest-CLS queries where N is the density mass rounded
/// half away from zero and clamped to [0, K]. Ties break toward the
/// lower query index. Returns ascending indices.
pub fn density_guided_select(pred: &PredictionSet, density: &DensityMap) -> Vec<usize> {
    let k = pred.k();
    let n = (density.count().round() as usize).min(k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        pred.probs
            .at2(b, 0)
            .partial_cmp(&pred.probs.at2(a, 0))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(n).collect();
    kept.sort_unstable();
    kept
}

/// Selected query points in image pixels, query order preserved.
pub fn selected_pixel_points(
    pred: &PredictionSet,
    selected: &[usize],
    image_size: (usize, usize),
) -> Vec<(f64, f64)> {
    let (h, w) = image_size;
    selected
        .iter()
        .map(|&k| {
            (
                pred.points.at2(k, 0) * w as f64,
                pred.points.at2(k, 1) * h as f64,
            )
        })
        .collect()
}

/// Splits a scene into four equal non-overlapping quadrants, remapping
/// object centers into quadrant-local coordinates. Order: top-left,
/// top-right, bottom-left, bottom-right.
pub fn split_quadrants(scene: &Scene) -> Result<[Scene; 4]> {
    let (h, w) = scene.image_size;
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Invalid {
            context: "evalinfer::split_quadrants",
            message: format!("image size {h}x{w} is not divisible by 64"),
        });
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut quads: [Scene; 4] = std::array::from_fn(|_| Scene {
        image_size: (hh, hw),
        objects: vec![],
    });
    for obj in &scene.objects {
        let (x, y) = obj.center;
        let right = x >= hw as f64;
        let bottom = y >= hh as f64;
        let qi = (bottom as usize) * 2 + right as usize;
        let mut moved = obj.clone();
        moved.center = (
            x - if right { hw as f64 } else { 0.0 },
            y - if bottom { hh as f64 } else { 0.0 },
        );
        quads[qi].objects.push(moved);
    }
    for q in &quads {
        q.validate()?;
    }
    Ok(quads)
}

/// Evaluates `count_fn` on the whole scene; when that count exceeds
/// `trigger`, re-evaluates the four quadrants independently and sums.
/// Returns the count and whether the fallback fired.
pub fn adaptive_crop_eval(
    scene: &Scene,
    trigger: f64,
    mut count_fn: impl FnMut(&Scene) -> Result<f64>,
) -> Result<(f64, bool)> {
    let whole = count_fn(scene)?;
    if whole <= trigger {
        return Ok((whole, false));
    }
    let quads = split_quadrants(scene)?;
    let mut total = 0.0;
    for q in &quads {
        total += count_fn(q)?;
    }
    Ok((total, true))
}

/// MAE and RMSE over (predicted, ground-truth) count pairs.
pub fn count_metrics(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("evalinfer::count_metrics", "no pairs"));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
    Ok((mae, rmse))
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(tp: usize, denom: usize, other_empty: bool) -> f64 {
    if denom == 0 {
        if other_empty {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / denom as f64
    }
}

/// One-to-one minimum-total-Euclidean matching; pairs within `tau`
/// pixels are true positives. Returns (TP, precision, recall, F1).
pub fn localization_counts(
    preds: &[(f64, f64)],
    gts: &[(f64, f64)],
    tau: f64,
) -> Result<(usize, f64, f64, f64)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "evalinfer::localization_counts",
            "match radius must be positive",
        ));
    }
    let tp = if preds.is_empty() || gts.is_empty() {
        0
    } else {
        let mut cost = Tensor::zeros(vec![preds.len(), gts.len()]);
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                cost.set2(i, j, ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt());
            }
        }
        let assignment = hungarian_match(&cost)?;
        assignment
            .pairs
            .iter()
            .filter(|(i, j)| cost.at2(*i, *j) <= tau)
            .count()
    };
    let precision = ratio(tp, preds.len(), gts.is_empty());
    let recall = ratio(tp, gts.len(), preds.is_empty());
    Ok((tp, precision, recall, f1_of(precision, recall)))
}

/// Precision, recall, F1 of point localization at radius `tau`.
pub fn localization_metrics(
    preds: &[(f64, f64)],
    gts: &[(f64, f64)],
    tau: f64,
) -> Result<(f64, f64, f64)> {
    let (_, p, r, f) = localization_counts(preds, gts, tau)?;
    Ok((p, r, f))
}

/// Per-(scene, expression) evaluation record. Localization fields refer
/// to the strategy the evaluation ran under. `count_density` is absent
/// when the model has no density estimator to guide strategy 2.
#[derive(Clone, Debug)]
pub struct PairOutcome {
    pub scene_id: usize,
    pub expression_id: usize,
    pub gt_count: usize,
    pub count_threshold: usize,
    pub count_density: Option<usize>,
    pub tp: usize,
    pub emitted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Aggregate evaluation over all pairs. Localization aggregates are
/// micro-averaged so the F1 identity holds exactly.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub pairs: Vec<PairOutcome>,
    pub strategy: Strategy,
    pub tau: f64,
    pub mae: f64,
    pub rmse: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalResult {
    pub fn from_pairs(pairs: Vec<PairOutcome>, strategy: Strategy, tau: f64) -> Result<EvalResult> {
        let counts: Vec<(f64, f64)> = pairs
            .iter()
            .map(|p| {
                let c = match strategy {
                    Strategy::Threshold => Ok(p.count_threshold),
                    Strategy::Density => p.count_density.ok_or_else(|| {
                        Error::invalid(
                            "evalinfer::eval_result",
                            "density strategy requested but no density counts exist",
                        )
                    }),
                }?;
                Ok((c as f64, p.gt_count as f64))
            })
            .collect::<Result<_>>()?;
        let (mae, rmse) = count_metrics(&counts)?;
        let tp: usize = pairs.iter().map(|p| p.tp).sum();
        let emitted: usize = pairs.iter().map(|p| p.emitted).sum();
        let gt: usize = pairs.iter().map(|p| p.gt_count).sum();
        let precision = ratio(tp, emitted, gt == 0);
        let recall = ratio(tp, gt, emitted == 0);
        let result = EvalResult {
            pairs,
            strategy,
            tau,
            mae,
            rmse,
            precision,
            recall,
            f1: f1_of(precision, recall),
        };
        result.validate()?;
        Ok(result)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mae > self.rmse + 1e-12 {
            return Err(Error::invalid(
                "evalinfer::eval_result",
                "MAE exceeds RMSE",
            ));
        }
        for (name, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid {
                    context: "evalinfer::eval_result",
                    message: format!("{name} = {v} outside [0, 1]"),
                });
            }
        }
        let want = f1_of(self.precision, self.recall);
        if (self.f1 - want).abs() > 1e-12 {
            return Err(Error::invalid(
                "evalinfer::eval_result",
                "F1 does not equal 2PR/(P+R)",
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(
                "evalinfer::eval_result",
                "match radius must be positive",
            ));
        }
        Ok(())
    }
}

/// Writes the line-oriented report: one `pair` record per evaluation
/// pair and a trailing `summary` record.
pub fn write_report(out: &mut impl Write, result: &EvalResult) -> Result<()> {
    for p in &result.pairs {
        let density = p
            .count_density
            .map_or_else(|| "-".to_string(), |c| c.to_string());
        writeln!(
            out,
            "pair {} {} gt {} thresh {} density {} p {} r {} f1 {}",
            p.scene_id,
            p.expression_id,
            p.gt_count,
            p.count_threshold,
            density,
            p.precision,
            p.recall,
            p.f1
        )?;
    }
    writeln!(
        out,
        "summary pairs {} strategy {} tau {} mae {} rmse {} p {} r {} f1 {}",
        result.pairs.len(),
        result.strategy,
        result.tau,
        result.mae,
        result.rmse,
        result.precision,
        result.recall,
        result.f1
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    use crate::scenegen::SceneObject;

    fn pred_set(points: Vec<(f64, f64)>, probs: Vec<Vec<f64>>) -> PredictionSet {
        let k = points.len();
        let n = probs[0].len();
        let pts = Tensor::new(
            vec![k, 2],
            points.iter().flat_map(|(x, y)| [*x, *y]).collect(),
        )
        .unwrap();
        let pr = Tensor::new(vec![k, n], probs.into_iter().flatten().collect()).unwrap();
        PredictionSet {
            points: pts,
            probs: pr,
        }
    }

    fn object(x: f64, y: f64) -> SceneObject {
        SceneObject {
            center: (x, y),
            class_id: 0,
            attribute_ids: BTreeSet::from([0]),
            scale: 4.0,
        }
    }

    #[test]
    fn threshold_rule_is_a_conjunction_with_inclusive_bars() {
        let pred = pred_set(
            vec![(0.5, 0.5); 4],
            vec![
                vec![0.3, 0.4, 0.4, 0.0],  // kept
                vec![0.2, 0.9, 0.9, 0.0],  // CLS below the bar
                vec![0.9, 0.34, 0.9, 0.0], // one token below the bar
                vec![0.25, 0.35, 0.35, 0.0], // exactly on both bars
            ],
        );
        let kept = threshold_select(&pred, 3, CLS_THRESHOLD, TOKEN_THRESHOLD).unwrap();
        assert_eq!(kept, vec![0, 3]);
        // the pad column is zero and must not participate
        let all = threshold_select(&pred, 3, 0.0, 0.0).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(threshold_select(&pred, 0, 0.25, 0.35).is_err());
        assert!(threshold_select(&pred, 5, 0.25, 0.35).is_err());
    }

    #[test]
    fn density_selection_rounds_clamps_and_breaks_ties_low() {
        let pred = pred_set(
            vec![(0.5, 0.5); 5],
            vec![
                vec![0.9],
                vec![0.1],
                vec![0.7],
                vec![0.9],
                vec![0.8],
            ],
        );
        let density = |mass: f64| -> DensityMap {
            DensityMap::new(Tensor::new(vec![1, 1, 1], vec![mass]).unwrap(), 0).unwrap()
        };
        assert!(density_guided_select(&pred, &density(0.2)).is_empty());
        // 4.3 rounds to 4: the four largest CLS probabilities
        assert_eq!(density_guided_select(&pred, &density(4.3)), vec![0, 2, 3, 4]);
        // half rounds away from zero
        assert_eq!(density_guided_select(&pred, &density(2.5)).len(), 3);
        // mass beyond K clamps to all queries
        assert_eq!(density_guided_select(&pred, &density(40.0)), vec![0, 1, 2, 3, 4]);
        // tie between queries 0 and 3 resolves to the lower index
        assert_eq!(density_guided_select(&pred, &density(1.0)), vec![0]);
        // count equals the emitted cardinality for every mass
        for mass in [0.0, 0.4999, 0.5, 1.49, 3.2, 7.9] {
            let sel = density_guided_select(&pred, &density(mass));
            let n = (mass.round() as usize).min(pred.k());
            assert_eq!(sel.len(), n);
        }
    }

    #[test]
    fn pixel_points_scale_by_image_size() {
        let pred = pred_set(vec![(0.25, 0.5), (0.75, 0.125)], vec![vec![1.0], vec![1.0]]);
        let px = selected_pixel_points(&pred, &[0, 1], (64, 128));
        assert_eq!(px, vec![(32.0, 32.0), (96.0, 8.0)]);
    }

    #[test]
    fn count_metrics_match_hand_values() {
        assert_eq!(count_metrics(&[(4.0, 4.0), (7.0, 7.0)]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = count_metrics(&[(3.0, 4.0), (5.0, 4.0)]).unwrap();
        assert_eq!((mae, rmse), (1.0, 1.0));
        let (mae, rmse) = count_metrics(&[(0.0, 0.0), (10.0, 0.0)]).unwrap();
        assert_eq!(mae, 5.0);
        assert!((rmse - 50.0f64.sqrt()).abs() < 1e-12);
        assert!((rmse - 7.0711).abs() < 1e-4);
        assert!(count_metrics(&[]).is_err());
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = 1 + (rng.random::<u32>() as usize) % 12;
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        (rng.random::<u32>() % 30) as f64,
                        (rng.random::<u32>() % 30) as f64,
                    )
                })
                .collect();
            let (mae, rmse) = count_metrics(&pairs).unwrap();
            assert!(mae <= rmse + 1e-12, "{mae} > {rmse}");
        }
    }

    #[test]
    fn localization_hand_cases() {
        let gts = vec![(10.0, 10.0), (40.0, 40.0)];
        // exact hits
        let m = localization_metrics(&gts, &gts, DEFAULT_TAU).unwrap();
        assert_eq!(m, (1.0, 1.0, 1.0));
        // 2 predictions, 1 of 1 gt hit
        let m = localization_metrics(&[(10.0, 12.0), (90.0, 90.0)], &[(10.0, 10.0)], 15.0).unwrap();
        assert!((m.0 - 0.5).abs() < 1e-12);
        assert_eq!(m.1, 1.0);
        assert!((m.2 - 2.0 / 3.0).abs() < 1e-12);
        // empty-side conventions
        assert_eq!(localization_metrics(&[], &gts, 15.0).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(localization_metrics(&[], &[], 15.0).unwrap(), (1.0, 1.0, 1.0));
        let m = localization_metrics(&gts, &[], 15.0).unwrap();
        assert_eq!(m, (0.0, 0.0, 0.0));
        // invalid radius
        assert!(localization_metrics(&gts, &gts, 0.0).is_err());
        assert!(localization_metrics(&gts, &gts, -1.0).is_err());
    }

    #[test]
    fn localization_matches_optimally_not_greedily() {
        // nearest-first would pair the central prediction with the near
        // gt and strand the other; the optimal assignment hits both
        let preds = vec![(4.0, 0.0), (-1.0, 0.0)];
        let gts = vec![(0.0, 0.0), (10.0, 0.0)];
        let (p, r, f) = localization_metrics(&preds, &gts, 6.0).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn quadrant_split_remaps_and_partitions() {
        let scene = Scene {
            image_size: (128, 192),
            objects: vec![
                object(10.0, 10.0),   // top-left
                object(100.0, 10.0),  // top-right
                object(10.0, 100.0),  // bottom-left
                object(180.0, 120.0), // bottom-right
                object(96.0, 64.0),   // both boundaries: bottom-right
            ],
        };
        let quads = split_quadrants(&scene).unwrap();
        assert!(quads.iter().all(|q| q.image_size == (64, 96)));
        let total: usize = quads.iter().map(|q| q.objects.len()).sum();
        assert_eq!(total, scene.objects.len());
        assert_eq!(quads[0].objects.len(), 1);
        assert_eq!(quads[1].objects[0].center, (4.0, 10.0));
        assert_eq!(quads[2].objects[0].center, (10.0, 36.0));
        assert_eq!(quads[3].objects.len(), 2);
        assert_eq!(quads[3].objects[1].center, (0.0, 0.0));
        // indivisible image size is rejected
        let bad = Scene {
            image_size: (96, 128),
            objects: vec![],
        };
        assert!(split_quadrants(&bad).is_err());
    }

    #[test]
    fn adaptive_crop_triggers_and_preserves_partition_counts() {
        let scene = Scene {
            image_size: (128, 128),
            objects: vec![object(10.0, 10.0), object(100.0, 20.0), object(30.0, 110.0)],
        };
        let exact = |s: &Scene| -> Result<f64> { Ok(s.objects.len() as f64) };
        // below the trigger: whole-image path
        let (count, cropped) = adaptive_crop_eval(&scene, CROP_TRIGGER, exact).unwrap();
        assert_eq!((count, cropped), (3.0, false));
        // forced trigger: quadrant counts sum to the whole
        let (count, cropped) = adaptive_crop_eval(&scene, 0.0, exact).unwrap();
        assert_eq!((count, cropped), (3.0, true));
        // locality: only the top-left quadrant is populated
        let corner = Scene {
            image_size: (128, 128),
            objects: vec![object(5.0, 5.0), object(20.0, 30.0)],
        };
        let mut seen = Vec::new();
        let (count, _) = adaptive_crop_eval(&corner, 0.0, |s| {
            seen.push(s.objects.len());
            Ok(s.objects.len() as f64)
        })
        .unwrap();
        assert_eq!(count, 2.0);
        assert_eq!(seen, vec![2, 2, 0, 0, 0]);
    }

    #[test]
    fn eval_result_aggregates_and_validates() {
        let pairs = vec![
            PairOutcome {
                scene_id: 0,
                expression_id: 0,
                gt_count: 4,
                count_threshold: 3,
                count_density: Some(4),
                tp: 3,
                emitted: 3,
                precision: 1.0,
                recall: 0.75,
                f1: f1_of(1.0, 0.75),
            },
            PairOutcome {
                scene_id: 1,
                expression_id: 0,
                gt_count: 2,
                count_threshold: 4,
                count_density: Some(2),
                tp: 1,
                emitted: 4,
                precision: 0.25,
                recall: 0.5,
                f1: f1_of(0.25, 0.5),
            },
        ];
        let result = EvalResult::from_pairs(pairs.clone(), Strategy::Threshold, 15.0).unwrap();
        assert_eq!(result.mae, 1.5);
        assert!((result.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((result.precision - 4.0 / 7.0).abs() < 1e-12);
        assert!((result.recall - 4.0 / 6.0).abs() < 1e-12);
        assert!((result.f1 - f1_of(4.0 / 7.0, 4.0 / 6.0)).abs() < 1e-12);
        let density = EvalResult::from_pairs(pairs, Strategy::Density, 15.0).unwrap();
        assert_eq!((density.mae, density.rmse), (0.0, 0.0));
        // a corrupted aggregate fails validation
        let mut broken = density.clone();
        broken.f1 = 0.9;
        assert!(broken.validate().is_err());
        assert!(EvalResult::from_pairs(vec![], Strategy::Threshold, 15.0).is_err());
    }

    #[test]
    fn report_lines_are_one_per_pair_plus_summary() {
        let pairs = vec![PairOutcome {
            scene_id: 7,
            expression_id: 2,
            gt_count: 5,
            count_threshold: 5,
            count_density: Some(4),
            tp: 4,
            emitted: 5,
            precision: 0.8,
            recall: 0.8,
            f1: 0.8,
        }];
        let result = EvalResult::from_pairs(pairs, Strategy::Density, 15.0).unwrap();
        let mut buf = Vec::new();
        write_report(&mut buf, &result).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "pair 7 2 gt 5 thresh 5 density 4 p 0.8 r 0.8 f1 0.8");
        assert!(lines[1].starts_with("summary pairs 1 strategy density tau 15"));
        assert!(lines[1].contains("mae 1 rmse 1"));
    }

    #[test]
    fn both_strategies_are_post_processing_over_one_prediction_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 6;
        let points: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let probs: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let pred = pred_set(points, probs);
        let before = (pred.points.data().to_vec(), pred.probs.data().to_vec());
        let mass = DensityMap::new(Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap(), 0).unwrap();
        let a = threshold_select(&pred, 3, CLS_THRESHOLD, TOKEN_THRESHOLD).unwrap();
        let b = density_guided_select(&pred, &mass);
        assert_eq!(b.len(), 3);
        // re-running either strategy gives identical answers on the
        // unchanged prediction set
        assert_eq!(
            a,
            threshold_select(&pred, 3, CLS_THRESHOLD, TOKEN_THRESHOLD).unwrap()
        );
        assert_eq!(b, density_guided_select(&pred, &mass));
        assert_eq!(before.0, pred.points.data());
        assert_eq!(before.1, pred.probs.data());
    }
}
