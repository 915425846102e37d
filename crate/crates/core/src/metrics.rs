//! Center-distance detection metrics in the style of the nuScenes protocol:
//! mean AP over distance thresholds, translation / velocity / orientation
//! errors on true positives, and a composite detection score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::PredictionSet;
use crate::losses::GtBox;
use crate::tensor::wrap_angle;

/// Center-distance thresholds (meters) averaged by [`toy_map`].
pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
/// Errors at or above these caps score zero in the composite.
pub const ERR_CAPS: ErrorCaps = ErrorCaps { ate: 2.0, ave: 2.0, aoe: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCaps {
    pub ate: f64,
    pub ave: f64,
    pub aoe: f64,
}

/// One scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub params: [f64; 9],
    pub class_id: usize,
    pub score: f64,
}

/// One detection per query: the arg-max class and its score.
pub fn detections_from(preds: &PredictionSet) -> Vec<Detection> {
    (0..preds.len())
        .map(|q| {
            let row = preds.class_scores.row(q);
            let (class_id, &score) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, (k, s)| if *s > *best.1 { (k, s) } else { best });
            let mut params = [0.0; 9];
            params.copy_from_slice(preds.boxes.row(q));
            Detection { params, class_id, score }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(prediction, gt)` index pairs.
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

fn center_dist(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Prediction indices by descending score; ties keep input order.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy matching: predictions in descending score order each claim the
/// nearest unclaimed same-class GT closer than `threshold`.
pub fn match_predictions(preds: &[Detection], gts: &[GtBox], threshold: f64) -> MatchResult {
    assert!(threshold > 0.0, "threshold must be positive");
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for p in score_order(preds) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !taken[*g] && gt.class_id == preds[p].class_id)
            .map(|(g, gt)| (g, center_dist(&preds[p].params, &gt.params)))
            .filter(|&(_, d)| d < threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((g, _)) => {
                taken[g] = true;
                out.tp.push((p, g));
            }
            None => out.fp.push(p),
        }
    }
    out.fn_ = (0..gts.len()).filter(|&g| !taken[g]).collect();
    out
}

/// 11-point interpolated average precision from score-ranked TP flags.
pub fn interpolated_ap(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (rank, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Per-class AP at one threshold: `(class_id, ap, num_gt)` for classes with GT.
fn class_aps(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize, threshold: f64) -> Vec<(usize, f64, usize)> {
    let mut ranked: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut num_gt = vec![0usize; num_classes];
    for (p, g) in preds.iter().zip(gts) {
        for gt in g {
            num_gt[gt.class_id] += 1;
        }
        let m = match_predictions(p, g, threshold);
        let mut is_tp = vec![false; p.len()];
        for &(i, _) in &m.tp {
            is_tp[i] = true;
        }
        for (i, d) in p.iter().enumerate() {
            ranked[d.class_id].push((d.score, is_tp[i]));
        }
    }
    (0..num_classes)
        .filter(|&c| num_gt[c] > 0)
        .map(|c| (c, interpolated_ap(&ranked[c], num_gt[c]), num_gt[c]))
        .collect()
}

/// Mean over thresholds and GT-bearing classes of the 11-point AP.
pub fn toy_map(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &t in &AP_THRESHOLDS {
        for (_, ap, _) in class_aps(preds, gts, num_classes, t) {
            sum += ap;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpErrors {
    pub mate: f64,
    pub mave: f64,
    pub maoe: f64,
    pub count: usize,
}

/// Mean errors over `(prediction, gt)` pairs; the caps stand in when there are none.
pub fn tp_errors(pairs: &[(&Detection, &GtBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors { mate: ERR_CAPS.ate, mave: ERR_CAPS.ave, maoe: ERR_CAPS.aoe, count: 0 };
    }
    let n = pairs.len() as f64;
    let (mut ate, mut ave, mut aoe) = (0.0, 0.0, 0.0);
    for (d, g) in pairs {
        ate += center_dist(&d.params, &g.params);
        ave += (d.params[7] - g.params[7]).hypot(d.params[8] - g.params[8]);
        aoe += wrap_angle(d.params[6] - g.params[6]).abs();
    }
    TpErrors { mate: ate / n, mave: ave / n, maoe: aoe / n, count: pairs.len() }
}

/// `(5 mAP + sum_k max(0, 1 - err_k / cap_k) + 2) / 10`: the three measured
/// error terms plus two fixed perfect terms for the unmeasured scale and
/// attribute errors.
pub fn toy_nds(map: f64, mate: f64, mave: f64, maoe: f64) -> f64 {
    let score = |e: f64, cap: f64| (1.0 - e / cap).max(0.0);
    (5.0 * map + score(mate, ERR_CAPS.ate) + score(mave, ERR_CAPS.ave) + score(maoe, ERR_CAPS.aoe) + 2.0) / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub toy_map: f64,
    pub mate_m: f64,
    pub mave_ms: f64,
    pub maoe_rad: f64,
    pub toy_nds: f64,
    pub num_scenes: usize,
    pub num_tp: usize,
    /// AP averaged over thresholds, for classes with GT.
    pub per_class: Vec<ClassReport>,
}

pub fn evaluate(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per scene");
    let map = toy_map(preds, gts, num_classes);
    let mut per_class: Vec<ClassReport> = Vec::new();
    for &t in &AP_THRESHOLDS {
        for (c, ap, n) in class_aps(preds, gts, num_classes, t) {
            match per_class.iter_mut().find(|r| r.class_id == c) {
                Some(r) => r.ap += ap / AP_THRESHOLDS.len() as f64,
                None => per_class.push(ClassReport { class_id: c, ap: ap / AP_THRESHOLDS.len() as f64, num_gt: n }),
            }
        }
    }
    let mut pairs = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        for (i, j) in match_predictions(p, g, TP_THRESHOLD).tp {
            pairs.push((&p[i], &g[j]));
        }
    }
    let e = tp_errors(&pairs);
    EvalReport {
        toy_map: map,
        mate_m: e.mate,
        mave_ms: e.mave,
        maoe_rad: e.maoe,
        toy_nds: toy_nds(map, e.mate, e.mave, e.maoe),
        num_scenes: preds.len(),
        num_tp: e.count,
        per_class,
    }
}

pub const CSV_HEADER: &str = "toy_nds,toy_map,mate_m,mave_ms,maoe_rad,num_scenes,num_tp";

impl EvalReport {
    /// Flat `key=value` record, one pair per line; per-class APs as `ap_class_<k>`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "toy_nds={}", self.toy_nds);
        let _ = writeln!(s, "toy_map={}", self.toy_map);
        let _ = writeln!(s, "mate_m={}", self.mate_m);
        let _ = writeln!(s, "mave_ms={}", self.mave_ms);
        let _ = writeln!(s, "maoe_rad={}", self.maoe_rad);
        let _ = writeln!(s, "num_scenes={}", self.num_scenes);
        let _ = writeln!(s, "num_tp={}", self.num_tp);
        for c in &self.per_class {
            let _ = writeln!(s, "ap_class_{}={}", c.class_id, c.ap);
        }
        s
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.toy_nds, self.toy_map, self.mate_m, self.mave_ms, self.maoe_rad, self.num_scenes, self.num_tp
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, y: f64, class_id: usize) -> GtBox {
        GtBox { params: [x, y, 0.8, 1.9, 4.6, 1.7, 0.3, 1.0, -0.5], class_id }
    }

    fn det_of(g: &GtBox, score: f64) -> Detection {
        Detection { params: g.params, class_id: g.class_id, score }
    }

    #[test]
    fn exact_predictions_all_true_positives() {
        let gts = vec![gt(0.0, 0.0, 0), gt(5.0, 5.0, 1), gt(-3.0, 8.0, 2)];
        let preds: Vec<Detection> = gts.iter().map(|g| det_of(g, 1.0)).collect();
        let m = match_predictions(&preds, &gts, 0.5);
        assert_eq!(m.tp.len(), 3);
        assert!(m.fp.is_empty() && m.fn_.is_empty());
        let m = match_predictions(&[], &gts, 1.0);
        assert_eq!(m.fn_, vec![0, 1, 2]);
    }

    #[test]
    fn two_predictions_one_gt_greedy_trace() {
        let g = [gt(0.0, 0.0, 0)];
        // The farther but higher-scoring prediction claims the GT first.
        let mut far = det_of(&g[0], 0.9);
        far.params[0] = 0.8;
        let mut near = det_of(&g[0], 0.6);
        near.params[0] = 0.1;
        let m = match_predictions(&[near, far], &g, 1.0);
        assert_eq!(m.tp, vec![(1, 0)]);
        assert_eq!(m.fp, vec![0]);
        // Equal scores: input order breaks the tie.
        near.score = 0.9;
        let m = match_predictions(&[near, far], &g, 1.0);
        assert_eq!(m.tp, vec![(0, 0)]);
    }

    #[test]
    fn perfect_and_wrong_class_detectors() {
        let gts = vec![vec![gt(0.0, 0.0, 0), gt(6.0, 1.0, 1)], vec![gt(-4.0, 2.0, 3)]];
        let perfect: Vec<Vec<Detection>> = gts.iter().map(|s| s.iter().map(|g| det_of(g, 0.9)).collect()).collect();
        assert_eq!(toy_map(&perfect, &gts, 4), 1.0);
        let r = evaluate(&perfect, &gts, 4);
        assert_eq!((r.mate_m, r.mave_ms, r.maoe_rad), (0.0, 0.0, 0.0));
        assert!((r.toy_nds - 1.0).abs() < 1e-12);
        let wrong: Vec<Vec<Detection>> = perfect
            .iter()
            .map(|s| s.iter().map(|d| Detection { class_id: (d.class_id + 2) % 4, ..*d }).collect())
            .collect();
        assert_eq!(toy_map(&wrong, &gts, 4), 0.0);
    }

    #[test]
    fn three_scene_hand_computed_pr_curve() {
        // One class. Scene GT counts 1, 2, 1 (4 total). Ranked detections:
        // 0.9 TP, 0.8 FP, 0.7 TP, 0.6 TP, 0.5 FP; one GT is never found.
        let gts = vec![vec![gt(0.0, 0.0, 0)], vec![gt(0.0, 0.0, 0), gt(10.0, 0.0, 0)], vec![gt(0.0, 0.0, 0)]];
        let at = |x: f64, s: f64| Detection { params: gt(x, 0.0, 0).params, class_id: 0, score: s };
        let preds = vec![vec![at(0.0, 0.9), at(5.0, 0.8)], vec![at(0.0, 0.7), at(-5.0, 0.5)], vec![at(0.0, 0.6)]];
        // Recall/precision steps: (.25, 1), (.25, .5), (.5, .667), (.75, .75), (.75, .6).
        // Interpolated precision: r <= .25 -> 1 (3 points), .3-.5 -> .75, .6-.7 -> .75, >= .8 -> 0.
        let expect = (3.0 * 1.0 + 5.0 * 0.75) / 11.0;
        for &t in &AP_THRESHOLDS {
            let aps = class_aps(&preds, &gts, 1, t);
            assert_eq!(aps.len(), 1);
            assert!((aps[0].1 - expect).abs() < 1e-12, "{t}: {}", aps[0].1);
        }
    }

    #[test]
    fn injected_velocity_bias_shows_in_mave() {
        let gts = vec![vec![gt(0.0, 0.0, 0), gt(5.0, 0.0, 2)]];
        let preds = vec![gts[0]
            .iter()
            .map(|g| {
                let mut d = det_of(g, 0.8);
                d.params[7] += 0.3;
                d.params[8] += 0.4;
                d
            })
            .collect()];
        let r = evaluate(&preds, &gts, 4);
        assert!((r.mave_ms - 0.5).abs() < 1e-12);
        assert_eq!(r.mate_m, 0.0);
    }

    #[test]
    fn orientation_error_wraps() {
        let g = gt(0.0, 0.0, 0);
        let mut a = g;
        a.params[6] = 3.1;
        let mut b = g;
        b.params[6] = -3.1;
        let d = Detection { params: a.params, class_id: 0, score: 1.0 };
        let e = tp_errors(&[(&d, &b)]);
        assert!((e.maoe - (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn no_true_positives_use_caps() {
        let e = tp_errors(&[]);
        assert_eq!((e.mate, e.mave, e.maoe), (ERR_CAPS.ate, ERR_CAPS.ave, ERR_CAPS.aoe));
        assert!((toy_nds(0.0, e.mate, e.mave, e.maoe) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nds_monotone_in_each_term() {
        let mut prev = toy_nds(0.5, 0.0, 0.3, 0.2);
        for k in 1..=25 {
            let cur = toy_nds(0.5, k as f64 * 0.1, 0.3, 0.2);
            if k as f64 * 0.1 <= ERR_CAPS.ate + 1e-12 {
                assert!(cur < prev);
            } else {
                assert_eq!(cur, prev);
            }
            prev = cur;
        }
        let mut prev = toy_nds(0.0, 0.5, 0.5, 0.5);
        for k in 1..=10 {
            let cur = toy_nds(k as f64 / 10.0, 0.5, 0.5, 0.5);
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn map_in_unit_interval_and_duplicates_never_add_misses() {
        let gts = vec![vec![gt(0.0, 0.0, 0), gt(3.0, 0.0, 0)]];
        let base = vec![vec![det_of(&gts[0][0], 0.9)]];
        let mut dup = base.clone();
        dup[0].push(det_of(&gts[0][0], 0.8));
        dup[0].push(det_of(&gts[0][1], 0.7));
        for p in [&base, &dup] {
            let m = toy_map(p, &gts, 1);
            assert!((0.0..=1.0).contains(&m));
        }
        let fn_base = match_predictions(&base[0], &gts[0], 1.0).fn_.len();
        let fn_dup = match_predictions(&dup[0], &gts[0], 1.0).fn_.len();
        assert!(fn_dup <= fn_base);
    }

    #[test]
    fn report_serializations() {
        let gts = vec![vec![gt(0.0, 0.0, 1)]];
        let preds = vec![vec![det_of(&gts[0][0], 0.9)]];
        let r = evaluate(&preds, &gts, 4);
        let kv = r.to_kv();
        assert!(kv.contains("toy_nds=1\n") && kv.contains("ap_class_1=1\n"));
        assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn detections_take_argmax_class() {
        let p = PredictionSet {
            class_scores: crate::tensor::Tensor::new(vec![2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.1, 0.6]).unwrap(),
            boxes: crate::tensor::Tensor::zeros(&[2, 9]),
        };
        let d = detections_from(&p);
        assert_eq!((d[0].class_id, d[0].score), (1, 0.7));
        assert_eq!((d[1].class_id, d[1].score), (2, 0.6));
    }
}
