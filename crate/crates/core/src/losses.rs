//! Supervised set-prediction objective: Hungarian label assignment against
//! ground truth, focal classification and L1 box regression.

use serde::{Deserialize, Serialize};

use crate::detector::PredictionVars;
use crate::matching::{gt_cost, hungarian, Assignment, CostConfig};
use crate::tensor::{Graph, Result, Tensor, Var};
use crate::world::SceneObject;

/// Scores are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Ground-truth box in the nine-tuple order `(x, y, z, w, l, h, yaw, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub params: [f64; 9],
    pub class_id: usize,
}

impl From<&SceneObject> for GtBox {
    fn from(o: &SceneObject) -> Self {
        GtBox {
            params: o.box_params(),
            class_id: o.class_id,
        }
    }
}

/// Focal modulation exponent and positive-term balance.
///
/// Per element, with `p` the clamped score and `t` the (possibly soft) target:
/// `-|t - p|^gamma * (balance * t * ln p + (1 - t) * ln(1 - p))`.
/// With one-hot targets this is the usual focal loss; with `gamma = 0` and
/// `balance = 1` it is binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub balance: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            balance: 0.25,
        }
    }
}

pub fn focal_elem(p: f64, t: f64, fp: &FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let modulation = if fp.gamma == 0.0 { 1.0 } else { (t - p).abs().powf(fp.gamma) };
    -modulation * (fp.balance * t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Summed (unnormalized) focal loss of `scores[N, K]` against `targets[N, K]`.
pub fn focal_loss(g: &mut Graph, scores: Var, targets: Var, fp: &FocalParams) -> Result<Var> {
    let p = g.clamp(scores, PROB_EPS, 1.0 - PROB_EPS)?;
    let ln_p = g.ln(p)?;
    let neg_p = g.scale(p, -1.0)?;
    let one_minus_p = g.add_scalar(neg_p, 1.0)?;
    let ln_q = g.ln(one_minus_p)?;
    let neg_t = g.scale(targets, -1.0)?;
    let one_minus_t = g.add_scalar(neg_t, 1.0)?;

    let t_ln_p = g.mul(targets, ln_p)?;
    let pos = g.scale(t_ln_p, fp.balance)?;
    let neg = g.mul(one_minus_t, ln_q)?;
    let bce = g.add(pos, neg)?;
    let weighted = if fp.gamma == 0.0 {
        bce
    } else {
        let d = g.sub(targets, p)?;
        let m = g.abs_pow(d, fp.gamma)?;
        g.mul(m, bce)?
    };
    let s = g.sum(weighted)?;
    g.scale(s, -1.0)
}

/// Supervised loss weights; the same weights drive the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub w_cls: f64,
    pub w_box: f64,
    pub focal: FocalParams,
    /// Per-dimension multiplier on the raw nine-tuple L1 residual.
    pub box_scale: [f64; 9],
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            w_cls: 2.0,
            w_box: 0.25,
            focal: FocalParams::default(),
            box_scale: [1.0; 9],
        }
    }
}

impl SupervisedConfig {
    pub fn cost(&self) -> CostConfig {
        CostConfig {
            w_cls: self.w_cls,
            w_box: self.w_box,
            focal: self.focal,
            box_scale: self.box_scale,
        }
    }
}

#[derive(Debug)]
pub struct SupervisedLoss {
    pub total: Var,
    pub cls: f64,
    pub bbox: f64,
    pub assignment: Option<Assignment>,
}

/// Sum of `box_scale`-weighted absolute residuals between two `[M, 9]` vars.
pub fn weighted_box_l1(g: &mut Graph, pred: Var, target: Var, box_scale: &[f64; 9]) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    let scale = g.constant(Tensor::new(vec![1, 9], box_scale.to_vec())?);
    let w = g.mul(a, scale)?;
    g.sum(w)
}

/// Hungarian-matched focal + L1 loss, normalized by `max(1, #matched)`.
/// Unmatched queries get the all-zero (no-object) classification target.
pub fn supervised_loss(g: &mut Graph, preds: &PredictionVars, gts: &[GtBox], cfg: &SupervisedConfig) -> Result<SupervisedLoss> {
    let values = preds.values(g);
    let (nq, k) = (values.len(), values.num_classes());
    let assignment = gt_cost(&values, gts, &cfg.cost()).map(|c| hungarian(&c));
    let pairs: &[(usize, usize)] = assignment.as_ref().map_or(&[], |a| &a.pairs);
    let norm = pairs.len().max(1) as f64;

    let mut target = vec![0.0; nq * k];
    for &(q, gi) in pairs {
        target[q * k + gts[gi].class_id] = 1.0;
    }
    let target = g.constant(Tensor::new(vec![nq, k], target)?);
    let cls_sum = focal_loss(g, preds.scores, target, &cfg.focal)?;
    let cls = g.scale(cls_sum, 1.0 / norm)?;
    let cls_value = g.value(cls).item();

    let mut total = g.scale(cls, cfg.w_cls)?;
    let mut bbox_value = 0.0;
    if !pairs.is_empty() {
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let matched = g.gather_rows(preds.boxes, &rows)?;
        let gt_data: Vec<f64> = pairs.iter().flat_map(|&(_, gi)| gts[gi].params).collect();
        let gt_var = g.constant(Tensor::new(vec![pairs.len(), 9], gt_data)?);
        let l1 = weighted_box_l1(g, matched, gt_var, &cfg.box_scale)?;
        let bbox = g.scale(l1, 1.0 / norm)?;
        bbox_value = g.value(bbox).item();
        let weighted = g.scale(bbox, cfg.w_box)?;
        total = g.add(total, weighted)?;
    }
    Ok(SupervisedLoss {
        total,
        cls: cls_value,
        bbox: bbox_value,
        assignment,
    })
}
