//! Future-aware distillation.
//!
//! Two feature-reconstruction terms regenerate randomly masked student
//! features and regress them onto teacher targets that have absorbed future
//! frames: perspective-view maps aggregated by attention over the future
//! maps, and the teacher's fused query features. A third term distills the
//! teacher's final predictions onto Hungarian-matched student queries,
//! foreground and background alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    forward_teacher, Bound, DetectorConfig, DetectorError, ForwardOut, ParamStore, PredictionSet, PredictionVars, LN_EPS,
};
use crate::losses::{focal_loss, weighted_box_l1, FocalParams};
use crate::matching::{hungarian, split_fg_bg, teacher_student_cost, Assignment, CostConfig, MatchingError};
use crate::tensor::{linear, Graph, Tensor, TensorError, Var};
use crate::world::{FrameSequence, Observation};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("assignment does not cover all {0} queries")]
    NonTotalAssignment(usize),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Which matched query pairs the logit term sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FldSelection {
    Fg,
    Bg,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub mask_ratio_pv: f64,
    pub mask_ratio_bev: f64,
    pub lambda_pv: f64,
    pub lambda_bev: f64,
    pub lambda_logits: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Teacher max class score at or above which a matched pair is foreground.
    pub fg_threshold: f64,
    pub fld: FldSelection,
    /// Multiplier on background pairs in the logit term.
    pub bg_weight: f64,
    pub kd_focal: FocalParams,
    /// Average rather than sum the attention aggregate over future frames.
    pub tsa_mean: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mask_ratio_pv: 0.5,
            mask_ratio_bev: 0.5,
            lambda_pv: 1e-3,
            lambda_bev: 16.0,
            lambda_logits: 1.0,
            alpha: 2.0,
            beta: 0.25,
            fg_threshold: 0.3,
            fld: FldSelection::Both,
            bg_weight: 1.0,
            kd_focal: FocalParams { gamma: 2.0, balance: 1.0 },
            tsa_mean: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("mask_ratio_pv", self.mask_ratio_pv), ("mask_ratio_bev", self.mask_ratio_bev)] {
            if !(0.0..1.0).contains(&r) {
                return Err(DistillError::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        let weights = [self.lambda_pv, self.lambda_bev, self.lambda_logits, self.alpha, self.beta, self.bg_weight];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DistillError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.lambda_pv == 0.0 && self.lambda_bev == 0.0 && self.lambda_logits == 0.0
    }

    /// Matching cost whose per-pair value equals the unweighted logit term.
    pub fn matching_cost(&self) -> CostConfig {
        CostConfig {
            w_cls: self.alpha,
            w_box: self.beta,
            focal: self.kd_focal,
            box_scale: [1.0; 9],
        }
    }
}

/// Binary keep-mask: an element is zeroed when its uniform draw falls below `ratio`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub values: Tensor,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskTensor {
    pub fn kept_fraction(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.numel() as f64
    }
}

pub fn random_mask(shape: &[usize], ratio: f64, seed: u64) -> Result<MaskTensor> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(DistillError::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < ratio { 0.0 } else { 1.0 });
    Ok(MaskTensor { values, ratio, seed })
}

/// `softmax(q k^T / sqrt(C)) k` over per-pixel tokens of two `[C, H, W]` maps.
fn pixel_attention(query: &Tensor, key: &Tensor) -> Vec<f64> {
    let (c, l) = (query.shape()[0], query.shape()[1] * query.shape()[2]);
    let (q, k) = (query.data(), key.data());
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; c * l];
    let mut logits = vec![0.0; l];
    for i in 0..l {
        for (j, lg) in logits.iter_mut().enumerate() {
            *lg = (0..c).map(|ch| q[ch * l + i] * k[ch * l + j]).sum::<f64>() * scale;
        }
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for lg in logits.iter_mut() {
            *lg = (*lg - m).exp();
            z += *lg;
        }
        for ch in 0..c {
            let row = &k[ch * l..(ch + 1) * l];
            out[ch * l + i] = logits.iter().zip(row).map(|(w, v)| w * v).sum::<f64>() / z;
        }
    }
    out
}

/// Aggregates past / current teacher maps against future maps. For each
/// `i`, `F_i = sum_j Attention(tokens(pv_t0[i]), tokens(pv_fut[j]))`; with no
/// future frames each map attends to itself.
pub fn tsa_aggregate(pv_t0: &[Tensor], pv_fut: &[Tensor], mean: bool) -> Result<Vec<Tensor>> {
    let shape = pv_t0
        .first()
        .ok_or_else(|| DistillError::Config("tsa_aggregate needs at least one frame".into()))?
        .shape()
        .to_vec();
    for t in pv_t0.iter().chain(pv_fut) {
        if t.shape() != shape.as_slice() || shape.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "tsa_aggregate", lhs: shape.clone(), rhs: t.shape().to_vec() }.into());
        }
    }
    Ok(pv_t0
        .iter()
        .map(|q| {
            let keys: Vec<&Tensor> = if pv_fut.is_empty() { vec![q] } else { pv_fut.iter().collect() };
            let mut acc = vec![0.0; q.numel()];
            for k in &keys {
                for (a, v) in acc.iter_mut().zip(pixel_attention(q, k)) {
                    *a += v;
                }
            }
            if mean {
                acc.iter_mut().for_each(|a| *a /= keys.len() as f64);
            }
            Tensor::new(shape.clone(), acc).expect("finite attention output")
        })
        .collect())
}

/// Per-query adaptive mixing of a `[M, N_q, C]` stack of temporal query
/// features, conditioned on the current feature `q_cur[N_q, C]`: an adaptive
/// channel mix, then an adaptive temporal (point) mix, each followed by ReLU,
/// then a flatten-and-project residual with layer norm.
pub fn temporal_adaptive_mixing(g: &mut Graph, b: &mut Bound, q_cur: Var, temporal: Var) -> std::result::Result<Var, DetectorError> {
    let ts = g.shape(temporal).to_vec();
    if ts.len() != 3 || ts[0] < 1 {
        return Err(DetectorError::Config(format!("temporal stack must be [M >= 1, N_q, C], got {ts:?}")));
    }
    let (m, n, c) = (ts[0], ts[1], ts[2]);
    let stack = g.permute(temporal, &[1, 0, 2])?;

    let (cw, cb) = (b.var(g, "mix.chan.w")?, b.var(g, "mix.chan.b")?);
    let chan = linear(g, q_cur, cw, cb)?;
    let chan = g.reshape(chan, &[n, c, c])?;
    let mixed = g.batch_matmul(stack, chan)?;
    let mixed = g.relu(mixed)?;

    let (pw, pb) = (b.var(g, "mix.point.w")?, b.var(g, "mix.point.b")?);
    let point = linear(g, q_cur, pw, pb)?;
    let point = g.reshape(point, &[n, m, m])?;
    let mixed = g.batch_matmul(point, mixed)?;
    let mixed = g.relu(mixed)?;

    let flat = g.reshape(mixed, &[n, m * c])?;
    let (ow, ob) = (b.var(g, "mix.out.w")?, b.var(g, "mix.out.b")?);
    let proj = linear(g, flat, ow, ob)?;
    let res = g.add(q_cur, proj)?;
    Ok(g.layer_norm(res, LN_EPS)?)
}

/// Conv 3x3, ReLU, conv 3x3 on a masked `[C_img, H, W]` map.
pub fn generate_pv(g: &mut Graph, b: &mut Bound, masked: Var) -> Result<Var> {
    let (w1, b1) = (b.var(g, "gen.pv.w1")?, b.var(g, "gen.pv.b1")?);
    let h = g.conv2d_3x3(masked, w1, b1)?;
    let h = g.relu(h)?;
    let (w2, b2) = (b.var(g, "gen.pv.w2")?, b.var(g, "gen.pv.b2")?);
    Ok(g.conv2d_3x3(h, w2, b2)?)
}

/// Feed-forward C -> 2C -> C with ReLU, then layer norm, on masked `[N_q, C]` features.
pub fn generate_bev(g: &mut Graph, b: &mut Bound, masked: Var) -> Result<Var> {
    let (w1, b1) = (b.var(g, "gen.bev.w1")?, b.var(g, "gen.bev.b1")?);
    let h = linear(g, masked, w1, b1)?;
    let h = g.relu(h)?;
    let (w2, b2) = (b.var(g, "gen.bev.w2")?, b.var(g, "gen.bev.b2")?);
    let out = linear(g, h, w2, b2)?;
    Ok(g.layer_norm(out, LN_EPS)?)
}

fn squared_error_sum(g: &mut Graph, a: Var, target: &Tensor) -> Result<Var> {
    if g.shape(a) != target.shape() {
        return Err(TensorError::ShapeMismatch { op: "squared_error", lhs: g.shape(a).to_vec(), rhs: target.shape().to_vec() }.into());
    }
    let t = g.constant(target.clone());
    let d = g.sub(a, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq)?)
}

/// Mean squared reconstruction error over every frame, pixel and channel.
pub fn loss_pv(g: &mut Graph, generated: &[Var], targets: &[Tensor]) -> Result<Var> {
    if generated.len() != targets.len() || generated.is_empty() {
        return Err(DistillError::Config(format!("{} generated maps vs {} targets", generated.len(), targets.len())));
    }
    let mut total = None;
    for (&gv, t) in generated.iter().zip(targets) {
        let s = squared_error_sum(g, gv, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let n = (targets.len() * targets[0].numel()) as f64;
    Ok(g.scale(total.expect("nonempty"), 1.0 / n)?)
}

/// Query-level reconstruction error. Teacher row `q` is compared with
/// student row `sigma(q)` in every frame.
pub fn loss_bev(g: &mut Graph, generated: &[Var], targets: &[Tensor], sigma: &Assignment) -> Result<Var> {
    if generated.len() != targets.len() || generated.is_empty() {
        return Err(DistillError::Config(format!("{} generated frames vs {} targets", generated.len(), targets.len())));
    }
    let n_q = g.shape(generated[0])[0];
    let perm = sigma.as_permutation(n_q).ok_or(DistillError::NonTotalAssignment(n_q))?;
    let mut total = None;
    for (&gv, t) in generated.iter().zip(targets) {
        let reordered = g.gather_rows(gv, &perm)?;
        let s = squared_error_sum(g, reordered, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let n = (targets.len() * targets[0].numel()) as f64;
    Ok(g.scale(total.expect("nonempty"), 1.0 / n)?)
}

/// Value-level [`loss_bev`] on `[N, N_q, C]` stacks.
pub fn loss_bev_value(student: &Tensor, teacher: &Tensor, sigma: &Assignment) -> Result<f64> {
    if student.shape() != teacher.shape() || student.rank() != 3 {
        return Err(TensorError::ShapeMismatch { op: "loss_bev", lhs: student.shape().to_vec(), rhs: teacher.shape().to_vec() }.into());
    }
    let mut g = Graph::new();
    let frames: Vec<Var> = (0..student.shape()[0]).map(|i| g.constant(student.index0(i))).collect();
    let targets: Vec<Tensor> = (0..teacher.shape()[0]).map(|i| teacher.index0(i)).collect();
    let l = loss_bev(&mut g, &frames, &targets, sigma)?;
    Ok(g.value(l).item())
}

/// Teacher-row-indexed pairs `(t, s)` the logit term sums over, with their weights.
pub fn logit_pairs(sigma: &Assignment, teacher: &PredictionSet, cfg: &DistillConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let (fg, bg) = split_fg_bg(sigma, &teacher.class_scores, cfg.fg_threshold);
    match cfg.fld {
        FldSelection::Fg => (fg, Vec::new()),
        FldSelection::Bg => (Vec::new(), bg),
        FldSelection::Both => (fg, bg),
    }
}

fn pair_sum(g: &mut Graph, student: &PredictionVars, teacher: &PredictionSet, pairs: &[(usize, usize)], cfg: &DistillConfig) -> Result<Option<Var>> {
    if pairs.is_empty() || (cfg.alpha == 0.0 && cfg.beta == 0.0) {
        return Ok(None);
    }
    let t_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let s_rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let teacher = teacher.gather(&t_rows);
    let s_scores = g.gather_rows(student.scores, &s_rows)?;
    let t_scores = g.constant(teacher.class_scores);
    let cls = focal_loss(g, s_scores, t_scores, &cfg.kd_focal)?;
    let cls = g.scale(cls, cfg.alpha)?;
    let s_boxes = g.gather_rows(student.boxes, &s_rows)?;
    let t_boxes = g.constant(teacher.boxes);
    let bx = weighted_box_l1(g, s_boxes, t_boxes, &[1.0; 9])?;
    let bx = g.scale(bx, cfg.beta)?;
    Ok(Some(g.add(cls, bx)?))
}

/// Sum over matched pairs of `alpha * focal(student, teacher) + beta * L1`,
/// restricted to the configured foreground / background selection, with
/// background pairs weighted by `bg_weight`.
pub fn loss_logits(g: &mut Graph, student: &PredictionVars, teacher: &PredictionSet, sigma: &Assignment, cfg: &DistillConfig) -> Result<Var> {
    let (fg, bg) = logit_pairs(sigma, teacher, cfg);
    let f = pair_sum(g, student, teacher, &fg, cfg)?;
    let b = match pair_sum(g, student, teacher, &bg, cfg)? {
        Some(v) if cfg.bg_weight != 1.0 => Some(g.scale(v, cfg.bg_weight)?),
        other => other,
    };
    Ok(match (f, b) {
        (Some(x), Some(y)) => g.add(x, y)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => g.constant(Tensor::scalar(0.0)),
    })
}

/// Value-level [`loss_logits`].
pub fn loss_logits_value(student: &PredictionSet, teacher: &PredictionSet, sigma: &Assignment, cfg: &DistillConfig) -> Result<f64> {
    let mut g = Graph::new();
    let s = PredictionVars {
        scores: g.constant(student.class_scores.clone()),
        boxes: g.constant(student.boxes.clone()),
    };
    let l = loss_logits(&mut g, &s, teacher, sigma, cfg)?;
    Ok(g.value(l).item())
}

pub fn loss_kd(l_pv: f64, l_bev: f64, l_logits: f64, cfg: &DistillConfig) -> f64 {
    cfg.lambda_pv * l_pv + cfg.lambda_bev * l_bev + cfg.lambda_logits * l_logits
}

/// Teacher-side quantities for one training scene; computed once and reused
/// across steps because the teacher is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// Aggregated maps aligned with the student's frames.
    pub pv: Vec<Tensor>,
    /// Teacher fused query features `[N_q, C]`.
    pub bev: Tensor,
    pub preds: PredictionSet,
}

/// Runs the frozen teacher over the full sequence and builds the targets for
/// a student that sees the last `n_his` history frames plus the current one.
pub fn teacher_targets(
    teacher: &ParamStore,
    cfg: &DetectorConfig,
    seq: &FrameSequence,
    obs: &[Observation],
    n_his: usize,
    tsa_mean: bool,
) -> Result<TeacherTargets> {
    let mut g = Graph::new();
    let mut b = Bound::frozen(teacher);
    let out = forward_teacher(&mut g, &mut b, cfg, seq, obs)?;
    targets_from_forward(&g, &out, seq, n_his, tsa_mean)
}

/// Builds [`TeacherTargets`] from an already-run teacher forward. Values are
/// copied out, so no gradient can reach the teacher through them.
pub fn targets_from_forward(g: &Graph, out: &ForwardOut, seq: &FrameSequence, n_his: usize, tsa_mean: bool) -> Result<TeacherTargets> {
    let cur = seq.current_index();
    if n_his > seq.m_his {
        return Err(DistillError::Config(format!("student history {n_his} exceeds teacher history {}", seq.m_his)));
    }
    let pv: Vec<Tensor> = out.pv.iter().map(|&v| g.value(v).clone()).collect();
    let t0 = &pv[cur - n_his..=cur];
    let fut = &pv[cur + 1..];
    Ok(TeacherTargets {
        pv: tsa_aggregate(t0, fut, tsa_mean)?,
        bev: g.value(out.fused).clone(),
        preds: out.preds.values(g),
    })
}

#[derive(Debug)]
pub struct KdTerms {
    /// Weighted sum of the enabled terms; `None` when every weight is zero.
    pub total: Option<Var>,
    pub pv: f64,
    pub bev: f64,
    pub logits: f64,
    pub assignment: Option<Assignment>,
}

/// Distillation loss for one student forward. Terms with zero weight are
/// not built at all, so a fully disabled config leaves the graph untouched.
pub fn distill_loss(g: &mut Graph, b: &mut Bound, student: &ForwardOut, targets: &TeacherTargets, cfg: &DistillConfig, mask_seed: u64) -> Result<KdTerms> {
    let mut terms = KdTerms { total: None, pv: 0.0, bev: 0.0, logits: 0.0, assignment: None };
    if cfg.is_disabled() {
        return Ok(terms);
    }
    let add = |g: &mut Graph, total: &mut Option<Var>, v: Var, w: f64| -> Result<()> {
        let wv = g.scale(v, w)?;
        *total = Some(match *total {
            Some(acc) => g.add(acc, wv)?,
            None => wv,
        });
        Ok(())
    };
    let mut total = None;

    if cfg.lambda_pv > 0.0 {
        let mut generated = Vec::with_capacity(student.pv.len());
        for (i, &p) in student.pv.iter().enumerate() {
            let s = g.shape(p).to_vec();
            let mask = random_mask(&[1, s[1], s[2]], cfg.mask_ratio_pv, mask_seed.wrapping_add(2 * i as u64))?;
            let m = g.constant(mask.values);
            let masked = g.mul(p, m)?;
            generated.push(generate_pv(g, b, masked)?);
        }
        let l = loss_pv(g, &generated, &targets.pv)?;
        terms.pv = g.value(l).item();
        add(g, &mut total, l, cfg.lambda_pv)?;
    }

    if cfg.lambda_bev > 0.0 || cfg.lambda_logits > 0.0 {
        let student_preds = student.preds.values(g);
        let cost = teacher_student_cost(&targets.preds, &student_preds, &cfg.matching_cost())?;
        let sigma = hungarian(&cost);

        if cfg.lambda_bev > 0.0 {
            let mut generated = Vec::with_capacity(student.snapshots.len());
            for (i, &f) in student.snapshots.iter().enumerate() {
                let n_q = g.shape(f)[0];
                let mask = random_mask(&[n_q, 1], cfg.mask_ratio_bev, mask_seed.wrapping_add(2 * i as u64 + 1))?;
                let m = g.constant(mask.values);
                let masked = g.mul(f, m)?;
                generated.push(generate_bev(g, b, masked)?);
            }
            let replicated = vec![targets.bev.clone(); generated.len()];
            let l = loss_bev(g, &generated, &replicated, &sigma)?;
            terms.bev = g.value(l).item();
            add(g, &mut total, l, cfg.lambda_bev)?;
        }
        if cfg.lambda_logits > 0.0 {
            let l = loss_logits(g, &student.preds, &targets.preds, &sigma, cfg)?;
            terms.logits = g.value(l).item();
            add(g, &mut total, l, cfg.lambda_logits)?;
        }
        terms.assignment = Some(sigma);
    }
    terms.total = total;
    Ok(terms)
}

#[cfg(test)]
mod tests;
