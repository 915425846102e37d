//! Toy sparse-query detectors.
//!
//! A fixed set of queries, each a nine-tuple box anchor plus a feature
//! vector, runs self-attention, samples the per-frame feature maps at its
//! (velocity-compensated) center, fuses the per-frame snapshots and decodes
//! class scores plus a box refinement. The same code serves the offline
//! teacher (parallel fusion over past, current and future frames) and the
//! online students (parallel over past and current frames, or a sequential
//! recurrent query state).

mod params;

pub use params::{init_auxiliary, init_params, init_queries, Bound, ParamStore};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::temporal_adaptive_mixing;
use crate::tensor::{linear, Graph, Tensor, TensorError, Var};
use crate::world::{BevExtent, FrameSequence, Observation};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("online model received {0} future frame(s)")]
    FutureFrames(usize),
    #[error("model fuses {expected} frame(s) but got {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Parallel,
    Sequential,
}

/// Fixed per-dimension multiplier on the decoder's box delta, so unit-scale
/// head outputs cover meter-scale refinements.
pub const DELTA_SCALE: [f64; 9] = [4.0, 4.0, 0.5, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0];
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n_q: usize,
    pub c: usize,
    pub num_classes: usize,
    pub c_img: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub extent: BevExtent,
    pub dt: f64,
    /// Frames fused per forward pass (teacher: past + current + future).
    pub num_frames: usize,
    pub fusion: FusionMode,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.c == 0 || self.num_classes == 0 || self.c_img == 0 || self.num_frames == 0 {
            return Err(DetectorError::Config("detector dimensions must be positive".into()));
        }
        Ok(())
    }

    fn uses_mixing(&self) -> bool {
        self.fusion == FusionMode::Parallel && self.num_frames > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// `[N_q, 9]`.
    pub boxes: Tensor,
    /// `[N_q, C]`.
    pub feats: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `[N_q, K]`, post-sigmoid.
    pub class_scores: Tensor,
    /// `[N_q, 9]`.
    pub boxes: Tensor,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.shape()[1]
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn gather(&self, perm: &[usize]) -> PredictionSet {
        let pick = |t: &Tensor| {
            let w = t.shape()[1];
            let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
            Tensor::new(vec![perm.len(), w], data).expect("finite rows")
        };
        PredictionSet {
            class_scores: pick(&self.class_scores),
            boxes: pick(&self.boxes),
        }
    }
}

/// Graph handles for a prediction set.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub scores: Var,
    pub boxes: Var,
}

impl PredictionVars {
    pub fn values(&self, g: &Graph) -> PredictionSet {
        PredictionSet {
            class_scores: g.value(self.scores).clone(),
            boxes: g.value(self.boxes).clone(),
        }
    }
}

/// Per-frame intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Neck outputs `[C_img, H, W]`, one per input frame.
    pub pv: Vec<Var>,
    /// Post-sampling query features `[N_q, C]`, one per input frame.
    pub snapshots: Vec<Var>,
    /// Query state that is decoded, `[N_q, C]`.
    pub fused: Var,
    pub preds: PredictionVars,
}

/// Detached copy of a [`ForwardOut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardValues {
    pub pv: Vec<Tensor>,
    pub snapshots: Vec<Tensor>,
    pub fused: Tensor,
    pub preds: PredictionSet,
}

impl ForwardOut {
    pub fn values(&self, g: &Graph) -> ForwardValues {
        ForwardValues {
            pv: self.pv.iter().map(|&v| g.value(v).clone()).collect(),
            snapshots: self.snapshots.iter().map(|&v| g.value(v).clone()).collect(),
            fused: g.value(self.fused).clone(),
            preds: self.preds.values(g),
        }
    }
}

/// Single-head scaled dot-product self-attention over queries with a
/// residual connection and layer norm.
pub fn self_attention_var(g: &mut Graph, b: &mut Bound, feats: Var) -> Result<Var> {
    let c = g.shape(feats)[1];
    let (wq, wk, wv) = (b.var(g, "sa.wq")?, b.var(g, "sa.wk")?, b.var(g, "sa.wv")?);
    let q = g.matmul(feats, wq)?;
    let k = g.matmul(feats, wk)?;
    let v = g.matmul(feats, wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax(logits, 1)?;
    let mixed = g.matmul(attn, v)?;
    let res = g.add(feats, mixed)?;
    Ok(g.layer_norm(res, LN_EPS)?)
}

/// Continuous grid coordinates of each query center moved by `tau` seconds
/// of its own velocity.
fn sample_coords(g: &mut Graph, cfg: &DetectorConfig, boxes: Var, tau: f64) -> Result<Var> {
    let mut xy = g.narrow(boxes, 1, 0, 2)?;
    if tau != 0.0 {
        let v = g.narrow(boxes, 1, 7, 2)?;
        let shift = g.scale(v, tau)?;
        xy = g.add(xy, shift)?;
    }
    let e = cfg.extent;
    let sx = (cfg.grid_w as f64 - 1.0) / e.width();
    let sy = (cfg.grid_h as f64 - 1.0) / e.height();
    let scale = g.constant(Tensor::new(vec![1, 2], vec![sx, sy])?);
    let offset = g.constant(Tensor::new(vec![1, 2], vec![-e.x_min * sx, -e.y_min * sy])?);
    let s = g.mul(xy, scale)?;
    Ok(g.add(s, offset)?)
}

/// Samples `pv` at the query centers, projects to C and fuses into `feats`.
pub fn sample_var(g: &mut Graph, b: &mut Bound, cfg: &DetectorConfig, pv: Var, feats: Var, boxes: Var, tau: f64) -> Result<Var> {
    let coords = sample_coords(g, cfg, boxes, tau)?;
    let sampled = g.bilinear_sample(pv, coords)?;
    let (w, bias) = (b.var(g, "sample.w")?, b.var(g, "sample.b")?);
    let proj = linear(g, sampled, w, bias)?;
    let res = g.add(feats, proj)?;
    Ok(g.layer_norm(res, LN_EPS)?)
}

pub fn decode_var(g: &mut Graph, b: &mut Bound, feats: Var, anchors: Var) -> Result<PredictionVars> {
    let (cw, cb) = (b.var(g, "dec.cls.w")?, b.var(g, "dec.cls.b")?);
    let logits = linear(g, feats, cw, cb)?;
    let scores = g.sigmoid(logits)?;
    let (bw, bb) = (b.var(g, "dec.box.w")?, b.var(g, "dec.box.b")?);
    let raw = linear(g, feats, bw, bb)?;
    let scale = g.constant(Tensor::new(vec![1, 9], DELTA_SCALE.to_vec())?);
    let delta = g.mul(raw, scale)?;
    let moved = g.add(anchors, delta)?;
    let boxes = g.wrap_yaw(moved)?;
    Ok(PredictionVars { scores, boxes })
}

fn neck(g: &mut Graph, b: &mut Bound, obs: &Observation) -> Result<Var> {
    let x = g.constant(obs.pv_feature.clone());
    let (w, bias) = (b.var(g, "neck.w")?, b.var(g, "neck.b")?);
    Ok(g.conv2d_3x3(x, w, bias)?)
}

fn check_frames(cfg: &DetectorConfig, seq: &FrameSequence, obs: &[Observation]) -> Result<()> {
    if seq.len() != cfg.num_frames || obs.len() != cfg.num_frames {
        return Err(DetectorError::FrameCount {
            expected: cfg.num_frames,
            got: seq.len().min(obs.len()),
        });
    }
    Ok(())
}

fn forward_parallel(g: &mut Graph, b: &mut Bound, cfg: &DetectorConfig, seq: &FrameSequence, obs: &[Observation]) -> Result<ForwardOut> {
    check_frames(cfg, seq, obs)?;
    let feats0 = b.var(g, "query.feats")?;
    let anchors = b.var(g, "query.boxes")?;
    let feats = self_attention_var(g, b, feats0)?;
    let mut pv = Vec::with_capacity(obs.len());
    let mut snapshots = Vec::with_capacity(obs.len());
    for (i, o) in obs.iter().enumerate() {
        let p = neck(g, b, o)?;
        let tau = seq.offset(i) as f64 * seq.dt;
        snapshots.push(sample_var(g, b, cfg, p, feats, anchors, tau)?);
        pv.push(p);
    }
    let current = snapshots[seq.current_index()];
    let fused = if cfg.uses_mixing() {
        let stack = g.stack(&snapshots)?;
        temporal_adaptive_mixing(g, b, current, stack)?
    } else {
        current
    };
    let preds = decode_var(g, b, fused, anchors)?;
    Ok(ForwardOut { pv, snapshots, fused, preds })
}

fn forward_sequential(g: &mut Graph, b: &mut Bound, cfg: &DetectorConfig, seq: &FrameSequence, obs: &[Observation]) -> Result<ForwardOut> {
    check_frames(cfg, seq, obs)?;
    let mut feats = b.var(g, "query.feats")?;
    let mut boxes = b.var(g, "query.boxes")?;
    let n = g.shape(boxes)[0];
    let mut pv = Vec::with_capacity(obs.len());
    let mut snapshots = Vec::with_capacity(obs.len());
    let mut preds = None;
    for (i, o) in obs.iter().enumerate() {
        let p = neck(g, b, o)?;
        let attended = self_attention_var(g, b, feats)?;
        feats = sample_var(g, b, cfg, p, attended, boxes, 0.0)?;
        let out = decode_var(g, b, feats, boxes)?;
        if i + 1 < obs.len() {
            // Carry the refined boxes forward one frame at their predicted velocity.
            let v = g.narrow(out.boxes, 1, 7, 2)?;
            let step = g.scale(v, seq.dt)?;
            let pad = g.constant(Tensor::zeros(&[n, 7]));
            let step = g.concat(&[step, pad], 1)?;
            boxes = g.add(out.boxes, step)?;
        }
        pv.push(p);
        snapshots.push(feats);
        preds = Some(out);
    }
    Ok(ForwardOut {
        pv,
        snapshots,
        fused: feats,
        preds: preds.expect("at least one frame"),
    })
}

/// Offline forward over every frame of `seq`, future frames included.
pub fn forward_teacher(g: &mut Graph, b: &mut Bound, cfg: &DetectorConfig, seq: &FrameSequence, obs: &[Observation]) -> Result<ForwardOut> {
    forward_parallel(g, b, cfg, seq, obs)
}

/// Online forward. Fails if `seq` contains future frames.
pub fn forward_student(g: &mut Graph, b: &mut Bound, cfg: &DetectorConfig, seq: &FrameSequence, obs: &[Observation]) -> Result<ForwardOut> {
    if seq.m_fut > 0 {
        return Err(DetectorError::FutureFrames(seq.m_fut));
    }
    match cfg.fusion {
        FusionMode::Parallel => forward_parallel(g, b, cfg, seq, obs),
        FusionMode::Sequential => forward_sequential(g, b, cfg, seq, obs),
    }
}

/// Value-level self-attention block on a standalone query set.
pub fn query_self_attention(q: &QuerySet, params: &ParamStore) -> Result<QuerySet> {
    let mut g = Graph::new();
    let mut b = Bound::frozen(params);
    let f = g.constant(q.feats.clone());
    let out = self_attention_var(&mut g, &mut b, f)?;
    Ok(QuerySet { boxes: q.boxes.clone(), feats: g.value(out).clone() })
}

/// Value-level sampling of a `[C_img, H, W]` feature map at the query centers.
pub fn sample_pv(q: &QuerySet, pv: &Tensor, params: &ParamStore, cfg: &DetectorConfig) -> Result<QuerySet> {
    let mut g = Graph::new();
    let mut b = Bound::frozen(params);
    let (f, bx, p) = (g.constant(q.feats.clone()), g.constant(q.boxes.clone()), g.constant(pv.clone()));
    let out = sample_var(&mut g, &mut b, cfg, p, f, bx, 0.0)?;
    Ok(QuerySet { boxes: q.boxes.clone(), feats: g.value(out).clone() })
}

pub fn decode(q: &QuerySet, params: &ParamStore) -> Result<PredictionSet> {
    let mut g = Graph::new();
    let mut b = Bound::frozen(params);
    let (f, bx) = (g.constant(q.feats.clone()), g.constant(q.boxes.clone()));
    Ok(decode_var(&mut g, &mut b, f, bx)?.values(&g))
}

/// Inference on a frozen model: builds a constant-only graph and returns the
/// decoded predictions.
pub fn predict(params: &ParamStore, cfg: &DetectorConfig, seq: &FrameSequence, obs: &[Observation], online: bool) -> Result<PredictionSet> {
    let mut g = Graph::new();
    let mut b = Bound::frozen(params);
    let out = if online {
        forward_student(&mut g, &mut b, cfg, seq, obs)?
    } else {
        forward_teacher(&mut g, &mut b, cfg, seq, obs)?
    };
    Ok(out.preds.values(&g))
}
