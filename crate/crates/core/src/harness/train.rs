//! Training loops for the teacher and the students.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{OptimConfig, RunConfig, Seeds};
use super::Result;
use crate::detector::{forward_student, forward_teacher, init_auxiliary, init_params, Bound, ParamStore};
use crate::distill::{distill_loss, teacher_targets, TeacherTargets};
use crate::losses::{supervised_loss, GtBox};
use crate::tensor::{Graph, Tensor, Var};
use crate::world::{generate_scene, render_sequence, simulate_frames, FrameSequence, Observation, SceneObject};

/// One rendered scene: the full teacher sequence, its observations and the
/// current-frame ground truth.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub seed: u64,
    pub full: FrameSequence,
    pub obs: Vec<Observation>,
    pub gts: Vec<GtBox>,
}

impl SceneData {
    pub fn new(seed: u64, cfg: &RunConfig) -> Result<Self> {
        Ok(Self::from_objects(&generate_scene(seed, &cfg.world)?, seed, cfg))
    }

    /// Renders a given current-frame object list; `seed` drives the noise.
    pub fn from_objects(objs: &[SceneObject], seed: u64, cfg: &RunConfig) -> Self {
        let w = &cfg.world;
        let full = simulate_frames(objs, cfg.m_his, cfg.m_fut, w.dt, w.extent, w.ego_velocity);
        let obs = render_sequence(&full, w, seed);
        let gts = full.current().iter().map(GtBox::from).collect();
        SceneData { seed, full, obs, gts }
    }

    /// The student's view: `n_his` history frames plus the current one.
    pub fn online(&self, n_his: usize) -> (FrameSequence, &[Observation]) {
        let seq = self.full.online(n_his);
        let cur = self.full.current_index();
        (seq, &self.obs[cur - n_his.min(cur)..=cur])
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SceneData>,
    pub eval: Vec<SceneData>,
}

impl Dataset {
    /// Training and evaluation scenes from the config's world and eval streams.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let s = Seeds::derive(cfg.seed);
        let make = |stream: u64, n: usize| (0..n).map(|i| SceneData::new(Seeds::item(stream, i as u64), cfg)).collect::<Result<Vec<_>>>();
        Ok(Dataset { train: make(s.world, cfg.train_scenes)?, eval: make(s.eval, cfg.eval_scenes)? })
    }
}

/// Per-step record; loss components are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub sup_cls: f64,
    pub sup_box: f64,
    pub kd_pv: f64,
    pub kd_bev: f64,
    pub kd_logits: f64,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,lr,total,sup_cls,sup_box,kd_pv,kd_bev,kd_logits,grad_norm";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.step, self.lr, self.total, self.sup_cls, self.sup_box, self.kd_pv, self.kd_bev, self.kd_logits, self.grad_norm
        )
    }
}

/// SGD with heavy-ball momentum. Parameters without a gradient this step are
/// left untouched, velocity included.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, momentum: f64) {
        for (name, g) in grads {
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = momentum * *vi + gi;
            }
            let p = store.get_mut(name).expect("gradient for a stored parameter");
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
    }
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: Option<f64>) -> f64 {
    let norm = grads.values().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    if let Some(m) = max_norm {
        if norm > m {
            let s = m / norm;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Cycles through shuffled epochs of `n` indices.
struct Order {
    rng: ChaCha8Rng,
    pending: Vec<usize>,
    n: usize,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        Order { rng: ChaCha8Rng::seed_from_u64(seed), pending: Vec::new(), n }
    }

    fn next(&mut self) -> usize {
        if self.pending.is_empty() {
            self.pending = (0..self.n).collect();
            self.pending.shuffle(&mut self.rng);
        }
        self.pending.pop().expect("non-empty epoch")
    }
}

/// What a per-scene loss builder returns: the scalar to minimise and its
/// logged components.
pub(crate) struct SceneLoss {
    pub total: Var,
    pub log: StepLog,
}

/// Generic loop: each step draws `batch` scenes, builds one graph per scene,
/// averages parameter gradients, clips and applies SGD.
pub(crate) fn train_loop<F>(store: &mut ParamStore, optim: &OptimConfig, n_scenes: usize, order_seed: u64, mut build: F) -> Result<Vec<StepLog>>
where
    F: FnMut(&mut Graph, &mut Bound, usize, u64) -> Result<SceneLoss>,
{
    let mut sgd = Sgd::default();
    let mut order = Order::new(n_scenes, order_seed);
    let mut logs = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut log = StepLog { step, lr: optim.lr_at(step), ..Default::default() };
        let inv = 1.0 / optim.batch as f64;
        for slot in 0..optim.batch {
            let scene = order.next();
            let mut g = Graph::new();
            let mut b = Bound::trainable(store);
            let out = build(&mut g, &mut b, scene, (step * optim.batch + slot) as u64)?;
            let vars = b.vars().clone();
            let gr = g.backward(out.total)?;
            for (name, v) in vars {
                if let Some(t) = gr.get(v) {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, x)| *a += inv * x),
                        None => {
                            grads.insert(name, t.map(|x| inv * x));
                        }
                    }
                }
            }
            let l = out.log;
            log.total += inv * l.total;
            log.sup_cls += inv * l.sup_cls;
            log.sup_box += inv * l.sup_box;
            log.kd_pv += inv * l.kd_pv;
            log.kd_bev += inv * l.kd_bev;
            log.kd_logits += inv * l.kd_logits;
        }
        log.grad_norm = clip(&mut grads, optim.clip_norm);
        sgd.step(store, &grads, log.lr, optim.momentum);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParamStore,
    pub log: Vec<StepLog>,
}

/// Supervised training of the offline teacher on full sequences.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    let seeds = Seeds::derive(cfg.seed);
    let dcfg = cfg.teacher_detector();
    let mut params = init_params(&dcfg, seeds.teacher_init);
    let log = train_loop(&mut params, &cfg.teacher_optim, data.train.len(), seeds.teacher_order, |g, b, i, _| {
        let s = &data.train[i];
        let out = forward_teacher(g, b, &dcfg, &s.full, &s.obs)?;
        let sup = supervised_loss(g, &out.preds, &s.gts, &cfg.supervised)?;
        let log = StepLog { total: g.value(sup.total).item(), sup_cls: sup.cls, sup_box: sup.bbox, ..Default::default() };
        Ok(SceneLoss { total: sup.total, log })
    })?;
    Ok(Trained { params, log })
}

/// Frozen-teacher targets for every training scene, computed once.
pub fn cache_targets(cfg: &RunConfig, teacher: &ParamStore, data: &Dataset) -> Result<Vec<TeacherTargets>> {
    let dcfg = cfg.teacher_detector();
    data.train
        .iter()
        .map(|s| Ok(teacher_targets(teacher, &dcfg, &s.full, &s.obs, cfg.n_his, cfg.distill.tsa_mean)?))
        .collect()
}

/// Student training with supervised loss plus, when enabled and targets are
/// given, the distillation loss. With every KD weight zero this is exactly
/// the baseline. The returned parameters exclude the auxiliary generators.
pub fn train_student(cfg: &RunConfig, data: &Dataset, targets: Option<&[TeacherTargets]>) -> Result<Trained> {
    cfg.validate()?;
    let seeds = Seeds::derive(cfg.seed);
    let dcfg = cfg.student_detector();
    let kd = !cfg.distill.is_disabled();
    if kd && targets.is_none() {
        return Err(super::HarnessError::MissingTeacher);
    }
    let mut params = init_params(&dcfg, seeds.student_init);
    if kd {
        init_auxiliary(&mut params, &dcfg, seeds.auxiliary);
    }
    let log = train_loop(&mut params, &cfg.student_optim, data.train.len(), seeds.student_order, |g, b, i, draw| {
        let s = &data.train[i];
        let (seq, obs) = s.online(cfg.n_his);
        let out = forward_student(g, b, &dcfg, &seq, obs)?;
        let sup = supervised_loss(g, &out.preds, &s.gts, &cfg.supervised)?;
        let mut log = StepLog { sup_cls: sup.cls, sup_box: sup.bbox, ..Default::default() };
        let mut total = sup.total;
        if kd {
            let t = &targets.expect("checked above")[i];
            let terms = distill_loss(g, b, &out, t, &cfg.distill, Seeds::item(seeds.mask, draw))?;
            log.kd_pv = terms.pv;
            log.kd_bev = terms.bev;
            log.kd_logits = terms.logits;
            if let Some(k) = terms.total {
                total = g.add(total, k)?;
            }
        }
        log.total = g.value(total).item();
        Ok(SceneLoss { total, log })
    })?;
    Ok(Trained { params: params.strip_auxiliary(), log })
}
