use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DetectorConfig, DetectorError, QuerySet, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::world::BevExtent;

/// Named parameter tensors. Names in the auxiliary set exist only for
/// distillation and are never read on the inference path; every read is
/// recorded so that contract can be checked.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    auxiliary: BTreeSet<String>,
    accessed: RefCell<BTreeSet<String>>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors && self.auxiliary == other.auxiliary
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.auxiliary.remove(name);
        self.tensors.insert(name.to_string(), t);
    }

    pub fn insert_auxiliary(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
        self.auxiliary.insert(name.to_string());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let t = self.tensors.get(name).ok_or_else(|| DetectorError::MissingParam(name.to_string()))?;
        self.accessed.borrow_mut().insert(name.to_string());
        Ok(t)
    }

    /// Mutable access without tracing (optimizer updates).
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_auxiliary(&self, name: &str) -> bool {
        self.auxiliary.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn auxiliary_names(&self) -> impl Iterator<Item = &str> {
        self.auxiliary.iter().map(String::as_str)
    }

    /// Copy with every auxiliary tensor removed.
    pub fn strip_auxiliary(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| !self.auxiliary.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            auxiliary: BTreeSet::new(),
            accessed: RefCell::default(),
        }
    }

    /// Names read through [`ParamStore::get`] since the last reset.
    pub fn accessed(&self) -> BTreeSet<String> {
        self.accessed.borrow().clone()
    }

    pub fn reset_access_trace(&self) {
        self.accessed.borrow_mut().clear();
    }
}

/// Lazily binds store tensors into a graph, either as trainable leaves or as
/// constants (frozen models). Each name is bound at most once per graph.
pub struct Bound<'s> {
    store: &'s ParamStore,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'s> Bound<'s> {
    pub fn trainable(store: &'s ParamStore) -> Self {
        Bound { store, trainable: true, vars: BTreeMap::new() }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Bound { store, trainable: false, vars: BTreeMap::new() }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes `name` to an existing graph value, overriding the store.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Every name bound so far with its graph handle.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Mean class template used for the initial query boxes.
const ANCHOR_SIZE: [f64; 3] = [1.5, 3.8, 2.0];

/// Query anchors on a near-square grid over the extent, jittered by up to a
/// quarter cell, with features drawn from N(0, 0.02).
pub fn init_queries(n_q: usize, c: usize, extent: BevExtent, seed: u64) -> QuerySet {
    assert!(n_q > 0 && c > 0, "init_queries needs n_q, c > 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (n_q as f64).sqrt().ceil() as usize;
    let rows = n_q.div_ceil(cols);
    let (cw, ch) = (extent.width() / cols as f64, extent.height() / rows as f64);
    let mut boxes = Vec::with_capacity(n_q * 9);
    for i in 0..n_q {
        let (r, col) = (i / cols, i % cols);
        let x = extent.x_min + (col as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * cw;
        let y = extent.y_min + (r as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * ch;
        let [w, l, h] = ANCHOR_SIZE;
        boxes.extend([x.clamp(extent.x_min, extent.x_max), y.clamp(extent.y_min, extent.y_max), h / 2.0, w, l, h, 0.0, 0.0, 0.0]);
    }
    QuerySet {
        boxes: Tensor::from_parts(vec![n_q, 9], boxes),
        feats: normal(&mut rng, &[n_q, c], 0.02),
    }
}

fn eye_flat(n: usize) -> Tensor {
    Tensor::eye(n).reshape(&[n * n]).expect("square")
}

fn conv_near_identity(rng: &mut ChaCha8Rng, c: usize, std: f64) -> Tensor {
    let mut k = normal(rng, &[c, c, 3, 3], std);
    for i in 0..c {
        let at = k.offset(&[i, i, 1, 1]);
        k.data_mut()[at] += 1.0;
    }
    k
}

/// Inference-path parameters for a detector fusing `cfg.num_frames` frames.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, ci, k, m) = (cfg.c, cfg.c_img, cfg.num_classes, cfg.num_frames);
    let q = init_queries(cfg.n_q, c, cfg.extent, rng.gen());
    let mut s = ParamStore::new();
    s.insert("query.boxes", q.boxes);
    s.insert("query.feats", q.feats);
    s.insert("neck.w", conv_near_identity(&mut rng, ci, 0.02));
    s.insert("neck.b", Tensor::zeros(&[ci]));
    let att = 1.0 / (c as f64).sqrt();
    s.insert("sa.wq", normal(&mut rng, &[c, c], att));
    s.insert("sa.wk", normal(&mut rng, &[c, c], att));
    s.insert("sa.wv", normal(&mut rng, &[c, c], att));
    s.insert("sample.w", normal(&mut rng, &[ci, c], 1.0 / (ci as f64).sqrt()));
    s.insert("sample.b", Tensor::zeros(&[c]));
    if cfg.uses_mixing() {
        s.insert("mix.chan.w", normal(&mut rng, &[c, c * c], 0.01));
        s.insert("mix.chan.b", eye_flat(c));
        s.insert("mix.point.w", normal(&mut rng, &[c, m * m], 0.01));
        s.insert("mix.point.b", eye_flat(m));
        s.insert("mix.out.w", normal(&mut rng, &[m * c, c], 1.0 / ((m * c) as f64).sqrt()));
        s.insert("mix.out.b", Tensor::zeros(&[c]));
    }
    s.insert("dec.cls.w", normal(&mut rng, &[c, k], 0.01));
    s.insert("dec.cls.b", Tensor::full(&[k], -2.0));
    s.insert("dec.box.w", normal(&mut rng, &[c, 9], 0.01));
    s.insert("dec.box.b", Tensor::zeros(&[9]));
    s
}

/// Adds the distillation-only generators to `store`.
pub fn init_auxiliary(store: &mut ParamStore, cfg: &DetectorConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, ci) = (cfg.c, cfg.c_img);
    let conv = 1.0 / ((ci * 9) as f64).sqrt();
    store.insert_auxiliary("gen.pv.w1", normal(&mut rng, &[ci, ci, 3, 3], conv));
    store.insert_auxiliary("gen.pv.b1", Tensor::zeros(&[ci]));
    store.insert_auxiliary("gen.pv.w2", normal(&mut rng, &[ci, ci, 3, 3], conv));
    store.insert_auxiliary("gen.pv.b2", Tensor::zeros(&[ci]));
    store.insert_auxiliary("gen.bev.w1", normal(&mut rng, &[c, 2 * c], 1.0 / (c as f64).sqrt()));
    store.insert_auxiliary("gen.bev.b1", Tensor::zeros(&[2 * c]));
    store.insert_auxiliary("gen.bev.w2", normal(&mut rng, &[2 * c, c], 1.0 / ((2 * c) as f64).sqrt()));
    store.insert_auxiliary("gen.bev.b2", Tensor::zeros(&[c]));
}
