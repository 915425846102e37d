//! Synthetic temporal scenes: constant-velocity objects in a planar extent and
//! a rendered multi-channel grid standing in for image features.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("empty or inverted extent {0:?}")]
    Extent([f64; 4]),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("scene parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Axis-aligned planar region `(x_min, x_max, y_min, y_max)` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevExtent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BevExtent {
    pub fn square(half: f64) -> Self {
        BevExtent {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(WorldError::Extent([self.x_min, self.x_max, self.y_min, self.y_max]))
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Continuous grid coordinates `(col, row)` of a world point; the extent
    /// corners land exactly on the corner nodes.
    pub fn to_grid(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let u = (x - self.x_min) / self.width() * (w as f64 - 1.0);
        let v = (y - self.y_min) / self.height() * (h as f64 - 1.0);
        (u, v)
    }

    pub fn from_grid(&self, u: f64, v: f64, h: usize, w: usize) -> (f64, f64) {
        let x = self.x_min + u / (w as f64 - 1.0) * self.width();
        let y = self.y_min + v / (h as f64 - 1.0) * self.height();
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: [f64; 3],
    /// `(w, l, h)`: width across, length along the heading, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub object_id: usize,
}

impl SceneObject {
    /// `(x, y, z, w, l, h, yaw, vx, vy)`.
    pub fn box_params(&self) -> [f64; 9] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        let [vx, vy] = self.velocity;
        [x, y, z, w, l, h, self.yaw, vx, vy]
    }
}

/// Nominal `(w, l, h)` per class: car, truck, pedestrian, cyclist. Classes past
/// the table reuse it cyclically.
pub const SIZE_TEMPLATES: [[f64; 3]; 4] = [[1.9, 4.6, 1.7], [2.5, 8.0, 3.0], [0.8, 0.8, 1.8], [0.8, 1.9, 1.5]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub extent: BevExtent,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_img: usize,
    pub num_objects: usize,
    pub v_max: f64,
    pub dt: f64,
    pub noise_std: f64,
    /// Gaussian footprint sigma as a fraction of object length / width.
    pub sigma_scale: f64,
    /// Lower bound on the footprint sigma, in grid cells.
    pub sigma_floor_cells: f64,
    /// Fraction of an object's angular interval that must be covered by a
    /// nearer object for it to count as occluded.
    pub occlusion_overlap: f64,
    pub occlusion_factor: f64,
    /// Constant ego velocity; frames are expressed in the moving ego frame.
    pub ego_velocity: [f64; 2],
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_classes: 4,
            extent: BevExtent::square(20.0),
            grid_h: 32,
            grid_w: 32,
            c_img: 16,
            num_objects: 6,
            v_max: 4.0,
            dt: 0.5,
            noise_std: 0.05,
            sigma_scale: 0.5,
            sigma_floor_cells: 1.0,
            occlusion_overlap: 0.5,
            occlusion_factor: 0.3,
            ego_velocity: [0.0, 0.0],
        }
    }
}

impl WorldConfig {
    /// Number of leading channels with fixed meaning; the rest carry a class signature.
    pub fn semantic_channels(&self) -> usize {
        self.num_classes + 7
    }

    pub fn validate(&self) -> Result<()> {
        self.extent.validate()?;
        let bad = |m: &str| Err(WorldError::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.grid_h < 8 || self.grid_w < 8 {
            return bad("grid must be at least 8x8");
        }
        if self.c_img < self.semantic_channels() {
            return bad("c_img must be at least num_classes + 7");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.v_max >= 0.0) || !(self.noise_std >= 0.0) || !(self.sigma_scale > 0.0) {
            return bad("v_max, noise_std must be >= 0 and sigma_scale > 0");
        }
        if !(0.0..=1.0).contains(&self.occlusion_factor) || !(0.0..=1.0).contains(&self.occlusion_overlap) {
            return bad("occlusion factor and overlap must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Objects uniform over the extent, headings uniform, speeds uniform in
/// `[0, v_max]`, yaw aligned with the heading, sizes within 10% of the class
/// template.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<Vec<SceneObject>> {
    cfg.extent.validate()?;
    if cfg.num_classes == 0 {
        return Err(WorldError::Config("num_classes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = cfg.extent;
    Ok((0..cfg.num_objects)
        .map(|id| {
            let x = rng.gen_range(e.x_min..=e.x_max);
            let y = rng.gen_range(e.y_min..=e.y_max);
            let class_id = rng.gen_range(0..cfg.num_classes);
            let t = SIZE_TEMPLATES[class_id % SIZE_TEMPLATES.len()];
            let size = t.map(|s| s * rng.gen_range(0.9..1.1));
            let heading = rng.gen_range(-PI..PI);
            let speed = rng.gen_range(0.0..=cfg.v_max);
            SceneObject {
                center: [x, y, size[2] / 2.0],
                size,
                yaw: heading,
                velocity: [speed * heading.cos(), speed * heading.sin()],
                class_id,
                object_id: id,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Vec<SceneObject>>,
    pub m_his: usize,
    pub m_fut: usize,
    pub dt: f64,
    pub extent: BevExtent,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn current_index(&self) -> usize {
        self.m_his
    }

    pub fn current(&self) -> &[SceneObject] {
        &self.frames[self.m_his]
    }

    /// Signed frame offset of index `i` relative to the current frame.
    pub fn offset(&self, i: usize) -> i64 {
        i as i64 - self.m_his as i64
    }

    /// The online view: the last `n_his` history frames plus the current one.
    pub fn online(&self, n_his: usize) -> FrameSequence {
        let n_his = n_his.min(self.m_his);
        FrameSequence {
            frames: self.frames[self.m_his - n_his..=self.m_his].to_vec(),
            m_his: n_his,
            m_fut: 0,
            dt: self.dt,
            extent: self.extent,
        }
    }
}

/// Constant-velocity propagation around the current frame. With a nonzero
/// `ego_velocity` positions are expressed relative to the moving ego origin.
pub fn simulate_frames(scene: &[SceneObject], m_his: usize, m_fut: usize, dt: f64, extent: BevExtent, ego_velocity: [f64; 2]) -> FrameSequence {
    let frames = (0..m_his + 1 + m_fut)
        .map(|i| {
            let tau = (i as f64 - m_his as f64) * dt;
            scene
                .iter()
                .filter_map(|o| {
                    let x = o.center[0] + (o.velocity[0] - ego_velocity[0]) * tau;
                    let y = o.center[1] + (o.velocity[1] - ego_velocity[1]) * tau;
                    extent.contains(x, y).then(|| SceneObject {
                        center: [x, y, o.center[2]],
                        ..*o
                    })
                })
                .collect()
        })
        .collect();
    FrameSequence {
        frames,
        m_his,
        m_fut,
        dt,
        extent,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[C_img, H, W]`.
    pub pv_feature: Tensor,
    /// Visibility per object, in the frame's object order.
    pub visible: Vec<bool>,
}

/// Fixed per-class signature for the channels past the semantic block.
fn class_signature(class_id: usize, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5157_0000 + class_id as u64);
    (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Angular interval `(center, half_width)` of an object seen from the origin.
fn angular_interval(o: &SceneObject) -> (f64, f64) {
    let (x, y) = (o.center[0], o.center[1]);
    let r = x.hypot(y);
    let radius = 0.5 * o.size[0].hypot(o.size[1]);
    let half = if r <= radius { PI } else { (radius / r).asin() };
    (y.atan2(x), half)
}

/// Length of the intersection of two angular intervals on the circle.
fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d = crate::tensor::wrap_angle(a.0 - b.0).abs();
    let lo = (-a.1).max(d - b.1);
    let hi = a.1.min(d + b.1);
    (hi - lo).clamp(0.0, 2.0 * a.1)
}

/// Per-object visibility: an object is hidden when some strictly nearer
/// object covers at least `occlusion_overlap` of its angular interval.
pub fn occlusion_flags(frame: &[SceneObject], overlap: f64) -> Vec<bool> {
    let ranges: Vec<f64> = frame.iter().map(|o| o.center[0].hypot(o.center[1])).collect();
    let intervals: Vec<(f64, f64)> = frame.iter().map(angular_interval).collect();
    (0..frame.len())
        .map(|a| {
            !(0..frame.len()).any(|b| {
                ranges[b] < ranges[a] && interval_overlap(intervals[a], intervals[b]) >= overlap * 2.0 * intervals[a].1
            })
        })
        .collect()
}

/// Footprint sigmas `(along, across)` in meters.
pub fn footprint_sigma(o: &SceneObject, cfg: &WorldConfig) -> (f64, f64) {
    let cell = (cfg.extent.width() / (cfg.grid_w as f64 - 1.0)).max(cfg.extent.height() / (cfg.grid_h as f64 - 1.0));
    let floor = cfg.sigma_floor_cells * cell;
    ((cfg.sigma_scale * o.size[1]).max(floor), (cfg.sigma_scale * o.size[0]).max(floor))
}

/// Renders one frame. Channel layout, with `K = num_classes` and `g` the
/// object's footprint weight at the pixel:
/// `0..K` class heatmaps, `K, K+1` center offset / 5 m, `K+2, K+3` cos / sin
/// yaw, `K+4..K+7` size / 5 m, remaining channels a fixed class signature.
/// Every non-heatmap channel is multiplied by `g`.
pub fn render_observation(frame: &[SceneObject], cfg: &WorldConfig, seed: u64) -> Observation {
    let (k, h, w, c) = (cfg.num_classes, cfg.grid_h, cfg.grid_w, cfg.c_img);
    let extra = c.saturating_sub(k + 7);
    let visible = occlusion_flags(frame, cfg.occlusion_overlap);
    let mut data = vec![0.0; c * h * w];
    let plane = h * w;

    for (o, &vis) in frame.iter().zip(&visible) {
        let atten = if vis { 1.0 } else { cfg.occlusion_factor };
        let (sa, sc) = footprint_sigma(o, cfg);
        let (cy, sy) = (o.yaw.cos(), o.yaw.sin());
        let sig = class_signature(o.class_id, extra);
        let reach = 3.0 * sa.max(sc);
        let (u0, v0) = cfg.extent.to_grid(o.center[0] - reach, o.center[1] - reach, h, w);
        let (u1, v1) = cfg.extent.to_grid(o.center[0] + reach, o.center[1] + reach, h, w);
        let cols = (u0.floor().max(0.0) as usize)..=(u1.ceil().min(w as f64 - 1.0).max(0.0) as usize);
        let rows = (v0.floor().max(0.0) as usize)..=(v1.ceil().min(h as f64 - 1.0).max(0.0) as usize);
        for r in rows {
            for col in cols.clone() {
                let (px, py) = cfg.extent.from_grid(col as f64, r as f64, h, w);
                let (dx, dy) = (o.center[0] - px, o.center[1] - py);
                let along = dx * cy + dy * sy;
                let across = -dx * sy + dy * cy;
                let g = atten * (-0.5 * ((along / sa).powi(2) + (across / sc).powi(2))).exp();
                let px_at = r * w + col;
                let mut put = |ch: usize, v: f64| data[ch * plane + px_at] += g * v;
                put(o.class_id, 1.0);
                put(k, dx / 5.0);
                put(k + 1, dy / 5.0);
                put(k + 2, cy);
                put(k + 3, sy);
                for (d, &s) in o.size.iter().enumerate() {
                    put(k + 4 + d, s / 5.0);
                }
                for (e, &s) in sig.iter().enumerate() {
                    put(k + 7 + e, s);
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    Observation {
        pv_feature: Tensor::from_parts(vec![c, h, w], data),
        visible,
    }
}

/// Renders every frame of a sequence with per-frame seeds derived from `seed`.
pub fn render_sequence(seq: &FrameSequence, cfg: &WorldConfig, seed: u64) -> Vec<Observation> {
    seq.frames
        .iter()
        .enumerate()
        .map(|(i, f)| render_observation(f, cfg, seed.wrapping_mul(31).wrapping_add(i as u64 * 0x9E37_79B9)))
        .collect()
}

const SCENE_HEADER: &str = "# ftkd scene v1";

/// One `object` record per line; floats are written in shortest round-trip form.
pub fn dump_scene(objects: &[SceneObject]) -> String {
    let mut out = String::from(SCENE_HEADER);
    out.push('\n');
    for o in objects {
        let [x, y, z] = o.center;
        let [w, l, h] = o.size;
        let [vx, vy] = o.velocity;
        let _ = writeln!(
            out,
            "object id={} class={} center={x},{y},{z} size={w},{l},{h} yaw={} velocity={vx},{vy}",
            o.object_id, o.class_id, o.yaw
        );
    }
    out
}

pub fn load_scene(text: &str) -> Result<Vec<SceneObject>> {
    let mut objects = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| WorldError::Parse { line: line_no, msg };
        let mut fields = line.split_whitespace();
        if fields.next() != Some("object") {
            return Err(err("expected an `object` record".into()));
        }
        let mut id = None;
        let mut class = None;
        let mut center = None;
        let mut size = None;
        let mut yaw = None;
        let mut vel = None;
        for f in fields {
            let (key, val) = f.split_once('=').ok_or_else(|| err(format!("malformed field `{f}`")))?;
            let floats = |want: usize| -> Result<Vec<f64>> {
                let v: std::result::Result<Vec<f64>, _> = val.split(',').map(str::parse::<f64>).collect();
                match v {
                    Ok(v) if v.len() == want && v.iter().all(|x| x.is_finite()) => Ok(v),
                    _ => Err(err(format!("`{key}` needs {want} finite numbers"))),
                }
            };
            match key {
                "id" => id = Some(val.parse::<usize>().map_err(|e| err(e.to_string()))?),
                "class" => class = Some(val.parse::<usize>().map_err(|e| err(e.to_string()))?),
                "center" => center = Some(floats(3)?),
                "size" => size = Some(floats(3)?),
                "yaw" => yaw = Some(floats(1)?[0]),
                "velocity" => vel = Some(floats(2)?),
                _ => return Err(err(format!("unknown field `{key}`"))),
            }
        }
        let missing = |name: &str| err(format!("missing `{name}`"));
        let center = center.ok_or_else(|| missing("center"))?;
        let size = size.ok_or_else(|| missing("size"))?;
        if size.iter().any(|&s| s <= 0.0) {
            return Err(err("sizes must be positive".into()));
        }
        let vel = vel.ok_or_else(|| missing("velocity"))?;
        objects.push(SceneObject {
            center: [center[0], center[1], center[2]],
            size: [size[0], size[1], size[2]],
            yaw: yaw.ok_or_else(|| missing("yaw"))?,
            velocity: [vel[0], vel[1]],
            class_id: class.ok_or_else(|| missing("class"))?,
            object_id: id.ok_or_else(|| missing("id"))?,
        });
    }
    Ok(objects)
}
