use std::time::{Duration, Instant};

use super::config::RunConfig;
use super::train::SceneData;
use super::Result;
use crate::detector::{predict, DetectorConfig, ParamStore, PredictionSet};
use crate::metrics::{detections_from, evaluate, EvalReport};

/// Which model a checkpoint holds, and therefore which frames it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

pub fn detector_for(cfg: &RunConfig, role: Role) -> DetectorConfig {
    match role {
        Role::Teacher => cfg.teacher_detector(),
        Role::Student => cfg.student_detector(),
    }
}

/// Raw predictions per scene.
pub fn predict_scenes(params: &ParamStore, cfg: &RunConfig, role: Role, scenes: &[SceneData]) -> Result<Vec<PredictionSet>> {
    let dcfg = detector_for(cfg, role);
    scenes
        .iter()
        .map(|s| {
            Ok(match role {
                Role::Teacher => predict(params, &dcfg, &s.full, &s.obs, false)?,
                Role::Student => {
                    let (seq, obs) = s.online(cfg.n_his);
                    predict(params, &dcfg, &seq, obs, true)?
                }
            })
        })
        .collect()
}

pub fn evaluate_model(params: &ParamStore, cfg: &RunConfig, role: Role, scenes: &[SceneData]) -> Result<EvalReport> {
    let preds = predict_scenes(params, cfg, role, scenes)?;
    let dets: Vec<_> = preds.iter().map(detections_from).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    Ok(evaluate(&dets, &gts, cfg.world.num_classes))
}

/// Inference wall time over `scenes`: each scene's fastest of `repeats`
/// runs, summed. Per-scene minima shrug off scheduler noise that a single
/// timed pass over every scene would absorb.
pub fn time_inference(params: &ParamStore, cfg: &RunConfig, role: Role, scenes: &[SceneData], repeats: usize) -> Result<Duration> {
    let mut best = vec![Duration::MAX; scenes.len()];
    for _ in 0..repeats.max(1) {
        for (b, s) in best.iter_mut().zip(scenes) {
            let t = Instant::now();
            let p = predict_scenes(params, cfg, role, std::slice::from_ref(s))?;
            std::hint::black_box(&p);
            *b = (*b).min(t.elapsed());
        }
    }
    Ok(best.into_iter().sum())
}

/// [`time_inference`] for two models at once, alternating which runs first
/// on every scene so both see the same machine state.
pub fn time_inference_paired(
    a: &ParamStore,
    b: &ParamStore,
    cfg: &RunConfig,
    role: Role,
    scenes: &[SceneData],
    repeats: usize,
) -> Result<(Duration, Duration)> {
    let mut best = vec![[Duration::MAX; 2]; scenes.len()];
    for r in 0..repeats.max(1) {
        for (bs, s) in best.iter_mut().zip(scenes) {
            for k in [r % 2, 1 - r % 2] {
                let t = Instant::now();
                let p = predict_scenes([a, b][k], cfg, role, std::slice::from_ref(s))?;
                std::hint::black_box(&p);
                bs[k] = bs[k].min(t.elapsed());
            }
        }
    }
    Ok((best.iter().map(|x| x[0]).sum(), best.iter().map(|x| x[1]).sum()))
}
