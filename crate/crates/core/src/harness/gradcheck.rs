//! The full finite-difference suite: every differentiable op, each
//! distillation term, the supervised loss and whole-model losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Result;
use crate::detector::{forward_student, forward_teacher, init_auxiliary, init_params, Bound, DetectorConfig, FusionMode, ParamStore, PredictionSet, PredictionVars};
use crate::distill::{distill_loss, generate_bev, generate_pv, loss_bev, loss_logits, loss_pv, teacher_targets, DistillConfig};
use crate::losses::{supervised_loss, GtBox, SupervisedConfig};
use crate::matching::{hungarian, CostMatrix};
use crate::tensor::gradcheck::{check_directional, check_fn, op_suite, uniform, GradCheck};
use crate::tensor::{Tensor, TensorError};
use crate::world::{generate_scene, render_sequence, simulate_frames, BevExtent, WorldConfig};

pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const DIRECTIONS: usize = 3;

fn te<E: std::fmt::Display>(e: E) -> TensorError {
    TensorError::Invalid { op: "gradcheck", msg: e.to_string() }
}

fn keep_worst(slot: &mut Option<GradCheck>, c: GradCheck) {
    if slot.as_ref().map_or(true, |w| c.rel_err > w.rel_err) {
        *slot = Some(c);
    }
}

fn small_detector(num_frames: usize, fusion: FusionMode) -> (WorldConfig, DetectorConfig) {
    let w = WorldConfig { extent: BevExtent::square(8.0), grid_h: 8, grid_w: 8, c_img: 11, num_objects: 2, ..Default::default() };
    let d = DetectorConfig {
        n_q: 3,
        c: 4,
        num_classes: 4,
        c_img: 11,
        grid_h: 8,
        grid_w: 8,
        extent: w.extent,
        dt: w.dt,
        num_frames,
        fusion,
    };
    (w, d)
}

/// Generators with biases away from zero: masked inputs are exactly zero and
/// would otherwise sit on the ReLU kink.
fn generators(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    init_auxiliary(&mut s, cfg, rng.gen());
    for name in ["gen.pv.b1", "gen.bev.b1"] {
        let shape = s.get(name).expect("generator bias").shape().to_vec();
        s.insert_auxiliary(name, uniform(rng, &shape, 0.1, 0.5));
    }
    s
}

fn random_preds(rng: &mut ChaCha8Rng, n: usize, k: usize) -> PredictionSet {
    PredictionSet { class_scores: uniform(rng, &[n, k], 0.05, 0.95), boxes: uniform(rng, &[n, 9], -1.0, 1.0) }
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize) -> crate::matching::Assignment {
    hungarian(&CostMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0)).expect("non-empty"))
}

/// Runs the operator checks and the composite-loss checks over `instances`
/// random draws each; one entry per check holding its worst instance.
pub fn full_suite(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    let mut out = op_suite(seed, instances)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let kd_cfg = DistillConfig { lambda_pv: 1.0, ..DistillConfig::default() };
    let names = ["supervised", "loss_pv", "loss_bev", "loss_logits", "loss_kd_parallel", "loss_kd_sequential", "teacher_supervised"];
    let mut worst: Vec<Option<GradCheck>> = vec![None; names.len()];

    for inst in 0..instances {
        let (_, gen_cfg) = small_detector(2, FusionMode::Parallel);
        let gens = generators(&gen_cfg, &mut rng);

        let gts: Vec<GtBox> = (0..rng.gen_range(1..=3))
            .map(|_| GtBox { params: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)), class_id: rng.gen_range(0..3) })
            .collect();
        let p = random_preds(&mut rng, 4, 3);
        let sup = SupervisedConfig::default();
        keep_worst(
            &mut worst[0],
            check_fn(names[0], |g, v| Ok(supervised_loss(g, &PredictionVars { scores: v[0], boxes: v[1] }, &gts, &sup).map_err(te)?.total), &[p.class_scores, p.boxes], H, END_TO_END_TOL)?,
        );

        // Reconstruction of two PV maps; inputs are the maps then each generator tensor.
        let pv_names = ["gen.pv.w1", "gen.pv.b1", "gen.pv.w2", "gen.pv.b2"];
        let maps: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[11, 8, 8], -1.0, 1.0)).collect();
        let masks: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[1, 8, 8], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })).collect();
        let targets: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[11, 8, 8], -1.0, 1.0)).collect();
        let mut inputs = maps.clone();
        inputs.extend(pv_names.iter().map(|n| gens.get(n).expect("generator").clone()));
        keep_worst(
            &mut worst[1],
            check_directional(
                names[1],
                |g, v| {
                    let mut b = Bound::frozen(&gens);
                    for (i, n) in pv_names.iter().enumerate() {
                        b.bind(n, v[2 + i]);
                    }
                    let mut generated = Vec::new();
                    for (i, m) in masks.iter().enumerate() {
                        let mv = g.constant(m.clone());
                        let masked = g.mul(v[i], mv)?;
                        generated.push(generate_pv(g, &mut b, masked).map_err(te)?);
                    }
                    loss_pv(g, &generated, &targets).map_err(te)
                },
                &inputs,
                DIRECTIONS,
                seed.wrapping_add(inst as u64),
                H,
                END_TO_END_TOL,
            )?,
        );

        let bev_names = ["gen.bev.w1", "gen.bev.b1", "gen.bev.w2", "gen.bev.b2"];
        let snaps: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[3, 4], -1.0, 1.0)).collect();
        let bev_target = vec![uniform(&mut rng, &[3, 4], -1.0, 1.0); 2];
        let sigma = random_assignment(&mut rng, 3);
        let mut inputs = snaps.clone();
        inputs.extend(bev_names.iter().map(|n| gens.get(n).expect("generator").clone()));
        keep_worst(
            &mut worst[2],
            check_fn(
                names[2],
                |g, v| {
                    let mut b = Bound::frozen(&gens);
                    for (i, n) in bev_names.iter().enumerate() {
                        b.bind(n, v[2 + i]);
                    }
                    let generated = (0..2).map(|i| generate_bev(g, &mut b, v[i]).map_err(te)).collect::<std::result::Result<Vec<_>, _>>()?;
                    loss_bev(g, &generated, &bev_target, &sigma).map_err(te)
                },
                &inputs,
                H,
                END_TO_END_TOL,
            )?,
        );

        let student = random_preds(&mut rng, 4, 3);
        let teacher = random_preds(&mut rng, 4, 3);
        let sigma = random_assignment(&mut rng, 4);
        let dcfg = DistillConfig { fg_threshold: 0.5, ..DistillConfig::default() };
        keep_worst(
            &mut worst[3],
            check_fn(
                names[3],
                |g, v| loss_logits(g, &PredictionVars { scores: v[0], boxes: v[1] }, &teacher, &sigma, &dcfg).map_err(te),
                &[student.class_scores, student.boxes],
                H,
                END_TO_END_TOL,
            )?,
        );

        // Whole student models on a rendered scene, against a random teacher.
        let (w, base) = small_detector(4, FusionMode::Parallel);
        let scene_seed: u64 = rng.gen_range(0..1 << 20);
        let objs = generate_scene(scene_seed, &w)?;
        let full = simulate_frames(&objs, 1, 2, w.dt, w.extent, [0.0, 0.0]);
        let obs = render_sequence(&full, &w, scene_seed);
        let teacher_params = init_params(&base, rng.gen());
        let targets = teacher_targets(&teacher_params, &base, &full, &obs, 1, false)?;
        let seq = full.online(1);
        for (slot, fusion) in [(4, FusionMode::Parallel), (5, FusionMode::Sequential)] {
            let cfg = DetectorConfig { num_frames: 2, fusion, ..base.clone() };
            let mut student = init_params(&cfg, rng.gen());
            for (n, t) in generators(&cfg, &mut rng).iter() {
                student.insert_auxiliary(n, t.clone());
            }
            student.insert("query.feats", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            let pnames: Vec<String> = student.names().map(String::from).collect();
            let inputs: Vec<Tensor> = pnames.iter().map(|n| student.get(n).expect("listed").clone()).collect();
            let mask_seed = rng.gen();
            keep_worst(
                &mut worst[slot],
                check_directional(
                    names[slot],
                    |g, v| {
                        let mut b = Bound::frozen(&student);
                        for (n, &x) in pnames.iter().zip(v) {
                            b.bind(n, x);
                        }
                        let out = forward_student(g, &mut b, &cfg, &seq, &obs[..2]).map_err(te)?;
                        let kd = distill_loss(g, &mut b, &out, &targets, &kd_cfg, mask_seed).map_err(te)?;
                        Ok(kd.total.expect("enabled"))
                    },
                    &inputs,
                    DIRECTIONS,
                    seed.wrapping_add(100 + inst as u64),
                    H,
                    END_TO_END_TOL,
                )?,
            );
        }

        let mut tp = teacher_params.clone();
        tp.insert("query.feats", uniform(&mut rng, &[3, 4], -1.0, 1.0));
        let pnames: Vec<String> = tp.names().map(String::from).collect();
        let inputs: Vec<Tensor> = pnames.iter().map(|n| tp.get(n).expect("listed").clone()).collect();
        let gts: Vec<GtBox> = full.current().iter().map(GtBox::from).collect();
        keep_worst(
            &mut worst[6],
            check_directional(
                names[6],
                |g, v| {
                    let mut b = Bound::frozen(&tp);
                    for (n, &x) in pnames.iter().zip(v) {
                        b.bind(n, x);
                    }
                    let out = forward_teacher(g, &mut b, &base, &full, &obs).map_err(te)?;
                    Ok(supervised_loss(g, &out.preds, &gts, &sup).map_err(te)?.total)
                },
                &inputs,
                DIRECTIONS,
                seed.wrapping_add(200 + inst as u64),
                H,
                END_TO_END_TOL,
            )?,
        );
    }
    out.extend(worst.into_iter().flatten());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        let checks = full_suite(3, 2).unwrap();
        assert!(checks.len() > 30);
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
        assert!(checks.iter().any(|c| c.name == "loss_kd_sequential"));
    }
}
