use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::detector::{forward_student, init_auxiliary, init_params, FusionMode};
use crate::losses::focal_elem;
use crate::tensor::gradcheck::{check_fn, project, uniform};
use crate::world::{generate_scene, render_sequence, simulate_frames, BevExtent, WorldConfig};

fn to_tensor_err(e: DistillError) -> TensorError {
    match e {
        DistillError::Tensor(t) => t,
        DistillError::Detector(DetectorError::Tensor(t)) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn kd_weighting() {
    let cfg = DistillConfig::default();
    assert!((loss_kd(1.0, 1.0, 1.0, &cfg) - 17.001).abs() < 1e-12);
    let zero = DistillConfig { lambda_pv: 0.0, lambda_bev: 0.0, lambda_logits: 0.0, ..cfg.clone() };
    assert_eq!(loss_kd(3.0, 5.0, 7.0, &zero), 0.0);
    let a = loss_kd(2.0, 0.5, 3.0, &cfg);
    let b = loss_kd(4.0, 1.0, 6.0, &cfg);
    assert!((b - 2.0 * a).abs() < 1e-12);
    assert!((loss_kd(1.0, 0.0, 0.0, &cfg) - 1e-3).abs() < 1e-15);
}

#[test]
fn mask_statistics_and_determinism() {
    assert!(random_mask(&[100], 0.0, 1).unwrap().values.data().iter().all(|&v| v == 1.0));
    for ratio in [0.4, 0.5, 0.6, 0.75, 0.9] {
        let m = random_mask(&[100_000], ratio, 17).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!((m.kept_fraction() - (1.0 - ratio)).abs() < 0.02, "{ratio}: {}", m.kept_fraction());
    }
    assert_eq!(random_mask(&[4, 7], 0.5, 3).unwrap(), random_mask(&[4, 7], 0.5, 3).unwrap());
    assert!(random_mask(&[4], 1.0, 0).is_err());
}

#[test]
fn tsa_self_attention_is_convex_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = uniform(&mut rng, &[3, 4, 5], -2.0, 2.0);
    let out = tsa_aggregate(&[f.clone()], &[f.clone()], false).unwrap();
    for ch in 0..3 {
        let plane = &f.data()[ch * 20..(ch + 1) * 20];
        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for &v in &out[0].data()[ch * 20..(ch + 1) * 20] {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
    // Constant keys: weights sum to one, so the output equals the constant.
    let k = Tensor::full(&[3, 4, 5], 0.7);
    let out = tsa_aggregate(&[f], &[k], false).unwrap();
    assert!(out[0].data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn tsa_sum_over_future_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[2, 3, 3], -1.0, 1.0)).collect();
    let f1 = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let f2 = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let one = tsa_aggregate(&q, &[f1.clone()], false).unwrap();
    let dup = tsa_aggregate(&q, &[f1.clone(), f1.clone()], false).unwrap();
    for (a, b) in one.iter().zip(&dup) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (2.0 * x - y).abs() < 1e-12));
    }
    let two = tsa_aggregate(&q, &[f2.clone()], false).unwrap();
    let both = tsa_aggregate(&q, &[f1, f2], false).unwrap();
    for i in 0..2 {
        for e in 0..18 {
            assert!((one[i].data()[e] + two[i].data()[e] - both[i].data()[e]).abs() < 1e-12);
        }
    }
    let mean = tsa_aggregate(&q, &[q[0].clone(), q[0].clone()], true).unwrap();
    let single = tsa_aggregate(&q, &[q[0].clone()], false).unwrap();
    assert!(mean[1].max_abs_diff(&single[1]) < 1e-12);
}

#[test]
fn tsa_two_by_two_hand_oracle() {
    // C = 2, H = W = 2: tokens are the four pixel vectors.
    let q = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, -1.0, 0.5, 0.0, 2.0, 1.0, -0.5]).unwrap();
    let k = Tensor::new(vec![2, 2, 2], vec![0.3, -0.2, 0.8, 0.1, 0.4, 0.9, -0.6, 0.2]).unwrap();
    let tok = |t: &Tensor, i: usize| [t.data()[i], t.data()[4 + i]];
    let out = tsa_aggregate(&[q.clone()], &[k.clone()], false).unwrap();
    for i in 0..4 {
        let qi = tok(&q, i);
        let w: Vec<f64> = (0..4)
            .map(|j| {
                let kj = tok(&k, j);
                ((qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()).exp()
            })
            .collect();
        let z: f64 = w.iter().sum();
        for ch in 0..2 {
            let expect: f64 = (0..4).map(|j| w[j] / z * tok(&k, j)[ch]).sum();
            assert!((out[0].data()[ch * 4 + i] - expect).abs() < 1e-12);
        }
    }
    assert!(tsa_aggregate(&[q], &[Tensor::zeros(&[2, 2, 3])], false).is_err());
}

fn mixing_store(c: usize, m: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.insert("mix.chan.w", uniform(&mut rng, &[c, c * c], -0.5, 0.5));
    s.insert("mix.chan.b", uniform(&mut rng, &[c * c], -0.5, 0.5));
    s.insert("mix.point.w", uniform(&mut rng, &[c, m * m], -0.5, 0.5));
    s.insert("mix.point.b", uniform(&mut rng, &[m * m], -0.5, 0.5));
    s.insert("mix.out.w", uniform(&mut rng, &[m * c, c], -0.5, 0.5));
    s.insert("mix.out.b", uniform(&mut rng, &[c], -0.5, 0.5));
    s
}

fn run_mixing(s: &ParamStore, q: &Tensor, stack: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut b = Bound::frozen(s);
    let (qv, sv) = (g.constant(q.clone()), g.constant(stack.clone()));
    let out = temporal_adaptive_mixing(&mut g, &mut b, qv, sv).unwrap();
    g.value(out).clone()
}

#[test]
fn mixing_degenerate_stack_is_normed_residual() {
    let (c, n) = (4, 3);
    let mut s = mixing_store(c, 1, 1);
    for name in ["mix.chan.w", "mix.chan.b", "mix.point.w", "mix.point.b", "mix.out.b"] {
        let shape = s.get(name).unwrap().shape().to_vec();
        s.insert(name, Tensor::zeros(&shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = uniform(&mut rng, &[n, c], -1.0, 1.0);
    let stack = uniform(&mut rng, &[1, n, c], -1.0, 1.0);
    let out = run_mixing(&s, &q, &stack);
    let mut g = Graph::new();
    let qv = g.constant(q);
    let ln = g.layer_norm(qv, LN_EPS).unwrap();
    assert!(out.max_abs_diff(g.value(ln)) < 1e-12);
}

#[test]
fn mixing_is_order_aware() {
    let (c, n, m) = (4, 3, 3);
    let s = mixing_store(c, m, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = uniform(&mut rng, &[n, c], -1.0, 1.0);
    let stack = uniform(&mut rng, &[m, n, c], -1.0, 1.0);
    let swapped = Tensor::stack(&[stack.index0(2), stack.index0(0), stack.index0(1)]).unwrap();
    assert!(run_mixing(&s, &q, &stack).max_abs_diff(&run_mixing(&s, &q, &swapped)) > 1e-6);
}

/// Checks gradients of `build` with respect to every input tensor and every
/// parameter in `store`, each parameter probed on its own.
fn check_with_params<F>(name: &str, store: &ParamStore, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &mut Bound, &[Var]) -> Result<Var>,
{
    let chk = check_fn(
        name,
        |g, v| {
            let mut b = Bound::frozen(store);
            let y = build(g, &mut b, v).map_err(to_tensor_err)?;
            project(g, y, 5)
        },
        inputs,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(chk.passed(), "{chk:?}");
    let names: Vec<String> = store.names().map(String::from).collect();
    for pname in &names {
        let mut all = inputs.to_vec();
        all.push(store.get(pname).unwrap().clone());
        let k = inputs.len();
        let chk = check_fn(
            pname,
            |g, v| {
                let mut b = Bound::frozen(store);
                b.bind(pname, v[k]);
                let y = build(g, &mut b, &v[..k]).map_err(to_tensor_err)?;
                project(g, y, 6)
            },
            &all,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(chk.passed(), "{name}/{chk:?}");
    }
}

#[test]
fn mixing_gradient() {
    let (c, n, m) = (3, 2, 3);
    let s = mixing_store(c, m, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [uniform(&mut rng, &[n, c], -1.0, 1.0), uniform(&mut rng, &[m, n, c], -1.0, 1.0)];
    check_with_params("mixing", &s, &inputs, |g, b, v| Ok(temporal_adaptive_mixing(g, b, v[0], v[1])?));
}

fn gen_store(c: usize, ci: usize, seed: u64) -> ParamStore {
    let cfg = DetectorConfig {
        n_q: 1,
        c,
        num_classes: 1,
        c_img: ci,
        grid_h: 8,
        grid_w: 8,
        extent: BevExtent::square(1.0),
        dt: 0.5,
        num_frames: 1,
        fusion: FusionMode::Parallel,
    };
    let mut s = ParamStore::new();
    init_auxiliary(&mut s, &cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for name in ["gen.pv.b1", "gen.pv.b2", "gen.bev.b1", "gen.bev.b2"] {
        let shape = s.get(name).unwrap().shape().to_vec();
        s.insert_auxiliary(name, uniform(&mut rng, &shape, -0.3, 0.3));
    }
    s
}

#[test]
fn generate_pv_zero_weights_is_bias_map() {
    let mut s = gen_store(4, 2, 1);
    s.insert_auxiliary("gen.pv.w1", Tensor::zeros(&[2, 2, 3, 3]));
    s.insert_auxiliary("gen.pv.w2", Tensor::zeros(&[2, 2, 3, 3]));
    let mut g = Graph::new();
    let mut b = Bound::frozen(&s);
    let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    let y = generate_pv(&mut g, &mut b, x).unwrap();
    let b2 = s.get("gen.pv.b2").unwrap();
    for ch in 0..2 {
        assert!(g.value(y).data()[ch * 12..(ch + 1) * 12].iter().all(|&v| v == b2.data()[ch]));
    }
}

/// Direct zero-padded 3x3 convolution.
fn conv_oracle(x: &Tensor, k: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[0];
    Tensor::from_fn(&[co, h, w], |idx| {
        let (o, r, c) = (idx / (h * w), (idx / w) % h, idx % w);
        let mut acc = bias.data()[o];
        for i in 0..ci {
            for dr in 0..3 {
                for dc in 0..3 {
                    let (rr, cc) = (r as i64 + dr as i64 - 1, c as i64 + dc as i64 - 1);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += k.at(&[o, i, dr, dc]) * x.at(&[i, rr as usize, cc as usize]);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn generate_pv_identity_first_conv_matches_composition() {
    let ci = 3;
    let mut s = gen_store(4, ci, 2);
    let mut ident = Tensor::zeros(&[ci, ci, 3, 3]);
    for i in 0..ci {
        let at = ident.offset(&[i, i, 1, 1]);
        ident.data_mut()[at] = 1.0;
    }
    s.insert_auxiliary("gen.pv.w1", ident);
    s.insert_auxiliary("gen.pv.b1", Tensor::zeros(&[ci]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&mut rng, &[ci, 4, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let mut b = Bound::frozen(&s);
    let xv = g.constant(x.clone());
    let y = generate_pv(&mut g, &mut b, xv).unwrap();
    let expect = conv_oracle(&x.map(|v| v.max(0.0)), s.get("gen.pv.w2").unwrap(), s.get("gen.pv.b2").unwrap());
    assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn generator_gradients() {
    let s = gen_store(3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_with_params("generate_pv", &s, &[uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)], |g, b, v| generate_pv(g, b, v[0]));
    check_with_params("generate_bev", &s, &[uniform(&mut rng, &[4, 3], -1.0, 1.0)], |g, b, v| generate_bev(g, b, v[0]));
}

#[test]
fn generate_bev_constant_prenorm_row_gives_zeros_and_rows_are_independent() {
    let c = 4;
    let mut s = gen_store(c, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[3, c], -1.0, 1.0);
    let run = |s: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let mut b = Bound::frozen(s);
        let xv = g.constant(x.clone());
        let y = generate_bev(&mut g, &mut b, xv).unwrap();
        g.value(y).clone()
    };
    let base = run(&s, &x);
    let mut x2 = x.clone();
    x2.data_mut()[c] += 0.9;
    let changed = run(&s, &x2);
    for r in [0, 2] {
        assert_eq!(base.row(r), changed.row(r));
    }
    assert_ne!(base.row(1), changed.row(1));

    s.insert_auxiliary("gen.bev.w2", Tensor::zeros(&[2 * c, c]));
    s.insert_auxiliary("gen.bev.b2", Tensor::full(&[c], 0.4));
    assert!(run(&s, &x).data().iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn loss_pv_cases() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::ones(&[2, 2, 2]));
    let l = loss_pv(&mut g, &[ones], &[Tensor::zeros(&[2, 2, 2])]).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    let l = loss_pv(&mut g, &[ones], &[Tensor::ones(&[2, 2, 2])]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)).collect();
    let t: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)).collect();
    let mut oracle = 0.0;
    for i in 0..3 {
        for c in 0..2 {
            for r in 0..3 {
                for w in 0..4 {
                    oracle += (a[i].at(&[c, r, w]) - t[i].at(&[c, r, w])).powi(2);
                }
            }
        }
    }
    oracle /= (3 * 12 * 2) as f64;
    let vars: Vec<Var> = a.iter().map(|x| g.constant(x.clone())).collect();
    let l = loss_pv(&mut g, &vars, &t).unwrap();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);
    assert!(loss_pv(&mut g, &vars[..2], &t).is_err());
}

fn perm_assignment(perm: &[usize]) -> Assignment {
    let n = perm.len();
    let c = crate::matching::CostMatrix::from_fn(n, n, |_, _| 0.0).unwrap();
    Assignment::from_pairs(&c, perm.iter().enumerate().map(|(t, &s)| (t, s)).collect())
}

/// Reference: teacher row q is compared with student row sigma(q).
fn loss_bev_oracle(s: &Tensor, t: &Tensor, perm: &[usize]) -> f64 {
    let (n, nq, c) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let mut acc = 0.0;
    for i in 0..n {
        for q in 0..nq {
            for k in 0..c {
                acc += (s.at(&[i, perm[q], k]) - t.at(&[i, q, k])).powi(2);
            }
        }
    }
    acc / (n * nq * c) as f64
}

#[test]
fn loss_bev_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = uniform(&mut rng, &[2, 5, 3], -1.0, 1.0);
    assert_eq!(loss_bev_value(&t, &t, &Assignment::identity(5)).unwrap(), 0.0);

    let mut perm: Vec<usize> = (0..5).collect();
    perm.shuffle(&mut rng);
    // Student row perm[q] holds teacher row q.
    let mut s = t.clone();
    for i in 0..2 {
        for q in 0..5 {
            for k in 0..3 {
                let at = s.offset(&[i, perm[q], k]);
                s.data_mut()[at] = t.at(&[i, q, k]);
            }
        }
    }
    assert_eq!(loss_bev_value(&s, &t, &perm_assignment(&perm)).unwrap(), 0.0);

    let s = uniform(&mut rng, &[2, 5, 3], -1.0, 1.0);
    let got = loss_bev_value(&s, &t, &perm_assignment(&perm)).unwrap();
    assert!((got - loss_bev_oracle(&s, &t, &perm)).abs() < 1e-12);

    let partial = Assignment { pairs: vec![(0, 0)], total_cost: 0.0, unmatched_rows: vec![], unmatched_cols: vec![] };
    assert!(matches!(loss_bev_value(&s, &t, &partial), Err(DistillError::NonTotalAssignment(5))));
}

#[test]
fn loss_bev_permutation_cancels() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (n, nq, c) = (rng.gen_range(1..4), rng.gen_range(2..9), rng.gen_range(1..6));
        let s = uniform(&mut rng, &[n, nq, c], -1.0, 1.0);
        let t = uniform(&mut rng, &[n, nq, c], -1.0, 1.0);
        let mut sigma0: Vec<usize> = (0..nq).collect();
        sigma0.shuffle(&mut rng);
        let mut pi: Vec<usize> = (0..nq).collect();
        pi.shuffle(&mut rng);
        // permuted[pi[j]] = s[j]; the matching follows the rows.
        let mut permuted = s.clone();
        for i in 0..n {
            for j in 0..nq {
                for k in 0..c {
                    let at = permuted.offset(&[i, pi[j], k]);
                    permuted.data_mut()[at] = s.at(&[i, j, k]);
                }
            }
        }
        let composed: Vec<usize> = sigma0.iter().map(|&j| pi[j]).collect();
        let a = loss_bev_value(&s, &t, &perm_assignment(&sigma0)).unwrap();
        let b = loss_bev_value(&permuted, &t, &perm_assignment(&composed)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_preds(rng: &mut ChaCha8Rng, n: usize, k: usize) -> PredictionSet {
    PredictionSet {
        class_scores: uniform(rng, &[n, k], 0.01, 0.99),
        boxes: uniform(rng, &[n, 9], -2.0, 2.0),
    }
}

fn logit_oracle(s: &PredictionSet, t: &PredictionSet, pairs: &[(usize, usize)], cfg: &DistillConfig) -> f64 {
    pairs
        .iter()
        .map(|&(tq, sq)| {
            let cls: f64 = (0..s.num_classes()).map(|k| focal_elem(s.class_scores.at(&[sq, k]), t.class_scores.at(&[tq, k]), &cfg.kd_focal)).sum();
            let bx: f64 = (0..9).map(|d| (s.boxes.at(&[sq, d]) - t.boxes.at(&[tq, d])).abs()).sum();
            cfg.alpha * cls + cfg.beta * bx
        })
        .sum()
}

#[test]
fn loss_logits_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = DistillConfig::default();
    let t = random_preds(&mut rng, 6, 3);
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);
    let sigma = perm_assignment(&perm);
    let mut inv = vec![0; 6];
    for (q, &s) in perm.iter().enumerate() {
        inv[s] = q;
    }
    // Student row perm[q] equals teacher row q.
    let s = t.gather(&inv);
    let got = loss_logits_value(&s, &t, &sigma, &cfg).unwrap();
    let floor: f64 = t.class_scores.data().iter().map(|&p| cfg.alpha * focal_elem(p, p, &cfg.kd_focal)).sum();
    assert!((got - floor).abs() < 1e-12);

    let zero = DistillConfig { alpha: 0.0, beta: 0.0, ..cfg.clone() };
    let s = random_preds(&mut rng, 6, 3);
    assert_eq!(loss_logits_value(&s, &t, &sigma, &zero).unwrap(), 0.0);

    let both = loss_logits_value(&s, &t, &sigma, &cfg).unwrap();
    let fg = loss_logits_value(&s, &t, &sigma, &DistillConfig { fld: FldSelection::Fg, ..cfg.clone() }).unwrap();
    let bg_pairs: Vec<(usize, usize)> = sigma
        .pairs
        .iter()
        .copied()
        .filter(|&(tq, _)| t.class_scores.row(tq).iter().cloned().fold(f64::MIN, f64::max) < cfg.fg_threshold)
        .collect();
    assert!(!bg_pairs.is_empty() && bg_pairs.len() < 6);
    assert!((both - fg - logit_oracle(&s, &t, &bg_pairs, &cfg)).abs() < 1e-12);
    assert!((both - logit_oracle(&s, &t, &sigma.pairs, &cfg)).abs() < 1e-12);
    let bg = loss_logits_value(&s, &t, &sigma, &DistillConfig { fld: FldSelection::Bg, ..cfg.clone() }).unwrap();
    assert!((fg + bg - both).abs() < 1e-12);
}

#[test]
fn hungarian_matching_minimizes_logit_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = DistillConfig::default();
    for _ in 0..50 {
        let n = rng.gen_range(2..8);
        let t = random_preds(&mut rng, n, 3);
        let s = random_preds(&mut rng, n, 3);
        let sigma = hungarian(&teacher_student_cost(&t, &s, &cfg.matching_cost()).unwrap());
        let best = loss_logits_value(&s, &t, &sigma, &cfg).unwrap();
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let other = loss_logits_value(&s, &t, &perm_assignment(&perm), &cfg).unwrap();
            assert!(best <= other + 1e-9);
        }
    }
}

struct Fixture {
    cfg: DetectorConfig,
    seq: FrameSequence,
    obs: Vec<Observation>,
    student: ParamStore,
    targets: TeacherTargets,
    teacher: ParamStore,
    teacher_cfg: DetectorConfig,
    full: (FrameSequence, Vec<Observation>),
}

fn fixture(fusion: FusionMode) -> Fixture {
    let w = WorldConfig { extent: BevExtent::square(8.0), grid_h: 8, grid_w: 8, c_img: 11, num_objects: 2, ..Default::default() };
    let base = DetectorConfig {
        n_q: 3,
        c: 4,
        num_classes: 4,
        c_img: 11,
        grid_h: 8,
        grid_w: 8,
        extent: w.extent,
        dt: w.dt,
        num_frames: 4,
        fusion: FusionMode::Parallel,
    };
    let objs = generate_scene(31, &w).unwrap();
    let full = simulate_frames(&objs, 1, 2, w.dt, w.extent, [0.0, 0.0]);
    let obs_full = render_sequence(&full, &w, 31);
    let teacher_cfg = DetectorConfig { num_frames: 4, ..base.clone() };
    let teacher = init_params(&teacher_cfg, 32);
    let targets = teacher_targets(&teacher, &teacher_cfg, &full, &obs_full, 1, false).unwrap();
    let cfg = DetectorConfig { num_frames: 2, fusion, ..base };
    let mut student = init_params(&cfg, 33);
    init_auxiliary(&mut student, &cfg, 34);
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    student.insert("query.feats", uniform(&mut rng, &[3, 4], -1.0, 1.0));
    // Masked inputs are exactly zero; nonzero biases keep the generators off their ReLU kinks.
    for name in ["gen.pv.b1", "gen.bev.b1"] {
        let shape = student.get(name).unwrap().shape().to_vec();
        student.insert_auxiliary(name, uniform(&mut rng, &shape, 0.1, 0.5));
    }
    let seq = full.online(1);
    let obs = obs_full[..2].to_vec();
    Fixture { cfg, seq, obs, student, targets, teacher, teacher_cfg, full: (full, obs_full) }
}

#[test]
fn targets_have_student_frame_count() {
    let f = fixture(FusionMode::Parallel);
    assert_eq!(f.targets.pv.len(), 2);
    assert_eq!(f.targets.bev.shape(), &[3, 4]);
}

#[test]
fn full_kd_gradient_matches_finite_differences() {
    let dcfg = DistillConfig { lambda_pv: 1.0, ..DistillConfig::default() };
    for fusion in [FusionMode::Parallel, FusionMode::Sequential] {
        let f = fixture(fusion);
        let names: Vec<String> = f.student.names().map(String::from).collect();
        for name in &names {
            let chk = check_fn(
                name,
                |g, v| {
                    let mut b = Bound::frozen(&f.student);
                    b.bind(name, v[0]);
                    let out = forward_student(g, &mut b, &f.cfg, &f.seq, &f.obs).map_err(|e| to_tensor_err(e.into()))?;
                    let kd = distill_loss(g, &mut b, &out, &f.targets, &dcfg, 77).map_err(to_tensor_err)?;
                    Ok(kd.total.expect("enabled"))
                },
                &[f.student.get(name).unwrap().clone()],
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(chk.passed(), "{fusion:?} {chk:?}");
        }
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let f = fixture(FusionMode::Parallel);
    let mut g = Graph::new();
    let mut tb = Bound::trainable(&f.teacher);
    let tout = forward_teacher(&mut g, &mut tb, &f.teacher_cfg, &f.full.0, &f.full.1).unwrap();
    let targets = targets_from_forward(&g, &tout, &f.full.0, 1, false).unwrap();
    assert_eq!(targets, f.targets);
    let mut sb = Bound::trainable(&f.student);
    let out = forward_student(&mut g, &mut sb, &f.cfg, &f.seq, &f.obs).unwrap();
    let kd = distill_loss(&mut g, &mut sb, &out, &targets, &DistillConfig::default(), 1).unwrap();
    let grads = g.backward(kd.total.unwrap()).unwrap();
    for (name, &v) in tb.vars() {
        assert!(grads.get(v).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)), "teacher {name} got a gradient");
    }
    let student_nonzero = sb.vars().values().filter(|&&v| grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0))).count();
    assert!(student_nonzero > 0);
}

#[test]
fn disabled_config_builds_nothing() {
    let f = fixture(FusionMode::Parallel);
    let cfg = DistillConfig { lambda_pv: 0.0, lambda_bev: 0.0, lambda_logits: 0.0, ..Default::default() };
    let mut g = Graph::new();
    let mut b = Bound::trainable(&f.student);
    let out = forward_student(&mut g, &mut b, &f.cfg, &f.seq, &f.obs).unwrap();
    let before = g.len();
    let kd = distill_loss(&mut g, &mut b, &out, &f.targets, &cfg, 1).unwrap();
    assert!(kd.total.is_none());
    assert_eq!(g.len(), before);
    assert!(b.vars().keys().all(|k| !k.starts_with("gen.")));
}
