//! Central-difference gradient oracle used to validate the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{linear, l1, mse, Graph, Result, Tensor, TensorError, Var};

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_diff_grad",
            msg: format!("step {h} must be positive"),
        });
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Max-norm relative error `max|a - n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    relative_error_above(analytic, numeric, 1e-8)
}

fn relative_error_above(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    analytic.max_abs_diff(numeric) / scale
}

/// Rounding allowance in ulps of the loss: one per evaluation.
const ROUNDING_ULPS: f64 = 2.0;

/// Smallest derivative difference a central difference with step `h` can
/// resolve on a loss of this magnitude. The relative-error denominator never
/// drops below `resolution / tol`, so a disagreement within the quotient's
/// own rounding noise is not mistaken for a wrong gradient.
fn resolution(loss: f64, h: f64) -> f64 {
    ROUNDING_ULPS * f64::EPSILON * loss.abs().max(1.0) / (2.0 * h)
}

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

/// Builds `f` once with every input as a trainable leaf, backpropagates, and
/// compares each input gradient against central differences.
pub fn check_fn<F>(name: &str, f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let floor = resolution(g.value(loss).item(), h) / tol;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let out = f(&mut g, &vs)?;
                Ok(g.value(out).item())
            },
            &inputs[k],
            h,
        )?;
        worst = worst.max(relative_error_above(&analytic, &numeric, floor));
    }
    Ok(GradCheck {
        name: name.to_string(),
        rel_err: worst,
        tol,
    })
}

/// Inputs up to this size are checked element by element in
/// [`check_directional`].
pub const PER_ELEMENT_MAX: usize = 32;

/// Like [`check_fn`] but compares directional derivatives along `dirs`
/// random unit-range directions per input; cheap enough for whole models.
/// Small inputs are still checked per element: a random direction over a
/// handful of entries can cancel to a derivative far below its components,
/// where the rounding noise of the difference quotient would dominate.
pub fn check_directional<F>(name: &str, f: F, inputs: &[Tensor], dirs: usize, seed: u64, h: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let floor = resolution(g.value(loss).item(), h) / tol;
    let grads = g.backward(loss)?;
    let eval = |k: usize, t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, x)| g.constant(if j == k { t.clone() } else { x.clone() }))
            .collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        if inputs[k].numel() <= PER_ELEMENT_MAX {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let numeric = finite_diff_grad(|probe| eval(k, probe), &inputs[k], h)?;
            worst = worst.max(relative_error_above(&analytic, &numeric, floor));
            continue;
        }
        for _ in 0..dirs {
            let u = uniform(&mut rng, inputs[k].shape(), -1.0, 1.0);
            let analytic: f64 = grads.get(*var).map_or(0.0, |gr| gr.data().iter().zip(u.data()).map(|(a, b)| a * b).sum());
            let shifted = |sign: f64| Tensor::from_parts(inputs[k].shape().to_vec(), inputs[k].data().iter().zip(u.data()).map(|(x, d)| x + sign * h * d).collect());
            let numeric = (eval(k, &shifted(1.0))? - eval(k, &shifted(-1.0))?) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        rel_err: worst,
        tol,
    })
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so the check
/// exercises the whole Jacobian rather than its column sums.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

type OpBuilder = fn(&mut Graph, &[Var]) -> Result<Var>;

/// The op-level suite: every differentiable primitive on `instances` random
/// inputs drawn from [-1, 1] (positive where the op requires it).
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let cases: Vec<(&str, OpBuilder, Vec<(Vec<usize>, f64, f64)>)> = vec![
        ("add", |g, v| g.add(v[0], v[1]), vec![(vec![3, 4], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)]),
        ("add_broadcast", |g, v| g.add(v[0], v[1]), vec![(vec![3, 4], -1.0, 1.0), (vec![1, 4], -1.0, 1.0)]),
        ("sub_broadcast", |g, v| g.sub(v[0], v[1]), vec![(vec![3, 1], -1.0, 1.0), (vec![3, 5], -1.0, 1.0)]),
        ("mul", |g, v| g.mul(v[0], v[1]), vec![(vec![2, 3, 4], -1.0, 1.0), (vec![2, 3, 4], -1.0, 1.0)]),
        ("mul_broadcast", |g, v| g.mul(v[0], v[1]), vec![(vec![2, 3, 4], -1.0, 1.0), (vec![2, 1, 4], -1.0, 1.0)]),
        ("scale", |g, v| g.scale(v[0], -1.7), vec![(vec![5], -1.0, 1.0)]),
        ("add_scalar", |g, v| g.add_scalar(v[0], 0.3), vec![(vec![5], -1.0, 1.0)]),
        ("matmul", |g, v| g.matmul(v[0], v[1]), vec![(vec![4, 5], -1.0, 1.0), (vec![5, 3], -1.0, 1.0)]),
        ("batch_matmul", |g, v| g.batch_matmul(v[0], v[1]), vec![(vec![3, 2, 4], -1.0, 1.0), (vec![3, 4, 2], -1.0, 1.0)]),
        ("transpose", |g, v| g.transpose(v[0]), vec![(vec![3, 5], -1.0, 1.0)]),
        ("permute", |g, v| g.permute(v[0], &[1, 2, 0]), vec![(vec![2, 3, 4], -1.0, 1.0)]),
        ("reshape", |g, v| g.reshape(v[0], &[6, 2]), vec![(vec![3, 4], -1.0, 1.0)]),
        ("softmax_vec", |g, v| g.softmax(v[0], 0), vec![(vec![7], -1.0, 1.0)]),
        ("softmax_axis0", |g, v| g.softmax(v[0], 0), vec![(vec![4, 3], -1.0, 1.0)]),
        ("softmax_axis1", |g, v| g.softmax(v[0], 1), vec![(vec![2, 5, 3], -1.0, 1.0)]),
        ("relu", |g, v| g.relu(v[0]), vec![(vec![10], -1.0, 1.0)]),
        ("sigmoid", |g, v| g.sigmoid(v[0]), vec![(vec![10], -1.0, 1.0)]),
        ("ln", |g, v| g.ln(v[0]), vec![(vec![10], 0.2, 1.0)]),
        ("abs", |g, v| g.abs(v[0]), vec![(vec![10], -1.0, 1.0)]),
        ("abs_pow", |g, v| g.abs_pow(v[0], 2.0), vec![(vec![10], -1.0, 1.0)]),
        ("abs_pow_frac", |g, v| g.abs_pow(v[0], 1.5), vec![(vec![10], -1.0, 1.0)]),
        ("clamp", |g, v| g.clamp(v[0], -0.5, 0.5), vec![(vec![10], -1.0, 1.0)]),
        ("layer_norm", |g, v| g.layer_norm(v[0], 1e-5), vec![(vec![3, 6], -1.0, 1.0)]),
        (
            "conv2d_3x3",
            |g, v| g.conv2d_3x3(v[0], v[1], v[2]),
            vec![(vec![2, 4, 5], -1.0, 1.0), (vec![3, 2, 3, 3], -1.0, 1.0), (vec![3], -1.0, 1.0)],
        ),
        ("sum", |g, v| g.sum(v[0]), vec![(vec![3, 4], -1.0, 1.0)]),
        ("mean", |g, v| g.mean(v[0]), vec![(vec![3, 4], -1.0, 1.0)]),
        ("gather_rows", |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]), vec![(vec![3, 4], -1.0, 1.0)]),
        ("narrow", |g, v| g.narrow(v[0], 1, 1, 2), vec![(vec![3, 4], -1.0, 1.0)]),
        (
            "concat",
            |g, v| g.concat(&[v[0], v[1]], 1),
            vec![(vec![3, 2], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)],
        ),
        ("stack", |g, v| g.stack(&[v[0], v[1]]), vec![(vec![3, 2], -1.0, 1.0), (vec![3, 2], -1.0, 1.0)]),
        (
            "bilinear_sample",
            |g, v| g.bilinear_sample(v[0], v[1]),
            vec![(vec![3, 5, 6], -1.0, 1.0), (vec![7, 2], 0.05, 3.95)],
        ),
        ("wrap_yaw", |g, v| g.wrap_yaw(v[0]), vec![(vec![3, 9], -1.0, 1.0)]),
        (
            "linear",
            |g, v| linear(g, v[0], v[1], v[2]),
            vec![(vec![4, 3], -1.0, 1.0), (vec![3, 5], -1.0, 1.0), (vec![5], -1.0, 1.0)],
        ),
        ("mse", |g, v| mse(g, v[0], v[1]), vec![(vec![3, 4], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)]),
        ("l1", |g, v| l1(g, v[0], v[1]), vec![(vec![3, 4], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)]),
    ];

    for (name, build, specs) in cases {
        let mut worst: Option<GradCheck> = None;
        for inst in 0..instances {
            let inputs: Vec<Tensor> = specs
                .iter()
                .map(|(shape, lo, hi)| uniform(&mut rng, shape, *lo, *hi))
                .collect();
            let proj_seed = seed.wrapping_add(inst as u64);
            let check = check_fn(
                name,
                |g, v| {
                    let y = build(g, v)?;
                    project(g, y, proj_seed)
                },
                &inputs,
                H,
                TOL,
            )?;
            if worst.as_ref().map_or(true, |w| check.rel_err > w.rel_err) {
                worst = Some(check);
            }
        }
        out.extend(worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn step_size_insensitive() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 0.9]).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| (v * 1.3).sin() * v.exp()).sum());
        let a = finite_diff_grad(f, &x, 1e-5).unwrap();
        let b = finite_diff_grad(f, &x, 1e-7).unwrap();
        assert!(relative_error(&a, &b) < 1e-4);
    }

    #[test]
    fn directional_check_agrees_with_elementwise() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.7, 0.9, 0.1, 0.5, -0.2]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.sigmoid(v[0])?;
            let p = g.mul(s, v[0])?;
            g.sum(p)
        };
        let d = check_directional("sig", f, &[x.clone()], 5, 3, 1e-6, 1e-6).unwrap();
        let e = check_fn("sig", f, &[x], 1e-6, 1e-6).unwrap();
        assert!(d.passed() && e.passed(), "{d:?} {e:?}");
    }

    #[test]
    fn directional_check_catches_wrong_gradient() {
        // detach hides the dependence from the tape but not from the probe.
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 0.9]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let d = g.detach(v[0]);
            let p = g.mul(d, v[0])?;
            g.sum(p)
        };
        assert!(!check_directional("bad", f, &[x], 3, 1, 1e-6, 1e-5).unwrap().passed());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
