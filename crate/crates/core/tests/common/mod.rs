//! Shared helpers for the integration tests: random evaluation points and
//! common-random-number finite-difference checks of every analytic gradient.

#![allow(dead_code)]

use lcvi::calibration::{estimate_u_linearized, estimate_u_naive, DecisionSet};
use lcvi::decisions::{loss, loss_subgradient_h, AffineUtility, LossSpec};
use lcvi::gradcheck::central_difference;
use lcvi::models::{Batch, EightSchools, MatrixData, Model, Pmf, PmfPriors, TargetSet};
use lcvi::{estimate_elbo, RngState, VariationalParams};

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn vector_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-4 * x[i].abs().max(1.0);
            let d = central_difference(
                |v| {
                    work[i] = v;
                    f(&work)
                },
                x[i],
                h,
            );
            work[i] = x[i];
            d
        })
        .collect()
}

pub fn small_pmf(seed: u64) -> Pmf<f64> {
    let mut rng = RngState::seed(seed);
    let (n, m) = (6, 4);
    let values: Vec<f64> = (0..n * m).map(|_| 2.0 * rng.standard_normal::<f64>()).collect();
    let mask: Vec<bool> = (0..n * m).map(|c| c % 3 != 0).collect();
    let test_mask = mask.iter().map(|b| !b).collect();
    let data = MatrixData::new(n, m, values, mask, test_mask).unwrap();
    Pmf::new(data, 2, PmfPriors::uniform(3.0)).unwrap()
}

pub fn random_lambda(dim: usize, rng: &mut RngState) -> VariationalParams<f64> {
    let means = (0..dim).map(|_| rng.standard_normal::<f64>()).collect();
    let log_scales = (0..dim).map(|_| -2.0 + 1.5 * rng.uniform()).collect();
    VariationalParams::new(means, log_scales).unwrap()
}

/// Decisions near the predictive locations at the variational means.
pub fn random_decisions(model: &dyn Model<f64>, lambda: &VariationalParams<f64>, rng: &mut RngState) -> DecisionSet<f64> {
    let theta: Vec<f64> = lambda
        .means
        .iter()
        .zip(model.support())
        .map(|(m, t)| t.forward(*m))
        .collect();
    DecisionSet::new(
        (0..model.n_targets(TargetSet::Train))
            .map(|t| model.predictive_loc_scale(&theta, TargetSet::Train, t).0 + rng.standard_normal::<f64>())
            .collect(),
    )
}

pub struct GradCase {
    pub name: String,
    pub points: usize,
    pub worst: f64,
}

/// Gradient of a function of `(lambda, h)` returned alongside its value, checked
/// against finite differences of the value with the noise seed held fixed.
fn check_lambda_h(
    name: &str,
    model: &dyn Model<f64>,
    points: usize,
    seed: u64,
    with_h: bool,
    eval: &dyn Fn(&VariationalParams<f64>, &DecisionSet<f64>, u64) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>),
) -> GradCase {
    let mut rng = RngState::seed(seed);
    let dim = model.latent_dim();
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let lambda = random_lambda(dim, &mut rng);
        let h = random_decisions(model, &lambda, &mut rng);
        let noise = seed.wrapping_mul(1000) + p as u64;
        let (_, gm, gs, gh) = eval(&lambda, &h, noise);
        let flat = lambda.to_flat();
        let fd = fd_gradient(
            |x| eval(&VariationalParams::from_flat(x).unwrap(), &h, noise).0,
            &flat,
        );
        let mut analytic = gm.clone();
        analytic.extend_from_slice(&gs);
        worst = worst.max(vector_relative_error(&analytic, &fd));
        if with_h {
            let fd_h = fd_gradient(|x| eval(&lambda, &DecisionSet::new(x.to_vec()), noise).0, &h.values);
            worst = worst.max(vector_relative_error(&gh, &fd_h));
        }
    }
    GradCase {
        name: name.to_string(),
        points,
        worst,
    }
}

pub fn elbo_case(name: &str, model: &dyn Model<f64>, points: usize, seed: u64) -> GradCase {
    let batch = Batch::full(model.n_rows());
    check_lambda_h(name, model, points, seed, false, &|lambda, _h, noise| {
        let e = estimate_elbo(model, &batch, lambda, 8, &mut RngState::seed(noise)).unwrap();
        (e.value, e.grad_means, e.grad_log_scales, vec![])
    })
}

pub fn naive_u_case(name: &str, model: &dyn Model<f64>, utility: AffineUtility, points: usize, seed: u64) -> GradCase {
    let batch = Batch::full(model.n_rows());
    check_lambda_h(name, model, points, seed, true, &|lambda, h, noise| {
        let u = estimate_u_naive(model, &batch, lambda, h, &utility, 4, 5, &mut RngState::seed(noise)).unwrap();
        (u.value, u.grad_means, u.grad_log_scales, u.grad_h)
    })
}

pub fn linearized_u_case(name: &str, model: &dyn Model<f64>, loss_spec: LossSpec, m: f64, points: usize, seed: u64) -> GradCase {
    let batch = Batch::full(model.n_rows());
    check_lambda_h(name, model, points, seed, true, &|lambda, h, noise| {
        let u = estimate_u_linearized(model, &batch, lambda, h, &loss_spec, m, 4, 5, &mut RngState::seed(noise)).unwrap();
        (u.value, u.grad_means, u.grad_log_scales, u.grad_h)
    })
}

fn random_theta(model: &dyn Model<f64>, rng: &mut RngState) -> Vec<f64> {
    model
        .support()
        .iter()
        .map(|t| t.forward(0.8 * rng.standard_normal::<f64>()))
        .collect()
}

pub fn log_joint_case(name: &str, model: &dyn Model<f64>, points: usize, seed: u64) -> GradCase {
    let mut rng = RngState::seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let theta = random_theta(model, &mut rng);
        let mut g = vec![0.0; theta.len()];
        model.log_joint_grad(&theta, &mut g);
        let fd = fd_gradient(|x| model.log_joint(x), &theta);
        worst = worst.max(vector_relative_error(&g, &fd));
    }
    GradCase {
        name: name.to_string(),
        points,
        worst,
    }
}

/// `d g / d delta` and `d g / d theta` of the predictive reparameterization.
pub fn predictive_partials_case(name: &str, model: &dyn Model<f64>, points: usize, seed: u64) -> GradCase {
    let mut rng = RngState::seed(seed);
    let mut worst: f64 = 0.0;
    let n = model.n_targets(TargetSet::Train);
    for p in 0..points {
        let theta = random_theta(model, &mut rng);
        let t = p % n;
        let delta: f64 = rng.standard_normal();
        let mut g = vec![0.0; theta.len()];
        let dg_ddelta = model.predict_partials(delta, &theta, TargetSet::Train, t, &mut g);
        let fd = fd_gradient(|x| model.predict(delta, x, TargetSet::Train, t), &theta);
        let fd_delta = central_difference(|d| model.predict(d, &theta, TargetSet::Train, t), delta, 1e-4);
        g.push(dg_ddelta);
        let mut fd_all = fd;
        fd_all.push(fd_delta);
        worst = worst.max(vector_relative_error(&g, &fd_all));
    }
    GradCase {
        name: name.to_string(),
        points,
        worst,
    }
}

/// Loss subgradients in `h` at points at least 0.05 away from any kink.
pub fn loss_subgradient_case(spec: LossSpec, points: usize, seed: u64) -> GradCase {
    let mut rng = RngState::seed(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let y: f64 = 2.0 * rng.standard_normal::<f64>();
        let h: f64 = 2.0 * rng.standard_normal::<f64>();
        if (h - y).abs() < 0.05 {
            continue;
        }
        let a = loss_subgradient_h(&spec, y, h);
        // 1 - exp(-d²) rounds to 1 in the tails; differentiate the equivalent
        // -exp(-d²) there so the reference keeps its precision.
        let fd = match spec {
            LossSpec::ExpSquaredComplement => central_difference(
                |v| -lcvi::decisions::Utility::<f64>::eval(&lcvi::decisions::UtilitySpec::NativeExpSquared, y, v),
                h,
                1e-4,
            ),
            _ => central_difference(|v| loss(&spec, y, v), h, 1e-4),
        };
        worst = worst.max(vector_relative_error(&[a], &[fd]));
        done += 1;
    }
    GradCase {
        name: format!("loss subgradient {}", spec.name()),
        points,
        worst,
    }
}

/// Every analytic gradient of the library at `points` random points each.
pub fn gradient_suite(points: usize) -> Vec<GradCase> {
    use lcvi::decisions::UtilitySpec;
    let schools = EightSchools::<f64>::canonical();
    let pmf = small_pmf(5);
    let conj = lcvi::ConjugateNormal::new(vec![0.3, -1.2, 2.0], 0.7, 0.0, 2.0)
        .unwrap()
        .with_predictive_sd(0.9);
    let models: [(&str, &dyn Model<f64>); 3] = [("eight schools", &schools), ("pmf", &pmf), ("conjugate", &conj)];
    let exp_sq = |gamma| AffineUtility {
        base: UtilitySpec::ExpTransform {
            gamma,
            loss: LossSpec::Squared,
        },
        alpha: 1.0,
        beta: 0.0,
    };
    let exp_linex = AffineUtility {
        base: UtilitySpec::ExpTransform {
            gamma: 0.3,
            loss: LossSpec::LinEx { c: 0.7 },
        },
        alpha: 1.0,
        beta: 0.0,
    };
    let native = AffineUtility {
        base: UtilitySpec::NativeExpSquared,
        alpha: 2.5,
        beta: 0.1,
    };
    let mut out = Vec::new();
    for (i, (name, model)) in models.iter().enumerate() {
        let s = 100 * i as u64;
        out.push(elbo_case(&format!("ELBO {name}"), *model, points, s + 1));
        out.push(log_joint_case(&format!("log joint {name}"), *model, points, s + 2));
        out.push(predictive_partials_case(&format!("predictive partials {name}"), *model, points, s + 3));
        out.push(naive_u_case(&format!("naive U exp-squared {name}"), *model, exp_sq(0.05), points, s + 4));
        out.push(naive_u_case(&format!("naive U exp-linex {name}"), *model, exp_linex, points, s + 5));
        out.push(naive_u_case(&format!("naive U native affine {name}"), *model, native, points, s + 6));
        out.push(linearized_u_case(&format!("linearized U squared {name}"), *model, LossSpec::Squared, 50.0, points, s + 7));
        out.push(linearized_u_case(
            &format!("linearized U linex {name}"),
            *model,
            LossSpec::LinEx { c: -0.4 },
            20.0,
            points,
            s + 8,
        ));
        out.push(linearized_u_case(
            &format!("linearized U 1-exp(-d^2) {name}"),
            *model,
            LossSpec::ExpSquaredComplement,
            1.0,
            points,
            s + 9,
        ));
    }
    for (j, spec) in [
        LossSpec::Squared,
        LossSpec::Absolute,
        LossSpec::Tilted { q: 0.2 },
        LossSpec::Tilted { q: 0.8 },
        LossSpec::LinEx { c: 0.5 },
        LossSpec::LinEx { c: -1.5 },
        LossSpec::ExpSquaredComplement,
    ]
    .into_iter()
    .enumerate()
    {
        out.push(loss_subgradient_case(spec, points, 900 + j as u64));
    }
    out
}
