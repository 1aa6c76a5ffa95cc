//! Library routines checked against independent reference computations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use glue_core::adam::AdamConfig;
use glue_core::analysis::checks::random_instance;
use glue_core::analysis::{
    estimator_mse_closed_form, fit_cost_model, mc_estimator_moments, mc_variance, variance_bound, CostObservation,
};
use glue_core::baselines::grad_beta_full;
use glue_core::nn::{forward, init_params, loss_and_grad, loss_eval, Activation, ArchSpec, Targets};
use glue_core::zo::{estimate_gradient, sample_direction, spsa_step, DirectionDistribution, OptimConfig, SpsaConfig};
use glue_core::{
    softmax_map, softmax_pullback, Batch, Counters, ExpertBank, LossKind, Matrix, MixtureState, ParamVector,
};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Plain nested-loop MLP. Layer `l` stores `W` (fan_out × fan_in, row-major)
/// followed by `b`.
fn oracle_forward(sizes: &[usize], act: Activation, p: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    for l in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = &p[off..off + n_in * n_out];
        let b = &p[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = b[o];
            for i in 0..n_in {
                s += w[o * n_in + i] * h[i];
            }
            z[o] = if l + 2 < sizes.len() {
                match act {
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => s.tanh(),
                }
            } else {
                s
            };
        }
        h = z;
    }
    h
}

fn oracle_ce(logits: &[f64], y: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    z.ln() - logits[y]
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: usize) -> Batch {
    let x = Matrix::new(b, d, randn(rng, b * d)).unwrap();
    let y = (0..b).map(|_| rng.random_range(0..classes)).collect();
    Batch::classification(x, y).unwrap()
}

#[test]
fn forward_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (sizes, act) in [
        (vec![3, 5, 2], Activation::Tanh),
        (vec![4, 6, 6, 3], Activation::Relu),
        (vec![2, 1], Activation::Relu),
    ] {
        let arch = ArchSpec::mlp(&sizes, act).unwrap();
        let p = ParamVector::new(randn(&mut rng, arch.param_count()));
        let batch = random_batch(&mut rng, 7, sizes[0], *sizes.last().unwrap());
        let out = forward(&arch, &p, &batch.inputs, &mut Counters::new()).unwrap();
        for r in 0..7 {
            let want = oracle_forward(&sizes, act, p.as_slice(), batch.inputs.row(r));
            for (a, b) in out.row(r).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn cross_entropy_matches_per_sample_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Matrix::new(6, 4, randn(&mut rng, 24)).unwrap();
    let y: Vec<usize> = (0..6).map(|i| i % 4).collect();
    let got = loss_eval(&logits, &Targets::Classes(y.clone()), LossKind::CrossEntropy).unwrap();
    let want: f64 = (0..6).map(|r| oracle_ce(logits.row(r), y[r])).sum::<f64>() / 6.0;
    assert!((got - want).abs() < 1e-13);
}

#[test]
fn squared_error_matches_per_sample_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds = Matrix::new(5, 2, randn(&mut rng, 10)).unwrap();
    let targets = Matrix::new(5, 2, randn(&mut rng, 10)).unwrap();
    let got = loss_eval(&preds, &Targets::Values(targets.clone()), LossKind::SquaredError).unwrap();
    let want: f64 = (0..5)
        .map(|r| {
            preds
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / 5.0;
    assert!((got - want).abs() < 1e-13);
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for act in [Activation::Tanh, Activation::Relu] {
        let sizes = [4, 5, 3];
        let arch = ArchSpec::mlp(&sizes, act).unwrap();
        let p = init_params(&arch, 9);
        let batch = random_batch(&mut rng, 8, 4, 3);
        let (_, g) = loss_and_grad(&arch, &p, &batch, LossKind::CrossEntropy, &mut Counters::new()).unwrap();
        let loss = |q: &[f64]| -> f64 {
            (0..batch.len())
                .map(|r| {
                    oracle_ce(
                        &oracle_forward(&sizes, act, q, batch.inputs.row(r)),
                        batch.labels().unwrap()[r],
                    )
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let fd: Vec<f64> = (0..p.len())
            .map(|i| {
                let mut a = p.as_slice().to_vec();
                let mut b = a.clone();
                a[i] += h;
                b[i] -= h;
                (loss(&a) - loss(&b)) / (2.0 * h)
            })
            .collect();
        let num = fd
            .iter()
            .zip(g.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "{act:?}: relative error {}", num / den);
    }
}

#[test]
fn softmax_pullback_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Vec<f64> = randn(&mut rng, 5);
    // f(α) = Σ aᵢαᵢ + ½Σαᵢ²; ∇_α f = a + α.
    let f = |beta: &[f64]| {
        let al = softmax_map(beta).unwrap();
        al.iter().zip(&a).map(|(x, c)| c * x + 0.5 * x * x).sum::<f64>()
    };
    let beta = randn(&mut rng, 5);
    let alpha = softmax_map(&beta).unwrap();
    let grad_alpha: Vec<f64> = alpha.iter().zip(&a).map(|(x, c)| c + x).collect();
    let got = softmax_pullback(&alpha, &grad_alpha);
    for i in 0..5 {
        let h = 1e-6;
        let mut p = beta.clone();
        let mut m = beta.clone();
        p[i] += h;
        m[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        assert!((fd - got[i]).abs() < 1e-8, "{i}: {fd} vs {}", got[i]);
    }
}

#[test]
fn sigma_max_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // 5→7→1 has 50 parameters, so Θ is 50×4.
    let arch = ArchSpec::mlp(&[5, 7, 1], Activation::Tanh).unwrap();
    assert_eq!(arch.param_count(), 50);
    for _ in 0..5 {
        let experts: Vec<ParamVector> = (0..4).map(|_| ParamVector::new(randn(&mut rng, 50))).collect();
        let theta = DMatrix::from_fn(50, 4, |r, c| experts[c].as_slice()[r]);
        let want = theta.singular_values().max();
        let bank = ExpertBank::from_params(arch.clone(), experts).unwrap();
        let got = bank.sigma_max();
        assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
    }
}

#[test]
fn cost_fit_recovers_exact_parameters() {
    let (f, b, c, d) = (2.0e-4, 4.5e-4, 1.0e-5, 3.0e-5);
    let rows = [
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [2.0, 0.0, 2.0, 0.0],
        [1.0, 1.0, 1.0, 1.0],
    ];
    let obs: Vec<CostObservation> = rows
        .iter()
        .map(|r| CostObservation {
            forwards: r[0],
            backwards: r[1],
            blends: r[2],
            inner_product_sweeps: r[3],
            seconds: r[0] * f + r[1] * b + r[2] * c + r[3] * d,
        })
        .collect();
    let cm = fit_cost_model(&obs).unwrap();
    assert!((cm.forward - f).abs() < 1e-15);
    assert!((cm.gamma - b / f).abs() < 1e-9);
    assert!((cm.c_mix - c).abs() < 1e-15);
    assert!((cm.d_alpha - d).abs() < 1e-15);
}

#[test]
fn cost_fit_matches_least_squares_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<[f64; 4]> = (0..12)
        .map(|_| [0, 1, 2, 3].map(|_| rng.random_range(0..4) as f64))
        .collect();
    let truth = [1.0, 2.5, 0.3, 0.2];
    let y: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.01 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let a = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    let want = a
        .clone()
        .svd(true, true)
        .solve(&DVector::from_vec(y.clone()), 1e-12)
        .unwrap();
    let obs: Vec<CostObservation> = rows
        .iter()
        .zip(&y)
        .map(|(r, &s)| CostObservation {
            forwards: r[0],
            backwards: r[1],
            blends: r[2],
            inner_product_sweeps: r[3],
            seconds: s,
        })
        .collect();
    let cm = fit_cost_model(&obs).unwrap();
    assert!((cm.forward - want[0]).abs() < 1e-9);
    assert!((cm.gamma * cm.forward - want[1]).abs() < 1e-9);
    assert!((cm.c_mix - want[2]).abs() < 1e-9);
    assert!((cm.d_alpha - want[3]).abs() < 1e-9);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // With bias correction the first update is −lr·g/(|g| + ε/…) ≈ −lr·sign(g).
    let cfg = AdamConfig::mixture_default();
    let g = [0.3, -2.0, 1e-3];
    let mut p = [0.0; 3];
    let (mut m1, mut m2) = ([0.0; 3], [0.0; 3]);
    glue_core::adam::adam_update(&cfg, &mut p, &g, &mut m1, &mut m2, 1);
    for (pi, gi) in p.iter().zip(&g) {
        let want = -cfg.lr * gi / (gi.abs() + cfg.epsilon);
        assert!((pi - want).abs() < 1e-15, "{pi} vs {want}");
    }
    assert!((m1[1] - 0.1 * -2.0).abs() < 1e-15);
    assert!((m2[1] - 0.01 * 4.0).abs() < 1e-15);
}

#[test]
fn sphere_directions_are_isotropic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for dist in [
        DirectionDistribution::GaussianSphere,
        DirectionDistribution::RademacherNormalized,
    ] {
        let k = 4;
        let n = 1_000_000;
        let mut cov = [[0.0; 4]; 4];
        for _ in 0..n {
            let u = sample_direction(k, &mut rng, dist).unwrap();
            assert!((u.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k {
                for j in 0..k {
                    cov[i][j] += u[i] * u[j];
                }
            }
        }
        for (i, row) in cov.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let want = if i == j { 0.25 } else { 0.0 };
                assert!(
                    (c / n as f64 - want).abs() <= 0.01 * 0.25,
                    "{dist:?} [{i}][{j}] = {}",
                    c / n as f64
                );
            }
        }
    }
}

fn linear_moments(
    k: usize,
    m: usize,
    scaling: bool,
    dist: DirectionDistribution,
    n: usize,
    seed: u64,
) -> (Vec<f64>, f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..k).map(|i| 1.0 + 0.25 * (i % 3) as f64).collect();
    let spsa = SpsaConfig {
        m,
        dimension_scaling: scaling,
        distribution: dist,
        ..SpsaConfig::default()
    };
    let gc = g.clone();
    let mc = mc_estimator_moments(&vec![0.3; k], &g, &spsa, n, &mut rng, move |z| {
        Ok(z.iter().zip(&gc).map(|(a, b)| a * b).sum())
    })
    .unwrap();
    (mc.empirical_mean, mc.empirical_mse, g)
}

#[test]
fn estimator_mean_is_gradient_over_k() {
    for k in [2, 4, 8] {
        let (mean, _, g) = linear_moments(k, 1, false, DirectionDistribution::GaussianSphere, 200_000, k as u64);
        let kf = k as f64;
        for (e, gi) in mean.iter().zip(&g) {
            assert!((e - gi / kf).abs() <= 0.03 * gi / kf, "K={k}: {e} vs {}", gi / kf);
        }
    }
}

#[test]
fn estimator_mse_matches_closed_form() {
    for (k, m) in [(2, 1), (4, 1), (4, 4), (8, 1)] {
        for scaling in [false, true] {
            let (_, mse, g) = linear_moments(
                k,
                m,
                scaling,
                DirectionDistribution::GaussianSphere,
                100_000,
                31 + k as u64,
            );
            let gn: f64 = g.iter().map(|v| v * v).sum();
            let want = estimator_mse_closed_form(k, m, scaling, gn);
            assert!(
                (mse - want).abs() <= 0.03 * want,
                "K={k} m={m} scaled={scaling}: {mse} vs {want}"
            );
        }
    }
    // m = 1 without scaling is the ((K−1)/K)‖g‖² identity.
    assert!((estimator_mse_closed_form(4, 1, false, 1.0) - 0.75).abs() < 1e-15);
}

#[test]
fn averaging_directions_does_not_remove_the_bias_term() {
    // (K−1)/(mK) only describes the variance part; the g/K bias survives any m.
    let (_, mse, g) = linear_moments(4, 4, false, DirectionDistribution::GaussianSphere, 100_000, 77);
    let gn: f64 = g.iter().map(|v| v * v).sum();
    let naive = 3.0 / 16.0 * gn;
    assert!(mse > 2.0 * naive, "{mse} vs {naive}");
    assert!(mse >= (0.75f64).powi(2) * gn);
}

#[test]
fn rademacher_directions_share_the_moments() {
    let (mean, mse, g) = linear_moments(4, 1, false, DirectionDistribution::RademacherNormalized, 100_000, 5);
    let gn: f64 = g.iter().map(|v| v * v).sum();
    for (e, gi) in mean.iter().zip(&g) {
        assert!((e - gi / 4.0).abs() <= 0.03 * gi / 4.0);
    }
    assert!((mse - 0.75 * gn).abs() <= 0.03 * 0.75 * gn);
}

#[test]
fn identical_experts_give_zero_gradient_and_zero_mse() {
    let inst = random_instance(3, 4).unwrap();
    let same = vec![inst.bank.expert(0).clone(); 4];
    let bank = ExpertBank::from_params(inst.bank.arch().clone(), same).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mc = mc_variance(&bank, &inst.beta, &inst.batch, &SpsaConfig::default(), 1000, &mut rng).unwrap();
    // Zero up to rounding in the blend weights, which sum to 1 only within ulps.
    assert!(mc.grad_norm_sq < 1e-24, "{}", mc.grad_norm_sq);
    assert!(mc.empirical_mse < 1e-20, "{}", mc.empirical_mse);
}

#[test]
fn scaled_estimator_points_along_exact_beta_gradient() {
    let inst = random_instance(12, 4).unwrap();
    let kind = LossKind::for_arch(inst.bank.arch());
    let alpha = softmax_map(&inst.beta).unwrap();
    let exact = grad_beta_full(&inst.bank, &alpha, &inst.batch, kind, &mut Counters::new()).unwrap();
    let spsa = SpsaConfig {
        m: 256,
        mu: 1e-4,
        dimension_scaling: true,
        ..SpsaConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mean = [0.0; 4];
    let reps = 20;
    for _ in 0..reps {
        let est = estimate_gradient(
            &inst.bank,
            &inst.beta,
            &inst.batch,
            &spsa,
            kind,
            &mut rng,
            &mut Counters::new(),
        )
        .unwrap();
        for (m, g) in mean.iter_mut().zip(&est.grad) {
            *m += g / reps as f64;
        }
    }
    let dot: f64 = mean.iter().zip(&exact).map(|(a, b)| a * b).sum();
    let cos = dot / (mean.iter().map(|v| v * v).sum::<f64>().sqrt() * exact.iter().map(|v| v * v).sum::<f64>().sqrt());
    assert!(cos >= 0.99, "cosine {cos}");
}

#[test]
fn spsa_step_matches_decomposed_pipeline() {
    let inst = random_instance(21, 3).unwrap();
    let sizes = inst.bank.arch().layer_sizes.clone();
    let act = inst.bank.arch().activation;
    let spsa = SpsaConfig {
        mu: 1e-2,
        m: 2,
        ..SpsaConfig::default()
    };
    let optim = OptimConfig::default();
    let mut state = MixtureState::from_beta(inst.beta.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counters = Counters::new();
    spsa_step(
        &mut state,
        &inst.bank,
        &inst.batch,
        &spsa,
        &optim,
        &mut rng,
        &mut counters,
    )
    .unwrap();
    assert_eq!(counters.forwards, 4);
    assert_eq!(counters.backwards, 0);

    // By hand: same direction stream, explicit blend, oracle network, Adam.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let loss_at = |beta: &[f64]| {
        let z: f64 = beta.iter().map(|b| b.exp()).sum();
        let alpha: Vec<f64> = beta.iter().map(|b| b.exp() / z).collect();
        let mut theta = vec![0.0; inst.bank.p()];
        for (a, e) in alpha.iter().zip(inst.bank.experts()) {
            for (t, v) in theta.iter_mut().zip(e.as_slice()) {
                *t += a * v;
            }
        }
        let labels = inst.batch.labels().unwrap();
        (0..inst.batch.len())
            .map(|r| {
                oracle_ce(
                    &oracle_forward(&sizes, act, &theta, inst.batch.inputs.row(r)),
                    labels[r],
                )
            })
            .sum::<f64>()
            / inst.batch.len() as f64
    };
    let mut g = [0.0; 3];
    for _ in 0..2 {
        let u = sample_direction(3, &mut rng, DirectionDistribution::GaussianSphere).unwrap();
        let plus: Vec<f64> = inst.beta.iter().zip(&u).map(|(b, v)| b + 1e-2 * v).collect();
        let minus: Vec<f64> = inst.beta.iter().zip(&u).map(|(b, v)| b - 1e-2 * v).collect();
        let d = (loss_at(&plus) - loss_at(&minus)) / 2e-2;
        for (gi, ui) in g.iter_mut().zip(&u) {
            *gi += d * ui / 2.0;
        }
    }
    let lr = optim.eta;
    for i in 0..3 {
        // First Adam step: m̂ = g, v̂ = g².
        let want = inst.beta[i] - lr * g[i] / (g[i].abs() + optim.epsilon);
        assert!(
            (state.beta()[i] - want).abs() < 1e-10,
            "{i}: {} vs {want}",
            state.beta()[i]
        );
    }
}

#[test]
fn variance_bound_examples() {
    assert_eq!(variance_bound(1, 1, 3.0, 2.0, 1e-3).unwrap().bound, 0.0);
    assert!((variance_bound(2, 1, 1.0, 1.0, 1e-3).unwrap().bound - 0.5).abs() < 1e-15);
    let one = variance_bound(4, 1, 2.0, 0.5, 1e-3).unwrap().bound;
    let two = variance_bound(4, 2, 2.0, 0.5, 1e-3).unwrap().bound;
    assert!((one - 2.0 * two).abs() < 1e-15);
}
