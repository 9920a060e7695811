use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::rng::stream;

fn arch(dim: usize, ctx_dim: usize, hidden: usize, hidden_layers: usize, blocks: usize) -> FlowArch {
    FlowArch {
        dim,
        ctx_dim,
        blocks,
        hidden,
        hidden_layers,
    }
}

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, 0, 7);
    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
}

fn random_model(a: FlowArch, out_scale: f64, seed: u64) -> FlowModel {
    let mut m = FlowModel::new(a, vec![DimTransform::Identity; a.dim], out_scale, seed).unwrap();
    m.standardizer = Some(Standardizer::identity(a.dim, a.ctx_dim));
    m
}

/// Perturb every free weight so biases and output layers are nontrivial.
fn jitter(m: &mut FlowModel, scale: f64, seed: u64) {
    let mut rng = stream(seed, 0, 9);
    for b in &mut m.blocks {
        for t in b.made.weights.tensors_mut() {
            for v in t.iter_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
        b.made.enforce_masks();
    }
}

/// `ln |det a|` by partial-pivot Gaussian elimination.
fn log_abs_det(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs()))
            .unwrap();
        if p != k {
            for j in 0..n {
                a.swap([k, j], [p, j]);
            }
        }
        let piv = a[[k, k]];
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = a[[i, k]] / piv;
            for j in k..n {
                a[[i, j]] -= f * a[[k, j]];
            }
        }
    }
    acc
}

fn fd_jacobian(f: impl Fn(&Array1<f64>) -> Array1<f64>, x: &Array1<f64>, h: f64) -> Array2<f64> {
    let n = x.len();
    let mut j = Array2::zeros((n, n));
    for c in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        let d = (f(&xp) - f(&xm)) / (2.0 * h);
        j.column_mut(c).assign(&d);
    }
    j
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn full_model_round_trip_on_1000_points() {
    let a = FlowArch::standard(17, 264);
    let mut m = random_model(a, 0.3, 1);
    jitter(&mut m, 0.05, 2);
    let ctx = gaussian(1000, 264, 3);
    let u = gaussian(1000, 17, 4);
    let (z, _) = m.to_noise(u.view(), ctx.view());
    let back = m.from_noise(z.view(), ctx.view());
    assert!(max_abs_diff(u.view(), back.view()) < 1e-9);
    let zr = m.sample_standardized(ctx.view(), 1000, &mut stream(5, 0, 0));
    let (z2, _) = m.to_noise(zr.view(), ctx.view());
    let z_again = m.from_noise(z2.view(), ctx.view());
    assert!(max_abs_diff(zr.view(), z_again.view()) < 1e-9);
}

#[test]
fn made_round_trip_on_100_points() {
    let a = FlowArch::standard(17, 264);
    let mut m = random_model(a, 0.5, 6);
    jitter(&mut m, 0.1, 7);
    let made = &m.blocks[0].made;
    let z = gaussian(100, 17, 8);
    let ctx = gaussian(100, 264, 9);
    let x = made.forward_sample(z.view(), ctx.view()).unwrap();
    let (z2, _) = made.forward_inverse(x.view(), ctx.view()).unwrap();
    assert!(max_abs_diff(z.view(), z2.view()) < 1e-9);
}

#[test]
fn made_logdet_matches_finite_difference_jacobian() {
    let a = FlowArch::standard(17, 264);
    for seed in 0..3 {
        let mut m = random_model(a, 0.4, 10 + seed);
        jitter(&mut m, 0.05, 20 + seed);
        let made = m.blocks[0].made.clone();
        let ctx = gaussian(1, 264, 30 + seed);
        let x = gaussian(1, 17, 40 + seed).row(0).to_owned();
        let f = |v: &Array1<f64>| {
            let (z, _) = made.forward_inverse(row_matrix(v.view()), ctx.view()).unwrap();
            z.row(0).to_owned()
        };
        let jac = fd_jacobian(f, &x, 1e-6);
        let (_, logdet) = made.forward_inverse(row_matrix(x.view()), ctx.view()).unwrap();
        let err = rel_err(logdet[0], log_abs_det(jac));
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn composed_log_prob_matches_finite_difference_jacobian() {
    let a = arch(5, 3, 16, 2, 3);
    let mut m = FlowModel::new(
        a,
        vec![
            DimTransform::Log { shift: 0.0 },
            DimTransform::Identity,
            DimTransform::Log { shift: 1.0 },
            DimTransform::Identity,
            DimTransform::Log { shift: 1e-4 },
        ],
        0.4,
        3,
    )
    .unwrap();
    jitter(&mut m, 0.05, 4);
    m.standardizer = Some(Standardizer {
        theta_mean: vec![0.5, -1.0, 2.0, 0.0, -3.0],
        theta_sd: vec![0.7, 2.0, 1.5, 0.3, 1.1],
        ctx_mean: vec![1.0, 2.0, 3.0],
        ctx_sd: vec![0.5, 1.0, 2.0],
    });
    let y = array![1.3, 1.7, 4.0];
    let x = array![2.0, -0.4, 5.0, 0.1, 0.05];
    let st = m.standardizer.clone().unwrap();
    let full = |v: &Array1<f64>| {
        let mut u = Array2::from_shape_fn((1, 5), |(_, i)| m.transforms[i].apply(v[i]));
        st.standardize_theta(&mut u);
        let c = st.standardize_ctx(row_matrix(y.view()));
        m.to_noise(u.view(), c.view()).0.row(0).to_owned()
    };
    let z = full(&x);
    let jac = fd_jacobian(full, &x, 1e-6);
    let expected = -0.5 * z.dot(&z) - 2.5 * LN_2PI + log_abs_det(jac);
    let lp = m.log_prob_one(x.as_slice().unwrap(), y.as_slice().unwrap()).unwrap();
    assert!(rel_err(lp, expected) < 1e-5, "{lp} vs {expected}");
}

#[test]
fn sampling_matches_bisection_solve_of_the_forward_pass() {
    let a = FlowArch::standard(17, 264);
    let mut m = random_model(a, 0.5, 50);
    jitter(&mut m, 0.1, 51);
    let made = &m.blocks[0].made;
    let z = gaussian(1, 17, 52);
    let ctx = gaussian(1, 264, 53);
    let x = made.forward_sample(z.view(), ctx.view()).unwrap();
    let i = 9;
    // z_i is increasing in x_i, so bracket and bisect with x_{<i} fixed.
    let g = |xi: f64| {
        let mut probe = x.clone();
        probe[[0, i]] = xi;
        made.forward_inverse(probe.view(), ctx.view()).unwrap().0[[0, i]] - z[[0, i]]
    };
    let (mut lo, mut hi) = (-1e3, 1e3);
    assert!(g(lo) < 0.0 && g(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((0.5 * (lo + hi) - x[[0, i]]).abs() < 1e-9);
}

#[test]
fn nonfinite_activations_are_reported() {
    let mut layer = MadeLayer::zeros(MadeArch {
        dim: 2,
        ctx_dim: 1,
        hidden: 4,
        hidden_layers: 1,
    });
    layer.weights.out_b[3] = -800.0;
    let x = array![[1.0, 2.0]];
    let c = array![[0.0]];
    assert!(matches!(layer.forward_inverse(x.view(), c.view()), Err(Error::Numeric(_))));
    layer.weights.out_b[3] = 800.0;
    assert!(matches!(layer.forward_sample(x.view(), c.view()), Err(Error::Numeric(_))));
}

#[test]
fn identity_model_log_prob_at_mean() {
    let a = FlowArch::standard(17, 264);
    let mut m = FlowModel::identity(a, vec![DimTransform::Identity; 17]).unwrap();
    let sd: Vec<f64> = (0..17).map(|i| 0.5 + 0.1 * i as f64).collect();
    let mean: Vec<f64> = (0..17).map(|i| i as f64 - 3.0).collect();
    m.standardizer = Some(Standardizer {
        theta_mean: mean.clone(),
        theta_sd: sd.clone(),
        ctx_mean: vec![100.0; 264],
        ctx_sd: vec![30.0; 264],
    });
    let lp = m.log_prob_one(&mean, &[120.0; 264]).unwrap();
    let expected = -8.5 * (2.0 * std::f64::consts::PI).ln() - sd.iter().map(|s| s.ln()).sum::<f64>();
    assert!((lp - expected).abs() < 1e-12);
}

#[test]
fn log_prob_requires_fitted_standardizer() {
    let m = FlowModel::identity(arch(2, 1, 4, 1, 1), vec![DimTransform::Identity; 2]).unwrap();
    assert!(matches!(m.log_prob_one(&[0.0, 0.0], &[0.0]), Err(Error::State(_))));
}

#[test]
fn log_prob_decreases_along_a_ray_out_of_support() {
    let a = arch(4, 3, 12, 2, 2);
    let mut m = random_model(a, 0.2, 60);
    jitter(&mut m, 0.02, 61);
    let y = [0.1, -0.2, 0.3];
    let mut last = f64::INFINITY;
    for k in 0..40 {
        let t = 5.0 + k as f64 * 5.0;
        let lp = m.log_prob_one(&[t, -t, 0.5 * t, t], &y).unwrap();
        assert!(lp < last);
        last = lp;
    }
}

#[test]
fn log_prob_is_normalized_in_two_dimensions() {
    let a = arch(2, 1, 8, 2, 2);
    let mut m = random_model(a, 0.3, 70);
    jitter(&mut m, 0.05, 71);
    m.standardizer = Some(Standardizer {
        theta_mean: vec![1.0, -2.0],
        theta_sd: vec![0.5, 2.0],
        ctx_mean: vec![0.0],
        ctx_sd: vec![1.0],
    });
    let y = array![[0.7]];
    let h = 0.02;
    let n = 1000;
    let pts = Array2::from_shape_fn((n * n, 2), |(r, j)| {
        let k = if j == 0 { r / n } else { r % n };
        let (c, s) = (m.standardizer.as_ref().unwrap().theta_mean[j], m.standardizer.as_ref().unwrap().theta_sd[j]);
        c + s * (-10.0 + (k as f64 + 0.5) * h)
    });
    let lp = m.log_prob(pts.view(), y.view()).unwrap();
    let cell = 0.5 * h * 2.0 * h;
    let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() * cell;
    assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
}

#[test]
fn identity_model_samples_are_standard_normal() {
    let a = arch(17, 2, 8, 1, 2);
    let m = {
        let mut m = FlowModel::identity(a, vec![DimTransform::Identity; 17]).unwrap();
        m.standardizer = Some(Standardizer::identity(17, 2));
        m
    };
    let out = m.sample(&[0.0, 0.0], 10_000, &mut stream(1, 3, 0), None).unwrap();
    for col in out.values.columns() {
        let mean = col.mean().unwrap();
        let sd = col.std(0.0);
        assert!(mean.abs() < 0.1);
        assert!((sd - 1.0).abs() < 0.1);
    }
}

#[test]
fn samples_are_seeded_and_have_finite_density() {
    let a = arch(5, 3, 10, 2, 3);
    let mut m = random_model(a, 0.3, 80);
    jitter(&mut m, 0.05, 81);
    let y = [0.3, 0.1, -0.4];
    let s1 = m.sample(&y, 200, &mut stream(9, 3, 1), None).unwrap();
    let s2 = m.sample(&y, 200, &mut stream(9, 3, 1), None).unwrap();
    assert_eq!(s1, s2);
    let ys = Array2::from_shape_fn((1, 3), |(_, j)| y[j]);
    let lp = m.log_prob(s1.values.view(), ys.view()).unwrap();
    assert!(lp.iter().all(|v| v.is_finite()));
}

#[test]
fn support_box_rejects_and_clamps() {
    let a = arch(2, 1, 4, 1, 1);
    let mut m = FlowModel::identity(a, vec![DimTransform::Identity; 2]).unwrap();
    m.standardizer = Some(Standardizer::identity(2, 1));
    let support = SupportBox {
        lower: vec![0.0, 0.0],
        upper: vec![f64::INFINITY, f64::INFINITY],
        policy: vec![SupportPolicy::Reject, SupportPolicy::Clamp],
    };
    let out = m.sample(&[0.0], 2000, &mut stream(3, 3, 0), Some(&support)).unwrap();
    assert!(out.values.iter().all(|v| *v >= 0.0));
    assert!((out.leakage() - 0.5).abs() < 0.05);
    let zeros = out.values.column(1).iter().filter(|v| **v == 0.0).count();
    assert!(zeros > 800 && zeros < 1200);

    let impossible = SupportBox {
        lower: vec![50.0, 0.0],
        upper: vec![51.0, 1.0],
        policy: vec![SupportPolicy::Reject; 2],
    };
    assert!(matches!(
        m.sample(&[0.0], 10, &mut stream(3, 3, 1), Some(&impossible)),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn gradcheck_identity_and_random_models() {
    let cases = [arch(3, 2, 6, 1, 2), arch(5, 4, 10, 2, 3), arch(4, 0, 8, 3, 2)];
    for (ci, a) in cases.into_iter().enumerate() {
        let id = {
            let mut m = FlowModel::identity(a, vec![DimTransform::Identity; a.dim]).unwrap();
            m.standardizer = Some(Standardizer::identity(a.dim, a.ctx_dim));
            m
        };
        let u = gaussian(7, a.dim, 100 + ci as u64);
        let c = gaussian(7, a.ctx_dim, 200 + ci as u64);
        let r = gradcheck(&id, u.view(), c.view(), None);
        assert!(r.max_rel_err < 1e-4, "identity arch {ci}: {r:?}");
        assert_eq!(r.masked_nonzero, 0);
        for seed in 0..10 {
            let mut m = random_model(a, 0.3, seed);
            jitter(&mut m, 0.1, 1000 + seed);
            let r = gradcheck(&m, u.view(), c.view(), None);
            assert!(r.max_rel_err < 1e-4, "arch {ci} seed {seed}: {r:?}");
            assert_eq!(r.masked_nonzero, 0);
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn gradcheck_full_size_subset() {
    let a = FlowArch::standard(17, 264);
    let mut m = random_model(a, 0.1, 5);
    jitter(&mut m, 0.02, 6);
    let u = gaussian(4, 17, 7);
    let c = gaussian(4, 264, 8);
    let r = gradcheck(&m, u.view(), c.view(), Some(400));
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    assert_eq!(r.masked_nonzero, 0);
}

fn linear_gaussian(n: usize, seed: u64) -> TrainData {
    // theta ~ N(0, I2); y = (theta1 + theta2, theta1 - theta2, 2 theta1) + N(0, 0.5^2)
    let mut rng = stream(seed, 0, 11);
    let theta = Array2::from_shape_simple_fn((n, 2), || rng.sample::<f64, _>(StandardNormal));
    let mut ctx = Array2::zeros((n, 3));
    for r in 0..n {
        let (a, b) = (theta[[r, 0]], theta[[r, 1]]);
        let mean = [a + b, a - b, 2.0 * a];
        for j in 0..3 {
            ctx[[r, j]] = mean[j] + 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    TrainData::new(theta, ctx).unwrap()
}

#[test]
fn initial_loss_matches_identity_oracle() {
    let data = linear_gaussian(500, 1);
    let a = arch(2, 3, 8, 2, 2);
    let m = FlowModel::identity(a, vec![DimTransform::Identity; 2]).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let (_, h) = train(m, &data, &cfg, &mut stream(1, 2, 1)).unwrap();
    let expected = 0.5 * 2.0 * (1.0 + LN_2PI);
    assert!((h.train_loss[0] - expected).abs() < 1e-12);
}

#[test]
fn returned_model_has_best_validation_loss() {
    let data = linear_gaussian(600, 2);
    let a = arch(2, 3, 8, 2, 2);
    let m = FlowModel::new(a, vec![DimTransform::Identity; 2], 1e-3, 4).unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 5,
        batch_size: 50,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let (best, h) = train(m, &data, &cfg, &mut stream(4, 2, 1)).unwrap();
    assert!(h.val_loss.iter().all(|v| h.best_val_loss <= *v));
    assert_eq!(h.val_loss[h.best_epoch], h.best_val_loss);
    assert!(h.best_epoch > 0);
    assert!(h.warnings.iter().any(|w| w.contains("insufficient")));
    let _ = best;
}

#[test]
fn training_is_deterministic() {
    let data = linear_gaussian(300, 3);
    let a = arch(2, 3, 6, 1, 2);
    let cfg = TrainConfig {
        max_epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let run = || {
        let m = FlowModel::new(a, vec![DimTransform::Identity; 2], 1e-3, 9).unwrap();
        train(m, &data, &cfg, &mut stream(9, 2, 1)).unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
    let extra = serde_json::json!({"k": 1});
    assert_eq!(m1.to_checkpoint(&extra), m2.to_checkpoint(&extra));
}

#[test]
fn ten_row_dataset_trains_with_warning() {
    let data = linear_gaussian(10, 4);
    let m = FlowModel::new(arch(2, 3, 4, 1, 1), vec![DimTransform::Identity; 2], 1e-3, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let (_, h) = train(m, &data, &cfg, &mut stream(1, 2, 1)).unwrap();
    assert_eq!(h.n_train + h.n_val, 10);
    assert!(!h.warnings.is_empty());
}

#[test]
fn conjugate_posterior_mean_is_recovered() {
    let data = linear_gaussian(4000, 5);
    let a = arch(2, 3, 32, 2, 3);
    let m = FlowModel::new(a, vec![DimTransform::Identity; 2], 1e-3, 5).unwrap();
    let cfg = TrainConfig {
        batch_size: 100,
        learning_rate: 2e-3,
        patience: 10,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    let (m, _) = train(m, &data, &cfg, &mut stream(5, 2, 1)).unwrap();

    // Posterior precision = I + A^T A / s^2 with A = [[1,1],[1,-1],[2,0]].
    let s2 = 0.25;
    let prec = array![[1.0 + 6.0 / s2, 0.0], [0.0, 1.0 + 2.0 / s2]];
    let test = linear_gaussian(20, 99);
    for r in 0..20 {
        let y = test.ctx.row(r);
        let aty = [y[0] + y[1] + 2.0 * y[2], y[0] - y[1]];
        let post_mean = [aty[0] / s2 / prec[[0, 0]], aty[1] / s2 / prec[[1, 1]]];
        let post_sd = [prec[[0, 0]].powf(-0.5), prec[[1, 1]].powf(-0.5)];
        let s = m.sample(y.as_slice().unwrap(), 2000, &mut stream(r as u64, 3, 0), None).unwrap();
        for j in 0..2 {
            let mean = s.values.column(j).mean().unwrap();
            assert!(
                (mean - post_mean[j]).abs() < 3.0 * post_sd[j],
                "case {r} dim {j}: {mean} vs {}",
                post_mean[j]
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let a = arch(5, 4, 10, 2, 3);
    let mut m = random_model(a, 0.3, 1);
    jitter(&mut m, 0.1, 2);
    m.transforms[2] = DimTransform::Log { shift: 1e-4 };
    m.standardizer = Some(Standardizer {
        theta_mean: vec![0.1, 1.0 / 3.0, -2.5, 7.0, 1e-9],
        theta_sd: vec![0.7, 2.0, std::f64::consts::PI, 0.3, 1.1],
        ctx_mean: vec![1.0, 2.0, 3.0, 4.0],
        ctx_sd: vec![0.5, 1.0, 2.0, 0.1],
    });
    let extra = serde_json::json!({"note": "x"});
    let bytes = m.to_checkpoint(&extra);
    assert_eq!(&bytes[..8], b"T1DNPE1\n");
    let (back, e) = FlowModel::from_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(e, extra);
    assert_eq!(back.to_checkpoint(&e), bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    let a = arch(3, 2, 6, 1, 1);
    let m = random_model(a, 0.3, 1);
    let bytes = m.to_checkpoint(&serde_json::Value::Null);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(FlowModel::from_checkpoint(&bad), Err(Error::Format(_))));
    assert!(FlowModel::from_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    // The first hidden weight (unit 0, input 0) is always masked.
    let body_start = bytes.len() - 8 * m.param_count();
    let mut masked = bytes.clone();
    masked[body_start..body_start + 8].copy_from_slice(&1.5f64.to_le_bytes());
    assert!(matches!(FlowModel::from_checkpoint(&masked), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inverse_then_forward_is_identity(seed in 0u64..10_000, scale in 0.0f64..0.8) {
        let a = arch(6, 3, 12, 2, 3);
        let mut m = random_model(a, scale, seed);
        jitter(&mut m, 0.1 * scale, seed + 1);
        let z = gaussian(10, 6, seed + 2);
        let c = gaussian(10, 3, seed + 3);
        let u = m.from_noise(z.view(), c.view());
        let (z2, _) = m.to_noise(u.view(), c.view());
        prop_assert!(max_abs_diff(z.view(), z2.view()) < 1e-9);
    }

    #[test]
    fn masks_survive_training_steps(seed in 0u64..1000) {
        let data = linear_gaussian(64, seed);
        let a = arch(2, 3, 6, 2, 2);
        let m = FlowModel::new(a, vec![DimTransform::Identity; 2], 0.1, seed).unwrap();
        let cfg = TrainConfig { max_epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let (m, _) = train(m, &data, &cfg, &mut stream(seed, 2, 1)).unwrap();
        for b in &m.blocks {
            for (t, mask) in b.made.weights.tensors().into_iter().zip(b.made.tensor_masks()) {
                if let Some(mask) = mask {
                    for (w, k) in t.iter().zip(mask) {
                        if *k == 0.0 {
                            prop_assert_eq!(*w, 0.0);
                        }
                    }
                }
            }
        }
    }
}
