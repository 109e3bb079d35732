mod common;

use std::f64::consts::PI;

use bodyfit::priors::{
    standard_normal_log_prob, Direction, FlowConfig, FlowModel, GmmPrior, NamedArrays, PosePrior,
};
use bodyfit::Error;
use common::{random_flow, random_gmm, random_spd, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}


/// Direct mixture density using an explicit inverse and determinant.
fn direct_density(prior: &GmmPrior, x: &[f64]) -> f64 {
    let x = DVector::from_column_slice(x);
    let d = prior.dim as f64;
    prior
        .components
        .iter()
        .map(|c| {
            let inv = c.covariance.clone().try_inverse().unwrap();
            let diff = &x - &c.mean;
            let m = (diff.transpose() * inv * &diff)[0];
            c.weight * (-0.5 * m).exp() / ((2.0 * PI).powf(d / 2.0) * c.covariance.determinant().sqrt())
        })
        .sum()
}

/// Samples from a well separated three-cluster mixture in `d` dimensions.
fn clustered_samples(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d).map(|_| r.random_range(-4.0..4.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            let c = &centers[i % 3];
            c.iter().map(|m| m + normal(r) * r.random_range(0.3..1.0)).collect()
        })
        .collect()
}

#[test]
fn single_component_matches_closed_form() {
    let mut r = rng(1);
    let d = 4;
    let samples: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..d).map(|k| normal(&mut r) * (k + 1) as f64 + k as f64).collect())
        .collect();
    let fit = GmmPrior::fit(&samples, 1, 9).unwrap();
    let n = samples.len() as f64;
    let mean = samples
        .iter()
        .fold(DVector::zeros(d), |acc, s| acc + DVector::from_column_slice(s))
        / n;
    let cov = samples.iter().fold(DMatrix::zeros(d, d), |acc, s| {
        let diff = DVector::from_column_slice(s) - &mean;
        acc + &diff * diff.transpose()
    }) / n;
    let c = &fit.prior.components[0];
    assert!((c.weight - 1.0).abs() < 1e-12);
    assert!((&c.mean - &mean).amax() < 1e-9);
    assert!((&c.covariance - &cov).amax() < 1e-9);
}

#[test]
fn single_gaussian_mean_is_recovered() {
    let mut r = rng(2);
    let truth = [0.5, -1.0, 2.0];
    let sd = [1.0, 0.5, 2.0];
    let samples: Vec<Vec<f64>> = (0..5000)
        .map(|_| (0..3).map(|k| truth[k] + sd[k] * normal(&mut r)).collect())
        .collect();
    let fit = GmmPrior::fit(&samples, 1, 4).unwrap();
    for k in 0..3 {
        let se = sd[k] / (5000f64).sqrt();
        assert!((fit.prior.components[0].mean[k] - truth[k]).abs() < 3.0 * se);
    }
}

#[test]
fn em_log_likelihood_is_monotone() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let samples = clustered_samples(&mut r, 240, 3);
        let fit = GmmPrior::fit(&samples, 3, seed).unwrap();
        assert!(fit.log_likelihood.len() >= 2);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
        let total = fit.prior.total_log_likelihood(&samples).unwrap();
        assert!((total - fit.log_likelihood.last().unwrap()).abs() < 1e-8 * total.abs());
    }
}

#[test]
fn gmm_fit_rejects_too_few_samples() {
    let samples = vec![vec![0.0, 1.0]; 8];
    assert!(matches!(GmmPrior::fit(&samples, 3, 0), Err(Error::InsufficientData(_))));
    assert!(GmmPrior::fit(&samples, 2, 0).is_ok());
}

#[test]
fn gmm_peak_and_degenerate_mixture() {
    let unit = GmmPrior::standard(2);
    assert!((unit.log_prob(&[0.0, 0.0]).unwrap() + (2.0 * PI).ln()).abs() < 1e-15);
    assert!(matches!(unit.log_prob(&[0.0]), Err(Error::Shape(_))));

    let mut r = rng(3);
    let mean = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0));
    let cov = random_spd(&mut r, 3);
    let single = GmmPrior::new(vec![1.0], vec![mean.clone()], vec![cov.clone()]).unwrap();
    let double = GmmPrior::new(vec![0.5, 0.5], vec![mean.clone(), mean], vec![cov.clone(), cov]).unwrap();
    for _ in 0..10 {
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
        assert!((single.log_prob(&x).unwrap() - double.log_prob(&x).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn gmm_matches_direct_summation() {
    let mut r = rng(4);
    for _ in 0..5 {
        let prior = random_gmm(&mut r, 3, 4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
            let direct = direct_density(&prior, &x);
            assert!(direct > 1e-200);
            assert!((prior.log_prob(&x).unwrap() - direct.ln()).abs() < 1e-9);
        }
    }
}

#[test]
fn gmm_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let prior = random_gmm(&mut r, 3, 3);
    let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
    let (value, grad) = prior.log_prob_with_grad(&x).unwrap();
    assert_eq!(value, prior.log_prob(&x).unwrap());
    let h = 1e-6;
    for k in 0..3 {
        let mut xp = x.clone();
        xp[k] += h;
        let mut xm = x.clone();
        xm[k] -= h;
        let fd = (prior.log_prob(&xp).unwrap() - prior.log_prob(&xm).unwrap()) / (2.0 * h);
        assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()));
    }
}

#[test]
fn gmm_file_round_trip() {
    let mut r = rng(6);
    let prior = random_gmm(&mut r, 2, 3);
    let text = prior.to_arrays().to_json().unwrap();
    let back = GmmPrior::from_arrays(&NamedArrays::from_json(&text).unwrap()).unwrap();
    assert_eq!(back.to_arrays(), prior.to_arrays());
    let mut bad = prior.to_arrays();
    bad.arrays.get_mut("weights").unwrap().data[0] += 0.1;
    assert!(GmmPrior::from_arrays(&bad).is_err());
    let mut wrong_kind = prior.to_arrays();
    wrong_kind.kind = "pose_flow".into();
    assert!(GmmPrior::from_arrays(&wrong_kind).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gmm_is_invariant_to_component_order(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let mut r = rng(seed);
        let prior = random_gmm(&mut r, 3, 3);
        let c = &prior.components;
        let order = [2, 0, 1];
        let shuffled = GmmPrior::new(
            order.iter().map(|&i| c[i].weight).collect(),
            order.iter().map(|&i| c[i].mean.clone()).collect(),
            order.iter().map(|&i| c[i].covariance.clone()).collect(),
        ).unwrap();
        let a = prior.log_prob(&x).unwrap();
        let b = shuffled.log_prob(&x).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
    }
}

/// A flow with every subnet randomized, including the output layers.
#[test]
fn zero_layer_flow_is_the_base_gaussian() {
    let flow = FlowModel::identity(3);
    let x = [0.3, -1.0, 2.0];
    for dir in [Direction::Forward, Direction::Inverse] {
        let (y, ld) = flow.transform(&x, dir).unwrap();
        assert_eq!(y, x.to_vec());
        assert_eq!(ld, 0.0);
    }
    let base = -1.5 * (2.0 * PI).ln();
    assert!((flow.log_prob(&[0.0; 3]).unwrap() - base).abs() < 1e-15);
    assert!((flow.log_prob(&[1.0, 1.0, 0.0]).unwrap() - (base - 1.0)).abs() < 1e-15);

    let mut r = rng(7);
    let data = DMatrix::from_fn(2, 50, |_, _| normal(&mut r));
    let config = FlowConfig {
        layers: 0,
        ..FlowConfig::default()
    };
    let (trained, report) = FlowModel::train(&data, &config).unwrap();
    assert!(trained.layers.is_empty());
    let base_nll = -data
        .column_iter()
        .map(|c| standard_normal_log_prob(c.as_slice()))
        .sum::<f64>()
        / 50.0;
    assert!((report.final_nll - base_nll).abs() < 1e-12);
}

#[test]
fn flow_round_trip_and_log_det_cancel() {
    let mut r = rng(8);
    for seed in 0..5 {
        let flow = random_flow(5, 4, seed);
        let x: Vec<f64> = (0..5).map(|_| 2.0 * normal(&mut r)).collect();
        let (z, ld_inv) = flow.transform(&x, Direction::Inverse).unwrap();
        let (back, ld_fwd) = flow.transform(&z, Direction::Forward).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((ld_inv + ld_fwd).abs() < 1e-8);
        assert_ne!(ld_inv, 0.0);
    }
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    let flow = random_flow(2, 1, 9);
    let mut r = rng(9);
    for _ in 0..10 {
        let x = [normal(&mut r), normal(&mut r)];
        for dir in [Direction::Forward, Direction::Inverse] {
            let (_, ld) = flow.transform(&x, dir).unwrap();
            let h = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let yp = flow.transform(&xp, dir).unwrap().0;
                let ym = flow.transform(&xm, dir).unwrap().0;
                for row in 0..2 {
                    jac[row][c] = (yp[row] - ym[row]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            assert!((det.abs().ln() - ld).abs() < 1e-5, "{} vs {ld}", det.abs().ln());
        }
    }
}

#[test]
fn log_prob_is_the_change_of_variables() {
    let flow = random_flow(4, 3, 10);
    let q = [0.2, -0.7, 1.1, 0.4];
    let (z, ld) = flow.transform(&q, Direction::Inverse).unwrap();
    assert_eq!(flow.log_prob(&q).unwrap(), standard_normal_log_prob(&z) + ld);
}

#[test]
fn flow_gradient_matches_finite_differences() {
    let flow = random_flow(4, 3, 11);
    let mut r = rng(11);
    let q = DMatrix::from_fn(4, 3, |_, _| normal(&mut r));
    let (lp, grad) = flow.log_prob_with_grad(&q).unwrap();
    let h = 1e-6;
    for c in 0..3 {
        let col: Vec<f64> = q.column(c).iter().copied().collect();
        assert!((lp[c] - flow.log_prob(&col).unwrap()).abs() < 1e-12);
        for k in 0..4 {
            let mut p = col.clone();
            p[k] += h;
            let mut m = col.clone();
            m[k] -= h;
            let fd = (flow.log_prob(&p).unwrap() - flow.log_prob(&m).unwrap()) / (2.0 * h);
            assert!((fd - grad[(k, c)]).abs() < 1e-6, "{fd} vs {}", grad[(k, c)]);
        }
    }
}

#[test]
fn flow_rejects_wrong_dimension() {
    let flow = random_flow(3, 2, 12);
    assert!(matches!(flow.log_prob(&[0.0, 1.0]), Err(Error::Shape(_))));
}

fn two_moons(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let mut data = DMatrix::zeros(2, n);
    for c in 0..n {
        let t = r.random_range(0.0..PI);
        let (x, y) = if c % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data[(0, c)] = x + 0.1 * normal(&mut r);
        data[(1, c)] = y + 0.1 * normal(&mut r);
    }
    data
}

fn toy_config() -> FlowConfig {
    FlowConfig {
        layers: 8,
        hidden: 32,
        epochs: 40,
        batch_size: 128,
        learning_rate: 5e-3,
        seed: 3,
        ..FlowConfig::default()
    }
}

#[test]
fn trained_toy_flow_is_a_density() {
    let data = two_moons(2000, 13);
    let (flow, report) = FlowModel::train(&data, &toy_config()).unwrap();
    assert!(report.final_nll < report.initial_nll - 0.3, "{report:?}");
    assert_eq!(report.epoch_nll.len(), 40);

    // Midpoint quadrature over [-6, 6]^2.
    let steps = 300;
    let h = 12.0 / steps as f64;
    let grid = DMatrix::from_fn(2, steps * steps, |r, c| {
        let i = if r == 0 { c % steps } else { c / steps };
        -6.0 + (i as f64 + 0.5) * h
    });
    let mass: f64 = flow.log_prob_batch(&grid).unwrap().iter().map(|lp| lp.exp()).sum::<f64>() * h * h;
    assert!((mass - 1.0).abs() < 0.01, "mass {mass}");

    let mut r = rng(14);
    let samples = flow.sample(5000, &mut r).unwrap();
    for row in 0..2 {
        let mean = |m: &DMatrix<f64>| m.row(row).mean();
        let var = |m: &DMatrix<f64>| m.row(row).variance();
        assert!((mean(&samples) - mean(&data)).abs() < 0.1);
        assert!((var(&samples) / var(&data) - 1.0).abs() < 0.2);
    }

    let (again, _) = FlowModel::train(&data, &toy_config()).unwrap();
    assert_eq!(again, flow);
}

#[test]
fn pose_prior_drops_constant_dimensions() {
    let mut r = rng(15);
    let samples: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            let a = normal(&mut r);
            vec![1.0, 3.0 + 2.0 * a, 0.0, -1.0 + 0.5 * normal(&mut r) + 0.3 * a, 5.0]
        })
        .collect();
    let config = FlowConfig {
        layers: 2,
        hidden: 8,
        epochs: 3,
        batch_size: 64,
        seed: 1,
        ..FlowConfig::default()
    };
    let (prior, _) = PosePrior::train(&samples, &config).unwrap();
    assert_eq!(prior.active, vec![1, 3]);
    assert_eq!(prior.flow.dim, 2);

    let q = samples[0].clone();
    let (lp, grads) = prior.log_prob_with_grad(&[&q]).unwrap();
    assert_eq!(lp[0], prior.log_prob(&q).unwrap());
    assert_eq!(grads[0][0], 0.0);
    let h = 1e-6;
    for k in [1, 3] {
        let mut p = q.clone();
        p[k] += h;
        let mut m = q.clone();
        m[k] -= h;
        let fd = (prior.log_prob(&p).unwrap() - prior.log_prob(&m).unwrap()) / (2.0 * h);
        assert!((fd - grads[0][k]).abs() < 1e-6);
    }

    let text = prior.to_arrays().to_json().unwrap();
    let back = PosePrior::from_arrays(&NamedArrays::from_json(&text).unwrap()).unwrap();
    assert_eq!(back, prior);
    assert_eq!(back.to_arrays().to_json().unwrap(), text);

    let (retrained, _) = PosePrior::train(&samples, &config).unwrap();
    assert_eq!(retrained.to_arrays().to_json().unwrap(), text);

    let drawn = prior.sample(3, &mut r).unwrap();
    assert!(drawn.iter().all(|s| s[0] == 1.0 && s[4] == 5.0));
}

#[test]
fn standardized_mean_has_base_peak_density() {
    let prior = PosePrior::identity(6);
    assert!((prior.log_prob(&[0.0; 6]).unwrap() + 3.0 * (2.0 * PI).ln()).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_inverse_undoes_forward(seed in 0u64..500, x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let flow = random_flow(4, 3, seed);
        let (y, ld) = flow.transform(&x, Direction::Forward).unwrap();
        let (back, ld_back) = flow.transform(&y, Direction::Inverse).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        prop_assert!((ld + ld_back).abs() < 1e-8);
    }
}
