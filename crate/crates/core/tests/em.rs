mod common;

use common::{equally_spaced, sample_outcomes, standard_truth};
use pnrtomo::density::{Bandwidth, OutcomeGrid};
use pnrtomo::povm::{mixture_to_table, probe_density, CoherentProbe, GaussianMixturePovm};
use pnrtomo::tomo::{
    em_fit, em_run, em_step, log_likelihood, reconstruction_error, responsibilities, EmConfig, InitStrategy, ProbeData,
    ProbeEnsemble,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn analytic_ensemble(model: &GaussianMixturePovm, alpha_sq: &[f64], grid: OutcomeGrid) -> ProbeEnsemble {
    let table = mixture_to_table(model, &grid).unwrap();
    let probes = alpha_sq
        .iter()
        .map(|&a| ProbeData { alpha_sq: a, density: probe_density(&table, CoherentProbe::new(a).unwrap()).values })
        .collect();
    ProbeEnsemble::new(grid, probes).unwrap()
}

fn model_n2() -> GaussianMixturePovm {
    GaussianMixturePovm::new(
        vec![-0.1, 0.9, 2.2],
        vec![vec![1.0], vec![0.3, 0.7], vec![0.1, 0.3, 0.6]],
        vec![vec![0.4], vec![0.5, 0.35], vec![0.45, 0.4, 0.3]],
    )
    .unwrap()
}

/// The M-step written out from per-point responsibilities.
#[test]
fn one_step_matches_brute_force() {
    let grid = OutcomeGrid::new(-1.5, 3.5, 16).unwrap();
    let points = grid.points();
    let w = grid.weights();
    let probes = [0.4, 1.3]
        .iter()
        .enumerate()
        .map(|(k, &a)| ProbeData {
            alpha_sq: a,
            density: points.iter().map(|s| (-(s - 0.7 * k as f64).powi(2)).exp() + 0.01).collect(),
        })
        .collect();
    let data = ProbeEnsemble::new(grid, probes).unwrap();
    let model = model_n2();
    let floor = 1e-6;

    let mut count = vec![vec![0.0; 3]; 3];
    let mut first = vec![vec![0.0; 3]; 3];
    for k in 0..2 {
        for g in 0..16 {
            let gamma = responsibilities(&data, &model, k, g);
            let m = w[g] * data.probes[k].density[g];
            for n in 0..3 {
                for j in 0..=n {
                    count[n][j] += m * gamma[n][j];
                    first[n][j] += m * gamma[n][j] * points[g];
                }
            }
        }
    }
    let means: Vec<f64> = (0..3)
        .map(|j| {
            let num: f64 = (j..3).map(|n| first[n][j] / model.widths[n][j].powi(2)).sum();
            let den: f64 = (j..3).map(|n| count[n][j] / model.widths[n][j].powi(2)).sum();
            num / den
        })
        .collect();
    let mut second = vec![vec![0.0; 3]; 3];
    for k in 0..2 {
        for g in 0..16 {
            let gamma = responsibilities(&data, &model, k, g);
            let m = w[g] * data.probes[k].density[g];
            for n in 0..3 {
                for j in 0..=n {
                    second[n][j] += m * gamma[n][j] * (points[g] - means[j]).powi(2);
                }
            }
        }
    }

    let update = em_step(&data, &model, floor);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(update.clamped.is_empty());
    for j in 0..3 {
        assert!(close(update.model.peak_means[j], means[j]), "mean {j}");
    }
    for n in 0..3 {
        let total: f64 = count[n].iter().sum();
        for j in 0..=n {
            assert!(close(update.model.weights[n][j], count[n][j] / total), "weight {n},{j}");
            assert!(close(update.model.widths[n][j], (second[n][j] / count[n][j]).sqrt()), "width {n},{j}");
        }
    }
    assert!(close(update.previous_log_likelihood, log_likelihood(&data, &model)));
}

#[test]
fn exact_densities_are_fixed_points() {
    let model = model_n2();
    let grid = model.covering_grid(800).unwrap();
    let data = analytic_ensemble(&model, &equally_spaced(0.0, 1.0, 8), grid);
    let update = em_step(&data, &model, 1e-4);
    for j in 0..3 {
        assert!((update.model.peak_means[j] - model.peak_means[j]).abs() < 1e-6);
    }
    for n in 0..3 {
        for j in 0..=n {
            assert!((update.model.weights[n][j] - model.weights[n][j]).abs() < 1e-6);
            assert!((update.model.widths[n][j] / model.widths[n][j] - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn recovers_synthetic_detector() {
    let truth = GaussianMixturePovm::binomial(vec![0.0, 1.0, 2.0, 3.0, 4.0], &[0.12, 0.14, 0.16, 0.18, 0.2], 0.8).unwrap();
    let grid = truth.covering_grid(1000).unwrap();
    let data = analytic_ensemble(&truth, &equally_spaced(0.0, 2.0, 40), grid);
    let config = EmConfig { n_max: 4, max_iterations: 5000, rel_tol: 1e-13, ..EmConfig::default() };
    let (fit, diag) = em_fit(&data, &config).unwrap();
    assert!(diag.means_increasing);
    for j in 0..=4 {
        assert!((fit.peak_means[j] - truth.peak_means[j]).abs() < 0.01, "mean {j}: {}", fit.peak_means[j]);
    }
    for n in 0..=3 {
        for j in 0..=n {
            assert!((fit.weights[n][j] - truth.weights[n][j]).abs() < 0.02, "weight {n},{j}");
        }
    }
    assert!(reconstruction_error(&data, &fit).unwrap() < 0.01);
}

#[test]
fn likelihood_never_decreases_for_any_initialization() {
    let truth = standard_truth(0.85);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let alpha_sq = equally_spaced(0.0, 4.0, 12);
    let samples: Vec<Vec<f64>> = alpha_sq.iter().map(|&a| sample_outcomes(&truth, a, 1500, &mut rng)).collect();
    let data = ProbeEnsemble::from_samples(&alpha_sq, &samples, 400, Bandwidth::Silverman).unwrap();
    for init in [InitStrategy::QuantileSpaced, InitStrategy::KmeansOnScores, InitStrategy::LinearResponse] {
        let config = EmConfig { n_max: 10, max_iterations: 150, rel_tol: 1e-14, init, ..EmConfig::default() };
        let start = pnrtomo::tomo::initial_model(&data, &config).unwrap();
        let (_, diag) = em_run(&data, &config, start).unwrap();
        let worst = diag.log_likelihood.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        assert!(worst <= 1e-9, "{:?}: decrease {worst}", config.init);
    }
}

#[test]
fn single_probe_vacuum_fit() {
    let grid = OutcomeGrid::new(-2.0, 2.0, 200).unwrap();
    let density: Vec<f64> = grid.points().iter().map(|s| pnrtomo::povm::normal_pdf(*s, 0.1, 0.3)).collect();
    let data = ProbeEnsemble::new(grid, vec![ProbeData { alpha_sq: 0.0, density }]).unwrap();
    let (fit, _) = em_fit(&data, &EmConfig { n_max: 1, ..EmConfig::default() }).unwrap();
    assert!((fit.peak_means[0] - 0.1).abs() < 1e-6);
    assert!((fit.widths[0][0] - 0.3).abs() < 1e-4);
}
