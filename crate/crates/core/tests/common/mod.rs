#![allow(dead_code)]

use pnrtomo::density::OutcomeGrid;
use pnrtomo::povm::{normal_pdf, PovmTable};
use pnrtomo::sim::{draw_trial, DetectorGroundTruth};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Unbiased sample covariance of the rows.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = rows.len();
    let n = rows[0].len();
    let mean: Vec<f64> = (0..n).map(|t| rows.iter().map(|r| r[t]).sum::<f64>() / m as f64).collect();
    (0..n)
        .map(|a| {
            (0..n)
                .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (m - 1) as f64)
                .collect()
        })
        .collect()
}

/// Detector used throughout: unit spacing, width 0.15, efficiency 0.9.
pub fn standard_truth(efficiency: f64) -> DetectorGroundTruth {
    DetectorGroundTruth::linear(efficiency, 1.0, 0.15, 32, 30).unwrap()
}

/// Pulse-amplitude outcomes for a coherent probe, drawn without rendering
/// traces.
pub fn sample_outcomes<R: Rng>(truth: &DetectorGroundTruth, alpha_sq: f64, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let n = if alpha_sq > 0.0 { Poisson::new(alpha_sq).unwrap().sample(rng) as usize } else { 0 };
            let noise: f64 = rand_distr::Normal::new(0.0, truth.noise_sigma).unwrap().sample(rng);
            draw_trial(n, truth, rng).unwrap().amplitude + noise
        })
        .collect()
}

/// One Gaussian row per mean.
pub fn gaussian_table(grid: OutcomeGrid, means: &[f64], sd: f64) -> PovmTable {
    let theta = means
        .iter()
        .map(|m| grid.points().into_iter().map(|s| normal_pdf(s, *m, sd)).collect())
        .collect();
    PovmTable { grid, theta }
}

pub fn equally_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}
