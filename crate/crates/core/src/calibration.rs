//! Probe-energy calibration: attenuator fits from paired power readings,
//! their composition, and marginalization of the POVM over the remaining
//! energy-scale uncertainty.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::OutcomeGrid;
use crate::error::{Error, Result};
use crate::inference::estimate_efficiency;
use crate::povm::{binomial_row, mixture_rows, mixture_to_table, GaussianMixturePovm, PovmTable};
use crate::tomo::{em_fit, EmConfig, ProbeEnsemble};

pub const DEFAULT_QUADRATURE_NODES: usize = 7;
/// Relative probe-energy uncertainty assumed by the pipeline.
pub const DEFAULT_CALIBRATION_SIGMA: f64 = 0.01;
pub const DEFAULT_FRESNEL_CORRECTION: Measured = Measured { value: 0.033, sigma: 0.01 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub sigma: f64,
}

impl Measured {
    pub fn relative(&self) -> f64 {
        self.sigma / self.value.abs()
    }
}

/// Power reading pair with absolute errors on both coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPair {
    pub x: f64,
    pub x_err: f64,
    pub y: f64,
    pub y_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPairSeries {
    pub points: Vec<PowerPair>,
}

impl PowerPairSeries {
    pub fn new(points: Vec<PowerPair>) -> Result<Self> {
        for p in &points {
            if !(p.x > 0.0 && p.y > 0.0) {
                return Err(Error::invalid("powers must be positive"));
            }
            if !(p.x_err > 0.0 && p.y_err > 0.0) {
                return Err(Error::invalid("power errors must be positive"));
            }
        }
        Ok(Self { points })
    }

    /// Exchanges the roles of the two meters.
    pub fn swapped(&self) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| PowerPair { x: p.y, x_err: p.y_err, y: p.x, y_err: p.x_err })
                .collect(),
        }
    }

    /// Reads `x,x_err,y,y_err` rows; a non-numeric first line is a header.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 4 => points.push(PowerPair { x: v[0], x_err: v[1], y: v[2], y_err: v[3] }),
                Ok(_) => return Err(Error::Format(format!("line {}: expected 4 columns", i + 1))),
                Err(_) if points.is_empty() && i == 0 => continue,
                Err(e) => return Err(Error::Format(format!("line {}: {e}", i + 1))),
            }
        }
        Self::new(points)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Profile chi-square of `y = r x` with errors in both coordinates, and its
/// first two derivatives in `r`.
fn profile_chi2(series: &PowerPairSeries, r: f64) -> (f64, f64, f64) {
    let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for p in &series.points {
        let u = p.y - r * p.x;
        let du = -p.x;
        let v = p.y_err * p.y_err + r * r * p.x_err * p.x_err;
        let dv = 2.0 * r * p.x_err * p.x_err;
        let ddv = 2.0 * p.x_err * p.x_err;
        f += u * u / v;
        let num = 2.0 * u * du * v - u * u * dv;
        d1 += num / (v * v);
        let dnum = 2.0 * du * du * v - u * u * ddv;
        d2 += dnum / (v * v) - 2.0 * num * dv / (v * v * v);
    }
    (f, d1, d2)
}

/// Weighted total least-squares ratio through the origin.
///
/// Maximizes the errors-in-variables likelihood, i.e. minimizes
/// `sum (y - r x)^2 / (sy^2 + r^2 sx^2)`, and reports the standard error from
/// the curvature at the minimum, `sqrt(2 / chi2'')`.
pub fn fit_attenuation(series: &PowerPairSeries) -> Result<Measured> {
    let pts = &series.points;
    if pts.len() < 2 {
        return Err(Error::invalid("attenuation fit needs at least two points"));
    }
    if pts.iter().all(|p| p.x == pts[0].x) {
        return Err(Error::invalid("all x readings identical"));
    }
    let sxy: f64 = pts.iter().map(|p| p.x * p.y).sum();
    let sxx: f64 = pts.iter().map(|p| p.x * p.x).sum();
    let r0 = sxy / sxx;
    if !(r0 > 0.0) {
        return Err(Error::invalid("degenerate series"));
    }

    // golden-section on log r, then Newton polish
    let chi = |lr: f64| profile_chi2(series, lr.exp()).0;
    let (mut a, mut b) = (r0.ln() - 3.0, r0.ln() + 3.0);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (chi(c), chi(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = chi(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = chi(d);
        }
        if b - a < 1e-10 {
            break;
        }
    }
    let mut r = (0.5 * (a + b)).exp();
    for _ in 0..50 {
        let (_, d1, d2) = profile_chi2(series, r);
        if !(d2 > 0.0) {
            break;
        }
        let next = r - d1 / d2;
        if !(next > 0.0) {
            break;
        }
        let done = (next - r).abs() <= 1e-15 * r;
        r = next;
        if done {
            break;
        }
    }
    let (_, _, d2) = profile_chi2(series, r);
    if !(d2 > 0.0) {
        return Err(Error::invalid("chi-square has no curvature at the fitted ratio"));
    }
    Ok(Measured { value: r, sigma: (2.0 / d2).sqrt() })
}

/// Product of attenuation stages. Relative errors add linearly because the
/// stages were calibrated against the same meter.
pub fn chain_attenuations(stages: &[Measured]) -> Result<Measured> {
    if stages.is_empty() {
        return Err(Error::invalid("no attenuation stages"));
    }
    let value: f64 = stages.iter().map(|m| m.value).product();
    let rel: f64 = stages.iter().map(Measured::relative).sum();
    Ok(Measured { value, sigma: rel * value.abs() })
}

/// Calibrated attenuation of the probe source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationFit {
    pub eta_att: f64,
    pub sigma_eta: f64,
    pub fresnel_correction: Measured,
}

impl AttenuationFit {
    /// Chains the fitted stages with the Fresnel loss of the unterminated
    /// monitor fibre, which makes the monitor read low by `1 + f`.
    pub fn from_stages(stages: &[Measured], fresnel: Measured) -> Result<Self> {
        let factor = Measured { value: 1.0 + fresnel.value, sigma: fresnel.sigma };
        let mut all = stages.to_vec();
        all.push(factor);
        let total = chain_attenuations(&all)?;
        Ok(Self { eta_att: total.value, sigma_eta: total.sigma, fresnel_correction: fresnel })
    }

    pub fn relative_sigma(&self) -> f64 {
        self.sigma_eta / self.eta_att
    }
}

/// Gaussian prior on the probe-energy scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPrior {
    pub mean: f64,
    pub sigma: f64,
}

impl EnergyPrior {
    pub fn relative(sigma: f64) -> Self {
        Self { mean: 1.0, sigma }
    }
}

/// Probabilists' Gauss-Hermite rule (weight `N(0, 1)`) by Golub-Welsch.
/// Weights sum to one.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    if n == 0 {
        return Vec::new();
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    // exact symmetry: mirror the upper half and zero the middle node
    for k in 0..n / 2 {
        let (x, w) = (0.5 * (nodes[n - 1 - k].0 - nodes[k].0), 0.5 * (nodes[k].1 + nodes[n - 1 - k].1));
        nodes[k] = (-x, w);
        nodes[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        nodes[n / 2].0 = 0.0;
    }
    let total: f64 = nodes.iter().map(|n| n.1).sum();
    nodes.iter_mut().for_each(|n| n.1 /= total);
    nodes
}

/// Model the detector would have if the true probe energies were `scale`
/// times the assumed ones.
///
/// Energy scaling is indistinguishable from a change of loss, so each row's
/// weights are shifted by the change in binomial mass between efficiency
/// `eta` and `eta / scale`; widths and peak centers are kept.
pub fn energy_scaled_model(model: &GaussianMixturePovm, eta: f64, scale: f64) -> GaussianMixturePovm {
    let shifted = (eta / scale).clamp(0.0, 1.0);
    let weights = (0..=model.n_max)
        .map(|n| {
            let base = binomial_row(n, eta);
            let moved = binomial_row(n, shifted);
            let mut row: Vec<f64> = model.weights[n]
                .iter()
                .zip(base.iter().zip(&moved))
                .map(|(b, (old, new))| (b + new - old).max(0.0))
                .collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            } else {
                row = model.weights[n].clone();
            }
            row
        })
        .collect();
    GaussianMixturePovm {
        n_max: model.n_max,
        peak_means: model.peak_means.clone(),
        weights,
        widths: model.widths.clone(),
    }
}

fn quadrature_scales(prior: EnergyPrior, n_quad: usize) -> Result<Vec<(f64, f64)>> {
    if n_quad == 0 || n_quad % 2 == 0 {
        return Err(Error::invalid(format!("quadrature order must be odd, got {n_quad}")));
    }
    if !(prior.sigma >= 0.0) || !(prior.mean > 0.0) {
        return Err(Error::invalid("energy prior needs mean > 0 and sigma >= 0"));
    }
    let scales: Vec<(f64, f64)> = gauss_hermite(n_quad)
        .into_iter()
        .map(|(x, w)| ((prior.mean + prior.sigma * x) / prior.mean, w))
        .collect();
    if scales.iter().any(|(c, _)| *c <= 0.0) {
        return Err(Error::invalid("energy prior too wide: quadrature node at non-positive scale"));
    }
    Ok(scales)
}

fn average_tables(grid: &OutcomeGrid, tables: &[(PovmTable, f64)]) -> PovmTable {
    let rows = tables[0].0.theta.len();
    let mut theta = vec![vec![0.0; grid.n_points]; rows];
    // fixed node order keeps the sum reproducible
    for (table, w) in tables {
        for (acc, row) in theta.iter_mut().zip(&table.theta) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += w * v;
            }
        }
    }
    PovmTable { grid: *grid, theta }
}

/// POVM averaged over a Gaussian energy-scale prior, reweighting the fitted
/// mixture at each Gauss-Hermite node (see [`energy_scaled_model`]).
pub fn marginalize_povm(
    model: &GaussianMixturePovm,
    prior: EnergyPrior,
    grid: &OutcomeGrid,
    n_quad: usize,
) -> Result<PovmTable> {
    let scales = quadrature_scales(prior, n_quad)?;
    let base = mixture_to_table(model, grid)?;
    if prior.sigma == 0.0 {
        return Ok(base);
    }
    let eta = estimate_efficiency(model).eta;
    let tables: Vec<(PovmTable, f64)> = scales
        .par_iter()
        .map(|&(c, w)| (mixture_rows(&energy_scaled_model(model, eta, c), grid), w))
        .collect();
    Ok(average_tables(grid, &tables))
}

/// Marginalization by refitting: EM is rerun at every node with the probe
/// energies rescaled. Returns the averaged table and the per-node models.
pub fn marginalize_povm_refit(
    data: &ProbeEnsemble,
    config: &EmConfig,
    prior: EnergyPrior,
    n_quad: usize,
) -> Result<(PovmTable, Vec<GaussianMixturePovm>)> {
    let scales = quadrature_scales(prior, n_quad)?;
    let fits: Vec<(GaussianMixturePovm, f64)> = scales
        .iter()
        .map(|&(c, w)| {
            let scaled = data.rescaled(c)?;
            Ok((em_fit(&scaled, config)?.0, w))
        })
        .collect::<Result<_>>()?;
    let tables: Vec<(PovmTable, f64)> = fits.iter().map(|(m, w)| (mixture_rows(m, &data.grid), *w)).collect();
    Ok((average_tables(&data.grid, &tables), fits.into_iter().map(|(m, _)| m).collect()))
}

/// Per-row L1 distance between two tables on the same grid.
pub fn row_l1_distance(a: &PovmTable, b: &PovmTable) -> Result<Vec<f64>> {
    if a.grid != b.grid || a.theta.len() != b.theta.len() {
        return Err(Error::dim("tables differ in grid or rows"));
    }
    Ok(a.theta
        .iter()
        .zip(&b.theta)
        .map(|(x, y)| {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect();
            a.grid.integrate(&d)
        })
        .collect())
}
