//! Detector tomography from coherent-probe outcome densities.
//!
//! [`em_fit`] maximizes the grid-quadrature log-likelihood
//! `L = sum_k int q(s|a_k) log p(s|a_k) ds` over a [`GaussianMixturePovm`] by
//! expectation-maximization. [`lsq_fit`] is the model-free baseline: a
//! pointwise nonnegative least-squares inversion of the Poisson design.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{estimate_density_with, Bandwidth, DensityEstimate, OutcomeGrid};
use crate::error::{Error, Result};
use crate::povm::{
    binomial_row, mixture_rows, normal_pdf, poisson_coeffs, GaussianMixturePovm, PovmTable,
    TRUNCATION_WARNING_MASS,
};

/// Densities below this are treated as zero in logs and ratios.
const TINY: f64 = 1e-300;

/// Efficiency used to seed the mixture weights when the data do not resolve
/// individual peaks.
const INIT_EFFICIENCY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeData {
    pub alpha_sq: f64,
    pub density: Vec<f64>,
}

/// Probe energies with their outcome densities on one shared grid, sorted by
/// energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEnsemble {
    pub grid: OutcomeGrid,
    pub probes: Vec<ProbeData>,
}

impl ProbeEnsemble {
    pub fn new(grid: OutcomeGrid, probes: Vec<ProbeData>) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::invalid("ensemble needs at least one probe"));
        }
        for p in &probes {
            if p.density.len() != grid.n_points {
                return Err(Error::dim("probe density does not match the grid"));
            }
            if !(p.alpha_sq >= 0.0) || !p.alpha_sq.is_finite() {
                return Err(Error::invalid(format!("bad probe energy {}", p.alpha_sq)));
            }
            if p.density.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid("probe densities must be finite and nonnegative"));
            }
        }
        if probes.windows(2).any(|w| w[1].alpha_sq <= w[0].alpha_sq) {
            return Err(Error::invalid("probe energies must be distinct and ascending"));
        }
        Ok(Self { grid, probes })
    }

    pub fn from_estimates(estimates: Vec<(f64, DensityEstimate)>) -> Result<Self> {
        let grid = estimates
            .first()
            .map(|(_, d)| d.grid)
            .ok_or_else(|| Error::invalid("ensemble needs at least one probe"))?;
        if estimates.iter().any(|(_, d)| d.grid != grid) {
            return Err(Error::dim("all densities must share one grid"));
        }
        let probes = estimates
            .into_iter()
            .map(|(alpha_sq, d)| ProbeData { alpha_sq, density: d.values })
            .collect();
        Self::new(grid, probes)
    }

    /// Density estimates of each probe's scores on a shared grid spanning
    /// all samples plus eight of the widest bandwidths on either side.
    pub fn from_samples(alpha_sq: &[f64], samples: &[Vec<f64>], n_points: usize, bandwidth: Bandwidth) -> Result<Self> {
        if alpha_sq.len() != samples.len() {
            return Err(Error::dim("one sample set per probe energy required"));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in samples.iter().flatten() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !(lo.is_finite() && hi.is_finite()) || samples.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every probe needs finite samples"));
        }
        let selected: Vec<Option<f64>> = samples.par_iter().map(|set| bandwidth.select(set)).collect();
        let h_max = selected.iter().flatten().copied().fold(0.0, f64::max);
        let pad = if h_max > 0.0 { 8.0 * h_max } else { (hi - lo).max(1.0) };
        let grid = OutcomeGrid::new(lo - pad, hi + pad, n_points)?;
        let estimates = samples
            .par_iter()
            .zip(alpha_sq.par_iter().zip(&selected))
            .map(|(set, (&a, h))| {
                let h = h.unwrap_or(grid.spacing);
                Ok((a, estimate_density_with(set, &grid, Bandwidth::Fixed(h))?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_estimates(estimates)
    }

    pub fn alpha_sq(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.alpha_sq).collect()
    }

    /// Same densities attributed to energies scaled by `factor`.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        let probes = self
            .probes
            .iter()
            .map(|p| ProbeData { alpha_sq: p.alpha_sq * factor, density: p.density.clone() })
            .collect();
        Self::new(self.grid, probes)
    }

    fn poisson_design(&self, n_max: usize) -> Vec<Vec<f64>> {
        self.probes
            .iter()
            .map(|p| poisson_coeffs(p.alpha_sq, n_max).expect("validated energy"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "model")]
pub enum InitStrategy {
    /// Means at the `(j + 1/2)/(n_max + 1)` quantiles of the highest-energy
    /// probe.
    QuantileSpaced,
    /// Weighted 1-D k-means on the pooled density.
    KmeansOnScores,
    /// Regress mean score on probe energy: the intercept is the vacuum peak and
    /// the slope, divided by the seed efficiency, the peak spacing.
    #[default]
    LinearResponse,
    Explicit(GaussianMixturePovm),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub n_max: usize,
    pub max_iterations: usize,
    pub rel_tol: f64,
    /// Defaults to half the grid spacing.
    pub sigma_floor: Option<f64>,
    pub init: InitStrategy,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_max: crate::povm::DEFAULT_N_MAX,
            max_iterations: 2000,
            rel_tol: 1e-8,
            sigma_floor: None,
            init: InitStrategy::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("rel_tol must be positive"));
        }
        if let Some(f) = self.sigma_floor {
            if !(f > 0.0) {
                return Err(Error::invalid("sigma_floor must be positive"));
            }
        }
        if let InitStrategy::Explicit(m) = &self.init {
            if m.n_max != self.n_max {
                return Err(Error::dim("explicit init model has a different n_max"));
            }
        }
        Ok(())
    }

    fn floor(&self, grid: &OutcomeGrid) -> f64 {
        self.sigma_floor.unwrap_or(0.5 * grid.spacing)
    }
}

/// Model after some number of EM iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub model: GaussianMixturePovm,
    pub log_likelihood: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EmDiagnostics {
    /// Log-likelihood of the model entering each iteration, then of the final
    /// model.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(n, j)` components whose width hit the floor at least once.
    pub sigma_clamped: Vec<(usize, usize)>,
    /// `(n, j)` components that lost all responsibility and were zeroed.
    pub zero_weight: Vec<(usize, usize)>,
    /// Probe indices whose Poisson mass beyond `n_max` exceeds the warning
    /// threshold.
    pub truncated_probes: Vec<usize>,
    pub means_increasing: bool,
}

/// Result of one E+M pass.
#[derive(Debug, Clone)]
pub struct EmUpdate {
    pub model: GaussianMixturePovm,
    /// Log-likelihood of the model the pass started from.
    pub previous_log_likelihood: f64,
    pub clamped: Vec<(usize, usize)>,
    pub zeroed: Vec<(usize, usize)>,
}

/// Index of `(n, j)` in a lower-triangular flat layout.
#[inline]
fn tri(n: usize, j: usize) -> usize {
    n * (n + 1) / 2 + j
}

struct Workspace<'a> {
    data: &'a ProbeEnsemble,
    design: Vec<Vec<f64>>,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(data: &'a ProbeEnsemble, n_max: usize) -> Self {
        Self {
            data,
            design: data.poisson_design(n_max),
            points: data.grid.points(),
            weights: data.grid.weights(),
        }
    }

    fn gaussians(&self, model: &GaussianMixturePovm) -> Vec<Vec<f64>> {
        let n_max = model.n_max;
        (0..tri(n_max + 1, 0))
            .into_par_iter()
            .map(|idx| {
                let (n, j) = untri(idx);
                let (mu, sd) = (model.peak_means[j], model.widths[n][j]);
                self.points.iter().map(|&s| normal_pdf(s, mu, sd)).collect()
            })
            .collect()
    }

    fn rows(&self, model: &GaussianMixturePovm, gauss: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..=model.n_max)
            .into_par_iter()
            .map(|n| {
                let mut row = vec![0.0; self.points.len()];
                for j in 0..=n {
                    let b = model.weights[n][j];
                    if b == 0.0 {
                        continue;
                    }
                    for (r, g) in row.iter_mut().zip(&gauss[tri(n, j)]) {
                        *r += b * g;
                    }
                }
                row
            })
            .collect()
    }

    /// Per-probe log-likelihood terms and data/model ratios `q_k / p_k`.
    fn expectation(&self, rows: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let per_probe: Vec<(f64, Vec<f64>)> = self
            .data
            .probes
            .par_iter()
            .zip(&self.design)
            .map(|(probe, coeffs)| {
                let mut ll = 0.0;
                let mut ratio = vec![0.0; self.points.len()];
                for g in 0..self.points.len() {
                    let q = probe.density[g];
                    let p: f64 = rows.iter().zip(coeffs).map(|(row, f)| f * row[g]).sum();
                    if q > 0.0 {
                        ll += self.weights[g] * q * p.max(TINY).ln();
                        if p > TINY {
                            ratio[g] = q / p;
                        }
                    }
                }
                (ll, ratio)
            })
            .collect();
        let ll = per_probe.iter().map(|(l, _)| l).sum();
        (ll, per_probe.into_iter().map(|(_, r)| r).collect())
    }

    fn log_likelihood(&self, model: &GaussianMixturePovm) -> f64 {
        let gauss = self.gaussians(model);
        let rows = self.rows(model, &gauss);
        self.expectation(&rows).0
    }

    fn step(&self, model: &GaussianMixturePovm, sigma_floor: f64) -> EmUpdate {
        let n_max = model.n_max;
        let gauss = self.gaussians(model);
        let rows = self.rows(model, &gauss);
        let (ll, ratios) = self.expectation(&rows);

        // R_n(s) = sum_k F_{k,n} q_k(s) / p_k(s), summed in fixed probe order.
        let pooled: Vec<Vec<f64>> = (0..=n_max)
            .into_par_iter()
            .map(|n| {
                let mut r = vec![0.0; self.points.len()];
                for (ratio, coeffs) in ratios.iter().zip(&self.design) {
                    let f = coeffs[n];
                    if f == 0.0 {
                        continue;
                    }
                    for (acc, v) in r.iter_mut().zip(ratio) {
                        *acc += f * v;
                    }
                }
                r
            })
            .collect();

        // Responsibility mass per grid point, w_g beta N(s) R_n(s).
        let mass: Vec<Vec<f64>> = (0..tri(n_max + 1, 0))
            .into_par_iter()
            .map(|idx| {
                let (n, j) = untri(idx);
                let b = model.weights[n][j];
                gauss[idx]
                    .iter()
                    .zip(&pooled[n])
                    .zip(&self.weights)
                    .map(|((g, r), w)| w * b * g * r)
                    .collect()
            })
            .collect();
        let counts: Vec<f64> = mass.iter().map(|m| m.iter().sum()).collect();
        let first: Vec<f64> = mass
            .iter()
            .map(|m| m.iter().zip(&self.points).map(|(r, s)| r * s).sum())
            .collect();

        // Shared means: stationary point of the expected complete-data
        // log-likelihood in mu_j at the current widths.
        let mut means = model.peak_means.clone();
        for (j, mean) in means.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for n in j..=n_max {
                let var = model.widths[n][j].powi(2);
                num += first[tri(n, j)] / var;
                den += counts[tri(n, j)] / var;
            }
            if den > TINY {
                *mean = num / den;
            }
        }

        let mut widths = model.widths.clone();
        let mut weights = model.weights.clone();
        let mut clamped = Vec::new();
        let mut zeroed = Vec::new();
        for n in 0..=n_max {
            for j in 0..=n {
                let idx = tri(n, j);
                if counts[idx] > TINY {
                    let mu = means[j];
                    let second: f64 = mass[idx]
                        .iter()
                        .zip(&self.points)
                        .map(|(r, s)| r * (s - mu) * (s - mu))
                        .sum();
                    let sd = (second / counts[idx]).sqrt();
                    if sd < sigma_floor || !sd.is_finite() {
                        widths[n][j] = sigma_floor;
                        clamped.push((n, j));
                    } else {
                        widths[n][j] = sd;
                    }
                }
            }
            let total: f64 = (0..=n).map(|j| counts[tri(n, j)]).sum();
            if total > TINY {
                for j in 0..=n {
                    let c = counts[tri(n, j)];
                    weights[n][j] = c / total;
                    if c == 0.0 && model.weights[n][j] > 0.0 {
                        zeroed.push((n, j));
                    }
                }
            }
        }

        EmUpdate {
            model: GaussianMixturePovm { n_max, peak_means: means, weights, widths },
            previous_log_likelihood: ll,
            clamped,
            zeroed,
        }
    }
}

fn untri(idx: usize) -> (usize, usize) {
    let mut n = ((((8 * idx + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while tri(n + 1, 0) <= idx {
        n += 1;
    }
    while tri(n, 0) > idx {
        n -= 1;
    }
    (n, idx - tri(n, 0))
}

/// Grid-quadrature log-likelihood of `model` for the ensemble.
pub fn log_likelihood(data: &ProbeEnsemble, model: &GaussianMixturePovm) -> f64 {
    Workspace::new(data, model.n_max).log_likelihood(model)
}

/// One expectation + maximization pass.
pub fn em_step(data: &ProbeEnsemble, model: &GaussianMixturePovm, sigma_floor: f64) -> EmUpdate {
    Workspace::new(data, model.n_max).step(model, sigma_floor)
}

/// Responsibilities `gamma_{s,k,n,j}` at probe `k`, grid point `g`, indexed
/// `[n][j]`. All zero where the model density vanishes.
pub fn responsibilities(data: &ProbeEnsemble, model: &GaussianMixturePovm, k: usize, g: usize) -> Vec<Vec<f64>> {
    let s = data.grid.point(g);
    let coeffs = poisson_coeffs(data.probes[k].alpha_sq, model.n_max).expect("validated energy");
    let mut gamma: Vec<Vec<f64>> = (0..=model.n_max)
        .map(|n| {
            (0..=n)
                .map(|j| {
                    coeffs[n]
                        * model.weights[n][j]
                        * normal_pdf(s, model.peak_means[j], model.widths[n][j])
                })
                .collect()
        })
        .collect();
    let total: f64 = gamma.iter().flatten().sum();
    if total > TINY {
        gamma.iter_mut().flatten().for_each(|v| *v /= total);
    } else {
        gamma.iter_mut().flatten().for_each(|v| *v = 0.0);
    }
    gamma
}

/// Starting model for `config.init`.
pub fn initial_model(data: &ProbeEnsemble, config: &EmConfig) -> Result<GaussianMixturePovm> {
    let n_max = config.n_max;
    let grid = &data.grid;
    let mut eta0 = INIT_EFFICIENCY;
    let means: Vec<f64> = match &config.init {
        InitStrategy::Explicit(m) => return Ok(m.clone()),
        InitStrategy::LinearResponse => {
            let xs = data.alpha_sq();
            let ys: Vec<f64> = data.probes.iter().map(|p| density_mean(grid, &p.density)).collect();
            let (intercept, slope) = if xs.len() >= 2 {
                linear_fit(&xs, &ys)
            } else {
                (ys[0], 0.0)
            };
            // the mean response is eta * spacing, so the spacing has to come
            // from resolved peaks before the efficiency can be separated out
            let spacing = match resolved_spacing(grid, &pooled(data)) {
                Some(d) if slope > 0.0 => {
                    eta0 = (slope / d).clamp(0.05, 1.0);
                    d
                }
                Some(d) => d,
                None if slope > 0.0 => slope / INIT_EFFICIENCY,
                None => pooled_sd(data).max(grid.spacing),
            };
            (0..=n_max).map(|j| intercept + j as f64 * spacing).collect()
        }
        InitStrategy::QuantileSpaced => {
            let top = &data.probes.last().expect("nonempty").density;
            let cdf = cumulative(grid, top);
            (0..=n_max)
                .map(|j| quantile(grid, &cdf, (j as f64 + 0.5) / (n_max + 1) as f64))
                .collect()
        }
        InitStrategy::KmeansOnScores => kmeans_means(data, n_max),
    };
    let means = strictly_increasing(means, grid.spacing);
    let spacing = if n_max > 0 {
        (means[n_max] - means[0]) / n_max as f64
    } else {
        4.0 * pooled_sd(data)
    };
    let width = (spacing / 4.0).max(config.floor(grid));
    let weights = (0..=n_max).map(|n| binomial_row(n, eta0)).collect();
    let widths = (0..=n_max).map(|n| vec![width; n + 1]).collect();
    GaussianMixturePovm::new(means, weights, widths)
}

/// Median gap between the leftmost prominent local maxima of `q`, if at
/// least two are resolved.
fn resolved_spacing(grid: &OutcomeGrid, q: &[f64]) -> Option<f64> {
    const REACH: usize = 3;
    const MAX_PEAKS: usize = 8;
    let top = q.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) {
        return None;
    }
    let n = q.len();
    let peaks: Vec<usize> = (REACH..n.saturating_sub(REACH))
        .filter(|&g| {
            q[g] >= 0.05 * top
                && (g - REACH..=g + REACH).all(|h| h == g || q[h] < q[g] || (h > g && q[h] <= q[g]))
        })
        .take(MAX_PEAKS)
        .collect();
    if peaks.len() < 2 {
        return None;
    }
    let mut gaps: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64 * grid.spacing).collect();
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

fn strictly_increasing(mut means: Vec<f64>, step: f64) -> Vec<f64> {
    for j in 1..means.len() {
        if means[j] <= means[j - 1] {
            means[j] = means[j - 1] + 1e-3 * step;
        }
    }
    means
}

fn density_mean(grid: &OutcomeGrid, q: &[f64]) -> f64 {
    let mass = grid.integrate(q);
    let first: Vec<f64> = q.iter().enumerate().map(|(g, v)| v * grid.point(g)).collect();
    grid.integrate(&first) / mass
}

fn pooled(data: &ProbeEnsemble) -> Vec<f64> {
    let mut pooled = vec![0.0; data.grid.n_points];
    for p in &data.probes {
        for (a, v) in pooled.iter_mut().zip(&p.density) {
            *a += v;
        }
    }
    pooled
}

fn pooled_sd(data: &ProbeEnsemble) -> f64 {
    let grid = &data.grid;
    let q = pooled(data);
    let mu = density_mean(grid, &q);
    let second: Vec<f64> = q.iter().enumerate().map(|(g, v)| v * (grid.point(g) - mu).powi(2)).collect();
    (grid.integrate(&second) / grid.integrate(&q)).sqrt()
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

fn cumulative(grid: &OutcomeGrid, q: &[f64]) -> Vec<f64> {
    let mut cdf = vec![0.0; q.len()];
    for g in 1..q.len() {
        cdf[g] = cdf[g - 1] + 0.5 * grid.spacing * (q[g] + q[g - 1]);
    }
    let total = cdf[q.len() - 1];
    if total > 0.0 {
        cdf.iter_mut().for_each(|c| *c /= total);
    }
    cdf
}

fn quantile(grid: &OutcomeGrid, cdf: &[f64], p: f64) -> f64 {
    let g = cdf.partition_point(|&c| c < p);
    if g == 0 {
        return grid.s_min;
    }
    if g >= cdf.len() {
        return grid.s_max;
    }
    let (c0, c1) = (cdf[g - 1], cdf[g]);
    let t = if c1 > c0 { (p - c0) / (c1 - c0) } else { 0.0 };
    grid.point(g - 1) + t * grid.spacing
}

fn kmeans_means(data: &ProbeEnsemble, n_max: usize) -> Vec<f64> {
    let grid = &data.grid;
    let q = pooled(data);
    let cdf = cumulative(grid, &q);
    let mut centers: Vec<f64> = (0..=n_max)
        .map(|j| quantile(grid, &cdf, (j as f64 + 0.5) / (n_max + 1) as f64))
        .collect();
    let points = grid.points();
    for _ in 0..200 {
        let mut num = vec![0.0; n_max + 1];
        let mut den = vec![0.0; n_max + 1];
        for (s, w) in points.iter().zip(&q) {
            let c = centers
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
                .map(|(i, _)| i)
                .expect("at least one center");
            num[c] += w * s;
            den[c] += w;
        }
        let next: Vec<f64> = centers
            .iter()
            .enumerate()
            .map(|(c, old)| if den[c] > 0.0 { num[c] / den[c] } else { *old })
            .collect();
        let moved = next.iter().zip(&centers).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        centers = next;
        if moved < 1e-12 {
            break;
        }
    }
    centers.sort_by(f64::total_cmp);
    centers
}

/// Gaussian-mixture maximum-likelihood tomography by EM.
///
/// Stops when the relative log-likelihood change falls below `rel_tol`
/// (relative to `max(|L|, 1)`) or after `max_iterations` passes.
pub fn em_fit(data: &ProbeEnsemble, config: &EmConfig) -> Result<(GaussianMixturePovm, EmDiagnostics)> {
    config.validate()?;
    let init = initial_model(data, config)?;
    let (state, diagnostics) = em_run(data, config, init)?;
    Ok((state.model, diagnostics))
}

/// EM from an explicit starting model.
pub fn em_run(
    data: &ProbeEnsemble,
    config: &EmConfig,
    init: GaussianMixturePovm,
) -> Result<(EmState, EmDiagnostics)> {
    config.validate()?;
    if init.n_max != config.n_max {
        return Err(Error::dim("initial model n_max differs from config"));
    }
    let ws = Workspace::new(data, config.n_max);
    let floor = config.floor(&data.grid);
    let mut diag = EmDiagnostics::default();
    diag.truncated_probes = ws
        .design
        .iter()
        .enumerate()
        .filter(|(_, c)| c.iter().sum::<f64>() < TRUNCATION_WARNING_MASS)
        .map(|(k, _)| k)
        .collect();

    let mut model = init;
    let mut iteration = 0;
    while iteration < config.max_iterations {
        let update = ws.step(&model, floor);
        for c in update.clamped {
            if !diag.sigma_clamped.contains(&c) {
                diag.sigma_clamped.push(c);
            }
        }
        for c in update.zeroed {
            if !diag.zero_weight.contains(&c) {
                diag.zero_weight.push(c);
            }
        }
        let ll = update.previous_log_likelihood;
        model = update.model;
        iteration += 1;
        if let Some(&prev) = diag.log_likelihood.last() {
            let change = (ll - prev).abs() / f64::max(prev.abs(), 1.0);
            diag.log_likelihood.push(ll);
            if change < config.rel_tol {
                diag.converged = true;
                break;
            }
        } else {
            diag.log_likelihood.push(ll);
        }
    }
    let final_ll = ws.log_likelihood(&model);
    diag.log_likelihood.push(final_ll);
    diag.iterations = iteration;
    diag.means_increasing = model.peak_means.windows(2).all(|w| w[1] > w[0]);
    Ok((EmState { model, log_likelihood: final_ll, iteration }, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LsqDiagnostics {
    /// Grid points where the projected-gradient iteration hit its cap.
    pub unconverged_points: usize,
    pub max_iterations_used: usize,
    /// Grid points where the unconstrained solution has a clearly negative
    /// entry, i.e. the nonnegativity projection was doing real work.
    pub negative_unconstrained_points: usize,
    pub min_unconstrained_value: f64,
    pub row_integrals: Vec<f64>,
    /// Total variation of each row over `2 (n + 1) max(row)`. A row made of at
    /// most `n + 1` peaks stays at or below 1.
    pub row_oscillation: Vec<f64>,
    pub underdetermined: bool,
}

impl LsqDiagnostics {
    pub fn artifact_flagged(&self) -> bool {
        self.negative_unconstrained_points > 0
            || self.row_oscillation.iter().any(|&o| o > OSCILLATION_LIMIT)
    }
}

pub const OSCILLATION_LIMIT: f64 = 1.0;

/// Entries below `-NEGATIVE_FRACTION * max|theta|` count as negative.
const NEGATIVE_FRACTION: f64 = 1e-3;

pub const LSQ_TOLERANCE: f64 = 1e-10;
pub const LSQ_MAX_ITERATIONS: usize = 50_000;
pub const DEFAULT_LSQ_REGULARIZATION: f64 = 1e-3;

/// Oscillation metric of a row with `n_peaks` allowed peaks.
pub fn row_oscillation(row: &[f64], n_peaks: usize) -> f64 {
    let max = row.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let tv: f64 = row.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    tv / (2.0 * n_peaks as f64 * max)
}

/// Pointwise nonnegative least squares with neighbor smoothing.
///
/// Each grid point solves
/// `min_{theta >= 0} sum_k (q_k - sum_n F_{k,n} theta_n)^2 + reg sum_n (theta_n - theta_n(s_prev))^2`
/// by accelerated projected gradient, warm-started from the previous point.
pub fn lsq_fit(data: &ProbeEnsemble, n_max: usize, regularization: f64) -> Result<(PovmTable, LsqDiagnostics)> {
    if !(regularization >= 0.0) {
        return Err(Error::invalid("regularization must be nonnegative"));
    }
    let dim = n_max + 1;
    let design = data.poisson_design(n_max);
    let k = design.len();
    let f = DMatrix::from_fn(k, dim, |r, c| design[r][c]);
    let gram = f.transpose() * &f;
    let curvature = gram.clone() + DMatrix::identity(dim, dim) * regularization;
    let lipschitz = curvature.symmetric_eigenvalues().max().max(TINY);
    let step = 1.0 / lipschitz;
    let unconstrained = curvature.clone().cholesky();

    let grid = data.grid;
    let mut theta = vec![vec![0.0; grid.n_points]; dim];
    let mut diag = LsqDiagnostics {
        underdetermined: k < dim,
        min_unconstrained_value: f64::INFINITY,
        ..Default::default()
    };
    let mut prev = DVector::zeros(dim);
    for g in 0..grid.n_points {
        let q = DVector::from_fn(k, |r, _| data.probes[r].density[g]);
        let reg = if g == 0 { 0.0 } else { regularization };
        let mut rhs = f.transpose() * &q;
        if reg > 0.0 {
            rhs += &prev * reg;
        }
        let hess = if reg == regularization { curvature.clone() } else { gram.clone() };

        let free = match (&unconstrained, reg == regularization) {
            (Some(ch), true) => Some(ch.solve(&rhs)),
            _ => hess.clone().cholesky().map(|c| c.solve(&rhs)),
        };
        if let Some(x) = free {
            let scale = x.amax().max(TINY);
            let min = x.min();
            diag.min_unconstrained_value = diag.min_unconstrained_value.min(min);
            if min < -NEGATIVE_FRACTION * scale {
                diag.negative_unconstrained_points += 1;
            }
        }

        let (x, iters, converged) = projected_gradient(&hess, &rhs, prev.clone(), step);
        diag.max_iterations_used = diag.max_iterations_used.max(iters);
        if !converged {
            diag.unconverged_points += 1;
        }
        for n in 0..dim {
            theta[n][g] = x[n];
        }
        prev = x;
    }
    let table = PovmTable { grid, theta };
    diag.row_integrals = table.row_integrals();
    diag.row_oscillation = table
        .theta
        .iter()
        .enumerate()
        .map(|(n, row)| row_oscillation(row, n + 1))
        .collect();
    Ok((table, diag))
}

/// FISTA with gradient restart on `1/2 x'Hx - b'x` over `x >= 0`.
fn projected_gradient(
    hess: &DMatrix<f64>,
    rhs: &DVector<f64>,
    start: DVector<f64>,
    step: f64,
) -> (DVector<f64>, usize, bool) {
    let mut x = start.map(|v| v.max(0.0));
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let scale = rhs.amax().max(1.0);
    for it in 1..=LSQ_MAX_ITERATIONS {
        let grad = hess * &y - rhs;
        let next = (&y - grad * step).map(|v| v.max(0.0));
        let delta = (&next - &x).amax();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        // restart when the step points against the momentum
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            y = next.clone();
            t = 1.0;
        } else {
            y = &next + (&next - &x) * momentum;
            t = t_next;
        }
        x = next;
        if delta <= LSQ_TOLERANCE * scale {
            // confirm with the projected-gradient residual at x
            let g = hess * &x - rhs;
            let res = (&x - (&x - &g * step).map(|v| v.max(0.0))).amax();
            if res <= LSQ_TOLERANCE * scale {
                return (x, it, true);
            }
        }
    }
    (x, LSQ_MAX_ITERATIONS, false)
}

/// Anything that yields a grid POVM for reconstruction.
pub trait PovmSource {
    fn table_on(&self, grid: &OutcomeGrid) -> Result<PovmTable>;
}

impl PovmSource for PovmTable {
    fn table_on(&self, grid: &OutcomeGrid) -> Result<PovmTable> {
        if self.grid != *grid {
            return Err(Error::dim("table grid differs from data grid"));
        }
        Ok(self.clone())
    }
}

impl PovmSource for GaussianMixturePovm {
    fn table_on(&self, grid: &OutcomeGrid) -> Result<PovmTable> {
        Ok(mixture_rows(self, grid))
    }
}

/// Width of each peak `j` pooled over rows: the root of the mean variance
/// `sigma_{n,j}^2` weighted by `beta_{n,j}` times the probes' total
/// occupation of row `n`. Peaks nothing populates get `None`.
pub fn effective_peak_widths(data: &ProbeEnsemble, model: &GaussianMixturePovm) -> Vec<Option<f64>> {
    let design = data.poisson_design(model.n_max);
    let occupation: Vec<f64> = (0..=model.n_max).map(|n| design.iter().map(|c| c[n]).sum()).collect();
    (0..=model.n_max)
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            for n in j..=model.n_max {
                let w = model.weights[n][j] * occupation[n];
                num += w * model.widths[n][j] * model.widths[n][j];
                den += w;
            }
            (den > TINY).then(|| (num / den).sqrt())
        })
        .collect()
}

/// Rows reached with at least this probability by some probe count as
/// constrained by the data.
pub const ROW_SUPPORT_PROBABILITY: f64 = 0.01;

/// Highest photon number that some probe populates with probability at
/// least `min_probability`, capped at `n_max`.
pub fn supported_rows(data: &ProbeEnsemble, n_max: usize, min_probability: f64) -> usize {
    data.poisson_design(n_max)
        .iter()
        .flat_map(|coeffs| coeffs.iter().enumerate().filter(|(_, f)| **f >= min_probability).map(|(n, _)| n))
        .max()
        .unwrap_or(0)
}

/// Predicted density `sum_n F_{a_k,n} theta_n(s)` for every probe.
pub fn predicted_densities(data: &ProbeEnsemble, table: &PovmTable) -> Vec<Vec<f64>> {
    data.poisson_design(table.n_max())
        .iter()
        .map(|coeffs| crate::povm::weighted_rows(table, coeffs))
        .collect()
}

/// L1 distance between data and model densities, summed over probes and
/// normalized by the data's total L1 mass.
pub fn reconstruction_error(data: &ProbeEnsemble, model: &impl PovmSource) -> Result<f64> {
    let table = model.table_on(&data.grid)?;
    let predicted = predicted_densities(data, &table);
    let grid = &data.grid;
    let mut num = 0.0;
    let mut den = 0.0;
    for (probe, p) in data.probes.iter().zip(&predicted) {
        let diff: Vec<f64> = probe.density.iter().zip(p).map(|(q, p)| (q - p).abs()).collect();
        num += grid.integrate(&diff);
        den += grid.integrate(&probe.density);
    }
    if den <= 0.0 {
        return Err(Error::invalid("data densities have zero mass"));
    }
    Ok(num / den)
}
