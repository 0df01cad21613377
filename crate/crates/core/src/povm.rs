//! Phase-insensitive POVM representations and their forward evaluation.
//!
//! A POVM diagonal in the photon-number basis is a family of outcome
//! densities `theta_n(s)`, one per Fock state. It is stored either as a
//! [`PovmTable`] sampled on an [`OutcomeGrid`] or as a [`GaussianMixturePovm`],
//! where row `n` is a mixture of `n + 1` Gaussians whose centers are shared by
//! every row.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::density::OutcomeGrid;
use crate::error::{Error, Result};

pub const DEFAULT_N_MAX: usize = 17;

/// Poisson mass below which [`probe_density`] flags truncation.
pub const TRUNCATION_WARNING_MASS: f64 = 0.999;

const NORM_TOL: f64 = 1e-9;

#[inline]
pub fn normal_pdf(s: f64, mean: f64, sd: f64) -> f64 {
    let z = (s - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

pub(crate) fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Photon-number coefficient of a coherent probe, `|a|^{2n} e^{-|a|^2} / n!`,
/// evaluated in log space.
pub fn poisson_coeff(alpha_sq: f64, n: usize) -> Result<f64> {
    check_alpha_sq(alpha_sq)?;
    Ok(poisson_coeff_unchecked(alpha_sq, n))
}

fn poisson_coeff_unchecked(alpha_sq: f64, n: usize) -> f64 {
    if alpha_sq == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    (n as f64 * alpha_sq.ln() - alpha_sq - ln_factorial(n)).exp()
}

/// Coefficients for `n = 0..=n_max`.
pub fn poisson_coeffs(alpha_sq: f64, n_max: usize) -> Result<Vec<f64>> {
    check_alpha_sq(alpha_sq)?;
    Ok((0..=n_max).map(|n| poisson_coeff_unchecked(alpha_sq, n)).collect())
}

fn check_alpha_sq(alpha_sq: f64) -> Result<()> {
    if !(alpha_sq >= 0.0 && alpha_sq.is_finite()) {
        return Err(Error::invalid(format!("|alpha|^2 must be finite and >= 0, got {alpha_sq}")));
    }
    Ok(())
}

/// Coherent probe, characterized by its mean photon number `|alpha|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentProbe {
    pub alpha_sq: f64,
}

impl CoherentProbe {
    pub fn new(alpha_sq: f64) -> Result<Self> {
        check_alpha_sq(alpha_sq)?;
        Ok(Self { alpha_sq })
    }

    pub fn fock_weights(&self, n_max: usize) -> Vec<f64> {
        (0..=n_max).map(|n| poisson_coeff_unchecked(self.alpha_sq, n)).collect()
    }
}

/// Photon-number-diagonal input state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalState {
    weights: Vec<f64>,
}

impl DiagonalState {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("state needs at least one weight"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("state weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::invalid(format!("state weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn fock(n: usize) -> Self {
        let mut weights = vec![0.0; n + 1];
        weights[n] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Grid-sampled POVM: `theta[n][g] = theta_n(s_g)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmTable {
    pub grid: OutcomeGrid,
    pub theta: Vec<Vec<f64>>,
}

impl PovmTable {
    /// Checks shape, nonnegativity and the row-integral bound.
    pub fn new(grid: OutcomeGrid, theta: Vec<Vec<f64>>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::invalid("table needs at least one row"));
        }
        for (n, row) in theta.iter().enumerate() {
            if row.len() != grid.n_points {
                return Err(Error::dim(format!(
                    "row {n} has {} points, grid has {}",
                    row.len(),
                    grid.n_points
                )));
            }
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(format!("row {n} has negative or non-finite entries")));
            }
            let mass = grid.integrate(row);
            if mass > 1.0 + NORM_TOL {
                return Err(Error::invalid(format!("row {n} integrates to {mass} > 1")));
            }
        }
        Ok(Self { grid, theta })
    }

    pub fn n_max(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn row_integrals(&self) -> Vec<f64> {
        self.theta.iter().map(|r| self.grid.integrate(r)).collect()
    }

    /// Element-wise convex combination `w * self + (1 - w) * other`.
    pub fn blend(&self, other: &PovmTable, w: f64) -> Result<PovmTable> {
        if self.grid != other.grid || self.theta.len() != other.theta.len() {
            return Err(Error::dim("tables differ in grid or n_max"));
        }
        let theta = self
            .theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect())
            .collect();
        Ok(PovmTable { grid: self.grid, theta })
    }
}

/// Gaussian-mixture POVM with peak centers shared across photon numbers.
///
/// Row `n` is `sum_{j<=n} weights[n][j] N(s | peak_means[j], widths[n][j])`.
/// `weights` and `widths` are stored lower-triangular: row `n` has `n + 1`
/// entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixturePovm {
    pub n_max: usize,
    pub peak_means: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub widths: Vec<Vec<f64>>,
}

impl GaussianMixturePovm {
    pub fn new(
        peak_means: Vec<f64>,
        weights: Vec<Vec<f64>>,
        widths: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let model = Self::from_parts_unchecked(peak_means, weights, widths)?;
        model.validate()?;
        Ok(model)
    }

    /// Shape checks only; used for intermediate EM iterates.
    pub(crate) fn from_parts_unchecked(
        peak_means: Vec<f64>,
        weights: Vec<Vec<f64>>,
        widths: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if peak_means.is_empty() {
            return Err(Error::invalid("model needs at least one peak"));
        }
        let n_max = peak_means.len() - 1;
        if weights.len() != n_max + 1 || widths.len() != n_max + 1 {
            return Err(Error::dim("weights/widths must have n_max + 1 rows"));
        }
        for n in 0..=n_max {
            if weights[n].len() != n + 1 || widths[n].len() != n + 1 {
                return Err(Error::dim(format!("row {n} must have {} entries", n + 1)));
            }
        }
        Ok(Self { n_max, peak_means, weights, widths })
    }

    pub fn validate(&self) -> Result<()> {
        if self.peak_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite peak mean"));
        }
        if self.peak_means.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("peak means must be strictly increasing"));
        }
        for n in 0..=self.n_max {
            let row = &self.weights[n];
            if row.iter().any(|b| !(*b >= 0.0)) {
                return Err(Error::invalid(format!("negative weight in row {n}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > NORM_TOL {
                return Err(Error::invalid(format!("weights of row {n} sum to {total}")));
            }
            if self.widths[n].iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid(format!("non-positive width in row {n}")));
            }
        }
        Ok(())
    }

    /// Model whose row weights are binomial loss at efficiency `eta`, with a
    /// common width per peak.
    pub fn binomial(peak_means: Vec<f64>, peak_widths: &[f64], eta: f64) -> Result<Self> {
        let n_max = peak_means.len() - 1;
        if peak_widths.len() != n_max + 1 {
            return Err(Error::dim("need one width per peak"));
        }
        let weights = (0..=n_max).map(|n| binomial_row(n, eta)).collect();
        let widths = (0..=n_max).map(|n| peak_widths[..=n].to_vec()).collect();
        Self::new(peak_means, weights, widths)
    }

    /// Smallest grid with `n_points` points that [`mixture_to_table`] accepts.
    pub fn covering_grid(&self, n_points: usize) -> Result<OutcomeGrid> {
        let reach = 6.0 * self.max_width();
        OutcomeGrid::new(self.peak_means[0] - reach, self.peak_means[self.n_max] + reach, n_points)
    }

    /// First `n_max + 1` rows; the remaining rows are independent of them.
    pub fn truncated(&self, n_max: usize) -> GaussianMixturePovm {
        let n = n_max.min(self.n_max);
        GaussianMixturePovm {
            n_max: n,
            peak_means: self.peak_means[..=n].to_vec(),
            weights: self.weights[..=n].to_vec(),
            widths: self.widths[..=n].to_vec(),
        }
    }

    pub fn max_width(&self) -> f64 {
        self.widths.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// Row `n` at a single outcome.
    pub fn row_value(&self, n: usize, s: f64) -> f64 {
        (0..=n)
            .map(|j| self.weights[n][j] * normal_pdf(s, self.peak_means[j], self.widths[n][j]))
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: GaussianMixturePovm =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let model = Self::from_parts_unchecked(raw.peak_means, raw.weights, raw.widths)?;
        if model.n_max != raw.n_max {
            return Err(Error::Format(format!(
                "n_max {} disagrees with {} peak means",
                raw.n_max,
                model.n_max + 1
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

/// Binomial probabilities `C(n, j) eta^j (1 - eta)^{n - j}` for `j = 0..=n`.
pub fn binomial_row(n: usize, eta: f64) -> Vec<f64> {
    let mut row = vec![0.0; n + 1];
    if eta <= 0.0 {
        row[0] = 1.0;
        return row;
    }
    if eta >= 1.0 {
        row[n] = 1.0;
        return row;
    }
    let (le, lq) = (eta.ln(), (1.0 - eta).ln());
    let lnf = ln_factorial(n);
    for (j, v) in row.iter_mut().enumerate() {
        *v = (lnf - ln_factorial(j) - ln_factorial(n - j) + j as f64 * le + (n - j) as f64 * lq)
            .exp();
    }
    row
}

/// Samples every row of the mixture on `grid`.
///
/// The grid must reach six of the model's widest Gaussians beyond the
/// outermost peak means.
pub fn mixture_to_table(model: &GaussianMixturePovm, grid: &OutcomeGrid) -> Result<PovmTable> {
    let reach = 6.0 * model.max_width();
    let lo = model.peak_means[0] - reach;
    let hi = model.peak_means[model.n_max] + reach;
    if lo < grid.s_min || hi > grid.s_max {
        return Err(Error::Coverage(format!(
            "model spans [{lo}, {hi}], grid is [{}, {}]",
            grid.s_min, grid.s_max
        )));
    }
    Ok(mixture_rows(model, grid))
}

/// Rows without the coverage check.
///
/// A component narrower than about the grid spacing can have a trapezoidal
/// mass slightly above one; such components are scaled back to unit mass so
/// rows never integrate above their total weight.
pub(crate) fn mixture_rows(model: &GaussianMixturePovm, grid: &OutcomeGrid) -> PovmTable {
    let points = grid.points();
    let theta = (0..=model.n_max)
        .map(|n| {
            let mut row = vec![0.0; grid.n_points];
            let mut component = vec![0.0; grid.n_points];
            for j in 0..=n {
                let (b, mu, sd) = (model.weights[n][j], model.peak_means[j], model.widths[n][j]);
                if b == 0.0 {
                    continue;
                }
                for (c, &s) in component.iter_mut().zip(&points) {
                    *c = normal_pdf(s, mu, sd);
                }
                let mass = grid.integrate(&component);
                let scale = if mass > 1.0 { b / mass } else { b };
                for (v, c) in row.iter_mut().zip(&component) {
                    *v += scale * c;
                }
            }
            row
        })
        .collect();
    PovmTable { grid: *grid, theta }
}

/// Outcome density predicted by a POVM for some input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDensity {
    pub grid: OutcomeGrid,
    pub values: Vec<f64>,
    /// Input probability carried by photon numbers up to the table's `n_max`.
    pub captured_mass: f64,
    /// Set when `captured_mass` is below [`TRUNCATION_WARNING_MASS`].
    pub truncation_warning: bool,
}

/// Outcome density for a coherent probe, `sum_n F_{alpha,n} theta_n(s)`.
pub fn probe_density(table: &PovmTable, probe: CoherentProbe) -> ModelDensity {
    let coeffs = probe.fock_weights(table.n_max());
    let captured_mass: f64 = coeffs.iter().sum();
    ModelDensity {
        grid: table.grid,
        values: weighted_rows(table, &coeffs),
        captured_mass,
        truncation_warning: captured_mass < TRUNCATION_WARNING_MASS,
    }
}

/// Born rule for a photon-number-diagonal state.
pub fn born_probability(table: &PovmTable, state: &DiagonalState) -> Result<ModelDensity> {
    let w = state.weights();
    if w.len() > table.theta.len() {
        return Err(Error::dim(format!(
            "state has {} photon numbers, table only {}",
            w.len(),
            table.theta.len()
        )));
    }
    Ok(ModelDensity {
        grid: table.grid,
        values: weighted_rows(table, w),
        captured_mass: w.iter().sum(),
        truncation_warning: false,
    })
}

pub(crate) fn weighted_rows(table: &PovmTable, coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; table.grid.n_points];
    for (row, &c) in table.theta.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += c * v;
        }
    }
    out
}
