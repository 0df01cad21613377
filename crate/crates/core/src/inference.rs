//! Analysis of a fitted POVM: detection efficiency, photon-number posteriors
//! and confidence under a prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::OutcomeGrid;
use crate::error::{Error, Result};
use crate::povm::{binomial_row, ln_factorial, GaussianMixturePovm, PovmTable};

/// Denominators below this are treated as zero.
pub const UNDEFINED_DENOMINATOR: f64 = 1e-300;
/// Efficiency interval: objective within this factor of its minimum.
pub const EFFICIENCY_INTERVAL_FACTOR: f64 = 2.0;
const CURVE_POINTS: usize = 1001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Flat,
    Thermal,
    Poisson,
    Explicit,
}

/// Prior `p(n)` over `0..=support`, normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDistribution {
    pub kind: PriorKind,
    /// `lambda^2` for thermal, `|alpha|^2` for Poisson, unused otherwise.
    pub parameter: f64,
    weights: Vec<f64>,
}

impl PriorDistribution {
    pub fn flat(support: usize) -> Self {
        let w = 1.0 / (support + 1) as f64;
        Self { kind: PriorKind::Flat, parameter: 0.0, weights: vec![w; support + 1] }
    }

    /// `p(n) = (1 - l) l^n` with `l = lambda^2`, renormalized over the support.
    pub fn thermal(lambda_sq: f64, support: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda_sq) {
            return Err(Error::invalid(format!("thermal parameter {lambda_sq} outside [0, 1)")));
        }
        let raw: Vec<f64> = (0..=support).map(|n| (1.0 - lambda_sq) * lambda_sq.powi(n as i32)).collect();
        Self::normalized(PriorKind::Thermal, lambda_sq, raw)
    }

    pub fn poisson(alpha_sq: f64, support: usize) -> Result<Self> {
        if !(alpha_sq >= 0.0) || !alpha_sq.is_finite() {
            return Err(Error::invalid(format!("Poisson mean {alpha_sq} must be finite and >= 0")));
        }
        let raw: Vec<f64> = (0..=support)
            .map(|n| {
                if alpha_sq == 0.0 {
                    if n == 0 { 1.0 } else { 0.0 }
                } else {
                    (n as f64 * alpha_sq.ln() - alpha_sq - ln_factorial(n)).exp()
                }
            })
            .collect();
        Self::normalized(PriorKind::Poisson, alpha_sq, raw)
    }

    pub fn explicit(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("prior weights must be finite and >= 0"));
        }
        Self::normalized(PriorKind::Explicit, 0.0, weights)
    }

    fn normalized(kind: PriorKind, parameter: f64, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("prior has no mass on its support"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { kind, parameter, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> usize {
        self.weights.len() - 1
    }

    /// Parses `flat`, `thermal:<lambda^2>` or `poisson:<|alpha|^2>`.
    pub fn parse(text: &str, support: usize) -> Result<Self> {
        let (kind, value) = match text.split_once(':') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (text.trim(), None),
        };
        let number = || -> Result<f64> {
            value
                .ok_or_else(|| Error::invalid(format!("prior '{kind}' needs a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("prior parameter: {e}")))
        };
        match kind {
            "flat" if value.is_none() => Ok(Self::flat(support)),
            "thermal" => Self::thermal(number()?, support),
            "poisson" => Self::poisson(number()?, support),
            _ => Err(Error::invalid(format!("unknown prior '{text}'"))),
        }
    }
}

fn check_support(table: &PovmTable, prior: &PriorDistribution) -> Result<()> {
    if prior.support() > table.n_max() {
        return Err(Error::dim(format!(
            "prior support 0..={} exceeds table rows 0..={}",
            prior.support(),
            table.n_max()
        )));
    }
    Ok(())
}

/// `p(s) = sum_k theta_k(s) p(k)` at every grid point.
fn evidence(table: &PovmTable, prior: &PriorDistribution) -> Vec<f64> {
    let mut out = vec![0.0; table.grid.n_points];
    for (row, p) in table.theta.iter().zip(prior.weights()) {
        if *p > 0.0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o += p * v;
            }
        }
    }
    out
}

/// `p(n|s)` for `n` in the prior support; `None` where `p(s)` vanishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub grid: OutcomeGrid,
    pub values: Vec<Vec<Option<f64>>>,
    pub prior: PriorDistribution,
}

impl PosteriorTable {
    pub fn column(&self, g: usize) -> Option<Vec<f64>> {
        self.values.iter().map(|row| row[g]).collect()
    }

    pub fn defined(&self, g: usize) -> bool {
        self.values.first().is_some_and(|row| row[g].is_some())
    }
}

pub fn posterior(table: &PovmTable, prior: &PriorDistribution) -> Result<PosteriorTable> {
    check_support(table, prior)?;
    let den = evidence(table, prior);
    let values = table
        .theta
        .iter()
        .zip(prior.weights())
        .map(|(row, p)| {
            row.iter()
                .zip(&den)
                .map(|(v, d)| (*d >= UNDEFINED_DENOMINATOR).then(|| p * v / d))
                .collect()
        })
        .collect();
    Ok(PosteriorTable { grid: table.grid, values, prior: prior.clone() })
}

/// Post-selection: accept outcomes within `half_width` of any center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub centers: Vec<f64>,
    pub half_width: f64,
}

impl Window {
    /// Window covering the whole line.
    pub fn full() -> Self {
        Self { centers: vec![0.0], half_width: f64::INFINITY }
    }

    /// Windows around the fitted peak means.
    pub fn around_peaks(model: &GaussianMixturePovm, half_width: f64) -> Self {
        Self { centers: model.peak_means.clone(), half_width }
    }

    pub fn accepts(&self, s: f64) -> bool {
        self.centers.iter().any(|c| (s - c).abs() <= self.half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub prior: PriorDistribution,
    pub c_values: Vec<f64>,
    pub window: Option<Window>,
    /// Fraction of each row's mass inside the window.
    pub acceptance_fraction: Option<Vec<f64>>,
    /// Windowed confidence without renormalization: rejected outcomes count
    /// as failures.
    pub rejection_c_values: Option<Vec<f64>>,
}

/// `C_n`: the average of `p(n|s)` over outcomes drawn from `theta_n`,
/// `int theta_n p(n|s) ds / int theta_n ds`.
///
/// With a window both integrals run over accepted outcomes only, so
/// `theta_n` is renormalized to the accepted region. The rejection variant
/// keeps the full-line denominator and counts rejected outcomes as failures.
pub fn confidence(table: &PovmTable, prior: &PriorDistribution, window: Option<&Window>) -> Result<ConfidenceReport> {
    check_support(table, prior)?;
    let grid = &table.grid;
    let den = evidence(table, prior);
    let mask: Vec<bool> = match window {
        Some(w) => grid.points().into_iter().map(|s| w.accepts(s)).collect(),
        None => vec![true; grid.n_points],
    };
    let flat = prior.kind == PriorKind::Flat;
    let rows: Vec<(f64, f64, f64)> = table
        .theta
        .par_iter()
        .zip(prior.weights().par_iter())
        .map(|(row, &p)| {
            let integrand: Vec<f64> = row
                .iter()
                .zip(&den)
                .zip(&mask)
                .map(|((v, d), &keep)| {
                    if !keep || *d < UNDEFINED_DENOMINATOR {
                        0.0
                    } else if flat {
                        // uniform p(n) cancels
                        v * v / (d * (prior.support() + 1) as f64)
                    } else {
                        v * v * p / d
                    }
                })
                .collect();
            let accepted: Vec<f64> = row.iter().zip(&mask).map(|(v, &k)| if k { *v } else { 0.0 }).collect();
            (grid.integrate(&integrand), grid.integrate(&accepted), grid.integrate(row))
        })
        .collect();

    let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
    let c_values = rows.iter().map(|&(c, a, _)| ratio(c, a)).collect();
    if window.is_none() {
        return Ok(ConfidenceReport {
            prior: prior.clone(),
            c_values,
            window: None,
            acceptance_fraction: None,
            rejection_c_values: None,
        });
    }
    Ok(ConfidenceReport {
        prior: prior.clone(),
        c_values,
        window: window.cloned(),
        acceptance_fraction: Some(rows.iter().map(|&(_, a, total)| ratio(a, total)).collect()),
        rejection_c_values: Some(rows.iter().map(|&(c, _, total)| ratio(c, total)).collect()),
    })
}

/// Flat-prior confidence written out directly as
/// `int theta_n^2 / sum_k theta_k ds`, divided by the row mass.
pub fn flat_confidence(table: &PovmTable) -> Vec<f64> {
    let grid = &table.grid;
    let sum: Vec<f64> = (0..grid.n_points).map(|g| table.theta.iter().map(|r| r[g]).sum()).collect();
    table
        .theta
        .iter()
        .map(|row| {
            let f: Vec<f64> = row
                .iter()
                .zip(&sum)
                .map(|(v, s)| if *s > 0.0 { v * v / s } else { 0.0 })
                .collect();
            let mass = grid.integrate(row);
            if mass > 0.0 { grid.integrate(&f) / mass } else { 0.0 }
        })
        .collect()
}

/// Zero-width window limit at the given centers:
/// `sum_j theta_n(c_j) p(n|c_j) / sum_j theta_n(c_j)`.
pub fn peak_limit_confidence(table: &PovmTable, prior: &PriorDistribution, centers: &[f64]) -> Result<Vec<f64>> {
    check_support(table, prior)?;
    let grid = &table.grid;
    let at = |row: &[f64], s: f64| if grid.contains(s) { grid.interpolate(row, s) } else { 0.0 };
    let den: Vec<f64> = centers
        .iter()
        .map(|&c| table.theta.iter().zip(prior.weights()).map(|(r, p)| p * at(r, c)).sum())
        .collect();
    Ok(table
        .theta
        .iter()
        .zip(prior.weights())
        .map(|(row, p)| {
            let (mut num, mut norm) = (0.0, 0.0);
            for (&c, &d) in centers.iter().zip(&den) {
                let v = at(row, c);
                if d >= UNDEFINED_DENOMINATOR {
                    num += v * p * v / d;
                }
                norm += v;
            }
            if norm > 0.0 { num / norm } else { 0.0 }
        })
        .collect())
}

/// `p(n|s)` at the maximum of each row.
pub fn peak_confidence(table: &PovmTable, prior: &PriorDistribution) -> Result<Vec<f64>> {
    let post = posterior(table, prior)?;
    Ok(table
        .theta
        .iter()
        .zip(&post.values)
        .map(|(row, p)| {
            let g = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            p[g].unwrap_or(0.0)
        })
        .collect())
}

/// Confidence under thermal priors for each `lambda^2`; one row per value.
pub fn confidence_vs_thermal_parameter(table: &PovmTable, lambda_sq_values: &[f64]) -> Result<Vec<Vec<f64>>> {
    lambda_sq_values
        .par_iter()
        .map(|&l| {
            let prior = PriorDistribution::thermal(l, table.n_max())?;
            Ok(confidence(table, &prior, None)?.c_values)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    pub eta: f64,
    /// `(eta, objective)` on a uniform grid over `[0, 1]`.
    pub objective_curve: Vec<(f64, f64)>,
    pub objective_min: f64,
    /// Range of `eta` with objective within [`EFFICIENCY_INTERVAL_FACTOR`] of
    /// the minimum.
    pub interval: (f64, f64),
}

/// Squared distance between the fitted weights and a binomial loss model.
pub fn efficiency_objective(model: &GaussianMixturePovm, eta: f64) -> f64 {
    (1..=model.n_max)
        .map(|n| {
            binomial_row(n, eta)
                .iter()
                .zip(&model.weights[n])
                .map(|(b, w)| (w - b) * (w - b))
                .sum::<f64>()
        })
        .sum()
}

/// Efficiency that best explains the mixture weights as binomial loss.
///
/// The objective is sampled on a fine grid, then golden-section search
/// refines the best bracket.
pub fn estimate_efficiency(model: &GaussianMixturePovm) -> EfficiencyEstimate {
    let f = |eta: f64| efficiency_objective(model, eta);
    let step = 1.0 / (CURVE_POINTS - 1) as f64;
    let curve: Vec<(f64, f64)> = (0..CURVE_POINTS)
        .into_par_iter()
        .map(|i| {
            let eta = i as f64 * step;
            (eta, f(eta))
        })
        .collect();
    let best = curve.iter().enumerate().fold(0, |b, (i, p)| if p.1 < curve[b].1 { i } else { b });
    let (mut a, mut b) = ((best as f64 - 1.0) * step, (best as f64 + 1.0) * step);
    a = a.max(0.0);
    b = b.min(1.0);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let mut eta = 0.5 * (a + b);
    let mut fmin = f(eta);
    // bracket ends cover the boundary optimum
    for cand in [curve[best].0, 0.0, 1.0] {
        let v = f(cand);
        if v < fmin {
            eta = cand;
            fmin = v;
        }
    }

    let limit = EFFICIENCY_INTERVAL_FACTOR * fmin;
    let edge = |inside: f64, outside: f64| {
        let (mut i, mut o) = (inside, outside);
        for _ in 0..60 {
            let m = 0.5 * (i + o);
            if f(m) <= limit { i = m } else { o = m }
        }
        i
    };
    let mut lo = eta;
    while lo > 0.0 && f((lo - step).max(0.0)) <= limit {
        lo = (lo - step).max(0.0);
    }
    if lo > 0.0 {
        lo = edge(lo, (lo - step).max(0.0));
    }
    let mut hi = eta;
    while hi < 1.0 && f((hi + step).min(1.0)) <= limit {
        hi = (hi + step).min(1.0);
    }
    if hi < 1.0 {
        hi = edge(hi, (hi + step).min(1.0));
    }
    EfficiencyEstimate { eta, objective_curve: curve, objective_min: fmin, interval: (lo, hi) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::povm::mixture_to_table;

    fn gaussian_table(means: &[f64], sd: f64) -> PovmTable {
        let grid = OutcomeGrid::new(-3.0, means.last().unwrap() + 3.0, 2001).unwrap();
        let theta = means
            .iter()
            .map(|m| grid.points().into_iter().map(|s| crate::povm::normal_pdf(s, *m, sd)).collect())
            .collect();
        PovmTable { grid, theta }
    }

    #[test]
    fn prior_shapes() {
        let f = PriorDistribution::flat(3);
        assert_eq!(f.weights(), &[0.25; 4]);
        let t = PriorDistribution::thermal(0.5, 2).unwrap();
        assert!((t.weights()[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((t.weights()[2] - 1.0 / 7.0).abs() < 1e-15);
        let p = PriorDistribution::poisson(0.0, 3).unwrap();
        assert_eq!(p.weights(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(PriorDistribution::thermal(1.0, 2).is_err());
        assert!(PriorDistribution::explicit(vec![0.0, 0.0]).is_err());
        assert_eq!(PriorDistribution::parse("thermal:0.5", 2).unwrap(), t);
        assert!(PriorDistribution::parse("flat:1", 2).is_err());
        assert!(PriorDistribution::parse("gamma:1", 2).is_err());
    }

    #[test]
    fn identical_rows_give_uniform_posterior() {
        let mut t = gaussian_table(&[0.0], 0.5);
        t.theta = vec![t.theta[0].clone(); 3];
        let post = posterior(&t, &PriorDistribution::flat(2)).unwrap();
        for g in (0..t.grid.n_points).filter(|&g| post.defined(g)) {
            for v in post.column(g).unwrap() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let c = confidence(&t, &PriorDistribution::flat(2), None).unwrap();
        for v in c.c_values {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn disjoint_rows_are_resolved() {
        let grid = OutcomeGrid::new(0.0, 3.0, 301).unwrap();
        let theta: Vec<Vec<f64>> = (0..3)
            .map(|n| {
                grid.points()
                    .into_iter()
                    .map(|s| if s > n as f64 + 0.1 && s < n as f64 + 0.9 { 1.25 } else { 0.0 })
                    .collect()
            })
            .collect();
        let t = PovmTable::new(grid, theta).unwrap();
        let post = posterior(&t, &PriorDistribution::flat(2)).unwrap();
        assert!(!post.defined(0));
        assert_eq!(post.column(50).unwrap(), vec![1.0, 0.0, 0.0]);
        let c = confidence(&t, &PriorDistribution::flat(2), None).unwrap();
        for c in c.c_values {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_forms_agree() {
        let t = gaussian_table(&[0.0, 1.0, 2.0], 0.3);
        let general = confidence(&t, &PriorDistribution::explicit(vec![1.0; 3]).unwrap(), None).unwrap();
        let flat = confidence(&t, &PriorDistribution::flat(2), None).unwrap();
        let direct = flat_confidence(&t);
        for ((a, b), c) in general.c_values.iter().zip(&flat.c_values).zip(&direct) {
            assert!((a - b).abs() < 1e-12);
            assert!((b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_confidence_is_scale_free() {
        let t = gaussian_table(&[0.0, 1.0], 0.4);
        let mut scaled = t.clone();
        scaled.theta.iter_mut().flatten().for_each(|v| *v *= 0.37);
        let a = confidence(&t, &PriorDistribution::flat(1), None).unwrap().c_values;
        let b = confidence(&scaled, &PriorDistribution::flat(1), None).unwrap().c_values;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = Window { centers: vec![0.0, 1.0], half_width: 0.3 };
        let a = confidence(&t, &PriorDistribution::flat(1), Some(&w)).unwrap().c_values;
        let b = confidence(&scaled, &PriorDistribution::flat(1), Some(&w)).unwrap().c_values;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn full_window_matches_unwindowed() {
        let t = gaussian_table(&[0.0, 1.0, 2.0], 0.3);
        let prior = PriorDistribution::thermal(0.3, 2).unwrap();
        let plain = confidence(&t, &prior, None).unwrap();
        let full = confidence(&t, &prior, Some(&Window::full())).unwrap();
        assert_eq!(plain.c_values, full.c_values);
        assert_eq!(full.acceptance_fraction.unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn narrow_windows_raise_confidence() {
        let t = gaussian_table(&[0.0, 1.0, 2.0], 0.3);
        let prior = PriorDistribution::flat(2);
        let plain = confidence(&t, &prior, None).unwrap().c_values;
        let w = Window { centers: vec![0.0, 1.0, 2.0], half_width: 0.1 };
        let narrow = confidence(&t, &prior, Some(&w)).unwrap();
        let limit = peak_limit_confidence(&t, &prior, &w.centers).unwrap();
        for n in 0..3 {
            assert!(narrow.c_values[n] > plain[n]);
            assert!(narrow.c_values[n] <= limit[n] + 1e-3);
            assert!(narrow.rejection_c_values.as_ref().unwrap()[n] < narrow.c_values[n]);
        }
        let tiny = Window { centers: w.centers.clone(), half_width: 1e-3 };
        let tiny = confidence(&t, &prior, Some(&tiny)).unwrap();
        for n in 0..3 {
            assert!((tiny.c_values[n] - limit[n]).abs() < 1e-4);
        }
        let peak = peak_confidence(&t, &prior).unwrap();
        let single = peak_limit_confidence(&t, &prior, &[1.0]).unwrap();
        assert!((peak[1] - single[1]).abs() < 1e-12);
    }

    #[test]
    fn thermal_sweep() {
        let t = gaussian_table(&[0.0, 1.0, 2.0], 0.35);
        let l: Vec<f64> = (1..=18).map(|i| 0.05 * i as f64).collect();
        let sweep = confidence_vs_thermal_parameter(&t, &l).unwrap();
        for row in &sweep {
            assert!(row.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)));
        }
        let direct = confidence(&t, &PriorDistribution::thermal(l[4], 2).unwrap(), None).unwrap();
        assert_eq!(direct.c_values, sweep[4]);
        let near_zero = confidence_vs_thermal_parameter(&t, &[1e-12]).unwrap();
        assert!((near_zero[0][0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prior_support_checked() {
        let t = gaussian_table(&[0.0, 1.0], 0.3);
        assert!(posterior(&t, &PriorDistribution::flat(4)).is_err());
        assert!(confidence(&t, &PriorDistribution::flat(0), None).is_ok());
    }

    fn model_at(eta: f64, n_max: usize) -> GaussianMixturePovm {
        let means: Vec<f64> = (0..=n_max).map(|j| j as f64).collect();
        GaussianMixturePovm::binomial(means, &vec![0.2; n_max + 1], eta).unwrap()
    }

    #[test]
    fn efficiency_exact_fixtures() {
        let lossless = model_at(1.0, 4);
        assert!((estimate_efficiency(&lossless).eta - 1.0).abs() < 1e-9);
        for eta in [0.25, 0.5, 0.93] {
            let est = estimate_efficiency(&model_at(eta, 5));
            assert!((est.eta - eta).abs() < 1e-6, "{eta}: {}", est.eta);
            assert!(est.interval.0 <= est.eta && est.eta <= est.interval.1);
        }
    }

    #[test]
    fn efficiency_interval_contains_optimum() {
        let mut m = model_at(0.8, 4);
        m.weights[2] = vec![0.1, 0.2, 0.7];
        let est = estimate_efficiency(&m);
        assert!(est.interval.0 < est.eta && est.eta < est.interval.1);
        let f = |e| efficiency_objective(&m, e);
        assert!(f(est.interval.0) <= 2.0 * est.objective_min * (1.0 + 1e-9));
        assert!(f((est.interval.0 - 1e-3).max(0.0)) > 2.0 * est.objective_min);
        assert_eq!(est.objective_curve.len(), CURVE_POINTS);
    }

    #[test]
    fn posterior_from_mixture() {
        let m = model_at(0.9, 4);
        let t = mixture_to_table(&m, &OutcomeGrid::new(-2.0, 6.0, 801).unwrap()).unwrap();
        let post = posterior(&t, &PriorDistribution::thermal(0.1, 4).unwrap()).unwrap();
        for g in (0..t.grid.n_points).filter(|&g| post.defined(g)) {
            let s: f64 = post.column(g).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
