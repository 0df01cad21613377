//! Synthetic detector traces from a known detector model.
//!
//! Each trial draws a photon number from the probe's Poisson statistics, loses
//! photons binomially, and renders a trace as
//! `saturation(a) * pulse + tail_gain * m^2 * tail + noise`, with the pulse
//! amplitude `a` drawn around the peak position of the detected count `m`.
//! The additive white noise and Gaussian amplitude spread are a
//! phenomenological stand-in for real sensor noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::TraceSet;
use crate::povm::GaussianMixturePovm;

pub const DEFAULT_N_SIM: usize = 20;

/// Nonlinearity applied to the pulse amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Saturation {
    #[default]
    Identity,
    /// `ceiling * tanh(a / ceiling)`.
    SoftClip { ceiling: f64 },
}

impl Saturation {
    pub fn apply(&self, a: f64) -> f64 {
        match *self {
            Saturation::Identity => a,
            Saturation::SoftClip { ceiling } => ceiling * (a / ceiling).tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorGroundTruth {
    pub efficiency: f64,
    /// Pulse amplitude center for each detected photon count `0..=n_sim`.
    pub peak_positions: Vec<f64>,
    /// Amplitude spread per detected count; zero means deterministic.
    pub peak_widths: Vec<f64>,
    pub pulse_shape: Vec<f64>,
    pub tail_shape: Vec<f64>,
    /// Tail weight for `m` detected photons is `tail_gain * m^2`.
    pub tail_gain: f64,
    pub noise_sigma: f64,
    pub saturation: Saturation,
}

impl DetectorGroundTruth {
    /// Linear detector with evenly spaced peaks starting at zero and default
    /// pulse shapes on `samples` points.
    pub fn linear(efficiency: f64, spacing: f64, width: f64, samples: usize, n_sim: usize) -> Result<Self> {
        let (pulse_shape, tail_shape) = default_shapes(samples)?;
        let truth = Self {
            efficiency,
            peak_positions: (0..=n_sim).map(|m| m as f64 * spacing).collect(),
            peak_widths: vec![width; n_sim + 1],
            pulse_shape,
            tail_shape,
            tail_gain: 0.004 * spacing,
            noise_sigma: 0.02 * spacing,
            saturation: Saturation::Identity,
        };
        truth.validate()?;
        Ok(truth)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::invalid(format!("efficiency {} outside [0, 1]", self.efficiency)));
        }
        if self.peak_positions.is_empty() || self.peak_positions.len() != self.peak_widths.len() {
            return Err(Error::dim("need one width per peak position"));
        }
        if self.peak_positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("peak positions must be strictly increasing"));
        }
        if self.peak_widths.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("peak widths must be finite and nonnegative"));
        }
        if self.pulse_shape.len() != self.tail_shape.len() || self.pulse_shape.len() < 2 {
            return Err(Error::dim("pulse and tail shapes need equal length >= 2"));
        }
        for (name, shape) in [("pulse", &self.pulse_shape), ("tail", &self.tail_shape)] {
            let norm = l2(shape);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("{name} shape has norm {norm}, expected 1")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        if let Saturation::SoftClip { ceiling } = self.saturation {
            if !(ceiling > 0.0) {
                return Err(Error::invalid("soft-clip ceiling must be positive"));
            }
        }
        Ok(())
    }

    /// Highest input photon number the peak table supports.
    pub fn n_sim(&self) -> usize {
        self.peak_positions.len() - 1
    }

    pub fn samples(&self) -> usize {
        self.pulse_shape.len()
    }

    /// Spread of the pulse-amplitude score of `m` detected photons once white
    /// noise is projected onto a unit-norm component.
    pub fn score_width(&self, m: usize) -> f64 {
        self.peak_widths[m].hypot(self.noise_sigma)
    }

    /// Mixture POVM this detector induces on the pulse-amplitude axis.
    pub fn to_mixture(&self, n_max: usize) -> Result<GaussianMixturePovm> {
        if n_max > self.n_sim() {
            return Err(Error::TruncationOverflow { n: n_max, max: self.n_sim() });
        }
        let widths: Vec<f64> = (0..=n_max).map(|m| self.score_width(m)).collect();
        GaussianMixturePovm::binomial(self.peak_positions[..=n_max].to_vec(), &widths, self.efficiency)
    }
}

/// Fast-rise exponential-decay pulse and the unit-norm change in that pulse
/// under a longer decay, made orthogonal to the pulse.
pub fn default_shapes(samples: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples < 2 {
        return Err(Error::invalid("traces need at least two samples"));
    }
    let s = samples as f64;
    let onset = (s / 16.0).floor();
    let rise = (s / 32.0).max(0.25);
    let decay = (s / 6.0).max(1.0);
    let mut pulse = Vec::with_capacity(samples);
    let mut stretch = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = i as f64 - onset;
        if t <= 0.0 {
            pulse.push(0.0);
            stretch.push(0.0);
        } else {
            pulse.push((-t / decay).exp() - (-t / rise).exp());
            stretch.push(t / (decay * decay) * (-t / decay).exp());
        }
    }
    normalize(&mut pulse);
    let mut tail = orthogonal_to(&stretch, &pulse);
    if l2(&tail) < 1e-9 {
        tail = (0..samples)
            .map(|k| {
                let mut e = vec![0.0; samples];
                e[k] = 1.0;
                orthogonal_to(&e, &pulse)
            })
            .find(|v| l2(v) > 1e-6)
            .expect("some unit vector is not parallel to the pulse");
    }
    normalize(&mut tail);
    Ok((pulse, tail))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = l2(v);
    v.iter_mut().for_each(|x| *x /= n);
}

fn orthogonal_to(v: &[f64], unit: &[f64]) -> Vec<f64> {
    let dot: f64 = v.iter().zip(unit).map(|(a, b)| a * b).sum();
    v.iter().zip(unit).map(|(a, b)| a - dot * b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Coherent amplitudes `|alpha_k|`; the mean photon number is the square.
    pub probe_amplitudes: Vec<f64>,
    pub trials_per_probe: usize,
    pub samples_per_trace: usize,
    pub rng_seed: u64,
}

impl SimConfig {
    pub fn from_mean_photon_numbers(alpha_sq: &[f64], trials_per_probe: usize, samples_per_trace: usize, rng_seed: u64) -> Self {
        Self {
            probe_amplitudes: alpha_sq.iter().map(|a| a.max(0.0).sqrt()).collect(),
            trials_per_probe,
            samples_per_trace,
            rng_seed,
        }
    }

    pub fn alpha_sq(&self) -> Vec<f64> {
        self.probe_amplitudes.iter().map(|a| a * a).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.probe_amplitudes.is_empty() {
            return Err(Error::invalid("no probes configured"));
        }
        if self.probe_amplitudes.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid("probe amplitudes must be finite and nonnegative"));
        }
        if self.trials_per_probe < 1 {
            return Err(Error::invalid("trials_per_probe must be at least 1"));
        }
        if self.samples_per_trace < 2 {
            return Err(Error::invalid("samples_per_trace must be at least 2"));
        }
        Ok(())
    }
}

/// One simulated trial before rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialDraw {
    pub n_input: usize,
    pub detected: usize,
    pub amplitude: f64,
}

/// Draws the detected count and pulse amplitude for `n_input` photons.
pub fn draw_trial<R: Rng + ?Sized>(n_input: usize, truth: &DetectorGroundTruth, rng: &mut R) -> Result<TrialDraw> {
    if n_input > truth.n_sim() {
        return Err(Error::TruncationOverflow { n: n_input, max: truth.n_sim() });
    }
    let detected = if n_input == 0 {
        0
    } else {
        let binom = Binomial::new(n_input as u64, truth.efficiency)
            .map_err(|e| Error::invalid(e.to_string()))?;
        binom.sample(rng) as usize
    };
    let center = truth.peak_positions[detected];
    let width = truth.peak_widths[detected];
    let amplitude = if width > 0.0 {
        Normal::new(center, width).map_err(|e| Error::invalid(e.to_string()))?.sample(rng)
    } else {
        center
    };
    Ok(TrialDraw { n_input, detected, amplitude })
}

/// One detector trace for `n_input` incident photons.
pub fn simulate_trace<R: Rng + ?Sized>(n_input: usize, truth: &DetectorGroundTruth, rng: &mut R) -> Result<Vec<f64>> {
    let draw = draw_trial(n_input, truth, rng)?;
    render(&draw, truth, rng)
}

fn render<R: Rng + ?Sized>(draw: &TrialDraw, truth: &DetectorGroundTruth, rng: &mut R) -> Result<Vec<f64>> {
    let a = truth.saturation.apply(draw.amplitude);
    let tail = truth.tail_gain * (draw.detected * draw.detected) as f64;
    let noise = if truth.noise_sigma > 0.0 {
        Some(Normal::new(0.0, truth.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    Ok(truth
        .pulse_shape
        .iter()
        .zip(&truth.tail_shape)
        .map(|(p, t)| {
            let v = a * p + tail * t;
            match &noise {
                Some(d) => v + d.sample(rng),
                None => v,
            }
        })
        .collect())
}

/// Simulated probe ensemble with per-trial ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub traces: TraceSet,
    pub probe_labels: Vec<usize>,
    pub alpha_sq: Vec<f64>,
    pub draws: Vec<TrialDraw>,
}

/// Random stream for one trial: the seeded generator advanced to its own
/// ChaCha stream, so trials are independent of scheduling.
fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Traces for every probe, ordered by (probe, trial).
pub fn simulate_probe_ensemble(config: &SimConfig, truth: &DetectorGroundTruth) -> Result<SimulatedData> {
    config.validate()?;
    truth.validate()?;
    if truth.samples() != config.samples_per_trace {
        return Err(Error::dim(format!(
            "truth shapes have {} samples, config asks for {}",
            truth.samples(),
            config.samples_per_trace
        )));
    }
    let alpha_sq = config.alpha_sq();
    let per = config.trials_per_probe;
    let total = alpha_sq.len() * per;
    let results: Vec<(TrialDraw, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(config.rng_seed, t as u64);
            let mean = alpha_sq[t / per];
            let n_input = if mean > 0.0 {
                Poisson::new(mean).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut rng) as usize
            } else {
                0
            };
            let draw = draw_trial(n_input, truth, &mut rng)?;
            let trace = render(&draw, truth, &mut rng)?;
            Ok((draw, trace))
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(total * config.samples_per_trace);
    let mut draws = Vec::with_capacity(total);
    for (draw, trace) in results {
        draws.push(draw);
        data.extend(trace);
    }
    Ok(SimulatedData {
        traces: TraceSet::new(data, total, config.samples_per_trace)?,
        probe_labels: (0..total).map(|t| t / per).collect(),
        alpha_sq,
        draws,
    })
}

/// Sidecar record written next to a simulated trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub probe_amplitudes: Vec<f64>,
    pub alpha_sq: Vec<f64>,
    pub trials_per_probe: usize,
    pub samples_per_trace: usize,
    pub seed: u64,
    pub truth: DetectorGroundTruth,
}

impl SimMetadata {
    pub fn new(config: &SimConfig, truth: &DetectorGroundTruth) -> Self {
        Self {
            probe_amplitudes: config.probe_amplitudes.clone(),
            alpha_sq: config.alpha_sq(),
            trials_per_probe: config.trials_per_probe,
            samples_per_trace: config.samples_per_trace,
            seed: config.rng_seed,
            truth: truth.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> DetectorGroundTruth {
        DetectorGroundTruth::linear(0.9, 1.0, 0.15, 32, DEFAULT_N_SIM).unwrap()
    }

    #[test]
    fn default_shapes_are_orthonormal() {
        for samples in [2, 3, 8, 64, 1024] {
            let (p, t) = default_shapes(samples).unwrap();
            assert!((l2(&p) - 1.0).abs() < 1e-12);
            assert!((l2(&t) - 1.0).abs() < 1e-12);
            let dot: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12, "samples={samples}");
        }
    }

    #[test]
    fn vacuum_without_noise_is_flat_zero() {
        let mut t = truth();
        t.noise_sigma = 0.0;
        t.peak_widths[0] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trace = simulate_trace(0, &t, &mut rng).unwrap();
        assert!(trace.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lossless_noiseless_trace_is_pulse_plus_tail() {
        let mut t = truth();
        t.efficiency = 1.0;
        t.noise_sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draw = draw_trial(3, &t, &mut rng).unwrap();
        assert_eq!(draw.detected, 3);
        assert!((draw.amplitude - 3.0).abs() < 6.0 * 0.15);
        let trace = render(&draw, &t, &mut rng).unwrap();
        for (i, v) in trace.iter().enumerate() {
            let expect = draw.amplitude * t.pulse_shape[i] + t.tail_gain * 9.0 * t.tail_shape[i];
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let t = truth();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            simulate_trace(21, &t, &mut rng),
            Err(Error::TruncationOverflow { n: 21, max: 20 })
        ));
    }

    #[test]
    fn binomial_loss_statistics() {
        let mut t = truth();
        t.efficiency = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[draw_trial(2, &t, &mut rng).unwrap().detected] += 1;
        }
        for (c, p) in counts.iter().zip([0.25, 0.5, 0.25]) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn zero_energy_probe_has_no_photons() {
        let cfg = SimConfig::from_mean_photon_numbers(&[0.0], 200, 32, 5);
        let out = simulate_probe_ensemble(&cfg, &truth()).unwrap();
        assert!(out.draws.iter().all(|d| d.n_input == 0));
    }

    #[test]
    fn poisson_mean_photon_number() {
        let cfg = SimConfig::from_mean_photon_numbers(&[4.0], 100_000, 2, 6);
        let t = DetectorGroundTruth::linear(0.9, 1.0, 0.15, 2, 30).unwrap();
        let out = simulate_probe_ensemble(&cfg, &t).unwrap();
        let n = out.draws.len() as f64;
        let mean = out.draws.iter().map(|d| d.n_input as f64).sum::<f64>() / n;
        // Poisson variance equals the mean
        assert!((mean - 4.0).abs() < 3.0 * (4.0 / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn fixed_seed_is_deterministic_and_ordered() {
        let cfg = SimConfig::from_mean_photon_numbers(&[0.5, 2.0, 6.0], 50, 32, 77);
        let a = simulate_probe_ensemble(&cfg, &truth()).unwrap();
        let b = simulate_probe_ensemble(&cfg, &truth()).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.probe_labels[49], 0);
        assert_eq!(a.probe_labels[50], 1);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| simulate_probe_ensemble(&cfg, &truth()).unwrap());
        assert_eq!(a.traces, c.traces);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SimConfig::from_mean_photon_numbers(&[1.0], 0, 32, 0);
        assert!(cfg.validate().is_err());
        cfg.trials_per_probe = 1;
        cfg.samples_per_trace = 1;
        assert!(cfg.validate().is_err());
        let mut t = truth();
        t.efficiency = 1.5;
        assert!(t.validate().is_err());
    }
}
