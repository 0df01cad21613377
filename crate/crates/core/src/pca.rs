//! Principal-component compression of detector traces.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 2;

/// Raw detector signals, one row per trial, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    data: Vec<f64>,
    trial_count: usize,
    sample_count: usize,
}

impl TraceSet {
    pub fn new(data: Vec<f64>, trial_count: usize, sample_count: usize) -> Result<Self> {
        if trial_count == 0 || sample_count == 0 {
            return Err(Error::invalid("trace set needs at least one trial and one sample"));
        }
        if data.len() != trial_count * sample_count {
            return Err(Error::dim(format!(
                "{} values for {trial_count} x {sample_count} traces",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite trace sample"));
        }
        Ok(Self { data, trial_count, sample_count })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let sample_count = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != sample_count) {
            return Err(Error::dim("ragged trace rows"));
        }
        Self::new(rows.concat(), rows.len(), sample_count)
    }

    /// ADC counts are converted to reals before centering.
    pub fn from_i16(raw: &[i16], trial_count: usize, sample_count: usize) -> Result<Self> {
        Self::new(raw.iter().map(|&v| f64::from(v)).collect(), trial_count, sample_count)
    }

    pub fn trial_count(&self) -> usize {
        self.trial_count
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.sample_count..(i + 1) * self.sample_count]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.sample_count)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Mean trace plus ordered orthonormal components and their score variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalBasis {
    pub mean_trace: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl PrincipalBasis {
    pub fn sample_count(&self) -> usize {
        self.mean_trace.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

/// Per-trial scores, row-major `trials x components`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub n_components: usize,
    pub probe_labels: Vec<usize>,
}

impl ScoreSet {
    pub fn trial_count(&self) -> usize {
        self.probe_labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_components..(i + 1) * self.n_components]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.scores.iter().skip(j).step_by(self.n_components).copied().collect()
    }

    /// First-component scores grouped by probe label.
    pub fn by_probe(&self, component: usize, probe_count: usize) -> Vec<Vec<f64>> {
        let mut groups = vec![Vec::new(); probe_count];
        for (i, &label) in self.probe_labels.iter().enumerate() {
            if label < probe_count {
                groups[label].push(self.scores[i * self.n_components + component]);
            }
        }
        groups
    }
}

/// Principal components of the mean-subtracted trace matrix, by SVD.
///
/// Scores variances are `singular_value^2 / (trials - 1)`. Each component is
/// signed so that its projection on the mean trace is positive, or, for a
/// component orthogonal to the mean, so that its largest-magnitude entry is.
pub fn fit_basis(traces: &TraceSet, n_components: usize) -> Result<PrincipalBasis> {
    let (m, n) = (traces.trial_count, traces.sample_count);
    if n_components > m.min(n) {
        return Err(Error::dim(format!(
            "{n_components} components requested from a {m} x {n} trace set"
        )));
    }
    let mut mean_trace = vec![0.0; n];
    for row in traces.rows() {
        for (acc, v) in mean_trace.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean_trace.iter_mut().for_each(|v| *v /= m as f64);

    let centered = Mat::<f64>::from_fn(m, n, |i, t| traces.data[i * n + t] - mean_trace[t]);
    let svd = centered.thin_svd().map_err(|e| Error::dim(format!("SVD did not converge: {e:?}")))?;
    let (sv, v) = (svd.S(), svd.V());
    let singular: Vec<f64> = (0..m.min(n)).map(|k| sv[k]).collect();

    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]));

    let dof = (m.max(2) - 1) as f64;
    let mean_norm = mean_trace.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut components = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    for &k in order.iter().take(n_components) {
        let mut w: Vec<f64> = (0..n).map(|t| v[(t, k)]).collect();
        orient(&mut w, &mean_trace, mean_norm);
        components.push(w);
        variances.push(if m > 1 { singular[k] * singular[k] / dof } else { 0.0 });
    }
    Ok(PrincipalBasis { mean_trace, components, variances })
}

fn orient(w: &mut [f64], mean: &[f64], mean_norm: f64) {
    let dot: f64 = w.iter().zip(mean).map(|(a, b)| a * b).sum();
    let flip = if dot.abs() > 1e-12 * mean_norm.max(f64::MIN_POSITIVE) {
        dot < 0.0
    } else {
        let peak = w.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        peak < 0.0
    };
    if flip {
        w.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Scores `<trace_i - mean, w_j>` for every trial.
pub fn project(traces: &TraceSet, basis: &PrincipalBasis, probe_labels: Vec<usize>) -> Result<ScoreSet> {
    if traces.sample_count != basis.sample_count() {
        return Err(Error::dim(format!(
            "traces have {} samples, basis expects {}",
            traces.sample_count,
            basis.sample_count()
        )));
    }
    if probe_labels.len() != traces.trial_count {
        return Err(Error::dim("one probe label per trial required"));
    }
    let k = basis.n_components();
    let scores: Vec<f64> = traces
        .data
        .par_chunks_exact(traces.sample_count)
        .flat_map_iter(|row| {
            basis.components.iter().map(move |w| {
                row.iter()
                    .zip(&basis.mean_trace)
                    .zip(w)
                    .map(|((v, m), w)| (v - m) * w)
                    .sum::<f64>()
            })
        })
        .collect();
    Ok(ScoreSet { scores, n_components: k, probe_labels })
}

/// Rebuilds traces from the first `k` scores of each trial.
pub fn reconstruct(scores: &ScoreSet, basis: &PrincipalBasis, k: usize) -> Result<TraceSet> {
    if k > basis.n_components() || k > scores.n_components {
        return Err(Error::dim(format!(
            "cannot reconstruct from {k} components (basis has {}, scores have {})",
            basis.n_components(),
            scores.n_components
        )));
    }
    let n = basis.sample_count();
    let mut data = Vec::with_capacity(scores.trial_count() * n);
    for i in 0..scores.trial_count() {
        let s = scores.row(i);
        let mut row = basis.mean_trace.clone();
        for (j, w) in basis.components.iter().take(k).enumerate() {
            for (r, wv) in row.iter_mut().zip(w) {
                *r += s[j] * wv;
            }
        }
        data.extend(row);
    }
    TraceSet::new(data, scores.trial_count(), n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<usize> {
        vec![0; n]
    }

    #[test]
    fn identical_traces_have_zero_variance() {
        let t = TraceSet::from_rows(&vec![vec![1.0, 2.0, 3.0]; 5]).unwrap();
        let b = fit_basis(&t, 3).unwrap();
        assert!(b.variances.iter().all(|v| v.abs() < 1e-24));
        assert_eq!(b.mean_trace, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_symmetric_traces() {
        let t = TraceSet::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let b = fit_basis(&t, 2).unwrap();
        assert!((b.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(b.components[0][1].abs() < 1e-12);
        assert!((b.variances[0] - 2.0).abs() < 1e-12);
        assert!(b.variances[1].abs() < 1e-12);
        // mean is zero, so the sign comes from the largest entry
        assert!(b.components[0][0] > 0.0);
    }

    #[test]
    fn too_many_components_is_an_error() {
        let t = TraceSet::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(fit_basis(&t, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_cases() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|t| ((i * 3 + t * 5) % 7) as f64).collect())
            .collect();
        let t = TraceSet::from_rows(&rows).unwrap();
        let b = fit_basis(&t, 4).unwrap();

        let mut probe_rows = vec![b.mean_trace.clone()];
        probe_rows.push(b.mean_trace.iter().zip(&b.components[0]).map(|(m, w)| m + 2.0 * w).collect());
        let probe = TraceSet::from_rows(&probe_rows).unwrap();
        let s = project(&probe, &b, labels(2)).unwrap();
        assert!(s.row(0).iter().all(|v| v.abs() < 1e-12));
        assert!((s.row(1)[0] - 2.0).abs() < 1e-12);
        assert!(s.row(1)[1..].iter().all(|v| v.abs() < 1e-12));

        let wrong = TraceSet::from_rows(&[vec![0.0; 3]]).unwrap();
        assert!(project(&wrong, &b, labels(1)).is_err());
    }

    #[test]
    fn reconstruction_limits() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..5).map(|t| ((i * 7 + t * 3) % 11) as f64 - 4.0).collect())
            .collect();
        let t = TraceSet::from_rows(&rows).unwrap();
        let b = fit_basis(&t, 5).unwrap();
        let s = project(&t, &b, labels(8)).unwrap();

        let full = reconstruct(&s, &b, 5).unwrap();
        for (a, c) in full.data().iter().zip(t.data()) {
            assert!((a - c).abs() < 1e-8);
        }
        let none = reconstruct(&s, &b, 0).unwrap();
        for row in none.rows() {
            assert_eq!(row, &b.mean_trace[..]);
        }
        assert!(reconstruct(&s, &b, 6).is_err());
    }

    #[test]
    fn i16_traces_are_converted() {
        let t = TraceSet::from_i16(&[1, -2, 3, 4], 2, 2).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }
}
