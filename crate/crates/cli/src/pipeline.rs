//! The tomography pipeline as ordered stages over a results directory.
//!
//! A stage that is not selected but whose output a later stage needs is read
//! back from the archive.

use std::collections::BTreeMap;
use std::time::Instant;

use pnrtomo::calibration::{marginalize_povm, EnergyPrior};
use pnrtomo::density::OutcomeGrid;
use pnrtomo::inference::{confidence, confidence_vs_thermal_parameter, estimate_efficiency, PriorDistribution, Window};
use pnrtomo::io::{basis_to_bytes, TraceFile};
use pnrtomo::pca::{fit_basis, project};
use pnrtomo::povm::{mixture_to_table, GaussianMixturePovm, PovmTable};
use pnrtomo::tomo::{em_fit, reconstruction_error, supported_rows, ProbeData, ProbeEnsemble, ROW_SUPPORT_PROBABILITY};
use serde::{Deserialize, Serialize};

use crate::archive::{csv, float, parse_csv, Archive, Manifest};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub const STAGES: [&str; 6] = ["pca", "density", "em", "marginalize", "efficiency", "confidence"];

/// Thermal parameters swept for the plot-ready confidence curve.
const SWEEP_POINTS: usize = 51;
const SWEEP_MAX: f64 = 0.5;

/// Parses a comma-separated stage list into pipeline order.
pub fn parse_stages(text: &str) -> CliResult<Vec<&'static str>> {
    let wanted: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if wanted.is_empty() {
        return Err(CliError::Config("empty stage list".into()));
    }
    if let Some(bad) = wanted.iter().find(|w| !STAGES.contains(w)) {
        return Err(CliError::Config(format!("unknown stage {bad:?}; expected one of {}", STAGES.join(","))));
    }
    Ok(STAGES.iter().copied().filter(|s| wanted.contains(s)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridRecord {
    grid: OutcomeGrid,
    alpha_sq: Vec<f64>,
    bandwidth: pnrtomo::density::Bandwidth,
}

#[derive(Serialize)]
struct EmLog<'a> {
    diagnostics: &'a pnrtomo::tomo::EmDiagnostics,
    reconstruction_error: f64,
    supported_rows: usize,
}

#[derive(Serialize)]
struct EfficiencyReport {
    eta: f64,
    interval: (f64, f64),
    objective_min: f64,
    /// Rows `0..=rows_used` enter the fit.
    rows_used: usize,
    objective_curve: Vec<(f64, f64)>,
}

struct Run<'a> {
    config: &'a PipelineConfig,
    archive: Archive,
    scores: Option<(Vec<f64>, Vec<Vec<f64>>)>,
    ensemble: Option<ProbeEnsemble>,
    model: Option<GaussianMixturePovm>,
    marginal: Option<PovmTable>,
}

/// Runs `stages` and writes the manifest, marking the failing stage if any.
pub fn run(config: &PipelineConfig, stages: &[&'static str], force: bool) -> CliResult<Manifest> {
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        core_version: pnrtomo::VERSION.to_owned(),
        config_hash: config.hash(),
        seed: config.seed,
        stages: stages.iter().map(|s| s.to_string()).collect(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        timings: BTreeMap::new(),
        status: String::new(),
    };
    let archive = Archive::open(&config.paths.archive, force, manifest)?;
    let mut run = Run { config, archive, scores: None, ensemble: None, model: None, marginal: None };
    for &stage in stages {
        let start = Instant::now();
        let result = match stage {
            "pca" => run.pca(),
            "density" => run.density(),
            "em" => run.em(),
            "marginalize" => run.marginalize(),
            "efficiency" => run.efficiency(),
            "confidence" => run.confidence(),
            _ => unreachable!("stage list is validated"),
        };
        run.archive.manifest.timings.insert(stage.to_owned(), start.elapsed().as_secs_f64());
        if let Err(e) = result {
            let e = match e {
                CliError::Config(m) => CliError::stage(stage, m),
                other => other,
            };
            run.archive.finish(format!("FAILED({stage})"))?;
            return Err(e);
        }
    }
    run.archive.finish("OK".into())?;
    Ok(run.archive.manifest)
}

fn failed(stage: &'static str) -> impl Fn(pnrtomo::Error) -> CliError {
    move |e| CliError::stage(stage, e)
}

fn table_csv(table: &PovmTable) -> String {
    let mut header = vec!["s [score]".to_owned()];
    header.extend((0..=table.n_max()).map(|n| format!("theta_{n} [1/score]")));
    let rows = table.grid.points().into_iter().enumerate().map(|(g, s)| {
        let mut row = vec![float(s)];
        row.extend(table.theta.iter().map(|r| float(r[g])));
        row
    });
    csv(&header, rows)
}

fn grid_from_column(s: &[f64]) -> CliResult<OutcomeGrid> {
    match (s.first(), s.last()) {
        (Some(&lo), Some(&hi)) => OutcomeGrid::new(lo, hi, s.len()).map_err(|e| CliError::Config(e.to_string())),
        _ => Err(CliError::Config("table has no rows".into())),
    }
}

impl Run<'_> {
    fn pca(&mut self) -> CliResult<()> {
        let path = &self.config.paths.traces;
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.archive.manifest.inputs.insert(path.display().to_string(), crate::archive::sha256_hex(&bytes));
        let file = TraceFile::from_bytes(&bytes).map_err(failed("pca"))?;
        let traces = &file.traces;
        let k = self.config.pca.components.min(traces.trial_count()).min(traces.sample_count());
        let basis = fit_basis(traces, k).map_err(failed("pca"))?;
        let labels = file.labels();
        let scores = project(traces, &basis, labels.clone()).map_err(failed("pca"))?;
        let alpha_sq = file.alpha_sq();

        let mut header = vec!["trial".to_owned(), "probe".to_owned(), "alpha_sq [photons]".to_owned()];
        header.extend((1..=k).map(|j| format!("score_{j} [adc]")));
        let rows = (0..scores.trial_count()).map(|i| {
            let mut row = vec![i.to_string(), labels[i].to_string(), float(alpha_sq[labels[i]])];
            row.extend(scores.row(i).iter().map(|v| float(*v)));
            row
        });
        self.archive.write("basis.bin", &basis_to_bytes(&basis))?;
        self.archive.write("scores.csv", csv(&header, rows).as_bytes())?;
        self.scores = Some((alpha_sq.clone(), scores.by_probe(0, alpha_sq.len())));
        Ok(())
    }

    fn load_scores(&mut self) -> CliResult<(Vec<f64>, Vec<Vec<f64>>)> {
        if let Some(s) = &self.scores {
            return Ok(s.clone());
        }
        self.archive.read("scores.csv")?;
        let (_, rows) = parse_csv(&self.archive.path("scores.csv"))?;
        let mut alpha_sq: Vec<f64> = Vec::new();
        let mut groups: Vec<Vec<f64>> = Vec::new();
        for row in rows {
            let probe = row[1] as usize;
            if probe >= groups.len() {
                groups.resize(probe + 1, Vec::new());
                alpha_sq.resize(probe + 1, f64::NAN);
            }
            alpha_sq[probe] = row[2];
            groups[probe].push(*row.get(3).ok_or_else(|| CliError::Config("scores.csv has no score column".into()))?);
        }
        let s = (alpha_sq, groups);
        self.scores = Some(s.clone());
        Ok(s)
    }

    fn density(&mut self) -> CliResult<()> {
        let (alpha_sq, samples) = self.load_scores()?;
        let grid = &self.config.grid;
        let ensemble =
            ProbeEnsemble::from_samples(&alpha_sq, &samples, grid.points, grid.bandwidth).map_err(failed("density"))?;
        let record = GridRecord { grid: ensemble.grid, alpha_sq: alpha_sq.clone(), bandwidth: grid.bandwidth };
        let mut header = vec!["s [score]".to_owned()];
        header.extend((0..alpha_sq.len()).map(|k| format!("density_{k} [1/score]")));
        let rows = ensemble.grid.points().into_iter().enumerate().map(|(g, s)| {
            let mut row = vec![float(s)];
            row.extend(ensemble.probes.iter().map(|p| float(p.density[g])));
            row
        });
        self.archive.write("grid.json", &serde_json::to_vec_pretty(&record).expect("grid serializes"))?;
        self.archive.write("densities.csv", csv(&header, rows).as_bytes())?;
        self.ensemble = Some(ensemble);
        Ok(())
    }

    fn load_ensemble(&mut self) -> CliResult<ProbeEnsemble> {
        if let Some(e) = &self.ensemble {
            return Ok(e.clone());
        }
        let record: GridRecord = serde_json::from_slice(&self.archive.read("grid.json")?)
            .map_err(|e| CliError::Config(format!("grid.json: {e}")))?;
        self.archive.read("densities.csv")?;
        let (_, rows) = parse_csv(&self.archive.path("densities.csv"))?;
        if rows.len() != record.grid.n_points || rows.iter().any(|r| r.len() != record.alpha_sq.len() + 1) {
            return Err(CliError::Config("densities.csv does not match grid.json".into()));
        }
        let probes = record
            .alpha_sq
            .iter()
            .enumerate()
            .map(|(k, &a)| ProbeData { alpha_sq: a, density: rows.iter().map(|r| r[k + 1]).collect() })
            .collect();
        let ensemble = ProbeEnsemble::new(record.grid, probes).map_err(|e| CliError::Config(e.to_string()))?;
        self.ensemble = Some(ensemble.clone());
        Ok(ensemble)
    }

    fn em(&mut self) -> CliResult<()> {
        let data = self.load_ensemble()?;
        let (model, diagnostics) = em_fit(&data, &self.config.em.em_config()).map_err(failed("em"))?;
        let recon = reconstruction_error(&data, &model).map_err(failed("em"))?;
        let log = EmLog {
            diagnostics: &diagnostics,
            reconstruction_error: recon,
            supported_rows: supported_rows(&data, model.n_max, ROW_SUPPORT_PROBABILITY),
        };
        let grid = model.covering_grid(self.config.grid.points).map_err(failed("em"))?;
        let table = mixture_to_table(&model, &grid).map_err(failed("em"))?;
        self.archive.write("model.json", model.to_json().as_bytes())?;
        self.archive.write("em_log.json", &serde_json::to_vec_pretty(&log).expect("log serializes"))?;
        self.archive.write("povm_table.csv", table_csv(&table).as_bytes())?;
        self.model = Some(model);
        Ok(())
    }

    fn load_model(&mut self) -> CliResult<GaussianMixturePovm> {
        if let Some(m) = &self.model {
            return Ok(m.clone());
        }
        let bytes = self.archive.read("model.json")?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::Config(format!("model.json: {e}")))?;
        let model = GaussianMixturePovm::from_json(&text).map_err(|e| CliError::Config(format!("model.json: {e}")))?;
        self.model = Some(model.clone());
        Ok(model)
    }

    fn marginalize(&mut self) -> CliResult<()> {
        let model = self.load_model()?;
        let cal = &self.config.calibration;
        let grid = model.covering_grid(self.config.grid.points).map_err(failed("marginalize"))?;
        let table = marginalize_povm(&model, EnergyPrior::relative(cal.sigma), &grid, cal.quadrature_nodes)
            .map_err(failed("marginalize"))?;
        self.archive.write("marginalized_table.csv", table_csv(&table).as_bytes())?;
        self.marginal = Some(table);
        Ok(())
    }

    fn load_marginal(&mut self) -> CliResult<PovmTable> {
        if let Some(t) = &self.marginal {
            return Ok(t.clone());
        }
        self.archive.read("marginalized_table.csv")?;
        let (_, rows) = parse_csv(&self.archive.path("marginalized_table.csv"))?;
        let s: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let grid = grid_from_column(&s)?;
        let width = rows.first().map_or(0, Vec::len);
        let theta = (1..width).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
        let table = PovmTable::new(grid, theta).map_err(|e| CliError::Config(e.to_string()))?;
        self.marginal = Some(table.clone());
        Ok(table)
    }

    fn efficiency(&mut self) -> CliResult<()> {
        let data = self.load_ensemble()?;
        let model = self.load_model()?;
        let rows = supported_rows(&data, model.n_max, ROW_SUPPORT_PROBABILITY);
        let est = estimate_efficiency(&model.truncated(rows));
        let report = EfficiencyReport {
            eta: est.eta,
            interval: est.interval,
            objective_min: est.objective_min,
            rows_used: rows,
            objective_curve: est.objective_curve,
        };
        self.archive.write("efficiency.json", &serde_json::to_vec_pretty(&report).expect("report serializes"))
    }

    fn confidence(&mut self) -> CliResult<()> {
        let model = self.load_model()?;
        let table = self.load_marginal()?;
        if table.n_max() != model.n_max {
            return Err(CliError::Config("marginalized table and model disagree on n_max".into()));
        }
        let spacing = (model.peak_means[model.n_max] - model.peak_means[0]) / model.n_max as f64;
        let window = Window::around_peaks(&model, self.config.prior.window_half_width * spacing);
        let flat = PriorDistribution::flat(model.n_max);
        let chosen = PriorDistribution::parse(&self.config.prior.prior, model.n_max).map_err(failed("confidence"))?;
        for (name, prior) in [("confidence_flat.csv", &flat), ("confidence_prior.csv", &chosen)] {
            let full = confidence(&table, prior, None).map_err(failed("confidence"))?;
            let windowed = confidence(&table, prior, Some(&window)).map_err(failed("confidence"))?;
            let header: Vec<String> = [
                "n [photons]",
                "prior [1]",
                "confidence [1]",
                "windowed_confidence [1]",
                "acceptance_fraction [1]",
                "rejection_confidence [1]",
            ]
            .map(str::to_owned)
            .to_vec();
            let accept = windowed.acceptance_fraction.clone().unwrap_or_default();
            let reject = windowed.rejection_c_values.clone().unwrap_or_default();
            let rows = (0..=model.n_max).map(|n| {
                vec![
                    n.to_string(),
                    float(prior.weights()[n]),
                    float(full.c_values[n]),
                    float(windowed.c_values[n]),
                    float(accept[n]),
                    float(reject[n]),
                ]
            });
            self.archive.write(name, csv(&header, rows).as_bytes())?;
        }

        let lambdas: Vec<f64> = (0..SWEEP_POINTS).map(|i| SWEEP_MAX * i as f64 / (SWEEP_POINTS - 1) as f64).collect();
        let sweep = confidence_vs_thermal_parameter(&table, &lambdas).map_err(failed("confidence"))?;
        let mut header = vec!["lambda_sq [1]".to_owned()];
        header.extend((0..=model.n_max).map(|n| format!("confidence_{n} [1]")));
        let rows = lambdas.iter().zip(&sweep).map(|(l, c)| {
            let mut row = vec![float(*l)];
            row.extend(c.iter().map(|v| float(*v)));
            row
        });
        self.archive.write("confidence_thermal_sweep.csv", csv(&header, rows).as_bytes())
    }
}
