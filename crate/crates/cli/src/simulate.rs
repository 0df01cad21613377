use std::path::Path;

use pnrtomo::io::{SampleFormat, TraceFile};
use pnrtomo::pca::TraceSet;
use pnrtomo::sim::{simulate_probe_ensemble, SimMetadata};
use serde::Serialize;

use crate::archive::write_atomic;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct Sidecar {
    #[serde(flatten)]
    metadata: SimMetadata,
    sample_format: crate::config::SampleKind,
    /// ADC counts per unit amplitude; 1 for float64 payloads.
    adc_scale: f64,
    trace_sha256: String,
}

/// Path of the metadata file written next to `traces`.
pub fn sidecar_path(traces: &Path) -> std::path::PathBuf {
    let mut name = traces.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    traces.with_file_name(name)
}

/// Simulates the configured probe ensemble and writes the trace file and its
/// sidecar. Both land via rename, so a failure leaves neither half-written.
pub fn run(config: &PipelineConfig, output: &Path, force: bool) -> CliResult<()> {
    if output.exists() && !force {
        return Err(CliError::Refused(output.to_path_buf()));
    }
    let settings = &config.simulate;
    let truth = settings.truth()?;
    let sim_config = settings.sim_config(config.seed);
    sim_config.validate().map_err(|e| CliError::Config(format!("simulate: {e}")))?;
    let data = simulate_probe_ensemble(&sim_config, &truth).map_err(|e| CliError::stage("simulate", e))?;

    let format = SampleFormat::from(settings.sample_format);
    let (traces, scale) = match format {
        SampleFormat::Float64 => (data.traces, 1.0),
        SampleFormat::Int16 => {
            let counts = data
                .traces
                .data()
                .iter()
                .map(|v| (v * settings.adc_scale).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)))
                .collect();
            let set = TraceSet::new(counts, data.traces.trial_count(), data.traces.sample_count())
                .map_err(|e| CliError::stage("simulate", e))?;
            (set, settings.adc_scale)
        }
    };
    let file = TraceFile::from_labels(format, &data.alpha_sq, &data.probe_labels, traces)
        .map_err(|e| CliError::stage("simulate", e))?;
    let bytes = file.to_bytes();
    let sidecar = Sidecar {
        metadata: SimMetadata::new(&sim_config, &truth),
        sample_format: settings.sample_format,
        adc_scale: scale,
        trace_sha256: crate::archive::sha256_hex(&bytes),
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_atomic(output, &bytes)?;
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path(output), &json)
}
