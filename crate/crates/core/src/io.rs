//! Binary trace and basis files. All integers and floats are little-endian.
//!
//! Trace file layout:
//!
//! ```text
//! "PNRTRACE"  8 bytes
//! version     u16
//! trials      u32
//! samples     u32
//! format      u16   0 = int16, 1 = float64
//! probes      u32
//! probes x { alpha_sq f64, first_trial u32, trial_count u32 }
//! trials x samples payload, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pca::{PrincipalBasis, TraceSet};

pub const TRACE_MAGIC: &[u8; 8] = b"PNRTRACE";
pub const BASIS_MAGIC: &[u8; 8] = b"PNRBASIS";
pub const FORMAT_VERSION: u16 = 1;
pub const TRACE_HEADER_LEN: usize = 24;
pub const PROBE_ENTRY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Int16,
    Float64,
}

impl SampleFormat {
    pub fn size(self) -> usize {
        match self {
            SampleFormat::Int16 => 2,
            SampleFormat::Float64 => 8,
        }
    }

    fn code(self) -> u16 {
        match self {
            SampleFormat::Int16 => 0,
            SampleFormat::Float64 => 1,
        }
    }

    fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(SampleFormat::Int16),
            1 => Ok(SampleFormat::Float64),
            c => Err(Error::Format(format!("unknown sample format {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeEntry {
    pub alpha_sq: f64,
    pub first_trial: u32,
    pub trial_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub format: SampleFormat,
    pub probes: Vec<ProbeEntry>,
    pub traces: TraceSet,
}

impl TraceFile {
    /// Probes must tile the trials contiguously and in order.
    pub fn new(format: SampleFormat, probes: Vec<ProbeEntry>, traces: TraceSet) -> Result<Self> {
        let mut next = 0u64;
        for p in &probes {
            if u64::from(p.first_trial) != next {
                return Err(Error::Format("probe trial ranges must be contiguous".into()));
            }
            next += u64::from(p.trial_count);
        }
        if next != traces.trial_count() as u64 {
            return Err(Error::Format(format!(
                "probe table covers {next} trials, payload has {}",
                traces.trial_count()
            )));
        }
        if format == SampleFormat::Int16 && traces.data().iter().any(|v| v.fract() != 0.0 || v.abs() > 32768.0) {
            return Err(Error::invalid("int16 traces must hold integer ADC counts"));
        }
        Ok(Self { format, probes, traces })
    }

    /// Builds the probe table from per-trial labels sorted by probe.
    pub fn from_labels(format: SampleFormat, alpha_sq: &[f64], labels: &[usize], traces: TraceSet) -> Result<Self> {
        let mut probes = Vec::with_capacity(alpha_sq.len());
        let mut start = 0usize;
        for (k, &a) in alpha_sq.iter().enumerate() {
            let count = labels[start..].iter().take_while(|&&l| l == k).count();
            probes.push(ProbeEntry { alpha_sq: a, first_trial: start as u32, trial_count: count as u32 });
            start += count;
        }
        if start != labels.len() {
            return Err(Error::Format("trial labels are not grouped by probe".into()));
        }
        Self::new(format, probes, traces)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.probes
            .iter()
            .enumerate()
            .flat_map(|(k, p)| std::iter::repeat_n(k, p.trial_count as usize))
            .collect()
    }

    pub fn alpha_sq(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.alpha_sq).collect()
    }

    pub fn byte_len(&self) -> usize {
        TRACE_HEADER_LEN
            + PROBE_ENTRY_LEN * self.probes.len()
            + self.traces.data().len() * self.format.size()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.traces.trial_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.traces.sample_count() as u32).to_le_bytes());
        out.extend_from_slice(&self.format.code().to_le_bytes());
        out.extend_from_slice(&(self.probes.len() as u32).to_le_bytes());
        for p in &self.probes {
            out.extend_from_slice(&p.alpha_sq.to_le_bytes());
            out.extend_from_slice(&p.first_trial.to_le_bytes());
            out.extend_from_slice(&p.trial_count.to_le_bytes());
        }
        match self.format {
            SampleFormat::Int16 => {
                for v in self.traces.data() {
                    out.extend_from_slice(&(v.clamp(-32768.0, 32767.0) as i16).to_le_bytes());
                }
            }
            SampleFormat::Float64 => {
                for v in self.traces.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != TRACE_MAGIC {
            return Err(Error::Format("not a trace file".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported trace file version {version}")));
        }
        let trials = r.u32()? as usize;
        let samples = r.u32()? as usize;
        let format = SampleFormat::from_code(r.u16()?)?;
        let probe_count = r.u32()? as usize;
        let probes = (0..probe_count)
            .map(|_| Ok(ProbeEntry { alpha_sq: r.f64()?, first_trial: r.u32()?, trial_count: r.u32()? }))
            .collect::<Result<Vec<_>>>()?;
        let expected = trials
            .checked_mul(samples)
            .and_then(|n| n.checked_mul(format.size()))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if bytes.len() - r.pos != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len() - r.pos
            )));
        }
        let payload = &bytes[r.pos..];
        let data: Vec<f64> = match format {
            SampleFormat::Int16 => payload
                .chunks_exact(2)
                .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
                .collect(),
            SampleFormat::Float64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        Self::new(format, probes, TraceSet::new(data, trials, samples)?)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// `"PNRBASIS"`, version u16, samples u32, components u32, then the mean
/// trace, each component, and the variances as f64.
pub fn basis_to_bytes(basis: &PrincipalBasis) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(basis.sample_count() as u32).to_le_bytes());
    out.extend_from_slice(&(basis.n_components() as u32).to_le_bytes());
    for v in basis.mean_trace.iter().chain(basis.components.iter().flatten()).chain(&basis.variances) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn basis_from_bytes(bytes: &[u8]) -> Result<PrincipalBasis> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != BASIS_MAGIC {
        return Err(Error::Format("not a basis file".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported basis file version {version}")));
    }
    let samples = r.u32()? as usize;
    let k = r.u32()? as usize;
    let mean_trace = r.f64s(samples)?;
    let components = (0..k).map(|_| r.f64s(samples)).collect::<Result<_>>()?;
    let variances = r.f64s(k)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after basis".into()));
    }
    Ok(PrincipalBasis { mean_trace, components, variances })
}
