//! EDF reader and writer.
//!
//! Layout: a 256-byte fixed header, `ns` × 256 bytes of signal headers
//! (field-interleaved: all labels, then all transducers, ...), then data
//! records. Each record holds, per signal, `samples_per_record` 16-bit
//! little-endian two's-complement integers. Only plain EDF is handled; EDF+
//! annotation channels are ignored when present.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChannelInfo, RawRecording};

const FIXED_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;
const VERSION: &[u8; 8] = b"0       ";
const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("malformed EDF header: {0}")]
    MalformedHeader(String),
    #[error("channel {channel:?}: degenerate scaling, digital min == digital max == {digital}")]
    ScalingDegenerate { channel: String, digital: i32 },
    #[error("cannot encode channel {channel:?}: {reason}")]
    Unencodable { channel: String, reason: String },
}

/// Affine digital ↔ physical mapping of one EDF signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdfScaling {
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
}

impl EdfScaling {
    fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min) as f64
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        (digital as f64 - self.digital_min as f64) * self.gain() + self.physical_min
    }

    pub fn to_digital(&self, physical: f64) -> i16 {
        let d = (physical - self.physical_min) / self.gain() + self.digital_min as f64;
        d.round().clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub scaling: EdfScaling,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

/// An EDF file with samples kept in their digital form.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub patient_id: String,
    pub recording_id: String,
    pub start_date: String,
    pub start_time: String,
    pub num_records: usize,
    pub record_duration: f64,
    pub signals: Vec<EdfSignalHeader>,
    pub digital: Vec<Vec<i16>>,
}

fn field(bytes: &[u8], start: usize, len: usize) -> Result<String, EdfError> {
    let raw = bytes
        .get(start..start + len)
        .ok_or_else(|| EdfError::MalformedHeader(format!("truncated at byte {start}")))?;
    Ok(String::from_utf8_lossy(raw).trim().to_string())
}

fn number<T: std::str::FromStr>(bytes: &[u8], start: usize, len: usize, what: &str) -> Result<T, EdfError> {
    let s = field(bytes, start, len)?;
    s.parse()
        .map_err(|_| EdfError::MalformedHeader(format!("{what}: cannot parse {s:?}")))
}

fn put_field(out: &mut Vec<u8>, value: &str, len: usize) -> Result<(), EdfError> {
    let ascii: String = value.chars().map(|c| if c.is_ascii() { c } else { '_' }).collect();
    if ascii.len() > len {
        return Err(EdfError::MalformedHeader(format!(
            "field {ascii:?} longer than {len} bytes"
        )));
    }
    out.extend_from_slice(ascii.as_bytes());
    out.extend(std::iter::repeat_n(b' ', len - ascii.len()));
    Ok(())
}

/// Shortest decimal rendering of `v` in at most 8 characters, rounded
/// towards `-inf` (`down`) or `+inf`.
fn format_bound(v: f64, down: bool) -> Option<String> {
    for decimals in (0..=6).rev() {
        let scale = 10f64.powi(decimals);
        let x = v * scale;
        let r = if (x - x.round()).abs() < 1e-6 {
            x.round()
        } else if down {
            x.floor()
        } else {
            x.ceil()
        } / scale;
        let s = format!("{:.*}", decimals as usize, r);
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        let s = if s == "-0" { "0".to_string() } else { s };
        if s.len() <= 8 {
            return Some(s);
        }
    }
    None
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, EdfError> {
        if bytes.len() < FIXED_HEADER {
            return Err(EdfError::MalformedHeader("file shorter than 256 bytes".into()));
        }
        if &bytes[0..8] != VERSION {
            return Err(EdfError::MalformedHeader(format!(
                "bad version field {:?}",
                String::from_utf8_lossy(&bytes[0..8])
            )));
        }
        let patient_id = field(bytes, 8, 80)?;
        let recording_id = field(bytes, 88, 80)?;
        let start_date = field(bytes, 168, 8)?;
        let start_time = field(bytes, 176, 8)?;
        let header_bytes: usize = number(bytes, 184, 8, "header size")?;
        let declared_records: i64 = number(bytes, 236, 8, "number of data records")?;
        let record_duration: f64 = number(bytes, 244, 8, "record duration")?;
        let ns: usize = number(bytes, 252, 4, "number of signals")?;
        if ns == 0 {
            return Err(EdfError::MalformedHeader("no signals".into()));
        }
        if header_bytes != FIXED_HEADER + ns * SIGNAL_HEADER {
            return Err(EdfError::MalformedHeader(format!(
                "header size {header_bytes} inconsistent with {ns} signals"
            )));
        }
        if bytes.len() < header_bytes {
            return Err(EdfError::MalformedHeader("truncated signal headers".into()));
        }
        if !(record_duration > 0.0) {
            return Err(EdfError::MalformedHeader(format!(
                "record duration {record_duration} must be positive"
            )));
        }

        // Signal header fields are stored column-wise.
        let mut offset = FIXED_HEADER;
        let mut column = |len: usize| -> Result<Vec<String>, EdfError> {
            let col = (0..ns)
                .map(|i| field(bytes, offset + i * len, len))
                .collect::<Result<Vec<_>, _>>()?;
            offset += ns * len;
            Ok(col)
        };
        let labels = column(16)?;
        let transducers = column(80)?;
        let dims = column(8)?;
        let pmin = column(8)?;
        let pmax = column(8)?;
        let dmin = column(8)?;
        let dmax = column(8)?;
        let prefilter = column(80)?;
        let spr = column(8)?;

        let parse_col = |col: &[String], i: usize, what: &str| -> Result<f64, EdfError> {
            col[i].parse::<f64>().map_err(|_| {
                EdfError::MalformedHeader(format!("signal {i} {what}: cannot parse {:?}", col[i]))
            })
        };
        let mut signals = Vec::with_capacity(ns);
        for i in 0..ns {
            let samples_per_record = spr[i].parse::<usize>().map_err(|_| {
                EdfError::MalformedHeader(format!("signal {i} samples per record {:?}", spr[i]))
            })?;
            signals.push(EdfSignalHeader {
                label: labels[i].clone(),
                transducer: transducers[i].clone(),
                physical_dimension: dims[i].clone(),
                scaling: EdfScaling {
                    physical_min: parse_col(&pmin, i, "physical min")?,
                    physical_max: parse_col(&pmax, i, "physical max")?,
                    digital_min: parse_col(&dmin, i, "digital min")? as i32,
                    digital_max: parse_col(&dmax, i, "digital max")? as i32,
                },
                prefiltering: prefilter[i].clone(),
                samples_per_record,
            });
        }

        let record_samples: usize = signals.iter().map(|s| s.samples_per_record).sum();
        let record_bytes = 2 * record_samples;
        if record_bytes == 0 {
            return Err(EdfError::MalformedHeader("data records hold no samples".into()));
        }
        let data = &bytes[header_bytes..];
        let num_records = if declared_records < 0 {
            data.len() / record_bytes
        } else {
            declared_records as usize
        };
        if data.len() < num_records * record_bytes {
            return Err(EdfError::MalformedHeader(format!(
                "header declares {num_records} records of {record_bytes} bytes, only {} data bytes present",
                data.len()
            )));
        }

        let mut digital: Vec<Vec<i16>> = signals
            .iter()
            .map(|s| Vec::with_capacity(s.samples_per_record * num_records))
            .collect();
        let mut pos = 0;
        for _ in 0..num_records {
            for (sig, out) in signals.iter().zip(digital.iter_mut()) {
                let chunk = &data[pos..pos + 2 * sig.samples_per_record];
                out.extend(chunk.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
                pos += 2 * sig.samples_per_record;
            }
        }

        Ok(EdfFile {
            patient_id,
            recording_id,
            start_date,
            start_time,
            num_records,
            record_duration,
            signals,
            digital,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EdfError> {
        let ns = self.signals.len();
        let mut out = Vec::with_capacity(FIXED_HEADER + ns * SIGNAL_HEADER);
        out.extend_from_slice(VERSION);
        put_field(&mut out, &self.patient_id, 80)?;
        put_field(&mut out, &self.recording_id, 80)?;
        put_field(&mut out, &self.start_date, 8)?;
        put_field(&mut out, &self.start_time, 8)?;
        put_field(&mut out, &(FIXED_HEADER + ns * SIGNAL_HEADER).to_string(), 8)?;
        put_field(&mut out, "", 44)?;
        put_field(&mut out, &self.num_records.to_string(), 8)?;
        put_field(&mut out, &format_duration(self.record_duration)?, 8)?;
        put_field(&mut out, &ns.to_string(), 4)?;

        let num = |v: f64| format_bound(v, v < 0.0).unwrap_or_default();
        let columns: [(usize, Box<dyn Fn(&EdfSignalHeader) -> String>); 10] = [
            (16, Box::new(|s| s.label.clone())),
            (80, Box::new(|s| s.transducer.clone())),
            (8, Box::new(|s| s.physical_dimension.clone())),
            (8, Box::new(move |s| num(s.scaling.physical_min))),
            (8, Box::new(move |s| num(s.scaling.physical_max))),
            (8, Box::new(|s| s.scaling.digital_min.to_string())),
            (8, Box::new(|s| s.scaling.digital_max.to_string())),
            (80, Box::new(|s| s.prefiltering.clone())),
            (8, Box::new(|s| s.samples_per_record.to_string())),
            (32, Box::new(|_| String::new())),
        ];
        for (len, get) in &columns {
            for s in &self.signals {
                put_field(&mut out, &get(s), *len)?;
            }
        }

        for (s, d) in self.signals.iter().zip(&self.digital) {
            if d.len() != s.samples_per_record * self.num_records {
                return Err(EdfError::MalformedHeader(format!(
                    "signal {} has {} samples, expected {}",
                    s.label,
                    d.len(),
                    s.samples_per_record * self.num_records
                )));
            }
        }
        for r in 0..self.num_records {
            for (s, d) in self.signals.iter().zip(&self.digital) {
                let n = s.samples_per_record;
                for v in &d[r * n..(r + 1) * n] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Convert to physical units. Channels with degenerate scaling are
    /// rejected and returned separately.
    pub fn into_recording(self) -> Result<(RawRecording, Vec<EdfError>), EdfError> {
        let mut channels = Vec::new();
        let mut signals = Vec::new();
        let mut rejected = Vec::new();
        for (h, d) in self.signals.into_iter().zip(self.digital) {
            if h.label == ANNOTATION_LABEL {
                continue;
            }
            if h.scaling.digital_max == h.scaling.digital_min {
                rejected.push(EdfError::ScalingDegenerate {
                    channel: h.label.clone(),
                    digital: h.scaling.digital_min,
                });
                continue;
            }
            let rate = h.samples_per_record as f64 / self.record_duration;
            signals.push(d.iter().map(|&v| h.scaling.to_physical(v)).collect());
            channels.push(ChannelInfo {
                name: h.label,
                sample_rate: rate,
                physical_unit: h.physical_dimension,
                scaling: Some(h.scaling),
            });
        }
        if channels.is_empty() {
            return Err(rejected
                .pop()
                .unwrap_or_else(|| EdfError::MalformedHeader("no data channels".into())));
        }
        let duration = self.num_records as f64 * self.record_duration;
        let epochs = (duration / crate::EPOCH_SECONDS + 1e-9).floor() as usize;
        // Signals come without stage labels; every whole epoch starts UNKNOWN
        // until a hypnogram is attached.
        let rec = RawRecording {
            recording_id: self.recording_id,
            patient_id: self.patient_id,
            channels,
            signals,
            hypnogram: vec![super::RawStageLabel::Unknown; epochs],
        };
        Ok((rec, rejected))
    }

    /// Encode a recording, reusing stored scalings or deriving one from the
    /// signal range.
    pub fn from_recording(rec: &RawRecording) -> Result<Self, EdfError> {
        let rates: Vec<f64> = rec.channels.iter().map(|c| c.sample_rate).collect();
        let record_duration = if rates.iter().all(|r| (r - r.round()).abs() < 1e-9) {
            1.0
        } else if rates.iter().all(|r| (r * 30.0 - (r * 30.0).round()).abs() < 1e-9) {
            30.0
        } else {
            return Err(EdfError::Unencodable {
                channel: rec.channels[0].name.clone(),
                reason: "sample rates give no whole samples per 1 s or 30 s record".into(),
            });
        };
        let duration = rec.duration_seconds();
        let num_records = (duration / record_duration).round() as usize;

        let mut signals = Vec::new();
        let mut digital = Vec::new();
        for (c, s) in rec.channels.iter().zip(&rec.signals) {
            let scaling = match c.scaling {
                Some(sc) => sc,
                None => auto_scaling(s).ok_or_else(|| EdfError::Unencodable {
                    channel: c.name.clone(),
                    reason: "signal range does not fit an 8-character header field".into(),
                })?,
            };
            // Header fields carry limited precision; convert with the values a
            // reader will actually see.
            let scaling = EdfScaling {
                physical_min: reparse(scaling.physical_min),
                physical_max: reparse(scaling.physical_max),
                ..scaling
            };
            let spr = (c.sample_rate * record_duration).round() as usize;
            let mut d: Vec<i16> = s.iter().map(|&v| scaling.to_digital(v)).collect();
            d.resize(spr * num_records, 0);
            signals.push(EdfSignalHeader {
                label: c.name.clone(),
                transducer: String::new(),
                physical_dimension: c.physical_unit.clone(),
                scaling,
                prefiltering: String::new(),
                samples_per_record: spr,
            });
            digital.push(d);
        }
        Ok(EdfFile {
            patient_id: rec.patient_id.clone(),
            recording_id: rec.recording_id.clone(),
            start_date: "01.01.85".into(),
            start_time: "00.00.00".into(),
            num_records,
            record_duration,
            signals,
            digital,
        })
    }
}

fn reparse(v: f64) -> f64 {
    format_bound(v, v < 0.0)
        .and_then(|s| s.parse().ok())
        .unwrap_or(v)
}

fn format_duration(d: f64) -> Result<String, EdfError> {
    format_bound(d, false).ok_or_else(|| EdfError::MalformedHeader(format!("record duration {d}")))
}

fn auto_scaling(signal: &[f64]) -> Option<EdfScaling> {
    let (mut lo, mut hi) = signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        lo = -1.0;
        hi = 1.0;
    }
    if hi - lo < 1e-6 {
        lo -= 1.0;
        hi += 1.0;
    }
    let physical_min: f64 = format_bound(lo, true)?.parse().ok()?;
    let physical_max: f64 = format_bound(hi, false)?.parse().ok()?;
    Some(EdfScaling {
        physical_min,
        physical_max,
        digital_min: i16::MIN as i32,
        digital_max: i16::MAX as i32,
    })
}

/// Parse an EDF byte stream into a recording in physical units. Channels
/// with degenerate scaling are dropped with a warning; the hypnogram is
/// all-UNKNOWN until one is attached.
pub fn parse_edf(bytes: &[u8]) -> Result<RawRecording, EdfError> {
    let (rec, rejected) = EdfFile::parse(bytes)?.into_recording()?;
    for r in rejected {
        log::warn!("{}: {r}", rec.recording_id);
    }
    Ok(rec)
}

pub fn write_edf(rec: &RawRecording) -> Result<Vec<u8>, EdfError> {
    EdfFile::from_recording(rec)?.to_bytes()
}
