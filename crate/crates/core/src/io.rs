//! CSV and JSON file formats.
//!
//! Vector-valued fields (prior and between values) are written as
//! semicolon-separated numbers inside one CSV cell. Floats use Rust's
//! shortest round-trip formatting, so write/read/write is byte-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FeatureVector, Observation, ObservationKind, StateTrajectory, StateVector};
use crate::pipeline::IterationTrace;
use crate::vbgmm::GaussianMixture;

const AXES: [&str; 3] = ["x", "y", "z"];

fn encode_vector(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn decode_vector(s: &str) -> Result<Vec<f64>> {
    s.split(';').map(parse_f64).collect()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("not a number: '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Parse(format!("not an index: '{s}'")))
}

fn header_metadata(observations: &[Observation]) -> Vec<String> {
    observations
        .iter()
        .find(|o| o.kind.is_measurement())
        .or(observations.first())
        .map(|o| o.metadata.names().to_vec())
        .unwrap_or_default()
}

/// Writes observations with one beacon column per position axis, followed
/// by the metadata columns of the first measurement row.
pub fn write_observations<W: Write>(out: W, observations: &[Observation], dim: usize) -> Result<()> {
    if !(1..=3).contains(&dim) {
        return Err(Error::DimensionMismatch(format!("cannot write {dim}-D beacons")));
    }
    let names = header_metadata(observations);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string(), "kind".into(), "value".into()];
    header.extend(AXES[..dim].iter().map(|a| format!("beacon_{a}")));
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, o) in observations.iter().enumerate() {
        let mut rec = vec![o.epoch.to_string(), o.kind.to_string(), encode_vector(&o.value)];
        match &o.beacon {
            Some(b) if b.len() == dim => rec.extend(b.iter().map(|v| v.to_string())),
            Some(b) => {
                return Err(Error::DimensionMismatch(format!("observation {i} has a {}-D beacon", b.len())))
            }
            None => rec.extend(std::iter::repeat_n(String::new(), dim)),
        }
        if o.metadata.is_empty() {
            rec.extend(std::iter::repeat_n(String::new(), names.len()));
        } else if o.metadata.names() == names.as_slice() {
            rec.extend(o.metadata.values().iter().map(|v| v.to_string()));
        } else {
            return Err(Error::FeatureNameMismatch(format!("observation {i}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations<R: Read>(input: R) -> Result<Vec<Observation>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 3 || header[0] != "epoch" || header[1] != "kind" || header[2] != "value" {
        return Err(Error::Parse("observation header must start with epoch,kind,value".into()));
    }
    let dim = header[3..].iter().take_while(|h| h.starts_with("beacon_")).count();
    let names = &header[3 + dim..];
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("row {} has {} fields, header has {}", line + 1, rec.len(), header.len())));
        }
        let kind: ObservationKind = rec[1].parse()?;
        let beacon_cells: Vec<&str> = (3..3 + dim).map(|c| rec[c].trim()).collect();
        let beacon = if beacon_cells.iter().all(|c| c.is_empty()) {
            None
        } else {
            Some(beacon_cells.iter().map(|c| parse_f64(c)).collect::<Result<Vec<_>>>()?)
        };
        let meta_cells: Vec<&str> = (3 + dim..rec.len()).map(|c| rec[c].trim()).collect();
        let metadata = if meta_cells.iter().all(|c| c.is_empty()) {
            FeatureVector::empty()
        } else {
            let values = meta_cells.iter().map(|c| parse_f64(c)).collect::<Result<Vec<_>>>()?;
            FeatureVector::new(names.iter().cloned().zip(values))?
        };
        out.push(Observation { epoch: parse_usize(&rec[0])?, kind, value: decode_vector(&rec[2])?, beacon, metadata });
    }
    Ok(out)
}

/// `epoch,x,y[,z],bias`; used for both truth and estimates.
pub fn write_trajectory<W: Write>(out: W, x: &StateTrajectory) -> Result<()> {
    let dim = x.dim();
    if !(1..=3).contains(&dim) {
        return Err(Error::DimensionMismatch(format!("cannot write {dim}-D states")));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string()];
    header.extend(AXES[..dim].iter().map(|a| a.to_string()));
    header.push("bias".into());
    w.write_record(&header)?;
    for e in 0..x.epochs() {
        let mut rec = vec![e.to_string()];
        rec.extend(x.position(e).iter().map(|v| v.to_string()));
        rec.push(x.bias(e).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<StateTrajectory> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len();
    if width < 3 {
        return Err(Error::Parse("trajectory needs epoch, position and bias columns".into()));
    }
    let dim = width - 2;
    let mut states = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if parse_usize(&rec[0])? != line {
            return Err(Error::Parse(format!("trajectory row {} is out of order", line + 1)));
        }
        let position = (1..=dim).map(|c| parse_f64(&rec[c])).collect::<Result<Vec<_>>>()?;
        states.push(StateVector::new(position, parse_f64(&rec[dim + 1])?));
    }
    StateTrajectory::new(dim, &states)
}

/// `index,degraded` with 0/1 flags aligned to observation order.
pub fn write_labels<W: Write>(out: W, labels: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "degraded"])?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), u8::from(*l).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(input: R) -> Result<Vec<bool>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(match rec[1].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(Error::Parse(format!("bad label '{other}'"))),
        });
    }
    Ok(out)
}

pub fn write_trace<W: Write>(out: W, trace: &[IterationTrace]) -> Result<()> {
    serde_json::to_writer_pretty(out, trace)?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<IterationTrace>> {
    Ok(serde_json::from_reader(input)?)
}

pub fn write_mixture<W: Write>(out: W, mixture: &GaussianMixture) -> Result<()> {
    serde_json::to_writer_pretty(out, mixture)?;
    Ok(())
}

pub fn read_mixture<R: Read>(input: R) -> Result<GaussianMixture> {
    Ok(serde_json::from_reader(input)?)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
