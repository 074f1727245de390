//! Cohort files: comma-separated rows `patient_id,covariate_name,time_hours,value`
//! under a header line. A row with empty time and value declares a covariate
//! without observations. Every patient shares the cohort covariate list, in
//! order of first appearance.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::ObservationSet;
use crate::error::{Error, Result};

pub const HEADER: [&str; 4] = ["patient_id", "covariate_name", "time_hours", "value"];

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line: line as usize, message: message.into() }
}

/// Observation rows of one patient: (covariate, time, value, source line).
type Rows = Vec<(usize, f64, f64, u64)>;

pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<ObservationSet>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(1, format!("expected header {}", HEADER.join(","))));
    }
    let mut covariates: Vec<String> = Vec::new();
    let mut cov_index: HashMap<String, usize> = HashMap::new();
    let mut patients: Vec<(String, Rows, Vec<usize>)> = Vec::new();
    let mut patient_index: HashMap<String, usize> = HashMap::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let (pid, name, time, value) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        if pid.is_empty() || name.is_empty() {
            return Err(parse_err(line, "patient_id and covariate_name must be non-empty"));
        }
        let c = *cov_index.entry(name.to_string()).or_insert_with(|| {
            covariates.push(name.to_string());
            covariates.len() - 1
        });
        let p = *patient_index.entry(pid.to_string()).or_insert_with(|| {
            patients.push((pid.to_string(), Vec::new(), Vec::new()));
            patients.len() - 1
        });
        match (time.is_empty(), value.is_empty()) {
            (true, true) => patients[p].2.push(c),
            (false, false) => {
                let t: f64 = time.parse().map_err(|_| parse_err(line, format!("invalid time {time:?}")))?;
                let v: f64 = value.parse().map_err(|_| parse_err(line, format!("invalid value {value:?}")))?;
                if !t.is_finite() || !v.is_finite() {
                    return Err(parse_err(line, "time and value must be finite"));
                }
                patients[p].1.push((c, t, v, line));
            }
            _ => return Err(parse_err(line, "time and value must both be present or both be empty")),
        }
    }

    let mut out = Vec::with_capacity(patients.len());
    for (pid, rows, _) in patients {
        let mut set = ObservationSet::new(pid, covariates.clone());
        for (c, t, v, line) in rows {
            if let Some(&last) = set.channels[c].times.last() {
                if t <= last {
                    return Err(parse_err(
                        line,
                        format!("time {t} for {}/{} does not increase (previous {last})", set.patient_id, covariates[c]),
                    ));
                }
            }
            set.push(c, t, v)?;
        }
        out.push(set);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(writer: W, cohort: &[ObservationSet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(HEADER).map_err(io)?;
    for p in cohort {
        p.validate()?;
        for (d, ch) in p.channels.iter().enumerate() {
            let name = &p.covariate_names[d];
            if ch.is_empty() {
                w.write_record([p.patient_id.as_str(), name, "", ""]).map_err(io)?;
            }
            for (t, v) in ch.times.iter().zip(&ch.values) {
                w.write_record([p.patient_id.as_str(), name, &t.to_string(), &v.to_string()]).map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<ObservationSet>> {
    read_dataset(std::fs::File::open(path)?)
}

pub fn save_dataset(path: impl AsRef<Path>, cohort: &[ObservationSet]) -> Result<()> {
    write_dataset(std::io::BufWriter::new(std::fs::File::create(path)?), cohort)
}
