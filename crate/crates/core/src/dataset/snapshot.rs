//! Dataset snapshot: `metadata.json` plus one wide CSV per timepoint
//! (`visit_<t>.csv`, header `subject_id,<metric names>`). Continuous cells are
//! written with shortest round-trip formatting, categorical cells as labels,
//! uncollected cells as empty fields. Unobserved cells are restored to the
//! metric's fill value (or NaN for raw data), so write → read → write is
//! byte-identical.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{MetricKind, MetricSpec, Normalization, ProtocolMask, RctDataset, SubjectMask};
use crate::error::{Error, Result};

const FORMAT: &str = "pmdlearn-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    format: String,
    version: u32,
    n_timepoints: usize,
    subject_ids: Vec<String>,
    metrics: Vec<MetricSpec>,
    protocol: Vec<Vec<u8>>,
    normalization: Option<Vec<Normalization>>,
}

fn visit_file(t: usize) -> String {
    format!("visit_{t}.csv")
}

pub fn write_snapshot(data: &RctDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (n_s, n_t, n_m) = data.values().dim();
    let meta = SnapshotMeta {
        format: FORMAT.into(),
        version: VERSION,
        n_timepoints: n_t,
        subject_ids: data.subject_ids().to_vec(),
        metrics: data.metrics().to_vec(),
        protocol: data
            .protocol()
            .eligible()
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&e| u8::from(e)).collect())
            .collect(),
        normalization: data.normalization().map(<[_]>::to_vec),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join("metadata.json"), json)?;

    for t in 0..n_t {
        let mut w = csv::Writer::from_path(dir.join(visit_file(t)))?;
        let mut header = vec!["subject_id".to_string()];
        header.extend(data.metric_names());
        w.write_record(&header)?;
        for s in 0..n_s {
            let mut rec = Vec::with_capacity(n_m + 1);
            rec.push(data.subject_ids()[s].clone());
            for (m, spec) in data.metrics().iter().enumerate() {
                if !data.observed().is_collected(s, t, m) {
                    rec.push(String::new());
                    continue;
                }
                let v = data.values()[[s, t, m]];
                rec.push(match spec.kind {
                    MetricKind::Continuous => format!("{v}"),
                    MetricKind::Categorical => spec.categories[v as usize].clone(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_snapshot(dir: &Path) -> Result<RctDataset> {
    let meta: SnapshotMeta = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::data(format!(
            "unsupported snapshot format {} v{}",
            meta.format, meta.version
        )));
    }
    let n_s = meta.subject_ids.len();
    let n_t = meta.n_timepoints;
    let n_m = meta.metrics.len();
    if meta.protocol.len() != n_t || meta.protocol.iter().any(|r| r.len() != n_m) {
        return Err(Error::shape("protocol matrix does not match snapshot dimensions"));
    }
    let protocol = ProtocolMask::new(Array2::from_shape_fn((n_t, n_m), |(t, m)| meta.protocol[t][m] == 1))?;
    let mut values = Array3::from_elem((n_s, n_t, n_m), f64::NAN);
    let mut collected = Array3::from_elem((n_s, n_t, n_m), false);

    for t in 0..n_t {
        let mut rdr = csv::Reader::from_path(dir.join(visit_file(t)))?;
        let header = rdr.headers()?.clone();
        if header.len() != n_m + 1
            || header.iter().skip(1).zip(&meta.metrics).any(|(h, spec)| h != spec.name)
        {
            return Err(Error::data(format!("{} header does not match metadata", visit_file(t))));
        }
        let mut count = 0;
        for (s, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if s >= n_s || rec.get(0) != Some(meta.subject_ids[s].as_str()) {
                return Err(Error::data(format!(
                    "{} row {} does not match subject order",
                    visit_file(t),
                    s + 2
                )));
            }
            for (m, spec) in meta.metrics.iter().enumerate() {
                let cell = rec.get(m + 1).unwrap_or("");
                if cell.is_empty() {
                    values[[s, t, m]] = meta.normalization.as_ref().map_or(f64::NAN, |n| n[m].fill);
                    continue;
                }
                collected[[s, t, m]] = true;
                values[[s, t, m]] = match spec.kind {
                    MetricKind::Continuous => cell
                        .parse::<f64>()
                        .map_err(|_| Error::data(format!("bad number {cell:?} in {}", visit_file(t))))?,
                    MetricKind::Categorical => spec
                        .categories
                        .iter()
                        .position(|c| c == cell)
                        .ok_or_else(|| Error::data(format!("unknown category {cell:?} for {}", spec.name)))?
                        as f64,
                };
            }
            count += 1;
        }
        if count != n_s {
            return Err(Error::data(format!("{} has {count} rows, expected {n_s}", visit_file(t))));
        }
    }
    let data = RctDataset::new(values, meta.metrics, meta.subject_ids, protocol, SubjectMask::new(collected))?;
    Ok(data.with_normalization(meta.normalization))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{preprocess, synthesize, SynthConfig};

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn raw_and_preprocessed_round_trip_bit_exact() {
        let cfg = SynthConfig {
            categorical_fraction: 0.34,
            native_missing_rate: 0.15,
            protocol_rate: 0.8,
            n_subjects: 12,
            ..SynthConfig::default()
        };
        let raw = synthesize(&cfg, 4).unwrap();
        for data in [raw.clone(), preprocess(&raw).unwrap()] {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            write_snapshot(&data, a.path()).unwrap();
            let back = read_snapshot(a.path()).unwrap();
            assert_eq!(back.metrics(), data.metrics());
            assert_eq!(back.normalization(), data.normalization());
            assert_eq!(back.observed(), data.observed());
            for (x, y) in back.values().iter().zip(data.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
            }
            assert!(back.same_bits(&data));
            write_snapshot(&back, b.path()).unwrap();
            assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        }
    }
}
