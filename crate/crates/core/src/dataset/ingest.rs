//! Long-format CSV ingestion (`subject_id,visit,metric,value`).

use std::collections::{BTreeSet, HashMap};
use std::io::Read;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{MetricKind, MetricSpec, ProtocolMask, RctDataset, SubjectMask};
use crate::error::{Error, Result};

pub const DEFAULT_MISSINGNESS_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MIN_VARIANCE: f64 = 1e-6;
/// Auto-detection treats an all-integer metric with at most this many
/// distinct values as categorical.
const AUTO_CATEGORICAL_MAX_LEVELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclaredKind {
    Continuous,
    Categorical,
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDecl {
    pub name: String,
    #[serde(default = "auto_kind")]
    pub kind: DeclaredKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

fn auto_kind() -> DeclaredKind {
    DeclaredKind::Auto
}

/// Metadata JSON accompanying a long-format CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestMetadata {
    /// Visits are integer indices in `0..n_visits`.
    pub n_visits: usize,
    pub metrics: Vec<MetricDecl>,
    /// Optional explicit protocol, `n_visits` rows of 0/1 over the declared metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missingness_threshold: Option<f64>,
    /// Continuous metrics whose min-max normalized variance falls below this are dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LongRow {
    pub subject_id: String,
    pub visit: String,
    pub metric: String,
    /// `None` for an empty field or a NaN marker.
    pub value: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DroppedMetric {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct IngestReport {
    pub dataset: RctDataset,
    pub dropped: Vec<DroppedMetric>,
}

fn is_missing_marker(raw: &str) -> bool {
    let s = raw.trim();
    s.is_empty() || s.eq_ignore_ascii_case("nan")
}

#[derive(Deserialize)]
struct CsvRecord {
    subject_id: String,
    visit: String,
    metric: String,
    #[serde(default)]
    value: Option<String>,
}

/// Read a long-format CSV stream. Errors name the offending line (the header
/// is line 1).
pub fn ingest_csv<R: Read>(reader: R, meta: &IngestMetadata) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["subject_id", "visit", "metric", "value"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Ingest {
            row: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<CsvRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::Ingest {
            row: i + 2,
            message: e.to_string(),
        })?;
        rows.push(LongRow {
            subject_id: rec.subject_id,
            visit: rec.visit,
            metric: rec.metric,
            value: rec.value.filter(|v| !is_missing_marker(v)),
        });
    }
    ingest_rows_numbered(rows.into_iter().enumerate().map(|(i, r)| (i + 2, r)), meta)
}

/// Ingest an in-memory row stream; rows are numbered from 1.
pub fn ingest_rows<I>(rows: I, meta: &IngestMetadata) -> Result<IngestReport>
where
    I: IntoIterator<Item = LongRow>,
{
    ingest_rows_numbered(rows.into_iter().enumerate().map(|(i, r)| (i + 1, r)), meta)
}

enum CellValue {
    Number(f64),
    Label(String),
}

fn ingest_rows_numbered<I>(rows: I, meta: &IngestMetadata) -> Result<IngestReport>
where
    I: IntoIterator<Item = (usize, LongRow)>,
{
    if meta.n_visits == 0 {
        return Err(Error::config("n_visits must be positive"));
    }
    if meta.metrics.is_empty() {
        return Err(Error::config("metadata declares no metrics"));
    }
    let threshold = meta.missingness_threshold.unwrap_or(DEFAULT_MISSINGNESS_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("missingness threshold {threshold} outside [0, 1]")));
    }
    let metric_index: HashMap<&str, usize> = meta
        .metrics
        .iter()
        .enumerate()
        .map(|(i, d)| (d.name.as_str(), i))
        .collect();
    if metric_index.len() != meta.metrics.len() {
        return Err(Error::config("metadata declares a metric twice"));
    }

    let mut subjects: Vec<String> = Vec::new();
    let mut subject_index: HashMap<String, usize> = HashMap::new();
    // (subject, visit, metric) -> (row number, value)
    let mut cells: HashMap<(usize, usize, usize), (usize, Option<CellValue>)> = HashMap::new();
    // per metric: whether the first non-missing value was numeric, and where
    let mut metric_type: Vec<Option<(bool, usize)>> = vec![None; meta.metrics.len()];

    for (row, r) in rows {
        let m = *metric_index.get(r.metric.as_str()).ok_or_else(|| Error::Ingest {
            row,
            message: format!("unknown metric {:?}", r.metric),
        })?;
        let visit: usize = r
            .visit
            .trim()
            .parse()
            .ok()
            .filter(|&v: &usize| v < meta.n_visits)
            .ok_or_else(|| Error::Ingest {
                row,
                message: format!("unknown visit index {:?}", r.visit),
            })?;
        let s = match subject_index.get(&r.subject_id) {
            Some(&s) => s,
            None => {
                subjects.push(r.subject_id.clone());
                subject_index.insert(r.subject_id.clone(), subjects.len() - 1);
                subjects.len() - 1
            }
        };
        let value = match r.value {
            None => None,
            Some(v) if is_missing_marker(&v) => None,
            Some(v) => {
                let v = v.trim().to_string();
                let parsed = match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => CellValue::Number(x),
                    _ => CellValue::Label(v),
                };
                let numeric = matches!(parsed, CellValue::Number(_));
                match metric_type[m] {
                    None => metric_type[m] = Some((numeric, row)),
                    Some((first, first_row)) if first != numeric => {
                        return Err(Error::Ingest {
                            row,
                            message: format!(
                                "mixed data types in metric {:?} (row {first_row} is {}, this row is {})",
                                r.metric,
                                if first { "numeric" } else { "text" },
                                if numeric { "numeric" } else { "text" },
                            ),
                        });
                    }
                    _ => {}
                }
                Some(parsed)
            }
        };
        if let Some((prev, _)) = cells.get(&(s, visit, m)) {
            return Err(Error::Ingest {
                row,
                message: format!(
                    "duplicate entry for subject {:?}, visit {visit}, metric {:?} (first at row {prev})",
                    r.subject_id, r.metric
                ),
            });
        }
        cells.insert((s, visit, m), (row, value));
    }
    if subjects.is_empty() {
        return Err(Error::Empty("no data rows".into()));
    }

    let n_s = subjects.len();
    let n_t = meta.n_visits;
    let n_decl = meta.metrics.len();

    // Resolve each declared metric into a spec + raw column, or a drop reason.
    let mut kept_specs = Vec::new();
    let mut kept_decl_idx = Vec::new();
    let mut columns: Vec<Array2<f64>> = Vec::new();
    let mut dropped = Vec::new();
    let min_var = meta.min_variance.unwrap_or(DEFAULT_MIN_VARIANCE);

    for (m, decl) in meta.metrics.iter().enumerate() {
        let mut entries: Vec<(usize, usize, usize, &CellValue)> = Vec::new();
        for s in 0..n_s {
            for t in 0..n_t {
                if let Some((row, Some(v))) = cells.get(&(s, t, m)) {
                    entries.push((s, t, *row, v));
                }
            }
        }
        if entries.is_empty() {
            dropped.push(DroppedMetric {
                name: decl.name.clone(),
                reason: "entirely missing".into(),
            });
            continue;
        }
        let numeric = metric_type[m].map(|(n, _)| n).unwrap_or(false);
        let kind = match decl.kind {
            DeclaredKind::Continuous => {
                if !numeric {
                    let row = metric_type[m].map(|(_, r)| r).unwrap_or(0);
                    return Err(Error::Ingest {
                        row,
                        message: format!("metric {:?} declared continuous but holds text", decl.name),
                    });
                }
                MetricKind::Continuous
            }
            DeclaredKind::Categorical => MetricKind::Categorical,
            DeclaredKind::Auto => {
                if !numeric || decl.categories.is_some() {
                    MetricKind::Categorical
                } else {
                    let mut levels = BTreeSet::new();
                    let all_int = entries.iter().all(|(_, _, _, v)| match v {
                        CellValue::Number(x) => {
                            levels.insert(x.to_bits());
                            x.fract() == 0.0
                        }
                        CellValue::Label(_) => false,
                    });
                    if all_int && levels.len() <= AUTO_CATEGORICAL_MAX_LEVELS {
                        MetricKind::Categorical
                    } else {
                        MetricKind::Continuous
                    }
                }
            }
        };

        let mut col = Array2::from_elem((n_s, n_t), f64::NAN);
        match kind {
            MetricKind::Continuous => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &(s, t, _, v) in &entries {
                    let CellValue::Number(x) = v else { unreachable!() };
                    col[[s, t]] = *x;
                    lo = lo.min(*x);
                    hi = hi.max(*x);
                }
                if lo == hi {
                    dropped.push(DroppedMetric {
                        name: decl.name.clone(),
                        reason: "constant".into(),
                    });
                    continue;
                }
                let n = entries.len() as f64;
                let norm: Vec<f64> = entries
                    .iter()
                    .map(|&(s, t, _, _)| (col[[s, t]] - lo) / (hi - lo))
                    .collect();
                let mean = norm.iter().sum::<f64>() / n;
                let var = norm.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                if var < min_var {
                    dropped.push(DroppedMetric {
                        name: decl.name.clone(),
                        reason: format!("low variance ({var:e})"),
                    });
                    continue;
                }
                kept_specs.push(MetricSpec::continuous(decl.name.clone(), lo, hi));
            }
            MetricKind::Categorical => {
                let label_of = |v: &CellValue| match v {
                    CellValue::Number(x) => format_number_label(*x),
                    CellValue::Label(l) => l.clone(),
                };
                let categories = match &decl.categories {
                    Some(c) => c.clone(),
                    None => {
                        let mut labels: Vec<String> = entries
                            .iter()
                            .map(|(_, _, _, v)| label_of(v))
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .collect();
                        let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
                        if let Some(nums) = numeric {
                            let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(labels).collect();
                            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                            labels = pairs.into_iter().map(|(_, l)| l).collect();
                        }
                        labels
                    }
                };
                let lookup: HashMap<&str, usize> =
                    categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
                let mut used = BTreeSet::new();
                for &(s, t, row, v) in &entries {
                    let label = label_of(v);
                    let idx = *lookup.get(label.as_str()).ok_or_else(|| Error::Ingest {
                        row,
                        message: format!("value {label:?} is not a declared category of {:?}", decl.name),
                    })?;
                    used.insert(idx);
                    col[[s, t]] = idx as f64;
                }
                if used.len() < 2 {
                    dropped.push(DroppedMetric {
                        name: decl.name.clone(),
                        reason: "constant".into(),
                    });
                    continue;
                }
                kept_specs.push(MetricSpec::categorical(decl.name.clone(), categories));
            }
        }
        kept_decl_idx.push(m);
        columns.push(col);
    }
    if kept_specs.is_empty() {
        return Err(Error::Empty("every metric was dropped during ingestion".into()));
    }

    let n_m = kept_specs.len();
    let mut values = Array3::from_elem((n_s, n_t, n_m), f64::NAN);
    for (j, col) in columns.iter().enumerate() {
        for s in 0..n_s {
            for t in 0..n_t {
                values[[s, t, j]] = col[[s, t]];
            }
        }
    }
    let collected = values.mapv(|v| !v.is_nan());

    let protocol = match &meta.protocol {
        Some(rows) => {
            if rows.len() != n_t || rows.iter().any(|r| r.len() != n_decl) {
                return Err(Error::config(format!(
                    "protocol must be {n_t} rows of {n_decl} entries"
                )));
            }
            let mut p = Array2::from_elem((n_t, n_m), false);
            for t in 0..n_t {
                for (j, &m) in kept_decl_idx.iter().enumerate() {
                    p[[t, j]] = match rows[t][m] {
                        0 => false,
                        1 => true,
                        other => {
                            return Err(Error::config(format!("protocol entry {other} is not 0/1")))
                        }
                    };
                }
            }
            ProtocolMask::new(p)?
        }
        None => derive_protocol(&collected, threshold)?,
    };

    let dataset = RctDataset::new(
        values,
        kept_specs,
        subjects,
        protocol,
        SubjectMask::new(collected),
    )?;
    Ok(IngestReport { dataset, dropped })
}

/// A cell (t, m) is eligible iff the fraction of subjects missing it is at
/// most `threshold`.
pub(crate) fn derive_protocol(collected: &Array3<bool>, threshold: f64) -> Result<ProtocolMask> {
    let (n_s, n_t, n_m) = collected.dim();
    let mut p = Array2::from_elem((n_t, n_m), false);
    for t in 0..n_t {
        for m in 0..n_m {
            let missing = (0..n_s).filter(|&s| !collected[[s, t, m]]).count();
            p[[t, m]] = (missing as f64) <= threshold * n_s as f64;
        }
    }
    ProtocolMask::new(p)
}

fn format_number_label(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}
