use rand::seq::SliceRandom;

use super::{MetricKind, Normalization, RctDataset};
use crate::error::{Error, Result};
use crate::seed;

/// Per-metric statistics over observed cells: min/max (continuous) and the
/// fill value, i.e. the mean of the normalized observed values or the modal
/// category (lowest index on ties).
pub fn fit_normalization(data: &RctDataset) -> Result<Vec<Normalization>> {
    let values = data.values();
    let collected = data.observed().collected();
    let (n_s, n_t, n_m) = values.dim();
    let mut out = Vec::with_capacity(n_m);
    for (m, spec) in data.metrics().iter().enumerate() {
        let observed = (0..n_s)
            .flat_map(|s| (0..n_t).map(move |t| (s, t)))
            .filter(|&(s, t)| collected[[s, t, m]])
            .map(|(s, t)| values[[s, t, m]]);
        match spec.kind {
            MetricKind::Continuous => {
                let obs: Vec<f64> = observed.collect();
                if obs.is_empty() {
                    return Err(Error::data(format!("metric {} is entirely unobserved", spec.name)));
                }
                let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = if hi > lo { hi - lo } else { 1.0 };
                let mean = obs.iter().map(|x| (x - lo) / span).sum::<f64>() / obs.len() as f64;
                out.push(Normalization {
                    min: lo,
                    max: hi,
                    fill: mean,
                });
            }
            MetricKind::Categorical => {
                let mut counts = vec![0usize; spec.n_categories()];
                let mut any = false;
                for v in observed {
                    counts[v as usize] += 1;
                    any = true;
                }
                if !any {
                    return Err(Error::data(format!("metric {} is entirely unobserved", spec.name)));
                }
                let mode = counts
                    .iter()
                    .enumerate()
                    .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
                    .0;
                out.push(Normalization {
                    min: 0.0,
                    max: (spec.n_categories() - 1) as f64,
                    fill: mode as f64,
                });
            }
        }
    }
    Ok(out)
}

/// Normalize observed continuous cells with the given statistics and write
/// the fill placeholders into unobserved cells. The subject mask is kept.
pub fn apply_normalization(data: &RctDataset, stats: &[Normalization]) -> Result<RctDataset> {
    if stats.len() != data.n_metrics() {
        return Err(Error::shape(format!(
            "{} normalization records for {} metrics",
            stats.len(),
            data.n_metrics()
        )));
    }
    let mut values = data.values().clone();
    let collected = data.observed().collected();
    for ((s, t, m), v) in values.indexed_iter_mut() {
        let st = &stats[m];
        if !collected[[s, t, m]] {
            *v = st.fill;
            continue;
        }
        if data.metrics()[m].kind == MetricKind::Continuous {
            let span = if st.max > st.min { st.max - st.min } else { 1.0 };
            *v = (*v - st.min) / span;
        }
    }
    // Composing with an earlier normalization keeps raw-unit bounds.
    let composed = match data.normalization() {
        None => stats.to_vec(),
        Some(prev) => prev
            .iter()
            .zip(stats)
            .zip(data.metrics())
            .map(|((p, s), spec)| match spec.kind {
                MetricKind::Categorical => *s,
                MetricKind::Continuous if s.min == 0.0 && s.max == 1.0 => Normalization {
                    fill: s.fill,
                    ..*p
                },
                MetricKind::Continuous => {
                    let span = p.max - p.min;
                    Normalization {
                        min: p.min + s.min * span,
                        max: p.min + s.max * span,
                        fill: s.fill,
                    }
                }
            })
            .collect(),
    };
    let out = RctDataset::new(
        values,
        data.metrics().to_vec(),
        data.subject_ids().to_vec(),
        data.protocol().clone(),
        data.observed().clone(),
    )?;
    Ok(out.with_normalization(Some(composed)))
}

/// Mean/mode fill of native missingness followed by per-metric min-max
/// normalization, with statistics taken from this dataset's observed cells.
pub fn preprocess(raw: &RctDataset) -> Result<RctDataset> {
    let stats = fit_normalization(raw)?;
    apply_normalization(raw, &stats)
}

/// Subject-level partition; the first part holds `floor(fraction * n_s)`
/// subjects. Subjects keep their original relative order inside each part.
pub fn split(data: &RctDataset, train_fraction: f64, seed: u64) -> Result<(RctDataset, RctDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = data.n_subjects();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Empty(format!(
            "splitting {n} subjects at {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, &[seed::tag("split")]));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.select_subjects(&train), data.select_subjects(&val)))
}
