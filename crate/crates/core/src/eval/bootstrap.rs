use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MaskedElement, MaskedElementSet, Statistic};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub point: f64,
    pub upper: f64,
    pub degenerate: bool,
}

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap resampling whole subjects with replacement.
///
/// Resample `b` draws from its own stream derived from `(seed, b)`, so the
/// result does not depend on the thread pool. The interval is widened to
/// contain the point estimate if needed.
pub fn bootstrap_ci(set: &MaskedElementSet, statistic: Statistic, n_boot: usize, level: f64, seed_value: u64) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level {level} outside (0, 1)")));
    }
    if n_boot == 0 {
        return Err(Error::config("bootstrap needs at least one resample"));
    }
    let point = statistic.evaluate(&set.elements, &set.ranges)?;
    let mut groups: BTreeMap<usize, Vec<MaskedElement>> = BTreeMap::new();
    for e in &set.elements {
        groups.entry(e.subject).or_default().push(*e);
    }
    let groups: Vec<Vec<MaskedElement>> = groups.into_values().collect();
    if groups.len() < 2 {
        return Ok(Interval {
            lower: point,
            point,
            upper: point,
            degenerate: true,
        });
    }
    let mut stats: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng_for(seed_value, &[seed::tag("bootstrap"), b as u64]);
            let mut sample = Vec::with_capacity(set.elements.len());
            for _ in 0..groups.len() {
                sample.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
            }
            statistic.evaluate(&sample, &set.ranges)
        })
        .collect::<Result<_>>()?;
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        lower: percentile(&stats, alpha).min(point),
        point,
        upper: percentile(&stats, 1.0 - alpha).max(point),
        degenerate: false,
    })
}
