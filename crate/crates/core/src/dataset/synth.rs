//! Synthetic trial generator with block-latent structure: metrics in the same
//! block (think "items of one form") are noisy affine readouts of a shared
//! per-subject latent time series; blocks are independent.

use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MetricSpec, ProtocolMask, RctDataset, SubjectMask};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_timepoints: usize,
    pub n_metrics: usize,
    /// Sizes of the correlated metric blocks; must sum to `n_metrics`.
    pub block_sizes: Vec<usize>,
    /// Share of each block's metrics that are categorical.
    pub categorical_fraction: f64,
    pub n_categories: usize,
    /// Standard deviation of the per-cell noise added to the block latent.
    pub noise: f64,
    /// AR(1) coefficient of the latent series.
    pub temporal_correlation: f64,
    pub native_missing_rate: f64,
    pub protocol_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 80,
            n_timepoints: 6,
            n_metrics: 24,
            block_sizes: vec![6, 6, 6, 6],
            categorical_fraction: 0.0,
            n_categories: 3,
            noise: 0.1,
            temporal_correlation: 0.8,
            native_missing_rate: 0.0,
            protocol_rate: 1.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_timepoints == 0 || self.n_metrics == 0 {
            return Err(Error::config("synthetic dimensions must be positive"));
        }
        let total: usize = self.block_sizes.iter().sum();
        if total != self.n_metrics {
            return Err(Error::config(format!(
                "block sizes sum to {total}, expected n_metrics = {}",
                self.n_metrics
            )));
        }
        if self.block_sizes.contains(&0) {
            return Err(Error::config("empty metric block"));
        }
        if !(0.0..=1.0).contains(&self.categorical_fraction)
            || !(0.0..1.0).contains(&self.native_missing_rate)
            || !(0.0..=1.0).contains(&self.protocol_rate)
        {
            return Err(Error::config("synthetic rates must lie in [0, 1]"));
        }
        if self.categorical_fraction > 0.0 && self.n_categories < 2 {
            return Err(Error::config("categorical metrics need at least two categories"));
        }
        if self.noise < 0.0 || !(0.0..1.0).contains(&self.temporal_correlation) {
            return Err(Error::config("noise must be >= 0 and temporal correlation in [0, 1)"));
        }
        Ok(())
    }
}

/// Generate a raw (un-normalized) dataset.
pub fn synthesize(config: &SynthConfig, seed_value: u64) -> Result<RctDataset> {
    config.validate()?;
    let n_s = config.n_subjects;
    let n_t = config.n_timepoints;
    let n_m = config.n_metrics;
    let mut rng = seed::rng_for(seed_value, &[seed::tag("synth")]);

    // Per-metric readout: block, loading, offset, unit scale, categorical flag.
    struct Readout {
        block: usize,
        loading: f64,
        offset: f64,
        scale: f64,
        categorical: bool,
    }
    let mut readouts = Vec::with_capacity(n_m);
    let mut specs = Vec::with_capacity(n_m);
    for (b, &size) in config.block_sizes.iter().enumerate() {
        let n_cat = (config.categorical_fraction * size as f64).round() as usize;
        for j in 0..size {
            let categorical = j >= size - n_cat;
            readouts.push(Readout {
                block: b,
                loading: rng.random_range(0.5..1.5),
                offset: rng.random_range(-1.0..1.0),
                scale: rng.random_range(1.0..20.0),
                categorical,
            });
            let name = format!("form{}_item{}", b + 1, j + 1);
            specs.push(if categorical {
                MetricSpec::categorical(
                    name,
                    (0..config.n_categories).map(|c| format!("level{c}")).collect(),
                )
            } else {
                MetricSpec::continuous(name, 0.0, 0.0)
            });
        }
    }

    let rho = config.temporal_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let n_blocks = config.block_sizes.len();
    let mut latent = Array3::<f64>::zeros((n_s, n_t, n_blocks));
    for s in 0..n_s {
        for b in 0..n_blocks {
            let slope: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            let mut z: f64 = rng.sample(StandardNormal);
            for t in 0..n_t {
                if t > 0 {
                    z = rho * z + innovation * rng.sample::<f64, _>(StandardNormal);
                }
                let frac = if n_t > 1 { t as f64 / (n_t - 1) as f64 } else { 0.0 };
                latent[[s, t, b]] = z + slope * frac;
            }
        }
    }

    // Equal-width cut points on the latent scale.
    let k = config.n_categories.max(2);
    let cuts: Vec<f64> = (1..k).map(|j| -1.0 + 2.0 * j as f64 / k as f64).collect();

    let mut values = Array3::<f64>::zeros((n_s, n_t, n_m));
    for s in 0..n_s {
        for t in 0..n_t {
            for (m, r) in readouts.iter().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let z = latent[[s, t, r.block]];
                values[[s, t, m]] = if r.categorical {
                    let x = z + config.noise * eps;
                    cuts.iter().filter(|&&c| x > c).count() as f64
                } else {
                    r.scale * (r.offset + r.loading * z + config.noise * eps)
                };
            }
        }
    }

    let mut eligible = Array2::from_shape_fn((n_t, n_m), |_| rng.random::<f64>() < config.protocol_rate);
    if !eligible.iter().any(|&e| e) {
        eligible[[0, 0]] = true;
    }
    let mut collected = Array3::from_elem((n_s, n_t, n_m), true);
    if config.native_missing_rate > 0.0 {
        for c in collected.iter_mut() {
            *c = rng.random::<f64>() >= config.native_missing_rate;
        }
        // Keep at least one observation per metric.
        for m in 0..n_m {
            if !(0..n_s).any(|s| (0..n_t).any(|t| collected[[s, t, m]])) {
                collected[[0, 0, m]] = true;
            }
        }
    }
    for ((s, t, m), v) in values.indexed_iter_mut() {
        if !collected[[s, t, m]] {
            *v = f64::NAN;
        }
    }

    for (m, spec) in specs.iter_mut().enumerate() {
        if readouts[m].categorical {
            continue;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..n_s {
            for t in 0..n_t {
                if collected[[s, t, m]] {
                    lo = lo.min(values[[s, t, m]]);
                    hi = hi.max(values[[s, t, m]]);
                }
            }
        }
        spec.observed_min = Some(lo);
        spec.observed_max = Some(hi);
    }

    RctDataset::new(
        values,
        specs,
        (0..n_s).map(|i| format!("S{:04}", i + 1)).collect(),
        ProtocolMask::new(eligible)?,
        SubjectMask::new(collected),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{preprocess, MetricKind};

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn column(d: &RctDataset, m: usize) -> Vec<f64> {
        let v = d.values();
        (0..d.n_subjects())
            .flat_map(|s| (0..d.n_timepoints()).map(move |t| (s, t)))
            .map(|(s, t)| v[[s, t, m]])
            .collect()
    }

    fn mean_within_block_correlation(d: &RctDataset, blocks: &[usize]) -> f64 {
        let mut start = 0;
        let mut acc = Vec::new();
        for &size in blocks {
            for i in start..start + size {
                for j in i + 1..start + size {
                    acc.push(pearson(&column(d, i), &column(d, j)));
                }
            }
            start += size;
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn block_sizes_must_sum() {
        let cfg = SynthConfig {
            block_sizes: vec![6, 6, 6],
            ..SynthConfig::default()
        };
        assert!(matches!(synthesize(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_blocks_are_duplicates_after_normalization() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let d = preprocess(&synthesize(&cfg, 11).unwrap()).unwrap();
        let r = mean_within_block_correlation(&d, &cfg.block_sizes);
        assert!((r - 1.0).abs() < 1e-9, "{r}");
        let a = column(&d, 0);
        let b = column(&d, 1);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn default_noise_keeps_blocks_strongly_correlated() {
        let cfg = SynthConfig::default();
        let d = synthesize(&cfg, 5).unwrap();
        let r = mean_within_block_correlation(&d, &cfg.block_sizes);
        assert!(r > 0.8, "{r}");
        // across blocks: near independence
        let cross = pearson(&column(&d, 0), &column(&d, 6));
        assert!(cross.abs() < 0.4, "{cross}");
    }

    #[test]
    fn large_noise_decorrelates() {
        let cfg = SynthConfig {
            noise: 100.0,
            ..SynthConfig::default()
        };
        let d = synthesize(&cfg, 5).unwrap();
        let r = mean_within_block_correlation(&d, &cfg.block_sizes);
        assert!(r.abs() < 0.05, "{r}");
    }

    #[test]
    fn categorical_fraction_and_missingness() {
        let cfg = SynthConfig {
            categorical_fraction: 0.5,
            native_missing_rate: 0.1,
            protocol_rate: 0.7,
            ..SynthConfig::default()
        };
        let d = synthesize(&cfg, 2).unwrap();
        assert_eq!(d.metrics_of_kind(MetricKind::Categorical).len(), 12);
        let missing = d.observed().collected().iter().filter(|&&c| !c).count();
        let total = d.values().len() as f64;
        assert!((missing as f64 / total - 0.1).abs() < 0.02);
        for m in d.metrics_of_kind(MetricKind::Categorical) {
            for v in column(&d, m).into_iter().filter(|v| !v.is_nan()) {
                assert!((0.0..3.0).contains(&v) && v.fract() == 0.0);
            }
        }
        let p = preprocess(&d).unwrap();
        assert!(p.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig::default();
        assert!(synthesize(&cfg, 9).unwrap().same_bits(&synthesize(&cfg, 9).unwrap()));
    }
}
