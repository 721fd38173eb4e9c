//! Shared oracles, instance builders and the fast acceptance criteria.
//! Everything here is written as plain scalar loops, independent of the
//! library's own implementations.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use pmdlearn::dataset::{MetricKind, MetricSpec, ProtocolMask, RctDataset, SubjectMask};
use pmdlearn::eval::{
    accuracy_per_metric, bootstrap_ci, efficiency, macro_f1_per_metric, nrmsd, pooled, MaskedElement,
    MaskedElementSet, NrmsdVariant, PerfScore, ScoreName, Statistic,
};
use pmdlearn::imputer::{backward, masked_loss, Imputer, ImputerConfig, ImputerShape};
use pmdlearn::masklayer::{mask_step, soft_visibility, LearnableMask};
use pmdlearn::pmdgen::{
    mf_build, mfl_assign, wave_sample, wave_timepoints, Design, Pmd, RsdGenerator, WaveConfig,
};
use pmdlearn::seed::{self, Rng};
use pmdlearn::select::{choose, eligible, Objective, Origin, ScoredCandidate};
use rand::Rng as _;

pub mod e2e;

/// Result of one acceptance criterion.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub fn timed(f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    Outcome {
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

// ---------------------------------------------------------------- oracles

pub fn oracle_nrmsd(set: &MaskedElementSet) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for e in &set.elements {
        num += (e.prediction - e.target).abs() / set.ranges[e.metric];
        den += 1.0;
    }
    (num / den).sqrt()
}

pub fn oracle_accuracy(set: &MaskedElementSet, metric: usize) -> Option<f64> {
    let mut hit = 0.0;
    let mut n = 0.0;
    for e in &set.elements {
        if e.metric == metric {
            n += 1.0;
            if e.prediction == e.target {
                hit += 1.0;
            }
        }
    }
    if n == 0.0 {
        None
    } else {
        Some(hit / n)
    }
}

pub fn oracle_macro_f1(set: &MaskedElementSet, metric: usize, n_classes: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut classes = 0.0;
    let mut any = false;
    for c in 0..n_classes {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for e in &set.elements {
            if e.metric != metric {
                continue;
            }
            any = true;
            let t = e.target as usize == c;
            let p = e.prediction as usize == c;
            if t && p {
                tp += 1.0;
            } else if p {
                fp += 1.0;
            } else if t {
                fn_ += 1.0;
            }
        }
        if tp + fp + fn_ > 0.0 {
            sum += 2.0 * tp / (2.0 * tp + fp + fn_);
            classes += 1.0;
        }
    }
    if any {
        Some(sum / classes)
    } else {
        None
    }
}

pub fn oracle_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    // insertion sort
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn oracle_efficiency(grids: &[Array2<bool>], protocol: &Array2<bool>) -> f64 {
    let mut total = 0.0;
    for g in grids {
        let mut eligible = 0.0;
        let mut skipped = 0.0;
        for ((t, m), &p) in protocol.indexed_iter() {
            if p {
                eligible += 1.0;
                if !g[[t, m]] {
                    skipped += 1.0;
                }
            }
        }
        total += skipped / eligible;
    }
    total / grids.len() as f64
}

// ---------------------------------------------------------------- builders

pub fn random_protocol(rng: &mut Rng, n_t: usize, n_m: usize, rate: f64) -> ProtocolMask {
    let mut grid = Array2::from_shape_simple_fn((n_t, n_m), || rng.random::<f64>() < rate);
    grid[[rng.random_range(0..n_t), rng.random_range(0..n_m)]] = true;
    ProtocolMask::new(grid).expect("at least one eligible cell")
}

pub fn random_pmd(rng: &mut Rng, n_t: usize, n_m: usize) -> Pmd {
    Pmd::new(Array2::from_shape_simple_fn((n_t, n_m), || rng.random::<bool>()))
}

/// Random masked elements over an (n_s, n_t, n_m) cube, each cell included
/// with probability one half.
pub fn random_elements(rng: &mut Rng, kind: MetricKind, dims: (usize, usize, usize), n_classes: usize) -> MaskedElementSet {
    let (n_s, n_t, n_m) = dims;
    let mut elements = Vec::new();
    for s in 0..n_s {
        for t in 0..n_t {
            for m in 0..n_m {
                if !rng.random::<bool>() {
                    continue;
                }
                let (prediction, target) = match kind {
                    MetricKind::Continuous => (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                    MetricKind::Categorical => (
                        rng.random_range(0..n_classes) as f64,
                        rng.random_range(0..n_classes) as f64,
                    ),
                };
                elements.push(MaskedElement {
                    subject: s,
                    timepoint: t,
                    metric: m,
                    prediction,
                    target,
                });
            }
        }
    }
    if elements.is_empty() {
        elements.push(MaskedElement {
            subject: 0,
            timepoint: 0,
            metric: 0,
            prediction: 1.0,
            target: 0.0,
        });
    }
    let ranges = (0..n_m).map(|_| rng.random_range(0.5..4.0)).collect();
    MaskedElementSet { kind, elements, ranges }
}

pub fn random_dataset(rng: &mut Rng, kind: MetricKind, n_s: usize, n_t: usize, n_m: usize, n_classes: usize) -> RctDataset {
    let values = Array3::from_shape_simple_fn((n_s, n_t, n_m), || match kind {
        MetricKind::Continuous => rng.random::<f64>(),
        MetricKind::Categorical => rng.random_range(0..n_classes) as f64,
    });
    let metrics = (0..n_m)
        .map(|m| match kind {
            MetricKind::Continuous => MetricSpec::continuous(format!("m{m}"), 0.0, 1.0),
            MetricKind::Categorical => {
                MetricSpec::categorical(format!("m{m}"), (0..n_classes).map(|c| format!("c{c}")).collect())
            }
        })
        .collect();
    let protocol = random_protocol(rng, n_t, n_m, 0.75);
    let observed = SubjectMask::new(Array3::from_shape_simple_fn((n_s, n_t, n_m), || rng.random::<f64>() < 0.9));
    RctDataset::new(values, metrics, (0..n_s).map(|s| format!("s{s}")).collect(), protocol, observed)
        .expect("consistent dataset")
}

pub fn tiny_config(kind: MetricKind) -> ImputerConfig {
    ImputerConfig {
        n_blocks: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        epochs: 1,
        ..ImputerConfig::for_kind(kind)
    }
}

/// Random imputer with every parameter jittered away from its initial
/// structure (unit LayerNorm gains, zero biases).
pub fn random_imputer(rng: &mut Rng, kind: MetricKind, shape: ImputerShape) -> Imputer {
    let mut model = Imputer::new(tiny_config(kind), shape, rng.random()).expect("valid config");
    for t in model.params_mut().tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

// ------------------------------------------------------------- criterion 1

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Library metrics against the scalar-loop oracles on 100 random instances.
pub fn criterion_metric_oracles() -> (bool, String) {
    let mut rng = seed::rng(101);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..100 {
        let dims = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let cont = random_elements(&mut rng, MetricKind::Continuous, dims, 0);
        let got = nrmsd(&cont, NrmsdVariant::Printed).expect("non-empty");
        let want = oracle_nrmsd(&cont);
        worst = worst.max((got - want).abs());
        if !close(got, want) {
            failures.push(format!("case {case}: nRMSD {got} vs {want}"));
        }

        let k = rng.random_range(2..=4);
        let cat = random_elements(&mut rng, MetricKind::Categorical, dims, k);
        let acc = accuracy_per_metric(&cat);
        let f1 = macro_f1_per_metric(&cat);
        for m in 0..dims.2 {
            let (a, oa) = (acc.get(&m).copied(), oracle_accuracy(&cat, m));
            let (f, of) = (f1.get(&m).copied(), oracle_macro_f1(&cat, m, k));
            match (a, oa, f, of) {
                (None, None, None, None) => {}
                (Some(a), Some(oa), Some(f), Some(of)) => {
                    worst = worst.max((a - oa).abs()).max((f - of).abs());
                    if !close(a, oa) || !close(f, of) {
                        failures.push(format!("case {case} metric {m}: acc {a}/{oa}, F1 {f}/{of}"));
                    }
                }
                _ => failures.push(format!("case {case} metric {m}: presence differs")),
            }
        }
        let scores: Vec<f64> = acc.values().copied().collect();
        let got = pooled(&scores).expect("non-empty");
        let want = oracle_median(&scores);
        worst = worst.max((got - want).abs());
        if !close(got, want) {
            failures.push(format!("case {case}: pooled {got} vs {want}"));
        }

        let protocol = random_protocol(&mut rng, dims.1, dims.2, 0.7);
        let shared = random_pmd(&mut rng, dims.1, dims.2);
        let per_subject: Vec<Pmd> = (0..dims.0).map(|_| random_pmd(&mut rng, dims.1, dims.2)).collect();
        let e1 = efficiency(&Design::Shared(shared.clone()), &protocol).expect("eligible protocol");
        let o1 = oracle_efficiency(&[shared.grid().clone()], protocol.eligible());
        let grids: Vec<Array2<bool>> = per_subject.iter().map(|p| p.grid().clone()).collect();
        let e2 = efficiency(&Design::PerSubject(per_subject), &protocol).expect("eligible protocol");
        let o2 = oracle_efficiency(&grids, protocol.eligible());
        worst = worst.max((e1 - o1).abs()).max((e2 - o2).abs());
        if !close(e1, o1) || !close(e2, o2) {
            failures.push(format!("case {case}: efficiency {e1}/{o1}, {e2}/{o2}"));
        }
    }
    (
        failures.is_empty(),
        match failures.first() {
            None => format!("100 instances, max abs deviation {worst:.1e}"),
            Some(f) => format!("{} mismatches, first: {f}", failures.len()),
        },
    )
}

// ------------------------------------------------------------- criterion 2

/// Relative error of `analytic` against `numeric`, floored at a thousandth
/// of the largest gradient entry so that near-zero entries do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

const H: f64 = 1e-4;

/// Max relative error between backward() and central differences over every
/// parameter of a random tiny imputer.
pub fn parameter_gradient_error(rng: &mut Rng, kind: MetricKind) -> f64 {
    let (b, n_t, n_m) = (2, 3, 4);
    let shape = match kind {
        MetricKind::Continuous => ImputerShape::continuous(n_t, n_m),
        MetricKind::Categorical => ImputerShape::categorical(n_t, vec![2, 3, 2, 4]),
    };
    let mut model = random_imputer(rng, kind, shape.clone());
    let batch = Array3::from_shape_fn((b, n_t, n_m), |(_, _, m)| match kind {
        MetricKind::Continuous => rng.random::<f64>(),
        MetricKind::Categorical => rng.random_range(0..shape.categories[m]) as f64,
    });
    let vis = Array3::from_shape_simple_fn((b, n_t, n_m), || f64::from(u8::from(rng.random::<f64>() < 0.6)));
    let mut loss_mask = vis.mapv(|v| 1.0 - v);
    loss_mask[[0, 0, 0]] = 1.0;
    let grads = backward(&model, &batch, &vis, &loss_mask).expect("valid shapes");
    let analytic: Vec<f64> = grads.params.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let loss = |m: &Imputer| {
        masked_loss(m.shape(), &m.forward(&batch, &vis).expect("forward"), &batch, &loss_mask)
            .expect("loss")
            .value
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let sizes: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
    for (ti, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let orig = model.params().tensors()[ti][j];
            model.params_mut().tensors_mut()[ti][j] = orig + H;
            let up = loss(&model);
            model.params_mut().tensors_mut()[ti][j] = orig - H;
            let down = loss(&model);
            model.params_mut().tensors_mut()[ti][j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Max relative error of the soft-path logit gradient (inputs multiplied by
/// sigmoid(logits)) against central differences of the full objective.
pub fn soft_mask_gradient_error(rng: &mut Rng, kind: MetricKind) -> f64 {
    let (n_s, n_t, n_m, k) = (3, 3, 4, 3);
    let data = random_dataset(rng, kind, n_s, n_t, n_m, k);
    let shape = ImputerShape::of(&data).expect("shape");
    let model = random_imputer(rng, kind, shape);
    let logits = Array2::from_shape_simple_fn((n_t, n_m), || rng.random_range(-2.0..2.0));
    let lambda = 1e-2;
    let objective = |l: &Array2<f64>| {
        let mask = LearnableMask::from_logits(l.clone(), data.protocol()).expect("shape");
        let vis = soft_visibility(&mask, n_s);
        mask_step(&model, &mask, &data, &vis, lambda).expect("step")
    };
    let analytic = objective(&logits).logits;
    let mut numeric = Array2::zeros((n_t, n_m));
    for t in 0..n_t {
        for m in 0..n_m {
            let mut up = logits.clone();
            up[[t, m]] += H;
            let mut down = logits.clone();
            down[[t, m]] -= H;
            numeric[[t, m]] = (objective(&up).objective - objective(&down).objective) / (2.0 * H);
        }
    }
    // Ineligible logits must carry exactly zero gradient.
    for ((t, m), &g) in analytic.indexed_iter() {
        if !data.protocol().is_eligible(t, m) && g != 0.0 {
            return f64::INFINITY;
        }
    }
    relative_error(analytic.as_slice().expect("layout"), numeric.as_slice().expect("layout"))
}

pub fn criterion_gradients() -> (bool, String) {
    let mut rng = seed::rng(202);
    let mut worst_params = 0.0f64;
    let mut worst_soft = 0.0f64;
    for point in 0..20 {
        let kind = if point % 2 == 0 {
            MetricKind::Continuous
        } else {
            MetricKind::Categorical
        };
        worst_params = worst_params.max(parameter_gradient_error(&mut rng, kind));
        worst_soft = worst_soft.max(soft_mask_gradient_error(&mut rng, kind));
    }
    (
        worst_params < 1e-4 && worst_soft < 1e-4,
        format!("20 points, max rel. error: parameters {worst_params:.2e}, soft mask logits {worst_soft:.2e}"),
    )
}

// ------------------------------------------------------------- criterion 3

pub fn criterion_generators() -> (bool, String) {
    let mut notes = Vec::new();
    let mut pass = true;

    // RSD on a 100 x 100 uniform protocol (10,000 eligible entries).
    let protocol = ProtocolMask::uniform(100, 100);
    let mut worst = 0.0f64;
    for (i, e) in [0.05, 0.10, 0.30, 0.50, 0.70, 0.90].into_iter().enumerate() {
        let g = RsdGenerator::new(e, protocol.clone()).expect("valid rate");
        let pmd = g.sample(&mut seed::rng_for(303, &[i as u64]));
        let realized = pmd.efficiency(&protocol).expect("eligible");
        worst = worst.max((realized - e).abs());
    }
    pass &= worst <= 0.01;
    notes.push(format!("RSD max |realized - e| {worst:.4}"));

    // MF with k = 3 under a uniform protocol whose metric count divides by 3.
    let uniform = ProtocolMask::uniform(6, 24);
    let forms = mf_build(24, 3, &mut seed::rng(304)).expect("k = 3");
    let effs: Vec<f64> = (0..forms.forms.len())
        .map(|f| forms.form_pmd(f, &uniform).efficiency(&uniform).expect("eligible"))
        .collect();
    let exact = effs.iter().all(|&e| e == 1.0 / 3.0) && forms.nominal_efficiency() == 1.0 / 3.0;
    pass &= exact;
    notes.push(format!("MF k=3 form efficiencies {effs:?}"));

    // MFL long-run efficiency vs MF, with unequal item sets (25 metrics).
    let protocol = ProtocolMask::uniform(10, 25);
    let forms = mf_build(25, 3, &mut seed::rng(305)).expect("k = 3");
    let mf_mean: f64 = (0..forms.forms.len())
        .map(|f| forms.form_pmd(f, &protocol).efficiency(&protocol).expect("eligible"))
        .sum::<f64>()
        / forms.forms.len() as f64;
    let assigned = mfl_assign(&forms, 400, &protocol, &mut seed::rng(306)).expect("assign");
    let mfl = Design::PerSubject(assigned).efficiency(&protocol).expect("eligible");
    pass &= (mfl - mf_mean).abs() <= 0.01;
    notes.push(format!("MFL {mfl:.4} vs MF {mf_mean:.4}"));

    // Wave / Wave+ structure over random protocols.
    let mut rng = seed::rng(307);
    let mut wave_ok = true;
    for _ in 0..500 {
        let n_t = rng.random_range(3..=8);
        let n_m = rng.random_range(1..=6);
        let protocol = random_protocol(&mut rng, n_t, n_m, 0.7);
        let include_endpoints = rng.random::<bool>();
        let slots = wave_timepoints(include_endpoints, &protocol).len();
        let d = rng.random_range(0..=slots);
        let pmd = wave_sample(WaveConfig { d, include_endpoints }, &protocol, &mut rng).expect("feasible d");
        let mut dropped = 0;
        for t in 0..n_t {
            let row_skipped: Vec<bool> = (0..n_m)
                .filter(|&m| protocol.is_eligible(t, m))
                .map(|m| !pmd.collects(t, m))
                .collect();
            let any = row_skipped.iter().any(|&s| s);
            // Whole timepoints only: a touched timepoint loses every eligible cell.
            wave_ok &= !any || row_skipped.iter().all(|&s| s);
            wave_ok &= (0..n_m).all(|m| protocol.is_eligible(t, m) || pmd.collects(t, m));
            if any {
                dropped += 1;
                wave_ok &= include_endpoints || (t != 0 && t + 1 != n_t);
            }
        }
        wave_ok &= dropped == d;
    }
    pass &= wave_ok;
    notes.push(format!("Wave structure over 500 designs: {}", if wave_ok { "ok" } else { "violated" }));

    (pass, notes.join("; "))
}

// ------------------------------------------------------------- criterion 4

fn score(rng: &mut Rng, name: ScoreName, top: u8) -> PerfScore {
    // A coarse grid produces ties and boundary cases.
    let point = f64::from(rng.random_range(0..top)) / 8.0;
    let lower = point - f64::from(rng.random_range(0..3u8)) / 8.0;
    let upper = point + f64::from(rng.random_range(0..3u8)) / 8.0;
    PerfScore {
        name,
        point,
        lower,
        upper,
        degenerate: false,
    }
}

pub fn random_scored(rng: &mut Rng, id: String, kind: MetricKind, origin: Origin) -> ScoredCandidate {
    // References sit lower so that a fair share of candidates clear them.
    let (top, eff_top) = if origin == Origin::Reference { (5, 4) } else { (12, 6) };
    let scores = ScoreName::for_kind(kind).iter().map(|&n| score(rng, n, top)).collect();
    ScoredCandidate {
        id,
        imputer_id: String::new(),
        pmd_id: String::new(),
        efficiency: f64::from(rng.random_range(0..eff_top)) / 5.0,
        kind,
        scores,
        origin,
        per_metric: Vec::new(),
    }
}

pub fn oracle_eligible(c: &ScoredCandidate, r: &ScoredCandidate) -> bool {
    if c.kind != r.kind || c.efficiency <= r.efficiency {
        return false;
    }
    for rs in &r.scores {
        let mut found = false;
        for cs in &c.scores {
            if cs.name == rs.name {
                found = true;
                if cs.lower <= rs.upper {
                    return false;
                }
            }
        }
        if !found {
            return false;
        }
    }
    true
}

fn lower_of(c: &ScoredCandidate, name: ScoreName) -> f64 {
    c.scores.iter().find(|s| s.name == name).map(|s| s.lower).unwrap_or(f64::NEG_INFINITY)
}

/// Lexicographic key, most significant first.
fn oracle_key(c: &ScoredCandidate, objective: Objective) -> Vec<f64> {
    let perf: Vec<f64> = ScoreName::for_kind(c.kind).iter().map(|&n| lower_of(c, n)).collect();
    let mut key = Vec::new();
    match objective {
        Objective::MaxEfficiency => {
            key.push(c.efficiency);
            key.extend(perf);
        }
        Objective::MaxPerformance => {
            key.extend(perf);
            key.push(c.efficiency);
        }
    }
    key
}

/// Index of the lexicographic maximum among eligible candidates, earliest on ties.
pub fn oracle_choose(r: &ScoredCandidate, cands: &[ScoredCandidate], objective: Objective) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        if !oracle_eligible(c, r) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (kc, kb) = (oracle_key(c, objective), oracle_key(&cands[b], objective));
                let mut better = false;
                for (x, y) in kc.iter().zip(&kb) {
                    if x != y {
                        better = x > y;
                        break;
                    }
                }
                if better {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub fn criterion_selection() -> (bool, String) {
    let mut rng = seed::rng(404);
    let mut mismatches = 0;
    let mut fallback_errors = 0;
    let mut consistency_errors = 0;
    let mut fallbacks = 0;
    for set in 0..1000 {
        let kind = if set % 2 == 0 {
            MetricKind::Continuous
        } else {
            MetricKind::Categorical
        };
        let n_refs = rng.random_range(1..=3);
        let refs: Vec<ScoredCandidate> = (0..n_refs)
            .map(|i| random_scored(&mut rng, format!("r{i}"), kind, Origin::Reference))
            .collect();
        let n = rng.random_range(0..=5);
        let cands: Vec<ScoredCandidate> = (0..n)
            .map(|i| random_scored(&mut rng, format!("c{i}"), kind, Origin::Learned))
            .collect();
        let eff = choose(&refs, &cands, Objective::MaxEfficiency).expect("references present");
        let perf = choose(&refs, &cands, Objective::MaxPerformance).expect("references present");
        for (ri, r) in refs.iter().enumerate() {
            for (objective, sols) in [(Objective::MaxEfficiency, &eff), (Objective::MaxPerformance, &perf)] {
                let sol = &sols[ri];
                let expected = oracle_choose(r, &cands, objective);
                match expected {
                    Some(i) if !sol.fallback && sol.chosen == cands[i] => {}
                    None if sol.fallback && sol.chosen == *r => {}
                    _ => mismatches += 1,
                }
                let any_eligible = cands.iter().any(|c| eligible(c, r));
                if sol.fallback == any_eligible {
                    fallback_errors += 1;
                }
                fallbacks += usize::from(sol.fallback);
            }
            let (a, b) = (&eff[ri], &perf[ri]);
            if !a.fallback && !b.fallback {
                let primary = ScoreName::for_kind(kind)[0];
                if a.chosen.efficiency < b.chosen.efficiency || lower_of(&b.chosen, primary) < lower_of(&a.chosen, primary) {
                    consistency_errors += 1;
                }
            }
        }
    }
    (
        mismatches == 0 && fallback_errors == 0 && consistency_errors == 0,
        format!(
            "1000 sets: {mismatches} oracle mismatches, {fallback_errors} fallback errors, \
             {consistency_errors} objective-consistency violations ({fallbacks} fallbacks seen)"
        ),
    )
}

// ------------------------------------------------------------- criterion 5

/// One simulated evaluation: `n_subjects` subjects, three categorical
/// metrics with per-subject correctness probabilities drawn around known
/// means. Returns the masked-element set and the true pooled accuracy.
pub fn coverage_trial(rng: &mut Rng, n_subjects: usize) -> (MaskedElementSet, f64) {
    let means = [0.55, 0.70, 0.85];
    let per_metric = 6;
    let mut elements = Vec::new();
    for s in 0..n_subjects {
        for (m, &mu) in means.iter().enumerate() {
            // Per-subject accuracy uniform on mu ± 0.1.
            let p = mu + rng.random_range(-0.1..0.1);
            for t in 0..per_metric {
                let correct = rng.random::<f64>() < p;
                elements.push(MaskedElement {
                    subject: s,
                    timepoint: t,
                    metric: m,
                    prediction: if correct { 1.0 } else { 0.0 },
                    target: 1.0,
                });
            }
        }
    }
    let set = MaskedElementSet {
        kind: MetricKind::Categorical,
        elements,
        ranges: vec![1.0; means.len()],
    };
    (set, oracle_median(&means))
}

pub fn coverage(trials: usize, n_boot: usize) -> f64 {
    let mut covered = 0;
    for trial in 0..trials {
        let mut rng = seed::rng_for(505, &[trial as u64]);
        // 80 subjects, three metrics.
        let (set, truth) = coverage_trial(&mut rng, 80);
        let ci = bootstrap_ci(&set, Statistic::PooledAccuracy, n_boot, 0.95, trial as u64).expect("bootstrap");
        covered += usize::from(ci.lower <= truth && truth <= ci.upper);
    }
    covered as f64 / trials as f64
}

pub fn criterion_bootstrap() -> (bool, String) {
    let rate = coverage(500, 1000);
    ((rate - 0.95).abs() <= 0.03, format!("coverage {:.1}% over 500 trials", 100.0 * rate))
}
