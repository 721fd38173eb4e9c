//! Choosing imputer/design pairs: a candidate is eligible against a
//! reference when it is strictly more efficient and every score's lower
//! bound clears the reference's upper bound. Eligible candidates are ordered
//! by two stable sorts whose last key depends on the objective.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::MetricKind;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, MetricScore, PerfScore, ScoreName};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Reference,
    Learned,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[default]
    #[serde(rename = "max_eff", alias = "max-eff")]
    MaxEfficiency,
    #[serde(rename = "max_perf", alias = "max-perf")]
    MaxPerformance,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max-eff" | "max_eff" => Ok(Objective::MaxEfficiency),
            "max-perf" | "max_perf" => Ok(Objective::MaxPerformance),
            other => Err(Error::config(format!("unknown objective {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::MaxEfficiency => "max_eff",
            Objective::MaxPerformance => "max_perf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub imputer_id: String,
    pub pmd_id: String,
    pub efficiency: f64,
    pub kind: MetricKind,
    pub scores: Vec<PerfScore>,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_metric: Vec<MetricScore>,
}

impl ScoredCandidate {
    /// Candidate carrying an evaluation's efficiency and scores.
    pub fn from_report(report: &EvalReport, id: String, imputer_id: &str, pmd_id: &str, kind: MetricKind, origin: Origin) -> Self {
        ScoredCandidate {
            id,
            imputer_id: imputer_id.to_string(),
            pmd_id: pmd_id.to_string(),
            efficiency: report.efficiency,
            kind,
            scores: report.scores.clone(),
            origin,
            per_metric: report.per_metric.clone(),
        }
    }

    pub fn score(&self, name: ScoreName) -> Option<&PerfScore> {
        self.scores.iter().find(|s| s.name == name)
    }

    /// Copy with every interval collapsed to its point estimate.
    pub fn without_intervals(&self) -> Self {
        ScoredCandidate {
            scores: self.scores.iter().map(|s| s.without_interval()).collect(),
            ..self.clone()
        }
    }

    /// Sort key over performance lower bounds, most important first.
    fn perf_key(&self) -> Vec<f64> {
        ScoreName::for_kind(self.kind)
            .iter()
            .map(|&n| self.score(n).map_or(f64::NEG_INFINITY, |s| s.lower))
            .collect()
    }
}

pub fn eligible(candidate: &ScoredCandidate, reference: &ScoredCandidate) -> bool {
    candidate.kind == reference.kind
        && candidate.efficiency > reference.efficiency
        && !reference.scores.is_empty()
        && reference.scores.iter().all(|r| {
            candidate
                .score(r.name)
                .is_some_and(|c| c.lower > r.upper)
        })
}

fn cmp_desc(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.total_cmp(x) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Indices of the candidates eligible against `reference`, best first.
pub fn ranked(reference: &ScoredCandidate, candidates: &[ScoredCandidate], objective: Objective) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| eligible(&candidates[i], reference))
        .collect();
    let by_perf = |a: &usize, b: &usize| cmp_desc(&candidates[*a].perf_key(), &candidates[*b].perf_key());
    let by_eff = |a: &usize, b: &usize| candidates[*b].efficiency.total_cmp(&candidates[*a].efficiency);
    match objective {
        Objective::MaxEfficiency => {
            idx.sort_by(by_perf);
            idx.sort_by(by_eff);
        }
        Objective::MaxPerformance => {
            idx.sort_by(by_eff);
            idx.sort_by(by_perf);
        }
    }
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub reference_id: String,
    pub chosen: ScoredCandidate,
    pub fallback: bool,
}

/// One solution per reference: its best eligible candidate, or the
/// reference itself when nothing is eligible.
pub fn choose(references: &[ScoredCandidate], candidates: &[ScoredCandidate], objective: Objective) -> Result<Vec<Solution>> {
    if references.is_empty() {
        return Err(Error::Empty("reference set is empty".into()));
    }
    Ok(references
        .iter()
        .map(|r| match ranked(r, candidates, objective).first() {
            Some(&i) => Solution {
                reference_id: r.id.clone(),
                chosen: candidates[i].clone(),
                fallback: false,
            },
            None => Solution {
                reference_id: r.id.clone(),
                chosen: r.clone(),
                fallback: true,
            },
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub reference_id: String,
    /// 1-based position among eligible candidates.
    pub rank: Option<usize>,
    pub candidate_id: String,
    pub origin: Origin,
    pub eligible: bool,
    pub chosen: bool,
    pub efficiency: f64,
    pub scores: Vec<PerfScore>,
    pub per_metric: Vec<MetricScore>,
}

/// Every candidate once per reference: eligible ones in chosen order, then
/// the rest in input order.
pub fn rank_report(references: &[ScoredCandidate], candidates: &[ScoredCandidate], objective: Objective) -> Vec<RankRow> {
    let mut rows = Vec::new();
    for r in references {
        let order = ranked(r, candidates, objective);
        let listed: BTreeSet<usize> = order.iter().copied().collect();
        for (pos, &i) in order.iter().enumerate() {
            rows.push(row(r, &candidates[i], Some(pos + 1)));
        }
        for i in (0..candidates.len()).filter(|i| !listed.contains(i)) {
            rows.push(row(r, &candidates[i], None));
        }
    }
    rows
}

fn row(reference: &ScoredCandidate, c: &ScoredCandidate, rank: Option<usize>) -> RankRow {
    RankRow {
        reference_id: reference.id.clone(),
        rank,
        candidate_id: c.id.clone(),
        origin: c.origin,
        eligible: rank.is_some(),
        chosen: rank == Some(1),
        efficiency: c.efficiency,
        scores: c.scores.clone(),
        per_metric: c.per_metric.clone(),
    }
}

/// CSV rendering of the audit table with one column per (metric, score).
pub fn rank_report_csv(rows: &[RankRow]) -> Result<String> {
    let score_names: BTreeSet<ScoreName> = rows.iter().flat_map(|r| r.scores.iter().map(|s| s.name)).collect();
    let mut metric_cols: Vec<(String, String)> = Vec::new();
    for r in rows {
        for m in &r.per_metric {
            let key = (m.metric.clone(), m.score.clone());
            if !metric_cols.contains(&key) {
                metric_cols.push(key);
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["reference_id", "rank", "candidate_id", "origin", "eligible", "chosen", "efficiency"]
        .map(String::from)
        .to_vec();
    for n in &score_names {
        for part in ["point", "lower", "upper"] {
            header.push(format!("{}_{part}", n.as_str()));
        }
    }
    header.extend(metric_cols.iter().map(|(m, s)| format!("{m}:{s}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.reference_id.clone(),
            r.rank.map_or(String::new(), |k| k.to_string()),
            r.candidate_id.clone(),
            match r.origin {
                Origin::Reference => "reference".into(),
                Origin::Learned => "learned".into(),
            },
            r.eligible.to_string(),
            r.chosen.to_string(),
            r.efficiency.to_string(),
        ];
        for n in &score_names {
            match r.scores.iter().find(|s| s.name == *n) {
                Some(s) => rec.extend([s.point, s.lower, s.upper].map(|v| v.to_string())),
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        for (m, s) in &metric_cols {
            rec.push(
                r.per_metric
                    .iter()
                    .find(|x| &x.metric == m && &x.score == s)
                    .map_or(String::new(), |x| x.value.to_string()),
            );
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

#[derive(Serialize)]
struct ChosenView<'a> {
    pmd_id: &'a str,
    imputer_id: &'a str,
    efficiency: f64,
    scores: &'a [PerfScore],
}

#[derive(Serialize)]
struct SolutionView<'a> {
    reference_id: &'a str,
    chosen: ChosenView<'a>,
    fallback: bool,
}

/// `[{reference_id, chosen: {pmd_id, imputer_id, efficiency, scores}, fallback}]`
pub fn solutions_json(solutions: &[Solution]) -> Result<String> {
    let views: Vec<SolutionView<'_>> = solutions
        .iter()
        .map(|s| SolutionView {
            reference_id: &s.reference_id,
            chosen: ChosenView {
                pmd_id: &s.chosen.pmd_id,
                imputer_id: &s.chosen.imputer_id,
                efficiency: s.chosen.efficiency,
                scores: &s.chosen.scores,
            },
            fallback: s.fallback,
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&views)?;
    out.push('\n');
    Ok(out)
}
