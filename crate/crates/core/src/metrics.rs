//! Decomposed episode metrics (Success / Grasp-any / Reach) and grouped reports.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::placement::{Phase, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeFlags {
    pub success: bool,
    pub grasp_any: bool,
    pub reach: bool,
}

/// Scores a finished episode from its final state.
pub fn episode_outcome(final_state: &EnvState) -> Result<OutcomeFlags> {
    let ws = &final_state.workspace;
    if final_state.step < ws.horizon {
        return Err(Error::Truncated { step: final_state.step, horizon: ws.horizon });
    }
    let target = final_state.instructed_index();
    Ok(OutcomeFlags {
        success: final_state.objects[target].attached,
        grasp_any: final_state.grasp_any_latch,
        reach: final_state.instructed_distance() <= ws.reach_threshold,
    })
}

/// Keys a batch of outcomes is reported under.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub regime: Regime,
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_size: Option<u64>,
    pub object_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl GroupKey {
    fn sort_key(&self) -> (usize, &str, Option<u64>, usize, Option<Phase>) {
        (self.regime.ladder_rank(), &self.policy, self.dataset_size, self.object_count, self.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_index: u64,
    pub episode_seed: u64,
    pub instruction: String,
    pub success: bool,
    pub grasp_any: bool,
    pub reach: bool,
    #[serde(flatten)]
    pub key: GroupKey,
}

impl EpisodeOutcome {
    pub fn flags(&self) -> OutcomeFlags {
        OutcomeFlags { success: self.success, grasp_any: self.grasp_any, reach: self.reach }
    }
}

/// Rate with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub count: u64,
    pub n: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

const Z95: f64 = 1.959_963_984_540_054;

pub fn wilson(count: u64, n: u64) -> Rate {
    if n == 0 {
        return Rate { count, n, rate: 0.0, ci_low: 0.0, ci_high: 1.0 };
    }
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Rate { count, n, rate: p, ci_low: (center - half).max(0.0), ci_high: (center + half).min(1.0) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub key: GroupKey,
    pub n: u64,
    pub success: Rate,
    pub grasp_any: Rate,
    pub reach: Rate,
}

impl MetricsReport {
    pub fn dominance_holds(&self) -> bool {
        self.success.count <= self.grasp_any.count && self.success.count <= self.reach.count
    }
}

/// Groups outcomes by key. Order: ladder regime, then policy name, then the
/// remaining keys. Result is independent of the order of `outcomes`.
pub fn aggregate(outcomes: &[EpisodeOutcome]) -> Vec<MetricsReport> {
    let mut groups: BTreeMap<GroupKey, [u64; 4]> = BTreeMap::new();
    for o in outcomes {
        let c = groups.entry(o.key.clone()).or_default();
        c[0] += 1;
        c[1] += u64::from(o.success);
        c[2] += u64::from(o.grasp_any);
        c[3] += u64::from(o.reach);
    }
    let mut reports: Vec<MetricsReport> = groups
        .into_iter()
        .filter_map(|(key, [n, s, g, r])| {
            if n == 0 {
                log::warn!("empty group {key:?} omitted");
                return None;
            }
            Some(MetricsReport { key, n, success: wilson(s, n), grasp_any: wilson(g, n), reach: wilson(r, n) })
        })
        .collect();
    reports.sort_by(|a, b| a.key.sort_key().cmp(&b.key.sort_key()));
    reports
}

pub const CSV_HEADER: &str = "regime,policy,dataset_size,object_count,phase,n,success,success_lo,success_hi,grasp_any,grasp_any_lo,grasp_any_hi,reach,reach_lo,reach_hi";

pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let k = &r.key;
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            k.regime,
            k.policy,
            k.dataset_size.map(|d| d.to_string()).unwrap_or_default(),
            k.object_count,
            k.phase.map(|p| p.name()).unwrap_or(""),
            r.n,
            r.success.rate,
            r.success.ci_low,
            r.success.ci_high,
            r.grasp_any.rate,
            r.grasp_any.ci_low,
            r.grasp_any.ci_high,
            r.reach.rate,
            r.reach.ci_low,
            r.reach.ci_high,
        ));
    }
    out
}

fn pct(r: &Rate) -> String {
    format!("{:.0}", r.rate * 100.0)
}

/// Aligned text table with one row per report, labelled by `label`.
pub fn text_table(title: &str, first_col: &str, rows: &[(String, &MetricsReport)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(first_col.len());
    let mut out = format!("{title}\n{:<w$}  {:>7}  {:>9}  {:>5}  {:>5}\n", first_col, "Success", "Grasp-any", "Reach", "N");
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<w$}  {:>7}  {:>9}  {:>5}  {:>5}\n",
            label,
            pct(&r.success),
            pct(&r.grasp_any),
            pct(&r.reach),
            r.n
        ));
    }
    out
}

/// Ladder table: Small -> Medium -> Large -> Full random, one block per policy.
/// Regimes without episodes are left out.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderReport {
    pub text: String,
    pub csv: String,
    pub rows: Vec<MetricsReport>,
}

pub fn ladder_report(reports: &[MetricsReport]) -> LadderReport {
    let mut rows: Vec<MetricsReport> = reports.iter().filter(|r| r.n > 0).cloned().collect();
    rows.sort_by(|a, b| a.key.sort_key().cmp(&b.key.sort_key()));
    let mut policies: Vec<&str> = rows.iter().map(|r| r.key.policy.as_str()).collect();
    policies.sort_unstable();
    policies.dedup();
    let mut text = String::new();
    for p in policies {
        let block: Vec<(String, &MetricsReport)> =
            rows.iter().filter(|r| r.key.policy == p).map(|r| (r.key.regime.to_string(), r)).collect();
        text.push_str(&text_table(&format!("policy: {p}"), "regime", &block));
        text.push('\n');
    }
    let csv = reports_csv(&rows);
    LadderReport { text, csv, rows }
}

pub fn write_outcomes<W: Write>(mut w: W, outcomes: &[EpisodeOutcome]) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_outcomes<R: BufRead>(r: R) -> Result<Vec<EpisodeOutcome>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
