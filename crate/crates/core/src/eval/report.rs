//! The evaluation report: per-condition fidelity, seen/unseen splits,
//! Fréchet scores, and a flat CSV rendering for plotting.

use serde::{Deserialize, Serialize};

use super::experiments::CondFidelity;
use crate::error::{Error, Result};
use crate::models::Condition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetEntry {
    pub label: String,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Everything one evaluation run measures. The wall clock is informative
/// only and never serialized: written reports are bit-reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_condition: Vec<CondFidelity>,
    pub seen: Vec<Condition>,
    pub unseen: Vec<Condition>,
    pub fidelity_seen: f64,
    pub fidelity_unseen: f64,
    pub fidelity_overall: f64,
    pub frechet: Vec<FrechetEntry>,
    pub sample_count: usize,
    pub config_digest: String,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    /// Assemble a report from per-condition results and a seen/unseen
    /// split. The split must partition the measured condition set.
    pub fn build(
        per_condition: Vec<CondFidelity>,
        seen: Vec<Condition>,
        unseen: Vec<Condition>,
        frechet: Vec<FrechetEntry>,
        config_digest: String,
    ) -> Result<Self> {
        for r in &per_condition {
            let in_seen = seen.contains(&r.condition);
            let in_unseen = unseen.contains(&r.condition);
            if in_seen == in_unseen {
                return Err(Error::invalid(format!(
                    "condition {:?} must be in exactly one split",
                    r.condition
                )));
            }
        }
        let agg = |set: &[Condition]| -> f64 {
            let rows: Vec<&CondFidelity> = per_condition
                .iter()
                .filter(|r| set.contains(&r.condition))
                .collect();
            let n: usize = rows.iter().map(|r| r.n).sum();
            if n == 0 {
                return 0.0;
            }
            rows.iter().map(|r| r.matched).sum::<usize>() as f64 / n as f64
        };
        let fidelity_seen = agg(&seen);
        let fidelity_unseen = agg(&unseen);
        let all: Vec<Condition> = per_condition.iter().map(|r| r.condition).collect();
        let fidelity_overall = agg(&all);
        let sample_count = per_condition.iter().map(|r| r.n).sum();
        Ok(Self {
            per_condition,
            seen,
            unseen,
            fidelity_seen,
            fidelity_unseen,
            fidelity_overall,
            frechet,
            sample_count,
            config_digest,
            wall_clock_seconds: 0.0,
        })
    }

    /// Flat CSV: one row per metric cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,style,split,value,n\n");
        let fmt_cond = |c: &Condition| -> (String, String) {
            match c {
                Condition::Labeled { class } => (class.to_string(), String::new()),
                Condition::Composite { class, style } => (class.to_string(), style.to_string()),
                Condition::Null => ("null".into(), String::new()),
            }
        };
        for r in &self.per_condition {
            let (class, style) = fmt_cond(&r.condition);
            let split = if self.seen.contains(&r.condition) {
                "seen"
            } else {
                "unseen"
            };
            out.push_str(&format!(
                "fidelity,{class},{style},{split},{:.6},{}\n",
                r.accuracy(),
                r.n
            ));
        }
        out.push_str(&format!(
            "fidelity_seen,,,seen,{:.6},\n",
            self.fidelity_seen
        ));
        out.push_str(&format!(
            "fidelity_unseen,,,unseen,{:.6},\n",
            self.fidelity_unseen
        ));
        out.push_str(&format!(
            "fidelity_overall,,,all,{:.6},\n",
            self.fidelity_overall
        ));
        for f in &self.frechet {
            out.push_str(&format!(
                "frechet_{},,,{},{:.6},{}\n",
                f.label, f.label, f.value, f.n_a
            ));
        }
        out
    }
}

/// Window-3 moving average (endpoints average the available neighbors).
pub fn smooth3(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}
