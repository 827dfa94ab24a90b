//! Aggregation of responses into preference rates.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::batch::{Side, StudyBatch};
use crate::error::{Result, StudyError};
use crate::store::{Choice, Response};

/// Exact two-sided binomial test of `k` successes in `n` trials against
/// success probability 1/2: twice the smaller tail, capped at 1.
pub fn binomial_two_sided_p(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = k.min(n);
    let m = k.min(n - k);
    // log C(n, i) - n log 2, accumulated for i = 0..=m and summed in log space.
    let ln2 = std::f64::consts::LN_2;
    let mut log_terms = Vec::with_capacity(m as usize + 1);
    let mut log_c = 0.0;
    for i in 0..=m {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        log_terms.push(log_c - n as f64 * ln2);
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = max.exp() * log_terms.iter().map(|t| (t - max).exp()).sum::<f64>();
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub condition_a: String,
    pub condition_b: String,
    pub n: u64,
    /// Responses preferring `condition_a`.
    pub count_a: u64,
    pub rate: f64,
    pub p_value: f64,
}

impl PairResult {
    fn new(condition_a: &str, condition_b: &str, n: u64, count_a: u64) -> Self {
        PairResult {
            condition_a: condition_a.into(),
            condition_b: condition_b.into(),
            n,
            count_a,
            rate: count_a as f64 / n as f64,
            p_value: binomial_two_sided_p(count_a, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationResult {
    /// `None` for unlimited viewing.
    pub display_ms: Option<u32>,
    pub pairs: Vec<PairResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: String,
    pub answered: u64,
    pub sentinels: u64,
    pub sentinel_failures: u64,
    /// `None` when the session answered no sentinel.
    pub sentinel_pass_rate: Option<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub exclusion_threshold: u64,
    pub usable_responses: u64,
    pub pairs: Vec<PairResult>,
    pub by_duration: Vec<DurationResult>,
    pub sessions: Vec<SessionSummary>,
}

type PairKey = (String, String);

/// Preference rates over `responses`.
///
/// A session is excluded when it fails at least `threshold` sentinels, or
/// fails every sentinel it answered. Sentinel responses never count toward
/// the condition pairs. The result does not depend on response order.
pub fn aggregate(batch: &StudyBatch, responses: &[Response], threshold: u64) -> Result<StudyResult> {
    let mut sessions: BTreeMap<&str, SessionSummary> = BTreeMap::new();
    let mut resolved = Vec::with_capacity(responses.len());
    for r in responses {
        let trial = batch
            .trial(&r.trial_id)
            .ok_or_else(|| StudyError::NotFound(format!("trial {}", r.trial_id)))?;
        let chose = trial.chosen_side(r.choice == Choice::Left);
        let s = sessions.entry(&r.session).or_insert_with(|| SessionSummary {
            session: r.session.clone(),
            answered: 0,
            sentinels: 0,
            sentinel_failures: 0,
            sentinel_pass_rate: None,
            excluded: false,
        });
        s.answered += 1;
        if trial.sentinel {
            s.sentinels += 1;
            if chose != Side::A {
                s.sentinel_failures += 1;
            }
        }
        resolved.push((r.session.as_str(), trial, chose));
    }
    for s in sessions.values_mut() {
        if s.sentinels > 0 {
            s.sentinel_pass_rate = Some((s.sentinels - s.sentinel_failures) as f64 / s.sentinels as f64);
        }
        s.excluded = s.sentinel_failures >= threshold || (s.sentinels > 0 && s.sentinel_failures == s.sentinels);
    }

    let mut pairs: BTreeMap<PairKey, (u64, u64)> = BTreeMap::new();
    let mut durations: BTreeMap<Option<u32>, BTreeMap<PairKey, (u64, u64)>> = BTreeMap::new();
    let mut usable = 0;
    for (session, trial, chose) in resolved {
        if trial.sentinel || sessions[session].excluded {
            continue;
        }
        usable += 1;
        let key = (trial.condition_a.clone(), trial.condition_b.clone());
        let hit = u64::from(chose == Side::A);
        let e = pairs.entry(key.clone()).or_default();
        e.0 += 1;
        e.1 += hit;
        let d = durations.entry(trial.display_ms).or_default().entry(key).or_default();
        d.0 += 1;
        d.1 += hit;
    }
    if usable == 0 {
        return Err(StudyError::EmptyResult);
    }
    let to_results = |m: &BTreeMap<PairKey, (u64, u64)>| {
        m.iter()
            .map(|((a, b), &(n, k))| PairResult::new(a, b, n, k))
            .collect::<Vec<_>>()
    };
    Ok(StudyResult {
        exclusion_threshold: threshold,
        usable_responses: usable,
        pairs: to_results(&pairs),
        by_duration: durations
            .iter()
            .map(|(d, m)| DurationResult {
                display_ms: *d,
                pairs: to_results(m),
            })
            .collect(),
        sessions: sessions.into_values().collect(),
    })
}

fn format_p(p: f64) -> String {
    if p < 1e-300 {
        "<1e-300".into()
    } else {
        format!("{p:.2e}")
    }
}

/// Plain-text table: one row per condition pair with its preference rate,
/// followed by a per-duration breakdown when the study was timed.
pub fn render_table(result: &StudyResult) -> String {
    let mut out = String::new();
    let label = |p: &PairResult| format!("{} > {}", p.condition_a, p.condition_b);
    let width = result
        .pairs
        .iter()
        .map(|p| label(p).len())
        .max()
        .unwrap_or(0)
        .max("comparison".len());
    let row = |out: &mut String, name: &str, p: &PairResult| {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>6}  {:>9}  {:>9}",
            p.n,
            format!("{:.1}%", 100.0 * p.rate),
            format_p(p.p_value)
        );
    };
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>9}  {:>9}", "comparison", "n", "preferred", "p-value");
    for p in &result.pairs {
        row(&mut out, &label(p), p);
    }
    if result.by_duration.iter().any(|d| d.display_ms.is_some()) {
        for d in &result.by_duration {
            let _ = writeln!(
                out,
                "\n{}",
                d.display_ms
                    .map(|ms| format!("display {ms} ms"))
                    .unwrap_or_else(|| "display unlimited".into())
            );
            for p in &d.pairs {
                row(&mut out, &label(p), p);
            }
        }
    }
    let excluded = result.sessions.iter().filter(|s| s.excluded).count();
    let _ = writeln!(
        out,
        "\n{} sessions, {excluded} excluded (>= {} sentinel failures or all failed), {} usable responses",
        result.sessions.len(),
        result.exclusion_threshold,
        result.usable_responses
    );
    out
}
