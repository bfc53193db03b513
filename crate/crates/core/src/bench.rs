//! Per-rule detection latency and option-evaluation cost under different
//! rule orderings.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::pcap::CaptureRecord;
use crate::pipeline::{Pipeline, PipelineConfig, RuleHandle};
use crate::rules::{render_rule, CompiledRuleSet, Variables};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("orderings hold different rules")]
    RuleSetMismatch,
    #[error("repetitions must be at least 1")]
    NoRepetitions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub gid: u32,
    pub sid: u32,
    pub ts_us: u64,
    /// Pipeline entry to alert emission, microseconds.
    pub detection_us: f64,
    pub options_evaluated: u64,
}

fn run_once(
    ruleset: &CompiledRuleSet,
    capture: &[CaptureRecord],
    config: &PipelineConfig,
    out: &mut Vec<LatencySample>,
) {
    let mut p = Pipeline::new(config.clone(), RuleHandle::new(ruleset.clone()));
    for r in capture {
        let o = p.process(r);
        for (a, at) in o.alerts.iter().zip(&o.emitted_at) {
            if a.rule_pos.is_none() {
                continue;
            }
            out.push(LatencySample {
                gid: a.gid,
                sid: a.sid,
                ts_us: a.ts_us,
                detection_us: at.duration_since(o.entered_at).as_secs_f64() * 1e6,
                options_evaluated: a.options_evaluated,
            });
        }
    }
}

/// Replays `capture` through a fresh pipeline `repetitions` times; one
/// sample per rule alert.
pub fn measure_detection(
    ruleset: &CompiledRuleSet,
    capture: &[CaptureRecord],
    repetitions: usize,
    config: &PipelineConfig,
) -> Result<Vec<LatencySample>, BenchError> {
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let mut out = Vec::new();
    for _ in 0..repetitions {
        run_once(ruleset, capture, config, &mut out);
    }
    Ok(out)
}

/// Mean options evaluated per packet that reached rule evaluation.
pub fn mean_options_per_packet(ruleset: &CompiledRuleSet, capture: &[CaptureRecord], config: &PipelineConfig) -> f64 {
    let mut p = Pipeline::new(config.clone(), RuleHandle::new(ruleset.clone()));
    for r in capture {
        p.process(r);
    }
    let c = p.counters();
    let evaluated = c.packets_in - c.packets_skipped;
    if evaluated == 0 {
        0.0
    } else {
        c.options_evaluated as f64 / evaluated as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleStats {
    /// 1-based position in its ordering.
    pub position: usize,
    pub samples: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub std_us: f64,
    pub mean_options: f64,
}

impl RuleStats {
    fn from_samples(position: usize, samples: &[&LatencySample]) -> Self {
        let mut lat: Vec<f64> = samples.iter().map(|s| s.detection_us).collect();
        lat.sort_by(f64::total_cmp);
        let n = lat.len();
        let mean = if n == 0 { 0.0 } else { lat.iter().sum::<f64>() / n as f64 };
        let var = if n < 2 { 0.0 } else { lat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 };
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => lat[n / 2],
            _ => (lat[n / 2 - 1] + lat[n / 2]) / 2.0,
        };
        let p95 = if n == 0 { 0.0 } else { lat[(n * 95).div_ceil(100) - 1] };
        let opts =
            if n == 0 { 0.0 } else { samples.iter().map(|s| s.options_evaluated as f64).sum::<f64>() / n as f64 };
        Self {
            position,
            samples: n,
            mean_us: mean,
            median_us: median,
            p95_us: p95,
            std_us: var.sqrt(),
            mean_options: opts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
    Tie,
}

impl Winner {
    fn lower(a: f64, b: f64) -> Self {
        if a < b {
            Winner::A
        } else if b < a {
            Winner::B
        } else {
            Winner::Tie
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Winner::A => "a",
            Winner::B => "b",
            Winner::Tie => "tie",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleComparison {
    pub gid: u32,
    pub sid: u32,
    pub a: RuleStats,
    pub b: RuleStats,
    pub fewer_options: Winner,
    pub lower_latency: Winner,
}

/// Earlier position measured slower than the later one.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyInversion {
    pub sid: u32,
    pub earlier: RuleStats,
    pub later: RuleStats,
    /// Welch's t statistic of later minus earlier.
    pub welch_t: f64,
}

impl fmt::Display for LatencyInversion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sid {}: position {} mean {:.3} us (sd {:.3}, n {}) vs position {} mean {:.3} us (sd {:.3}, n {}), welch t {:.2}",
            self.sid,
            self.earlier.position,
            self.earlier.mean_us,
            self.earlier.std_us,
            self.earlier.samples,
            self.later.position,
            self.later.mean_us,
            self.later.std_us,
            self.later.samples,
            self.welch_t
        )
    }
}

pub fn welch_t(earlier: &RuleStats, later: &RuleStats) -> f64 {
    let se = (earlier.std_us.powi(2) / earlier.samples.max(1) as f64
        + later.std_us.powi(2) / later.samples.max(1) as f64)
        .sqrt();
    if se == 0.0 {
        0.0
    } else {
        (later.mean_us - earlier.mean_us) / se
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub repetitions: usize,
    /// Ordered as rules appear in `seq_a`.
    pub rules: Vec<RuleComparison>,
    /// Rules whose mean option count rose as the rule moved earlier.
    pub monotonicity_violations: Vec<u32>,
    pub latency_inversions: Vec<LatencyInversion>,
}

fn signature_multiset(set: &CompiledRuleSet) -> Vec<String> {
    let mut v: Vec<String> = set.rules.iter().map(|c| render_rule(&c.rule)).collect();
    v.sort();
    v
}

fn stats_for(set: &CompiledRuleSet, samples: &[LatencySample]) -> BTreeMap<(u32, u32), RuleStats> {
    set.rules
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let key = (c.rule.gid(), c.rule.sid());
            let mine: Vec<&LatencySample> = samples.iter().filter(|s| (s.gid, s.sid) == key).collect();
            (key, RuleStats::from_samples(i + 1, &mine))
        })
        .collect()
}

/// Measures both orderings with interleaved repetitions.
pub fn compare_sequences(
    seq_a: &CompiledRuleSet,
    seq_b: &CompiledRuleSet,
    capture: &[CaptureRecord],
    repetitions: usize,
    config: &PipelineConfig,
) -> Result<SequenceReport, BenchError> {
    if signature_multiset(seq_a) != signature_multiset(seq_b) {
        return Err(BenchError::RuleSetMismatch);
    }
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for rep in 0..repetitions {
        if rep % 2 == 0 {
            run_once(seq_a, capture, config, &mut sa);
            run_once(seq_b, capture, config, &mut sb);
        } else {
            run_once(seq_b, capture, config, &mut sb);
            run_once(seq_a, capture, config, &mut sa);
        }
    }
    let ta = stats_for(seq_a, &sa);
    let tb = stats_for(seq_b, &sb);
    let mut report = SequenceReport {
        repetitions,
        rules: Vec::new(),
        monotonicity_violations: Vec::new(),
        latency_inversions: Vec::new(),
    };
    for c in &seq_a.rules {
        let key = (c.rule.gid(), c.rule.sid());
        let (a, b) = (ta[&key].clone(), tb[&key].clone());
        if a.samples > 0 && b.samples > 0 {
            let (early, late) = if a.position <= b.position { (&a, &b) } else { (&b, &a) };
            if early.position < late.position && early.mean_options > late.mean_options {
                report.monotonicity_violations.push(key.1);
            }
            if early.position < late.position && early.mean_us > late.mean_us {
                report.latency_inversions.push(LatencyInversion {
                    sid: key.1,
                    earlier: early.clone(),
                    later: late.clone(),
                    welch_t: welch_t(early, late),
                });
            }
        }
        report.rules.push(RuleComparison {
            gid: key.0,
            sid: key.1,
            fewer_options: Winner::lower(a.mean_options, b.mean_options),
            lower_latency: Winner::lower(a.mean_us, b.mean_us),
            a,
            b,
        });
    }
    Ok(report)
}

impl SequenceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rule_sid,ordering,position,mean_us,median_us,p95_us,mean_options\n");
        for (name, pick) in [("a", 0), ("b", 1)] {
            for r in &self.rules {
                let st = if pick == 0 { &r.a } else { &r.b };
                let _ = writeln!(
                    s,
                    "{},{name},{},{:.3},{:.3},{:.3},{:.3}",
                    r.sid, st.position, st.mean_us, st.median_us, st.p95_us, st.mean_options
                );
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>10} {:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
            "sid", "pos_a", "pos_b", "mean_a_us", "mean_b_us", "opts_a", "opts_b", "options", "latency"
        );
        for r in &self.rules {
            let _ = writeln!(
                s,
                "{:>10} {:>5} {:>5} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>8} {:>8}",
                r.sid,
                r.a.position,
                r.b.position,
                r.a.mean_us,
                r.b.mean_us,
                r.a.mean_options,
                r.b.mean_options,
                r.fewer_options.as_str(),
                r.lower_latency.as_str()
            );
        }
        for v in &self.monotonicity_violations {
            let _ = writeln!(s, "monotonicity violation: sid {v}");
        }
        for inv in &self.latency_inversions {
            let _ = writeln!(s, "latency inversion: {inv}");
        }
        s
    }
}

pub const PAIR_SIDS: [u32; 4] = [101, 102, 103, 104];

/// Ping, flow, content and threshold rules in that order.
pub fn representative_pair() -> (String, String) {
    let rules = [
        "alert icmp $SRC any -> $DST any (msg:\"ICMP ping toward outstation\"; sid:101;)",
        "alert ip $SRC any -> $DST any (flow: not_established, to_server; msg:\"Session not established\"; sid:102;)",
        "alert ip $SRC any -> $DST any (content:\" 04 \"; offset:12; depth:1; msg:\"DNP3 Operate\"; sid:103;)",
        "alert ip $SRC any -> $DST any (content:\" 05 64 \"; offset:0; depth:2; threshold: type both, track by_src, count 5, seconds 10; msg:\"DNP3 flood\"; sid:104;)",
    ];
    let forward = rules.iter().map(|r| format!("{r}\n")).collect();
    let reverse = rules.iter().rev().map(|r| format!("{r}\n")).collect();
    (forward, reverse)
}

pub fn pair_variables(src: Ipv4Addr, dst: Ipv4Addr) -> Variables {
    Variables::new().with_hosts("SRC", &[src]).with_hosts("DST", &[dst])
}
