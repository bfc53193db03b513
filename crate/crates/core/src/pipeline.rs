//! Per-packet processing: decode, flow tracking, detectors, then ordered
//! rule evaluation, with optional inline dropping.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::alert::Alert;
use crate::detectors::{DetectorConfig, Detectors};
use crate::flow::{FlowConfig, FlowTable};
use crate::packet::{decode_packet, DecodeOptions, IpProto, SkipReason};
use crate::pcap::{CaptureRecord, PcapError};
use crate::rules::{evaluate_packet, CompiledRuleSet, PacketContext, ThresholdState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Observe and alert; every packet is forwarded.
    #[default]
    Ids,
    /// Inline; packets matched by a drop rule are withheld.
    Ips,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ids" => Ok(Mode::Ids),
            "ips" => Ok(Mode::Ips),
            _ => Err(format!("mode must be ids or ips, not `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    /// Capture timestamps drive thresholds and timeouts (replay).
    #[default]
    Capture,
    /// The host clock drives them (live).
    Wall,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub clock: Clock,
    pub decode: DecodeOptions,
    pub flow: FlowConfig,
    pub detectors: DetectorConfig,
    /// Collect every matching rule instead of stopping at the first.
    pub evaluate_all: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub packets_in: u64,
    pub packets_out: u64,
    pub packets_dropped: u64,
    /// Decode skips; these are still forwarded.
    pub packets_skipped: u64,
    pub skip_reasons: BTreeMap<SkipReason, u64>,
    pub dnp3_frames: u64,
    /// DNP3 candidates that did not parse, including frames split across
    /// segments.
    pub dnp3_partial: u64,
    pub alerts: u64,
    pub options_evaluated: u64,
}

/// Shared, atomically replaceable rule set. Each packet is evaluated against
/// the set loaded when it entered the pipeline.
#[derive(Debug, Clone)]
pub struct RuleHandle(Arc<RwLock<Arc<CompiledRuleSet>>>);

impl RuleHandle {
    pub fn new(set: CompiledRuleSet) -> Self {
        Self(Arc::new(RwLock::new(Arc::new(set))))
    }

    pub fn load(&self) -> Arc<CompiledRuleSet> {
        self.0.read().expect("rule lock poisoned").clone()
    }

    pub fn swap(&self, set: CompiledRuleSet) -> Arc<CompiledRuleSet> {
        std::mem::replace(&mut *self.0.write().expect("rule lock poisoned"), Arc::new(set))
    }

    pub fn version(&self) -> u64 {
        self.load().version
    }
}

#[derive(Debug, Clone)]
pub struct PacketOutcome {
    pub alerts: Vec<Alert>,
    /// Host clock when each alert was emitted, parallel to `alerts`.
    pub emitted_at: Vec<Instant>,
    pub entered_at: Instant,
    pub forwarded: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
    rules: RuleHandle,
    flows: FlowTable,
    thresholds: ThresholdState,
    detectors: Detectors,
    counters: Counters,
}

fn wall_clock_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

impl Pipeline {
    pub fn new(config: PipelineConfig, rules: RuleHandle) -> Self {
        Self {
            flows: FlowTable::new(config.flow.clone()),
            detectors: Detectors::new(config.detectors.clone()),
            thresholds: ThresholdState::new(),
            counters: Counters::default(),
            config,
            rules,
        }
    }

    pub fn with_rules(config: PipelineConfig, set: CompiledRuleSet) -> Self {
        Self::new(config, RuleHandle::new(set))
    }

    pub fn rules(&self) -> &RuleHandle {
        &self.rules
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn detectors(&self) -> &Detectors {
        &self.detectors
    }

    pub fn process(&mut self, record: &CaptureRecord) -> PacketOutcome {
        let entered_at = Instant::now();
        let ruleset = self.rules.load();
        self.counters.packets_in += 1;
        let mut outcome = PacketOutcome { alerts: Vec::new(), emitted_at: Vec::new(), entered_at, forwarded: true };

        let pkt = match decode_packet(record, &self.config.decode) {
            Ok(p) => p,
            Err(reason) => {
                self.counters.packets_skipped += 1;
                *self.counters.skip_reasons.entry(reason).or_default() += 1;
                self.counters.packets_out += 1;
                return outcome;
            }
        };
        self.counters.dnp3_frames += pkt.dnp3.len() as u64;
        self.counters.dnp3_partial += pkt.dnp3_malformed.is_some() as u64;

        let now_us = match self.config.clock {
            Clock::Capture => pkt.ts_us,
            Clock::Wall => wall_clock_us(),
        };
        let verdict = (pkt.proto == IpProto::Tcp).then(|| self.flows.update(&pkt));
        let events = self.detectors.inspect(&pkt, verdict.as_ref(), now_us);
        let fired: Vec<(u32, u32)> = events.iter().map(|e| (e.gid, e.sid)).collect();

        let ctx = PacketContext { pkt: &pkt, verdict: verdict.as_ref(), fired: &fired, now_us };
        let eval = evaluate_packet(&ruleset, &ctx, &mut self.thresholds, self.config.evaluate_all);
        self.counters.options_evaluated += eval.options_evaluated;

        if !eval.suppressed {
            for e in events.iter().filter(|e| !ruleset.binds(e.gid, e.sid)) {
                let mut a = Alert::for_packet(&pkt, e.gid, e.sid, e.msg);
                a.options_evaluated = eval.options_evaluated + 1;
                a.rule_version = ruleset.version;
                outcome.alerts.push(a);
                outcome.emitted_at.push(Instant::now());
            }
        }
        for m in &eval.matches {
            let rule = &ruleset.rules[m.position].rule;
            let mut a = Alert::for_packet(&pkt, rule.gid(), rule.sid(), rule.alert_msg());
            a.rule_pos = Some(m.position);
            a.action = m.action;
            a.options_evaluated = m.options_evaluated;
            a.rule_version = ruleset.version;
            outcome.alerts.push(a);
            outcome.emitted_at.push(Instant::now());
        }
        self.counters.alerts += outcome.alerts.len() as u64;

        if self.config.mode == Mode::Ips && eval.drops() {
            outcome.forwarded = false;
            self.counters.packets_dropped += 1;
        } else {
            self.counters.packets_out += 1;
        }
        outcome
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub alerts: Vec<Alert>,
    /// Forwarded records in capture order.
    pub output: Vec<CaptureRecord>,
    pub counters: Counters,
}

/// Runs a whole source through a fresh pipeline.
pub fn run_pipeline<I>(source: I, ruleset: CompiledRuleSet, config: PipelineConfig) -> Result<PipelineOutput, PcapError>
where
    I: IntoIterator<Item = Result<CaptureRecord, PcapError>>,
{
    let mut p = Pipeline::with_rules(config, ruleset);
    let mut out = PipelineOutput::default();
    for record in source {
        let record = record?;
        let o = p.process(&record);
        out.alerts.extend(o.alerts);
        if o.forwarded {
            out.output.push(record);
        }
    }
    out.counters = p.counters().clone();
    Ok(out)
}

/// [`run_pipeline`] over records already in memory.
pub fn run_records(records: &[CaptureRecord], ruleset: CompiledRuleSet, config: PipelineConfig) -> PipelineOutput {
    run_pipeline(records.iter().cloned().map(Ok), ruleset, config).expect("in-memory source cannot fail")
}
