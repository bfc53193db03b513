use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use dnp3_ids::bench::compare_sequences;
use dnp3_ids::config::{KeyValues, MasterFileConfig, SensorConfig, Source};
use dnp3_ids::detectors::DetectorConfig;
use dnp3_ids::distributed::{
    wire::sha256_hex, AlertRecord, AlertStore, Master, MasterConfig, Sensor, StoreQuery, UplinkConfig,
};
use dnp3_ids::dnp3::display_function;
use dnp3_ids::packet::{decode_packet, DecodeOptions};
use dnp3_ids::pcap::{read_capture, write_capture, CaptureReader, CaptureRecord, CaptureWriter, PcapError};
use dnp3_ids::pipeline::{Counters, Pipeline, PipelineConfig, RuleHandle};
use dnp3_ids::rulegen::{generate_ruleset, learn_baseline, merge_repository, render_generated, RulegenConfig};
use dnp3_ids::rules::{compile_ruleset, CompiledRuleSet, Variables};
use dnp3_ids::synth::{
    corrupt_crc, synth_attack, synth_benign, synth_flood, synth_mixed_attack, synth_ping, AttackKind, CrcSite,
    FloodKind, ScenarioConfig,
};

use crate::{BenchArgs, MasterArgs, QueryArgs, RulegenArgs, Scenario, SensorArgs, SynthArgs};

fn fmt_ts(ts_us: u64) -> String {
    format!("{}.{:06}", ts_us / 1_000_000, ts_us % 1_000_000)
}

pub fn parse(pcap: &Path) -> Result<()> {
    let reader = CaptureReader::open(pcap).with_context(|| format!("cannot open {}", pcap.display()))?;
    let opts = DecodeOptions::default();
    let mut out = BufWriter::new(io::stdout().lock());
    for rec in reader {
        let rec = rec?;
        let Ok(pkt) = decode_packet(&rec, &opts) else { continue };
        let prefix = format!("t={} {}→{}", fmt_ts(pkt.ts_us), pkt.src_ip, pkt.dst_ip);
        for f in &pkt.dnp3 {
            let func = match f.function_code() {
                Some(code) => format!("fc=0x{code:02X} {}", display_function(code)),
                None => "fc=none".to_string(),
            };
            let crc = if f.crc.all_valid() { "ok" } else { "bad" };
            writeln!(out, "{prefix} dst_addr={} {func} crc={crc}", f.link.destination)?;
        }
        if let Some(m) = &pkt.dnp3_malformed {
            let header = match m.header_crc_valid {
                Some(true) => "ok",
                Some(false) => "bad",
                None => "short",
            };
            writeln!(out, "{prefix} malformed offset={} error=\"{}\" header_crc={header}", m.offset, m.error)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn load_kv(config: Option<&Path>) -> Result<KeyValues> {
    match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            KeyValues::parse(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(KeyValues::default()),
    }
}

fn print_counters(c: &Counters) {
    eprintln!(
        "packets_in={} packets_out={} packets_dropped={} packets_skipped={} dnp3_frames={} alerts={} options_evaluated={}",
        c.packets_in, c.packets_out, c.packets_dropped, c.packets_skipped, c.dnp3_frames, c.alerts, c.options_evaluated
    );
}

pub fn sensor(a: SensorArgs) -> Result<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    let flags = [
        ("sensor_id", a.sensor_id),
        ("master", a.master),
        ("token", a.token),
        ("rules", a.rules.map(|p| p.display().to_string())),
        ("source", a.source),
        ("output", a.output.map(|p| p.display().to_string())),
        ("mode", a.mode),
        ("authorized_masters", a.authorized_masters),
        ("select_timeout", a.select_timeout.map(|v| v.to_string())),
        ("spool_size", a.spool_size.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    if a.evaluate_all {
        kv.set("evaluate_all", "true");
    }
    for v in &a.vars {
        let (name, nets) = v.split_once('=').ok_or_else(|| anyhow!("--var expects NAME=CIDR, got `{v}`"))?;
        kv.set(&format!("var.{}", name.trim_start_matches('$')), nets);
    }
    let cfg = SensorConfig::from_kv(&kv)?;

    let rules_text = fs::read_to_string(&cfg.rules_path)
        .with_context(|| format!("cannot read rules file {}", cfg.rules_path.display()))?;
    let set =
        compile_ruleset(&rules_text, &cfg.variables, 1).map_err(|e| anyhow!("{}: {e}", cfg.rules_path.display()))?;
    let pc = PipelineConfig {
        mode: cfg.mode,
        detectors: DetectorConfig {
            authorized_masters: cfg.authorized_masters.clone(),
            select_timeout_us: cfg.select_timeout.as_micros() as u64,
            ..DetectorConfig::default()
        },
        evaluate_all: cfg.evaluate_all,
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(pc, RuleHandle::new(set));
    let mut runner = match cfg.master {
        Some(addr) => {
            let up = UplinkConfig {
                token: cfg.token.clone(),
                spool_capacity: cfg.spool_size,
                ..UplinkConfig::new(cfg.sensor_id.clone(), addr)
            };
            Runner::Uplinked(Box::new(Sensor::new(pipeline, up)))
        }
        None => Runner::Local(Box::new(pipeline)),
    };

    let source: Box<dyn Iterator<Item = Result<CaptureRecord, PcapError>>> = match &cfg.source {
        Source::File(p) => {
            Box::new(CaptureReader::open(p).with_context(|| format!("cannot open source {}", p.display()))?)
        }
        Source::Stdin => Box::new(CaptureReader::new(io::stdin().lock())?),
    };
    let mut writer = match &cfg.output {
        Some(p) => Some(CaptureWriter::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        ))?),
        None => None,
    };
    let mut out = BufWriter::new(io::stdout().lock());
    for rec in source {
        let rec = rec?;
        let o = runner.process(&rec);
        for alert in &o.alerts {
            writeln!(out, "{alert}")?;
        }
        if let (Some(w), true) = (writer.as_mut(), o.forwarded) {
            w.write(&rec)?;
        }
    }
    out.flush()?;
    if let Some(w) = writer {
        w.finish()?;
    }
    if let Runner::Uplinked(s) = &runner {
        if !s.uplink().flush(Duration::from_secs(10)) {
            warn!("{} alerts not acknowledged by the master", s.uplink().pending());
        }
    }
    print_counters(runner.pipeline().counters());
    Ok(())
}

enum Runner {
    Local(Box<Pipeline>),
    Uplinked(Box<Sensor>),
}

impl Runner {
    fn process(&mut self, rec: &CaptureRecord) -> dnp3_ids::pipeline::PacketOutcome {
        match self {
            Runner::Local(p) => p.process(rec),
            Runner::Uplinked(s) => s.process(rec),
        }
    }

    fn pipeline(&self) -> &Pipeline {
        match self {
            Runner::Local(p) => p,
            Runner::Uplinked(s) => s.pipeline(),
        }
    }
}

pub fn master(a: MasterArgs) -> Result<()> {
    let mut kv = load_kv(a.config.as_deref())?;
    if let Some(l) = a.listen {
        kv.set("listen", l);
    }
    if let Some(s) = a.store {
        kv.set("store", s.display().to_string());
    }
    if let Some(t) = a.token {
        kv.set("token", t);
    }
    let cfg = MasterFileConfig::from_kv(&kv)?;
    let store = AlertStore::open(&cfg.store).with_context(|| format!("cannot open store {}", cfg.store.display()))?;
    if store.recovery().truncated_bytes > 0 {
        warn!("cut {} torn bytes from the store", store.recovery().truncated_bytes);
    }
    let m = Master::start(MasterConfig { listen: cfg.listen, token: cfg.token }, store)
        .with_context(|| format!("cannot listen on {}", cfg.listen))?;
    println!("listening on {}", m.local_addr());
    io::stdout().flush()?;

    let deadline = a.duration.map(|s| Instant::now() + Duration::from_secs_f64(s));
    let mut pushed_digest = String::new();
    let mut version = 1u64;
    let mut pushed_to = BTreeSet::new();
    while deadline.is_none_or(|d| Instant::now() < d) {
        if let Some(path) = &a.push_rules {
            match fs::read_to_string(path) {
                Ok(rules) => {
                    let vars = match &a.push_vars {
                        Some(v) => fs::read_to_string(v).with_context(|| format!("cannot read {}", v.display()))?,
                        None => String::new(),
                    };
                    let digest = sha256_hex(&format!("{rules}\0{vars}"));
                    let connected: BTreeSet<String> = m.connected().into_iter().collect();
                    let changed = digest != pushed_digest;
                    let fresh: Vec<String> = connected.difference(&pushed_to).cloned().collect();
                    if changed || !fresh.is_empty() {
                        if changed {
                            version += 1;
                            pushed_to.clear();
                        }
                        let targets: Vec<String> = if changed { connected.iter().cloned().collect() } else { fresh };
                        match m.push_rules(&targets, version, &rules, &vars, Duration::from_secs(5)) {
                            Ok(acks) => {
                                for (sensor, outcome) in acks {
                                    info!("push v{version} to {sensor}: {outcome:?}");
                                    pushed_to.insert(sensor);
                                }
                                pushed_digest = digest;
                            }
                            Err(e) => {
                                warn!("push of {} refused: {e}", path.display());
                                pushed_digest = digest;
                                version -= changed as u64;
                            }
                        }
                    }
                }
                Err(e) => warn!("cannot read {}: {e}", path.display()),
            }
        }
        thread::sleep(Duration::from_millis(200));
    }
    m.shutdown();
    Ok(())
}

pub fn rulegen(a: RulegenArgs) -> Result<()> {
    let records = read_capture(&a.baseline).with_context(|| format!("cannot read {}", a.baseline.display()))?;
    let rc = RulegenConfig {
        k_sigma: a.k_sigma,
        window_s: a.window,
        select_timeout_s: a.select_timeout,
        ..RulegenConfig::default()
    };
    let profile = learn_baseline(&records, rc.window_s)?;
    let generated = generate_ruleset(&profile, &rc);
    let (text, changelog) = match &a.repo {
        Some(repo) => {
            let existing = match fs::read_to_string(repo) {
                Ok(t) => t,
                Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
                Err(e) => return Err(e).with_context(|| format!("cannot read {}", repo.display())),
            };
            let merged = merge_repository(&existing, &generated)?;
            (merged.text, merged.changelog)
        }
        None => (render_generated(&generated), Vec::new()),
    };
    match a.out.as_ref().or(a.repo.as_ref()) {
        Some(p) => fs::write(p, &text).with_context(|| format!("cannot write {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(p) = &a.vars_out {
        fs::write(p, profile.variables().render()).with_context(|| format!("cannot write {}", p.display()))?;
    }
    let log: String = changelog.iter().map(|l| format!("{l}\n")).collect();
    match &a.changelog {
        Some(p) => fs::write(p, log).with_context(|| format!("cannot write {}", p.display()))?,
        None => io::stderr().write_all(log.as_bytes())?,
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = ScenarioConfig {
        rate_hz: a.rate,
        count: a.count,
        seed: a.seed,
        sbo_cycle: a.sbo,
        spoof: a.spoof,
        ..ScenarioConfig::default()
    };
    if !(cfg.rate_hz.is_finite() && cfg.rate_hz > 0.0) {
        bail!("--rate must be positive");
    }
    let kind = a.kind.as_deref();
    let mut records = match a.scenario {
        Scenario::Benign => synth_benign(&cfg),
        Scenario::Attack => {
            let kind: AttackKind =
                kind.ok_or_else(|| anyhow!("attack needs --kind"))?.parse().map_err(|e: String| anyhow!(e))?;
            let atk = synth_attack(kind, &cfg);
            eprintln!("injected records: {:?}", atk.injected);
            atk.records
        }
        Scenario::Flood => {
            let kind: FloodKind = kind.unwrap_or("dnp3_flood").parse().map_err(|e: String| anyhow!(e))?;
            synth_flood(kind, &cfg, a.count, a.seconds)
        }
        Scenario::Ping => synth_ping(&cfg, a.count),
        Scenario::Mixed => synth_mixed_attack(&cfg, a.count),
    };
    if let Some(spec) = &a.corrupt_crc {
        let (index, site) = spec.split_once(':').ok_or_else(|| anyhow!("--corrupt-crc expects INDEX:SITE"))?;
        let index: usize = index.parse().with_context(|| format!("bad index `{index}`"))?;
        let site = match site {
            "header" => CrcSite::Header,
            "body" => CrcSite::Body,
            _ => bail!("site must be header or body, not `{site}`"),
        };
        records = corrupt_crc(&records, index, site)?;
    }
    write_capture(&records, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn compile_file(path: &Path, vars: &Variables) -> Result<CompiledRuleSet> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    compile_ruleset(&text, vars, 1).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let vars = match &a.vars {
        Some(p) => Variables::parse(&fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)
            .map_err(|e| anyhow!("{}: {e}", p.display()))?,
        None => Variables::new(),
    };
    let sa = compile_file(&a.seq_a, &vars)?;
    let sb = compile_file(&a.seq_b, &vars)?;
    let capture = read_capture(&a.pcap).with_context(|| format!("cannot read {}", a.pcap.display()))?;
    let report = compare_sequences(&sa, &sb, &capture, a.reps, &PipelineConfig::default())?;
    let csv = report.to_csv();
    if let Some(p) = &a.csv {
        fs::write(p, &csv).with_context(|| format!("cannot write {}", p.display()))?;
    }
    let mut out = io::stdout().lock();
    out.write_all(csv.as_bytes())?;
    writeln!(out)?;
    out.write_all(report.to_table().as_bytes())?;
    Ok(())
}

fn print_record(out: &mut impl Write, r: &AlertRecord, json: bool) -> io::Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string(r).map_err(io::Error::other)?)
    } else {
        writeln!(out, "{} {}#{} v{} {}", fmt_ts(r.alert.ts_us), r.sensor_id, r.seq, r.alert.rule_version, r.alert)
    }
}

pub fn query(a: QueryArgs) -> Result<()> {
    if !a.store.is_dir() {
        bail!("store {} is not a directory", a.store.display());
    }
    let q = StoreQuery {
        from_us: a.from,
        to_us: a.to,
        sensor_id: a.sensor.clone(),
        sid: a.sid,
        gid: a.gid,
        limit: a.limit,
    };
    let mut seen = BTreeSet::new();
    loop {
        let store = AlertStore::open(&a.store).with_context(|| format!("cannot open store {}", a.store.display()))?;
        let mut out = io::stdout().lock();
        for r in store.query(&q) {
            if seen.insert((r.sensor_id.clone(), r.seq)) {
                print_record(&mut out, &r, a.json)?;
            }
        }
        out.flush()?;
        if !a.follow {
            return Ok(());
        }
        drop(out);
        thread::sleep(Duration::from_secs(1));
    }
}
