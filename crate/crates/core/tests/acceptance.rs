//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dnp3_ids::bench::{compare_sequences, mean_options_per_packet, pair_variables, representative_pair, Winner};
use dnp3_ids::distributed::{
    AlertStore, Master, MasterConfig, PushOutcome, PushStatus, Sensor, StoreQuery, UplinkConfig,
};
use dnp3_ids::dnp3::{encode_frame, Dnp3Frame};
use dnp3_ids::packet::{build_tcp, TcpFlags, TcpSegment};
use dnp3_ids::pcap::{read_capture_bytes, write_capture_bytes, CaptureRecord};
use dnp3_ids::pipeline::{run_records, Mode, Pipeline, PipelineConfig};
use dnp3_ids::rulegen::{generate_ruleset, learn_baseline, render_generated, RulegenConfig};
use dnp3_ids::rules::{compile_ruleset, parse_rule, render_rule, CompiledRuleSet, Variables};
use dnp3_ids::synth::{
    synth_attack, synth_benign, synth_flood, synth_mixed_attack, AttackKind, FloodKind, ScenarioConfig,
};

type Outcome = Result<String, String>;

const GOLDEN: [&str; 5] = [
    r#"alert tcp !$SRC any -> $DST any (content:" 04 "; offset:12; depth:1; msg:"DNP3 operate from Unknow source"; sid:3;)"#,
    r#"alert tcp !$SRC any -> $DST any (flow: not_established; msg:"Unknown flow"; sid:5;)"#,
    r#"alert tcp !$SRC any -> $DST any (content:" 05 64 "; threshold: type both, track by src, count 5, seconds 10; sid:9;)"#,
    r#"alert tcp !$SRC any -> $DST any (msg:"DNP3-Bad-CRC"; sid:1; gid:145; metadata: rule-type preproc;)"#,
    r#"alert tcp !$SRC any -> $DST any (msg:"DNP3-Invalid sequence no"; sid:3; gid:145; metadata: rule-type preproc;)"#,
];

fn fig8_set(cfg: &ScenarioConfig, version: u64) -> CompiledRuleSet {
    let vars = Variables::new().with_hosts("SRC", &[cfg.master_ip]).with_hosts("DST", &[cfg.outstation_ip]);
    compile_ruleset(&GOLDEN.join("\n"), &vars, version).expect("golden rules compile")
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    if took < limit {
        Ok(format!("{detail} in {:.2?}", took))
    } else {
        Err(format!("{detail} but took {took:.2?}, limit {limit:?}"))
    }
}

fn golden_rules() -> Outcome {
    let start = Instant::now();
    let mut ok = 0;
    for text in GOLDEN {
        let r = parse_rule(text).map_err(|e| format!("parse: {e}"))?;
        let rendered = render_rule(&r);
        let back = parse_rule(&rendered).map_err(|e| format!("reparse `{rendered}`: {e}"))?;
        if back.semantic_eq(&r) && render_rule(&back) == rendered {
            ok += 1;
        }
    }
    if ok != 5 {
        return Err(format!("{ok}/5 round-tripped"));
    }
    within(Duration::from_secs(1), start, "5/5 rules round-tripped".into())
}

fn attack_matrix() -> Outcome {
    let start = Instant::now();
    let cfg = ScenarioConfig::default();
    let rc = RulegenConfig::default();
    let mut detected = 0;
    let mut false_pos = 0;
    let mut notes = Vec::new();
    for kind in AttackKind::ALL {
        let bg = kind.background(&cfg);
        let benign = synth_benign(&bg);
        let profile = learn_baseline(&benign, rc.window_s).map_err(|e| e.to_string())?;
        let text = render_generated(&generate_ruleset(&profile, &rc));
        let set = compile_ruleset(&text, &profile.variables(), 1).map_err(|e| e.to_string())?;
        let pc = PipelineConfig { detectors: profile.detector_config(&rc), ..PipelineConfig::default() };

        let benign_alerts = run_records(&benign, set.clone(), pc.clone()).alerts.len();
        false_pos += benign_alerts;

        let atk = synth_attack(kind, &cfg);
        let injected: BTreeSet<usize> = atk.injected.iter().copied().collect();
        let mut p = Pipeline::with_rules(pc, set);
        let (mut on_injected, mut elsewhere) = (0, 0);
        for (i, r) in atk.records.iter().enumerate() {
            let n = p.process(r).alerts.len();
            if injected.contains(&i) {
                on_injected += n;
            } else {
                elsewhere += n;
            }
        }
        false_pos += elsewhere;
        if on_injected > 0 {
            detected += 1;
        }
        notes.push(format!("{}={on_injected}", kind.as_str()));
    }
    let detail = format!("{detected}/6 detected, {false_pos} false positives ({})", notes.join(" "));
    if detected != 6 || false_pos != 0 {
        return Err(detail);
    }
    within(Duration::from_secs(10), start, detail)
}

fn threshold_semantics() -> Outcome {
    let cfg = ScenarioConfig::default();
    let sid9 = |count: u32| {
        let recs = synth_flood(FloodKind::Dnp3Flood, &cfg, count, 10);
        run_records(&recs, fig8_set(&cfg, 1), PipelineConfig::default())
            .alerts
            .iter()
            .filter(|a| (a.gid, a.sid) == (1, 9))
            .count()
    };
    let got = (sid9(5), sid9(4), sid9(10));
    let detail = format!("flood 5 -> {}, flood 4 -> {}, burst 10 -> {}", got.0, got.1, got.2);
    if got == (1, 0, 1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Octet ranges protected by a CRC: the first eight header octets and the
/// data octets of every block.
fn crc_covered(frame: &[u8]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..8).collect();
    let mut user = frame[2] as usize - 5;
    let mut at = 10;
    while user > 0 {
        let n = user.min(16);
        out.extend(at..at + n);
        at += n + 2;
        user -= n;
    }
    out
}

fn crc_detection() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0C);
    let (src, dst) = ((Ipv4Addr::new(10, 0, 0, 1), 40000), (Ipv4Addr::new(10, 0, 0, 2), 20000));
    let mut seq = 1u32;
    let mut clean = Vec::new();
    let mut flipped = Vec::new();
    for i in 0..1000u64 {
        let len = rng.gen_range(0..=240);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let frame = if rng.gen() {
            Dnp3Frame::request(rng.gen(), rng.gen(), rng.gen_range(0..0x22), payload)
        } else {
            Dnp3Frame::response(rng.gen(), rng.gen(), rng.gen(), payload)
        };
        let bytes = encode_frame(&frame).map_err(|e| e.to_string())?;
        let mut bad = bytes.clone();
        let region = crc_covered(&bytes);
        let octet = region[rng.gen_range(0..region.len())];
        bad[octet] ^= 1 << rng.gen_range(0..8);
        for (out, payload) in [(&mut clean, &bytes), (&mut flipped, &bad)] {
            let data = build_tcp(&TcpSegment {
                src,
                dst,
                seq,
                ack: 1,
                flags: TcpFlags::PSH | TcpFlags::ACK,
                window: 8192,
                ident: i as u16,
                payload,
            });
            out.push(CaptureRecord::new(1_000_000 * i, data));
        }
        seq = seq.wrapping_add(bytes.len() as u32);
    }
    let bad_crc = |recs: &[CaptureRecord]| {
        let mut p = Pipeline::with_rules(PipelineConfig::default(), CompiledRuleSet::empty(1));
        recs.iter().filter(|r| p.process(r).alerts.iter().any(|a| (a.gid, a.sid) == (145, 1))).count()
    };
    let (c, f) = (bad_crc(&clean), bad_crc(&flipped));
    let detail = format!("clean {c}/1000 flagged, flipped {f}/1000 flagged");
    if (c, f) != (0, 1000) {
        return Err(detail);
    }
    within(Duration::from_secs(5), start, detail)
}

fn ordering_experiment() -> Outcome {
    let cfg = ScenarioConfig::default();
    let vars = pair_variables(cfg.attacker_ip, cfg.outstation_ip);
    let cap = synth_mixed_attack(&cfg, 8);
    let pc = PipelineConfig::default();
    let (fwd, rev) = representative_pair();
    let a = compile_ruleset(&fwd, &vars, 1).map_err(|e| e.to_string())?;
    let b = compile_ruleset(&rev, &vars, 1).map_err(|e| e.to_string())?;
    let r = compare_sequences(&a, &b, &cap, 1000, &pc).map_err(|e| e.to_string())?;
    let earlier_cheaper = r
        .rules
        .iter()
        .filter(|c| {
            let expect = if c.a.position < c.b.position { Winner::A } else { Winner::B };
            c.fewer_options == expect
        })
        .count();
    let costs: Vec<String> = r
        .rules
        .iter()
        .map(|c| format!("{}:{:.2}@{}/{:.2}@{}", c.sid, c.a.mean_options, c.a.position, c.b.mean_options, c.b.position))
        .collect();

    // Content rule first versus last.
    let lines: Vec<&str> = fwd.lines().collect();
    let first = format!("{}\n{}\n{}\n{}\n", lines[2], lines[0], lines[1], lines[3]);
    let last = format!("{}\n{}\n{}\n{}\n", lines[0], lines[1], lines[3], lines[2]);
    let s1 = compile_ruleset(&first, &vars, 1).map_err(|e| e.to_string())?;
    let s4 = compile_ruleset(&last, &vars, 1).map_err(|e| e.to_string())?;
    let lr = compare_sequences(&s1, &s4, &cap, 1000, &pc).map_err(|e| e.to_string())?;
    let content = lr.rules.iter().find(|c| c.sid == 103).ok_or("content rule never fired")?;
    let latency_ok = content.a.mean_us <= content.b.mean_us;
    let detail = format!(
        "{earlier_cheaper}/4 cheaper when earlier [{}]; content rule mean {:.3} us at 1 vs {:.3} us at 4 (sd {:.3}/{:.3}, n {}/{})",
        costs.join(" "),
        content.a.mean_us,
        content.b.mean_us,
        content.a.std_us,
        content.b.std_us,
        content.a.samples,
        content.b.samples
    );
    if earlier_cheaper == 4 && latency_ok {
        Ok(detail)
    } else {
        let diag: Vec<String> = lr.latency_inversions.iter().map(|i| i.to_string()).collect();
        Err(format!("{detail}; {}", diag.join("; ")))
    }
}

fn option_cost() -> Outcome {
    let cfg = ScenarioConfig::default();
    let cap = synth_benign(&cfg);
    let base = "alert tcp any any -> any 20000 (content:\"zz\"; sid:1;)";
    let long =
        "alert tcp any any -> any 20000 (content:\"zz\"; content:\"q1\"; content:\"q2\"; content:\"q3\"; sid:1;)";
    let pc = PipelineConfig::default();
    let mut means = Vec::new();
    for text in [base, long] {
        let set = compile_ruleset(text, &Variables::new(), 1).map_err(|e| e.to_string())?;
        if !run_records(&cap, set.clone(), pc.clone()).alerts.is_empty() {
            return Err("traffic matched the probe rule".into());
        }
        means.push(mean_options_per_packet(&set, &cap, &pc));
    }
    let detail = format!("mean options {:.3} -> {:.3}", means[0], means[1]);
    if means[1] > means[0] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn distributed_integrity() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = AlertStore::open(dir.path()).map_err(|e| e.to_string())?;
    let master = Master::start(MasterConfig { listen: "127.0.0.1:0".parse().unwrap(), token: "k".into() }, store)
        .map_err(|e| e.to_string())?;
    let cfg = ScenarioConfig::default();
    let ids = ["sensor-1", "sensor-2"];
    let mut sensors: Vec<Sensor> = ids
        .iter()
        .map(|id| {
            let up = UplinkConfig { token: "k".into(), ..UplinkConfig::new(*id, master.local_addr()) };
            Sensor::new(Pipeline::with_rules(PipelineConfig::default(), fig8_set(&cfg, 1)), up)
        })
        .collect();
    let deadline = Instant::now() + Duration::from_secs(10);
    while master.connected().len() < 2 {
        if Instant::now() > deadline {
            return Err("sensors never connected".into());
        }
        thread::sleep(Duration::from_millis(5));
    }

    let replay = |sensors: Vec<Sensor>, kinds: [AttackKind; 2]| -> Vec<Sensor> {
        let handles: Vec<_> = sensors
            .into_iter()
            .zip(kinds)
            .map(|(mut s, kind)| {
                let recs = synth_attack(kind, &cfg).records;
                thread::spawn(move || {
                    for r in &recs {
                        s.process(r);
                    }
                    s
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sensor thread")).collect()
    };
    sensors = replay(sensors, [AttackKind::DirectOperate, AttackKind::BroadcastRequest]);
    let before: Vec<u64> = sensors.iter().map(|s| s.uplink().emitted()).collect();

    let v2: String = GOLDEN.iter().map(|r| format!("{}\n", r.replace("Unknown flow", "Unknown flow v2"))).collect();
    let vars = format!("SRC={}/32\nDST={}/32\n", cfg.master_ip, cfg.outstation_ip);
    let targets: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    let acks = master.push_rules(&targets, 2, &v2, &vars, Duration::from_secs(10)).map_err(|e| e.to_string())?;
    let all_acked = acks.values().all(|a| *a == PushOutcome::Acked(PushStatus::Ok, None));

    sensors = replay(sensors, [AttackKind::ColdRestart, AttackKind::StopApplication]);
    for s in &sensors {
        if !s.uplink().flush(Duration::from_secs(10)) {
            return Err("uplink did not drain".into());
        }
    }
    let mut problems = Vec::new();
    let mut emitted_total = 0;
    for (i, s) in sensors.iter().enumerate() {
        let emitted = s.uplink().emitted();
        emitted_total += emitted;
        let recs = master.store().query(&StoreQuery { sensor_id: Some(ids[i].into()), ..StoreQuery::default() });
        let seqs: BTreeSet<u64> = recs.iter().map(|r| r.seq).collect();
        if seqs.len() != recs.len() || seqs != (1..=emitted).collect() {
            problems.push(format!("{} seqs not 1..={emitted}", ids[i]));
        }
        if let Some(r) = recs.iter().find(|r| (r.seq > before[i]) != (r.alert.rule_version == 2)) {
            problems.push(format!("{} seq {} has rule_version {}", ids[i], r.seq, r.alert.rule_version));
        }
        if emitted == before[i] {
            problems.push(format!("{} raised nothing after the push", ids[i]));
        }
    }
    let stored = master.store().len() as u64;
    if stored != emitted_total {
        problems.push(format!("stored {stored} != emitted {emitted_total}"));
    }
    if !all_acked {
        problems.push(format!("push acks {acks:?}"));
    }
    let detail = format!("{emitted_total} alerts emitted and stored once, v2 acked by {}", ids.len());
    if !problems.is_empty() {
        return Err(format!("{detail}: {}", problems.join("; ")));
    }
    within(Duration::from_secs(30), start, detail)
}

fn ips_conservation() -> Outcome {
    let cfg = ScenarioConfig::default();
    let atk = synth_attack(AttackKind::DirectOperate, &cfg);
    let input = read_capture_bytes(&write_capture_bytes(&atk.records)).map_err(|e| e.to_string())?;
    let rules: String = GOLDEN[..3].iter().map(|r| format!("{}\n", r.replacen("alert", "drop", 1))).collect();
    let vars = Variables::new().with_hosts("SRC", &[cfg.master_ip]).with_hosts("DST", &[cfg.outstation_ip]);
    let set = compile_ruleset(&rules, &vars, 1).map_err(|e| e.to_string())?;

    // Which records a drop rule matches, observed without dropping anything.
    let mut ids = Pipeline::with_rules(PipelineConfig::default(), set.clone());
    let matched: BTreeSet<usize> = input
        .iter()
        .enumerate()
        .filter(|(_, r)| ids.process(r).alerts.iter().any(|a| a.rule_pos.is_some()))
        .map(|(i, _)| i)
        .collect();

    let out = run_records(&input, set, PipelineConfig { mode: Mode::Ips, ..PipelineConfig::default() });
    let expected: Vec<CaptureRecord> =
        input.iter().enumerate().filter(|(i, _)| !matched.contains(i)).map(|(_, r)| r.clone()).collect();
    let c = &out.counters;
    let detail = format!(
        "in {} = out {} + dropped {}, {} matched",
        c.packets_in,
        c.packets_out,
        c.packets_dropped,
        matched.len()
    );
    let same_bytes = write_capture_bytes(&out.output) == write_capture_bytes(&expected);
    if !matched.is_empty()
        && same_bytes
        && c.packets_in == c.packets_out + c.packets_dropped
        && c.packets_dropped == matched.len() as u64
    {
        Ok(detail)
    } else {
        Err(format!("{detail}, output identical: {same_bytes}"))
    }
}

fn baseline_silence() -> Outcome {
    let rc = RulegenConfig::default();
    let mut total_alerts = 0;
    let mut rules = 0;
    for cfg in [
        ScenarioConfig::default(),
        ScenarioConfig { sbo_cycle: true, ..ScenarioConfig::default() },
        ScenarioConfig { rate_hz: 4.0, count: 200, seed: 77, ..ScenarioConfig::default() },
    ] {
        let c = synth_benign(&cfg);
        let texts: Vec<String> = (0..2)
            .map(|_| {
                let p = learn_baseline(&c, rc.window_s).expect("benign capture holds DNP3");
                render_generated(&generate_ruleset(&p, &rc))
            })
            .collect();
        if texts[0] != texts[1] {
            return Err("generated text differs between runs".into());
        }
        let p = learn_baseline(&c, rc.window_s).expect("benign capture holds DNP3");
        let set = compile_ruleset(&texts[0], &p.variables(), 1).map_err(|e| e.to_string())?;
        rules += set.len();
        let pc = PipelineConfig { detectors: p.detector_config(&rc), ..PipelineConfig::default() };
        total_alerts += run_records(&c, set, pc).alerts.len();
    }
    let detail = format!("{total_alerts} alerts from {rules} generated rules over 3 baselines, text stable");
    if total_alerts == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("golden rule corpus", golden_rules),
        ("attack detection matrix", attack_matrix),
        ("threshold semantics", threshold_semantics),
        ("crc detection", crc_detection),
        ("ordering experiment", ordering_experiment),
        ("option cost", option_cost),
        ("distributed integrity", distributed_integrity),
        ("ips conservation", ips_conservation),
        ("baseline silence", baseline_silence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(d) => println!("PASS {} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {} {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {}/9 passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
