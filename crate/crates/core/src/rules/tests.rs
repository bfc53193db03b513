use std::net::Ipv4Addr;

use proptest::prelude::*;

use super::*;
use crate::flow::FlowVerdict;
use crate::packet::{IpProto, ParsedPacket, TcpFlags};

const GOLDEN: [&str; 5] = [
    r#"alert tcp !$SRC any -> $DST any (content:" 04 "; offset:12; depth:1; msg:"DNP3 operate from Unknow source"; sid:3;)"#,
    r#"alert tcp !$SRC any -> $DST any (flow: not_established; msg:"Unknown flow"; sid:5;)"#,
    r#"alert tcp !$SRC any -> $DST any (content:" 05 64 "; threshold: type both, track by src, count 5, seconds 10; sid:9;)"#,
    r#"alert tcp !$SRC any -> $DST any (msg:"DNP3-Bad-CRC"; sid:1; gid:145; metadata: rule-type preproc;)"#,
    r#"alert tcp !$SRC any -> $DST any (msg:"DNP3-Invalid sequence no"; sid:3; gid:145; metadata: rule-type preproc;)"#,
];

const MASTER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const OUTSTATION: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
const ATTACKER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 66);

fn vars() -> Variables {
    Variables::new().with_hosts("SRC", &[MASTER]).with_hosts("DST", &[OUTSTATION])
}

fn pkt(src: Ipv4Addr, dst: Ipv4Addr, payload: &[u8], ts_us: u64) -> ParsedPacket {
    ParsedPacket {
        ts_us,
        src_ip: src,
        dst_ip: dst,
        proto: IpProto::Tcp,
        src_port: 40000,
        dst_port: 20000,
        tcp_flags: TcpFlags(TcpFlags::PSH | TcpFlags::ACK),
        tcp_seq: 1,
        tcp_ack: 1,
        payload: payload.to_vec(),
        dnp3: vec![],
        dnp3_malformed: None,
    }
}

fn operate_payload() -> Vec<u8> {
    let mut p = vec![0x05, 0x64, 0x08, 0xC4, 0x0A, 0x00, 0x01, 0x00, 0, 0, 0xC0, 0xC1, 0x04];
    p.extend_from_slice(&[0, 0]);
    p
}

fn established() -> FlowVerdict {
    FlowVerdict { established: true, to_server: true, ..FlowVerdict::default() }
}

fn run(set: &CompiledRuleSet, p: &ParsedPacket, v: &FlowVerdict, state: &mut ThresholdState) -> Evaluation {
    let ctx = PacketContext { pkt: p, verdict: Some(v), fired: &[], now_us: p.ts_us };
    evaluate_packet(set, &ctx, state, false)
}

#[test]
fn golden_corpus_parses() {
    let rules: Vec<Rule> = GOLDEN.iter().map(|t| parse_rule(t).unwrap()).collect();
    let payload = &rules[0];
    assert_eq!(payload.header.action, Action::Alert);
    assert_eq!(payload.header.protocol, Protocol::Tcp);
    assert_eq!(payload.header.src, AddrExpr::Not(Box::new(AddrExpr::Var("SRC".into()))));
    assert_eq!(payload.header.dst, AddrExpr::Var("DST".into()));
    assert_eq!(payload.contents().next().unwrap(), &Content { pattern: vec![0x04], offset: Some(12), depth: Some(1) });
    assert_eq!(payload.sid(), 3);
    assert_eq!(payload.gid(), 1);
    assert_eq!(rules[1].options[0], RuleOption::Flow(vec![FlowFlag::NotEstablished]));
    assert_eq!(rules[2].contents().next().unwrap().pattern, vec![0x05, 0x64]);
    assert_eq!(
        rules[2].threshold(),
        Some(&Threshold { kind: ThresholdType::Both, track: Track::BySrc, count: 5, seconds: 10 })
    );
    assert_eq!(rules[2].msg(), None);
    assert_eq!(rules[2].alert_msg(), "sid:9");
    assert!(rules[3].is_preproc() && rules[3].gid() == 145 && rules[3].sid() == 1);
    assert!(rules[4].is_preproc() && rules[4].sid() == 3);
}

#[test]
fn golden_corpus_round_trips() {
    for text in GOLDEN {
        let r = parse_rule(text).unwrap();
        let back = parse_rule(&render_rule(&r)).unwrap();
        assert!(r.semantic_eq(&back), "{text}");
    }
}

#[test]
fn renders_hex_content_and_threshold_canonically() {
    let r = parse_rule(GOLDEN[2]).unwrap();
    let text = render_rule(&r);
    assert!(text.contains(r#"content:" 05 64 ""#), "{text}");
    assert!(text.contains("threshold: type both, track by_src, count 5, seconds 10"), "{text}");
}

#[test]
fn content_forms() {
    let c = |s: &str| {
        parse_rule(&format!("alert tcp any any -> any any (content:\"{s}\"; sid:1;)"))
            .unwrap()
            .contents()
            .next()
            .unwrap()
            .pattern
            .clone()
    };
    assert_eq!(c(" 04 "), vec![4]);
    assert_eq!(c("|05 64|"), vec![5, 0x64]);
    assert_eq!(c("AB|0d 0a|"), b"AB\r\n".to_vec());
    assert_eq!(c("GET"), b"GET".to_vec());
    assert_eq!(c("ab cd"), vec![0xAB, 0xCD]);
    assert_eq!(c("abc d"), b"abc d".to_vec());
    assert_eq!(c(r#"a\"b;c"#), b"a\"b;c".to_vec());
}

#[test]
fn blank_and_comment_lines_yield_nothing() {
    assert_eq!(parse_rule_line("").unwrap().map(|r| r.sid()), None);
    assert_eq!(parse_rule_line("   # alert tcp").unwrap().map(|r| r.sid()), None);
}

#[test]
fn parse_errors() {
    assert_eq!(parse_rule("alert tcp any any -> any any (msg:\"x\";)").unwrap_err(), RuleError::MissingSid);
    assert_eq!(
        parse_rule("alert tcp any any -> any any (pcre:\"/x/\"; sid:1;)").unwrap_err(),
        RuleError::UnknownOption("pcre".into())
    );
    for bad in [
        "alert tcp any any -> any (sid:1;)",
        "yell tcp any any -> any any (sid:1;)",
        "alert tcp any any => any any (sid:1;)",
        "alert tcp 300.1.1.1 any -> any any (sid:1;)",
        "alert tcp any 70000 -> any any (sid:1;)",
        "alert tcp any any -> any any (offset:3; sid:1;)",
        "alert tcp any any -> any any (content:\"a\"; depth:0; sid:1;)",
        "alert tcp any any -> any any (content:\"a; sid:1;)",
        "alert tcp any any -> any any (sid:1;",
        "alert tcp any any -> any any (msg:\"x\"; sid:1; gid:1; metadata: rule-type preproc;)",
        "alert tcp any any -> any any (threshold: type both, track by_src, count 0, seconds 1; sid:1;)",
        "alert tcp any any -> any any (threshold: type both, count 2, seconds 1; sid:1;)",
    ] {
        assert!(matches!(parse_rule(bad), Err(RuleError::SyntaxError { .. })), "{bad}: {:?}", parse_rule(bad));
    }
}

#[test]
fn header_expressions() {
    let r = parse_rule("drop ip [10.0.0.0/8, !10.1.0.0/16] [1:1024,!80] <> $X !20000 (sid:7;)").unwrap();
    assert_eq!(r.header.action, Action::Drop);
    assert_eq!(r.header.direction, RuleDirection::Both);
    let AddrExpr::List(items) = &r.header.src else { panic!() };
    assert_eq!(items.len(), 2);
    assert_eq!(
        r.header.src_port,
        PortExpr::List(vec![PortExpr::Range(1, 1024), PortExpr::Not(Box::new(PortExpr::Port(80)))])
    );
    let back = parse_rule(&render_rule(&r)).unwrap();
    assert!(r.semantic_eq(&back));
}

#[test]
fn compile_preserves_order_and_positions() {
    let set = compile_ruleset(&GOLDEN.join("\n"), &vars(), 4).unwrap();
    assert_eq!(set.version, 4);
    let positions: Vec<usize> = set.rules.iter().map(|r| r.rule.position).collect();
    assert_eq!(positions, vec![0, 1, 2, 3, 4]);
    let sids: Vec<(u32, u32)> = set.rules.iter().map(|r| (r.rule.gid(), r.rule.sid())).collect();
    assert_eq!(sids, vec![(1, 3), (1, 5), (1, 9), (145, 1), (145, 3)]);
    assert!(set.binds(145, 1) && set.binds(145, 3) && !set.binds(1, 3));
}

#[test]
fn compile_errors_are_aggregated() {
    let err = compile_ruleset(GOLDEN[0], &Variables::new(), 1).unwrap_err();
    assert_eq!(
        err.0,
        vec![(1, CompileError::UnresolvedVariable("SRC".into())), (1, CompileError::UnresolvedVariable("DST".into())),]
    );
    let text = format!("{}\n\n# c\nbogus\n{}", GOLDEN[0], GOLDEN[0]);
    let err = compile_ruleset(&text, &vars(), 1).unwrap_err();
    assert_eq!(err.0.len(), 2);
    assert_eq!(err.0[0].0, 4);
    assert!(matches!(err.0[0].1, CompileError::Parse(_)));
    assert_eq!(err.0[1], (5, CompileError::DuplicateSid { gid: 1, sid: 3, first_line: 1 }));
}

#[test]
fn variables_file_round_trip() {
    let v = Variables::parse("# hosts\n$MASTERS=10.0.0.1\nNETS = 10.0.0.0/24, 192.168.1.7\n").unwrap();
    assert_eq!(v.get("MASTERS").unwrap().len(), 1);
    assert_eq!(v.get("NETS").unwrap().len(), 2);
    assert_eq!(Variables::parse(&v.render()).unwrap(), v);
    assert!(Variables::parse("X=nope").is_err());
    assert!(Variables::parse("just text").is_err());
}

#[test]
fn operate_from_unknown_source_alerts() {
    let set = compile_ruleset(&GOLDEN.join("\n"), &vars(), 1).unwrap();
    let mut st = ThresholdState::new();
    let e = run(&set, &pkt(ATTACKER, OUTSTATION, &operate_payload(), 0), &established(), &mut st);
    let m = e.first().unwrap();
    assert_eq!(set.rules[m.position].rule.sid(), 3);
    // Header plus content.
    assert_eq!(m.options_evaluated, 2);
    let e = run(&set, &pkt(MASTER, OUTSTATION, &operate_payload(), 0), &established(), &mut st);
    assert!(e.first().is_none());
    // Five header checks, no header matches.
    assert_eq!(e.options_evaluated, 5);
}

#[test]
fn miss_counts_every_examined_rule() {
    let set = compile_ruleset(&GOLDEN.join("\n"), &vars(), 1).unwrap();
    let mut st = ThresholdState::new();
    let e = run(&set, &pkt(ATTACKER, OUTSTATION, b"hello", 0), &established(), &mut st);
    assert!(e.matches.is_empty());
    // Five headers plus content, flow, content, preproc binding x2.
    assert_eq!(e.options_evaluated, 10);
}

#[test]
fn fig8_threshold_counts_five_in_ten_seconds() {
    let rules = format!("{}\n", GOLDEN[2]);
    let set = compile_ruleset(&rules, &vars(), 1).unwrap();
    let frames = |n: u64| {
        let mut st = ThresholdState::new();
        (0..n)
            .filter(|i| {
                let p = pkt(ATTACKER, OUTSTATION, &[0x05, 0x64, 0, 0], i * 2_000_000);
                !run(&set, &p, &established(), &mut st).matches.is_empty()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(frames(5), vec![4]);
    assert!(frames(4).is_empty());
    let mut st = ThresholdState::new();
    let hits = (0..10u64)
        .filter(|i| {
            let p = pkt(ATTACKER, OUTSTATION, &[0x05, 0x64], i * 500_000);
            !run(&set, &p, &established(), &mut st).matches.is_empty()
        })
        .count();
    assert_eq!(hits, 1);
}

#[test]
fn pass_rule_suppresses() {
    let text = format!("pass tcp 10.0.0.66 any -> any any (sid:100;)\n{}", GOLDEN[0]);
    let set = compile_ruleset(&text, &vars(), 1).unwrap();
    let e = run(&set, &pkt(ATTACKER, OUTSTATION, &operate_payload(), 0), &established(), &mut ThresholdState::new());
    assert!(e.suppressed && e.matches.is_empty());
}

#[test]
fn evaluate_all_collects_every_match() {
    let text = "alert tcp any any -> any any (content:\" 05 64 \"; sid:1;)\nalert tcp any any -> any any (content:\" 04 \"; offset:12; depth:1; sid:2;)";
    let set = compile_ruleset(text, &Variables::new(), 1).unwrap();
    let p = pkt(ATTACKER, OUTSTATION, &operate_payload(), 0);
    let ctx = PacketContext { pkt: &p, verdict: Some(&established()), fired: &[], now_us: 0 };
    let mut st = ThresholdState::new();
    assert_eq!(evaluate_packet(&set, &ctx, &mut st, false).matches.len(), 1);
    let all = evaluate_packet(&set, &ctx, &mut st, true);
    assert_eq!(all.matches.iter().map(|m| m.position).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(all.matches[1].options_evaluated, 4);
}

#[test]
fn preproc_rule_binds_detector_event() {
    let set = compile_ruleset(&GOLDEN[3..].join("\n"), &vars(), 1).unwrap();
    let p = pkt(ATTACKER, OUTSTATION, b"x", 0);
    let mut st = ThresholdState::new();
    let ctx = PacketContext { pkt: &p, verdict: Some(&established()), fired: &[(145, 3)], now_us: 0 };
    let e = evaluate_packet(&set, &ctx, &mut st, false);
    assert_eq!(e.first().unwrap().position, 1);
    let ctx = PacketContext { fired: &[], ..ctx };
    assert!(evaluate_packet(&set, &ctx, &mut st, false).matches.is_empty());
}

#[test]
fn flow_options_fail_on_non_tcp_and_icmp_rules_match_header_only() {
    let text = "alert ip any any -> any any (flow: not_established; sid:1;)\nalert icmp any any -> any any (content:\"zzz\"; sid:2;)";
    let set = compile_ruleset(text, &Variables::new(), 1).unwrap();
    let mut p = pkt(ATTACKER, OUTSTATION, b"ping", 0);
    p.proto = IpProto::Icmp;
    p.src_port = 0;
    p.dst_port = 0;
    let ctx = PacketContext { pkt: &p, verdict: None, fired: &[], now_us: 0 };
    let e = evaluate_packet(&set, &ctx, &mut ThresholdState::new(), false);
    assert_eq!(e.first().unwrap().position, 1);
    // Header and flow for the ip rule, header alone for the icmp rule.
    assert_eq!(e.options_evaluated, 3);
}

#[test]
fn content_window_semantics() {
    let c = Content { pattern: vec![0x04], offset: Some(12), depth: Some(1) };
    assert!(c.matches(&operate_payload()));
    let mut shifted = operate_payload();
    shifted.insert(0, 0);
    assert!(!c.matches(&shifted));
    assert!(!c.matches(&[0x04; 12]));
    let unanchored = Content::new(vec![0x64, 0x08]);
    assert!(unanchored.matches(&operate_payload()));
    let windowed = Content { pattern: vec![0xC1, 0x04], offset: Some(10), depth: Some(2) };
    assert!(!windowed.matches(&operate_payload()));
}

/// Reference model: walks the sorted event list once per event to find the
/// tumbling window it belongs to and its rank inside it.
fn tumbling_oracle(times: &[u64], count: u32, span: u64) -> Vec<usize> {
    let mut alerts = Vec::new();
    for i in 0..times.len() {
        let mut start = times[0];
        let mut rank = 0u32;
        for (j, &t) in times.iter().enumerate().take(i + 1) {
            if t >= start + span {
                start = t;
                rank = 0;
            }
            rank += 1;
            if j == i && rank == count {
                alerts.push(i);
            }
        }
    }
    alerts
}

/// Sliding definition: some interval of `span` holds `count` events.
fn sliding_any(times: &[u64], count: u32, span: u64) -> bool {
    times.iter().any(|&s| times.iter().filter(|&&t| t >= s && t < s + span).count() >= count as usize)
}

fn threshold_alerts(times: &[u64], count: u32, span_s: u32) -> Vec<usize> {
    let t = Threshold { kind: ThresholdType::Both, track: Track::BySrc, count, seconds: span_s };
    let mut st = ThresholdState::new();
    times.iter().enumerate().filter(|(_, &ts)| st.record(1, 9, ATTACKER, &t, ts)).map(|(i, _)| i).collect()
}

#[test]
fn tumbling_differs_from_sliding() {
    let s = 1_000_000;
    let times = [0, 9 * s, 11 * s, 12 * s];
    assert!(threshold_alerts(&times, 3, 10).is_empty());
    assert!(sliding_any(&times, 3, 10 * s));
}

#[test]
fn limit_and_threshold_types() {
    let mut st = ThresholdState::new();
    let limit = Threshold { kind: ThresholdType::Limit, track: Track::ByDst, count: 2, seconds: 10 };
    let fired: Vec<bool> = (0..4).map(|i| st.record(1, 1, OUTSTATION, &limit, i)).collect();
    assert_eq!(fired, vec![true, true, false, false]);
    let every = Threshold { kind: ThresholdType::Threshold, count: 2, ..limit };
    let fired: Vec<bool> = (0..4).map(|i| st.record(1, 2, OUTSTATION, &every, i)).collect();
    assert_eq!(fired, vec![false, true, false, true]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn threshold_matches_brute_force(
        gaps in proptest::collection::vec(0u64..6_000_000, 1..40),
        count in 1u32..6,
        secs in 1u32..12,
    ) {
        let mut times = Vec::new();
        let mut t = 0;
        for g in gaps {
            t += g;
            times.push(t);
        }
        let got = threshold_alerts(&times, count, secs);
        prop_assert_eq!(&got, &tumbling_oracle(&times, count, secs as u64 * 1_000_000));
        // At most one alert per window, so never more alerts than events / count.
        prop_assert!(got.len() <= times.len() / count as usize);
        // Any alert implies a dense interval under the sliding definition too.
        if !got.is_empty() {
            prop_assert!(sliding_any(&times, count, secs as u64 * 1_000_000));
        }
    }

    #[test]
    fn negation_is_complement(net in any::<u32>(), prefix in 0u8..=32, probe in any::<u32>()) {
        let net = ipnet::Ipv4Net::new(Ipv4Addr::from(net), prefix).unwrap().trunc();
        let e = AddrExpr::Net(net);
        let ne = AddrExpr::Not(Box::new(e.clone()));
        let ip = Ipv4Addr::from(probe);
        prop_assert_ne!(e.matches(ip), ne.matches(ip));
        prop_assert_eq!(e.matches(ip), net.contains(&ip));
    }

    #[test]
    fn single_match_is_permutation_invariant(order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        // Only the sid-3 rule can match this packet.
        let base = [
            GOLDEN[0].to_string(),
            "alert tcp any any -> any any (content:\"nomatch\"; sid:20;)".into(),
            "alert udp any any -> any any (sid:21;)".into(),
            "alert tcp any any -> 1.2.3.4 any (sid:22;)".into(),
            "alert tcp any any -> any any (flow: established, to_client; sid:23;)".into(),
            "alert tcp any any -> any any (content:\" 05 64 \"; offset:1; depth:2; sid:24;)".into(),
        ];
        let text: Vec<&str> = order.iter().map(|&i| base[i].as_str()).collect();
        let set = compile_ruleset(&text.join("\n"), &vars(), 1).unwrap();
        let e = run(&set, &pkt(ATTACKER, OUTSTATION, &operate_payload(), 0), &established(), &mut ThresholdState::new());
        prop_assert_eq!(e.matches.len(), 1);
        prop_assert_eq!(set.rules[e.matches[0].position].rule.sid(), 3);
    }

    #[test]
    fn moving_a_match_earlier_never_costs_more(k in 0usize..6, j in 0usize..6) {
        prop_assume!(j < k);
        let fillers: Vec<String> = (0..5)
            .map(|i| format!("alert tcp any any -> any any (content:\"miss{i}\"; flow: established; sid:{};)", 30 + i))
            .collect();
        let place = |pos: usize| {
            let mut v = fillers.clone();
            v.insert(pos, GOLDEN[0].to_string());
            compile_ruleset(&v.join("\n"), &vars(), 1).unwrap()
        };
        let p = pkt(ATTACKER, OUTSTATION, &operate_payload(), 0);
        let at = |pos| run(&place(pos), &p, &established(), &mut ThresholdState::new()).first().unwrap().options_evaluated;
        prop_assert!(at(j) <= at(k));
    }

    #[test]
    fn superset_options_cost_at_least_as_much(extra in proptest::collection::vec("[a-z]{1,6}", 1..4), payload in proptest::collection::vec(any::<u8>(), 0..32)) {
        let b = "alert tcp any any -> any any (content:\"qqqq\"; sid:1;)".to_string();
        let extras: String = extra.iter().map(|e| format!("content:\"{e}\"; ")).collect();
        let a = format!("alert tcp any any -> any any (content:\"qqqq\"; {extras}sid:1;)");
        let p = pkt(ATTACKER, OUTSTATION, &payload, 0);
        let cost = |text: &str| run(&compile_ruleset(text, &Variables::new(), 1).unwrap(), &p, &established(), &mut ThresholdState::new()).options_evaluated;
        prop_assert!(cost(&a) >= cost(&b));
    }

    #[test]
    fn render_parse_round_trip(
        pattern in proptest::collection::vec(any::<u8>(), 1..8),
        offset in proptest::option::of(0u32..64),
        depth in proptest::option::of(1u32..64),
        msg in "[ -~]{0,20}",
        sid in 1u32..5_000_000,
    ) {
        let mut content = Content::new(pattern);
        content.offset = offset;
        content.depth = depth;
        let r = Rule {
            header: parse_rule("alert tcp any any -> any any (sid:1;)").unwrap().header,
            options: vec![RuleOption::Content(content), RuleOption::Msg(msg), RuleOption::Sid(sid)],
            raw_text: String::new(),
            position: 0,
        };
        let back = parse_rule(&render_rule(&r)).unwrap();
        prop_assert!(r.semantic_eq(&back), "{}", render_rule(&r));
    }
}
