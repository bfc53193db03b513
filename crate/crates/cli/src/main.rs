//! `dnp3ids`: every capability of the DNP3 intrusion detection system as a
//! scriptable subcommand.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dnp3ids", version, about = "Signature and protocol-aware intrusion detection for DNP3 over TCP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print one line per DNP3 frame found in a capture.
    Parse { pcap: PathBuf },
    /// Run the detection pipeline over a capture, forwarding alerts to a master.
    Sensor(SensorArgs),
    /// Accept sensor connections, store their alerts and push rule updates.
    Master(MasterArgs),
    /// Learn a baseline from benign traffic and emit rules for it.
    Rulegen(RulegenArgs),
    /// Write a synthetic scenario capture.
    Synth(SynthArgs),
    /// Compare per-rule detection cost of two orderings of one rule set.
    Bench(BenchArgs),
    /// Read alerts from a master's store.
    Query(QueryArgs),
}

#[derive(Args)]
pub struct SensorArgs {
    /// key=value file; flags override its entries.
    #[arg(long, env = "DNP3IDS_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sensor_id: Option<String>,
    /// Master address, host:port.
    #[arg(long)]
    pub master: Option<String>,
    #[arg(long)]
    pub token: Option<String>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Capture path, or `-` for a pcap stream on standard input.
    #[arg(long)]
    pub source: Option<String>,
    /// Capture of forwarded packets; ips mode only.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_parser = ["ids", "ips"])]
    pub mode: Option<String>,
    /// Comma-separated hosts or networks allowed to send critical commands.
    #[arg(long)]
    pub authorized_masters: Option<String>,
    /// Seconds an unanswered Select stays valid.
    #[arg(long)]
    pub select_timeout: Option<f64>,
    #[arg(long)]
    pub spool_size: Option<usize>,
    /// Rule variable, NAME=CIDR[,CIDR]; repeatable.
    #[arg(long = "var")]
    pub vars: Vec<String>,
    /// Keep evaluating after the first matching rule.
    #[arg(long)]
    pub evaluate_all: bool,
}

#[derive(Args)]
pub struct MasterArgs {
    #[arg(long, env = "DNP3IDS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Listen address, host:port.
    #[arg(long)]
    pub listen: Option<String>,
    /// Alert store directory.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub token: Option<String>,
    /// Rule file pushed to every sensor whenever its content changes.
    #[arg(long)]
    pub push_rules: Option<PathBuf>,
    /// Variables sent with each push.
    #[arg(long, requires = "push_rules")]
    pub push_vars: Option<PathBuf>,
    /// Exit after this many seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Args)]
pub struct RulegenArgs {
    /// Benign capture to learn from.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Rule repository to merge into; rewritten in place unless --out is given.
    #[arg(long)]
    pub repo: Option<PathBuf>,
    /// Where the rules go; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where the MASTERS/OUTSTATIONS variables go.
    #[arg(long)]
    pub vars_out: Option<PathBuf>,
    /// Where the merge changelog goes; standard error when absent.
    #[arg(long)]
    pub changelog: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub window: u32,
    #[arg(long, default_value_t = 3.0)]
    pub k_sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub select_timeout: u32,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Scenario {
    Benign,
    Attack,
    Flood,
    Ping,
    Mixed,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub scenario: Scenario,
    #[arg(long)]
    pub out: PathBuf,
    /// Attack name for `attack` (e.g. direct_operate), flood name for `flood`
    /// (dnp3_flood, syn_flood, port_scan).
    #[arg(long)]
    pub kind: Option<String>,
    /// Poll cycles, flood frames, pings or reads, by scenario.
    #[arg(long, default_value_t = 100)]
    pub count: u32,
    /// Flood duration.
    #[arg(long, default_value_t = 10)]
    pub seconds: u32,
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0x5EED)]
    pub seed: u64,
    /// Include a select/operate exchange in the benign polling.
    #[arg(long)]
    pub sbo: bool,
    /// Attacker uses the master's address.
    #[arg(long)]
    pub spoof: bool,
    /// Flip one CRC-covered bit in record INDEX, at `header` or `body`.
    #[arg(long, value_name = "INDEX:SITE")]
    pub corrupt_crc: Option<String>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub seq_a: PathBuf,
    #[arg(long)]
    pub seq_b: PathBuf,
    #[arg(long)]
    pub pcap: PathBuf,
    /// NAME=CIDR lines for both rule files.
    #[arg(long)]
    pub vars: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Also write the CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Inclusive start, microseconds since the epoch.
    #[arg(long)]
    pub from: Option<u64>,
    /// Exclusive end, microseconds since the epoch.
    #[arg(long)]
    pub to: Option<u64>,
    #[arg(long)]
    pub sensor: Option<String>,
    #[arg(long)]
    pub sid: Option<u32>,
    #[arg(long)]
    pub gid: Option<u32>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Print records as JSON lines.
    #[arg(long)]
    pub json: bool,
    /// Keep printing new records as they arrive.
    #[arg(long)]
    pub follow: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match cli.command {
        Command::Parse { pcap } => commands::parse(&pcap),
        Command::Sensor(a) => commands::sensor(a),
        Command::Master(a) => commands::master(a),
        Command::Rulegen(a) => commands::rulegen(a),
        Command::Synth(a) => commands::synth(a),
        Command::Bench(a) => commands::bench(a),
        Command::Query(a) => commands::query(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
