//! Command-line driver for the experiments.
//!
//! Exit codes: 0 when everything passes, 1 when a run completes but a
//! check fails (or a networked run is interrupted), 2 for usage and
//! configuration errors. Outputs go to `--out`, else to a default file name
//! under `$SMCLAB_OUT_DIR`, else to stdout.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::asp::{
    exact_map_errors, fano_bound, security_assessment, transmitted_set, AspError, AspSession,
    AttackMode, SourceModel,
};
use crate::infotheory::DistributionSpec;
use crate::netrun::{run_party_at, NetConfig, NetError, PeerTable, StallHook};
use crate::oneshot::{OneShotError, OneShotProtocol, OutputDelivery, ProtocolId};
use crate::polarsrc::{
    construct, construct_exact, construct_monte_carlo, decode_bench, high_entropy_set,
    scheduled_epsilon, PolarError, PolarProfile,
};
use crate::rng;
use crate::transcript::{
    analyze, execute, randomness_from_seeds, PartyRecord, ProtocolTranscript, Value,
};

pub const FORMAT_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "SMCLAB_OUT_DIR";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CSV_COLUMNS: [&str; 7] = [
    "n",
    "epsilon",
    "r_size",
    "block_error_rate",
    "fano_bound",
    "attack_error_rate",
    "wall_time_ms",
];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_FAIL,
        }
    }
}

impl From<OneShotError> for CliError {
    fn from(e: OneShotError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PolarError> for CliError {
    fn from(e: PolarError) -> Self {
        match e {
            PolarError::Io(io) => CliError::Failed(io.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<AspError> for CliError {
    fn from(e: AspError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::PeerTable(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "smclab",
    version,
    about = "Secure multi-party computation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One-shot protocols: exact analysis and single runs.
    #[command(subcommand)]
    Oneshot(OneshotCommand),
    /// Networked execution.
    #[command(subcommand)]
    Net(NetCommand),
    /// Polar source transform experiments.
    #[command(subcommand)]
    Polar(PolarCommand),
    /// The polar three-party XOR protocol.
    #[command(subcommand)]
    Asp(AspCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delivery {
    /// Only the computing party outputs.
    Computing,
    /// The result is sent back to every party.
    Broadcast,
}

impl From<Delivery> for OutputDelivery {
    fn from(d: Delivery) -> Self {
        match d {
            Delivery::Computing => OutputDelivery::ComputingPartyOnly,
            Delivery::Broadcast => OutputDelivery::BroadcastBack,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProtocolArgs {
    /// xor-chain, modm-sum, mult3-naive or mult3-masked.
    pub protocol: String,
    /// Modulus for modm-sum (defaults to m).
    #[arg(long)]
    pub modulus: Option<Value>,
    #[arg(long, value_enum, default_value_t = Delivery::Computing)]
    pub delivery: Delivery,
}

impl ProtocolArgs {
    fn id(&self) -> Result<ProtocolId, CliError> {
        self.protocol
            .parse()
            .map_err(|e: OneShotError| CliError::Usage(e.to_string()))
    }

    fn build(&self, m: usize) -> Result<OneShotProtocol, CliError> {
        Ok(self.id()?.build(m, self.modulus, self.delivery.into())?)
    }
}

#[derive(Debug, Subcommand)]
pub enum OneshotCommand {
    /// Exact accuracy, security and randomness analysis.
    Analyze {
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Party counts, e.g. `--m 3 4 5` or `--m 3,4,5`.
        #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "3")]
        m: Vec<usize>,
        /// JSON input distribution (defaults to uniform inputs).
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Executes once with given inputs and per-party seeds.
    Run {
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<Value>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum NetCommand {
    /// Runs one party over TCP.
    Party {
        /// Protocol name.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long)]
        modulus: Option<Value>,
        #[arg(long, value_enum, default_value_t = Delivery::Computing)]
        delivery: Delivery,
        #[arg(long)]
        id: usize,
        #[arg(long)]
        listen: std::net::SocketAddr,
        /// JSON file mapping party ids to addresses.
        #[arg(long)]
        peers: PathBuf,
        #[arg(long)]
        input: Value,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        barrier_timeout_ms: u64,
        #[arg(long, default_value_t = 10_000)]
        connect_timeout_ms: u64,
        /// Test hook: stop before this round and hang.
        #[arg(long, hide = true)]
        stall_before_round: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combines per-party records into one transcript.
    Assemble {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long)]
        modulus: Option<Value>,
        #[arg(long, value_enum, default_value_t = Delivery::Computing)]
        delivery: Delivery,
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    MonteCarlo,
    /// Exact up to n = 16, Monte Carlo above.
    Auto,
}

/// A fixed threshold or the vanishing schedule of the block length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSetting {
    Fixed(f64),
    Named(EpsilonName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonName {
    PaperSchedule,
}

impl EpsilonSetting {
    pub fn resolve(self, n: usize, samples: usize) -> f64 {
        match self {
            EpsilonSetting::Fixed(e) => e,
            EpsilonSetting::Named(EpsilonName::PaperSchedule) => scheduled_epsilon(n, samples),
        }
    }
}

impl FromStr for EpsilonSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "paper_schedule" {
            return Ok(EpsilonSetting::Named(EpsilonName::PaperSchedule));
        }
        s.parse()
            .map(EpsilonSetting::Fixed)
            .map_err(|_| format!("`{s}` is neither a number nor `paper_schedule`"))
    }
}

fn default_samples() -> usize {
    2000
}

#[derive(Debug, Subcommand)]
pub enum PolarCommand {
    /// Builds the conditional-entropy profile of a Bernoulli source.
    Profile {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Method::Auto)]
        method: Method,
        #[arg(long, default_value_t = default_samples())]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Thresholds summarized as |R_eps| in the output.
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        epsilon: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Block error of successive cancellation reconstruction.
    DecodeBench {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "0.01")]
        epsilon: EpsilonSetting,
        #[arg(long, value_enum, default_value_t = Method::Auto)]
        method: Method,
        #[arg(long, default_value_t = default_samples())]
        samples: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `asp sweep` configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub model: DistributionSpec,
    pub n_list: Vec<usize>,
    pub epsilon: EpsilonSetting,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_attack")]
    pub attack: AttackMode,
    /// Monte Carlo samples for profiles above n = 16.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Write measured wall time; off keeps repeated runs byte-identical.
    #[serde(default)]
    pub record_timing: bool,
}

fn default_attack() -> AttackMode {
    AttackMode::None
}

#[derive(Debug, Subcommand)]
pub enum AspCommand {
    /// Runs the protocol over a list of block lengths and appends CSV rows.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Security assessment at one block length.
    Attack {
        /// JSON model spec (defaults to the p = 0.1 preset).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "0.5")]
        epsilon: EpsilonSetting,
        #[arg(long, value_enum, default_value_t = AttackArg::Exact)]
        attack: AttackArg,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = default_samples())]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackArg {
    Exact,
    Sampled,
    None,
}

impl From<AttackArg> for AttackMode {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Exact => AttackMode::Exact,
            AttackArg::Sampled => AttackMode::Sampled,
            AttackArg::None => AttackMode::None,
        }
    }
}

/// Where a command's output goes.
fn output_path(out: &Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
    out.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(|dir| Path::new(&dir).join(default_name)))
}

fn write_output(path: Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&p, text)?;
            eprintln!("wrote {}", p.display());
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn document(config: serde_json::Value, body_key: &str, body: serde_json::Value) -> String {
    let mut doc = json!({ "format_version": FORMAT_VERSION, "config": config });
    doc[body_key] = body;
    let mut text = serde_json::to_string_pretty(&doc).expect("json");
    text.push('\n');
    text
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("json")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_oneshot_analyze(
    protocol: &ProtocolArgs,
    ms: &[usize],
    inputs: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<i32, CliError> {
    let dist = match inputs {
        Some(path) => Some(
            read_json::<DistributionSpec>(path)?
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?,
        ),
        None => None,
    };
    let id = protocol.id()?;
    let ms: Vec<usize> = match id {
        ProtocolId::Mult3Naive | ProtocolId::Mult3Masked => vec![3],
        _ => ms.to_vec(),
    };
    let mut reports = Vec::new();
    let mut all_pass = true;
    for &m in &ms {
        let built = protocol.build(m)?;
        let report = analyze(&built.spec, &built.targets, dist.as_ref())
            .map_err(|e| CliError::Usage(e.to_string()))?;
        eprintln!(
            "{} m={m} randomness_cost={:.9} max_security_residual={:.9} {}",
            report.protocol,
            report.randomness_cost,
            report.max_security_residual(),
            if report.all_pass { "PASS" } else { "FAIL" }
        );
        all_pass &= report.all_pass;
        reports.push(to_value(&report));
    }
    let config = json!({
        "command": "oneshot analyze",
        "protocol": id.as_str(),
        "m": ms,
        "modulus": protocol.modulus,
        "delivery": protocol.delivery,
        "inputs": inputs.as_ref().map(|p| p.display().to_string()),
    });
    let name = format!("oneshot-analyze-{}.json", id.as_str());
    write_output(
        output_path(out, &name),
        &document(config, "reports", json!(reports)),
    )?;
    Ok(if all_pass { EXIT_PASS } else { EXIT_FAIL })
}

fn cmd_oneshot_run(
    protocol: &ProtocolArgs,
    m: usize,
    inputs: &[Value],
    seeds: &[u64],
    out: &Option<PathBuf>,
) -> Result<i32, CliError> {
    let built = protocol.build(m)?;
    let spec = &built.spec;
    if seeds.len() != spec.parties() {
        return Err(CliError::Usage(format!(
            "need {} seeds, got {}",
            spec.parties(),
            seeds.len()
        )));
    }
    let transcript = execute(spec, inputs, &randomness_from_seeds(spec, seeds))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let config = json!({
        "command": "oneshot run",
        "protocol": spec.name(),
        "m": spec.parties(),
        "modulus": protocol.modulus,
        "delivery": protocol.delivery,
        "inputs": inputs,
        "seeds": seeds,
    });
    let name = format!("oneshot-run-{}.json", spec.name());
    write_output(
        output_path(out, &name),
        &document(config, "transcript", to_value(&transcript)),
    )?;
    Ok(EXIT_PASS)
}

/// The `record` body written by `net party`.
#[derive(Deserialize)]
struct PartyRecordFile {
    record: PartyRecord,
}

/// The `transcript` body of `oneshot run` and `net assemble` output.
#[derive(Deserialize)]
pub struct TranscriptFile {
    pub transcript: ProtocolTranscript,
}

fn cmd_net(command: &NetCommand) -> Result<i32, CliError> {
    match command {
        NetCommand::Party {
            spec,
            m,
            modulus,
            delivery,
            id,
            listen,
            peers,
            input,
            seed,
            barrier_timeout_ms,
            connect_timeout_ms,
            stall_before_round,
            out,
        } => {
            let args = ProtocolArgs {
                protocol: spec.clone(),
                modulus: *modulus,
                delivery: *delivery,
            };
            let built = args.build(*m)?;
            let mut table = PeerTable::load(peers).map_err(|e| CliError::Usage(e.to_string()))?;
            table.0.insert(*id, *listen);
            let config = NetConfig {
                barrier_timeout: Duration::from_millis(*barrier_timeout_ms),
                connect_timeout: Duration::from_millis(*connect_timeout_ms),
                stall: stall_before_round.map(|round| StallHook {
                    before_round: round,
                    hold: Duration::from_secs(u32::MAX as u64),
                }),
            };
            let record = run_party_at(&built.spec, *id, *input, *seed, &table, &config)?;
            let cfg = json!({
                "command": "net party",
                "protocol": built.spec.name(),
                "m": built.spec.parties(),
                "id": id,
                "input": input,
                "seed": seed,
            });
            let name = format!("net-party-{}-{id}.json", built.spec.name());
            write_output(
                output_path(out, &name),
                &document(cfg, "record", to_value(&record)),
            )?;
            Ok(EXIT_PASS)
        }
        NetCommand::Assemble {
            spec,
            m,
            modulus,
            delivery,
            records,
            out,
        } => {
            let args = ProtocolArgs {
                protocol: spec.clone(),
                modulus: *modulus,
                delivery: *delivery,
            };
            let built = args.build(*m)?;
            let records = records
                .iter()
                .map(|p| read_json::<PartyRecordFile>(p).map(|f| f.record))
                .collect::<Result<Vec<_>, _>>()?;
            if records.len() != built.spec.parties() {
                return Err(CliError::Usage(format!(
                    "need {} records, got {}",
                    built.spec.parties(),
                    records.len()
                )));
            }
            let transcript = ProtocolTranscript::assemble(built.spec.name(), records);
            if !transcript.ledger_is_consistent() {
                return Err(CliError::Failed(
                    "sent and received messages disagree".into(),
                ));
            }
            let cfg = json!({ "command": "net assemble", "protocol": built.spec.name(), "m": built.spec.parties() });
            let name = format!("net-transcript-{}.json", built.spec.name());
            write_output(
                output_path(out, &name),
                &document(cfg, "transcript", to_value(&transcript)),
            )?;
            Ok(EXIT_PASS)
        }
    }
}

fn build_profile(
    p: f64,
    n: usize,
    method: Method,
    samples: usize,
    seed: u64,
) -> Result<PolarProfile, CliError> {
    Ok(match method {
        Method::Exact => construct_exact(p, n)?,
        Method::MonteCarlo => construct_monte_carlo(p, n, samples, seed)?,
        Method::Auto => construct(p, n, samples, seed)?,
    })
}

fn cmd_polar(command: &PolarCommand) -> Result<i32, CliError> {
    match command {
        PolarCommand::Profile {
            p,
            n,
            method,
            samples,
            seed,
            epsilon,
            out,
        } => {
            let profile = build_profile(*p, *n, *method, *samples, *seed)?;
            let summary = epsilon
                .iter()
                .map(|&e| {
                    let set = high_entropy_set(&profile, e)?;
                    Ok(json!({ "epsilon": e, "r_size": set.len(), "rate": set.rate() }))
                })
                .collect::<Result<Vec<_>, PolarError>>()?;
            for s in &summary {
                eprintln!(
                    "epsilon={} |R|={} rate={}",
                    s["epsilon"], s["r_size"], s["rate"]
                );
            }
            let config = json!({
                "command": "polar profile",
                "p": p, "n": n, "method": method, "samples": samples, "seed": seed, "epsilon": epsilon,
            });
            let profile_json: serde_json::Value =
                serde_json::from_str(&profile.to_json()).expect("json");
            let mut doc =
                json!({ "format_version": FORMAT_VERSION, "config": config, "summary": summary });
            doc["profile"] = profile_json;
            let mut text = serde_json::to_string_pretty(&doc).expect("json");
            text.push('\n');
            write_output(output_path(out, &format!("polar-profile-n{n}.json")), &text)?;
            Ok(EXIT_PASS)
        }
        PolarCommand::DecodeBench {
            p,
            n,
            epsilon,
            method,
            samples,
            trials,
            seed,
            out,
        } => {
            let profile = build_profile(*p, *n, *method, *samples, rng::derive(*seed, 0))?;
            let eps = epsilon.resolve(*n, *samples);
            let set = high_entropy_set(&profile, eps)?;
            let bench = decode_bench(*p, &set, *trials, rng::derive(*seed, 1))?;
            eprintln!(
                "n={n} |R|={} block_error_rate={}",
                set.len(),
                bench.block_error_rate()
            );
            let config = json!({
                "command": "polar decode-bench",
                "p": p, "n": n, "epsilon": epsilon, "method": method, "samples": samples,
                "trials": trials, "seed": seed,
            });
            let body = json!({
                "epsilon": eps,
                "r_size": bench.r_size,
                "trials": bench.trials,
                "block_errors": bench.block_errors,
                "block_error_rate": bench.block_error_rate(),
            });
            write_output(
                output_path(out, &format!("polar-decode-n{n}.json")),
                &document(config, "result", body),
            )?;
            Ok(EXIT_PASS)
        }
    }
}

/// One CSV row of an ASP sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub epsilon: f64,
    pub r_size: usize,
    pub block_error_rate: f64,
    pub fano_bound: f64,
    pub attack_error_rate: Option<f64>,
    pub wall_time_ms: u64,
}

/// Runs the sweep described by `config`. Profile and trial seeds for each
/// n are derived from the master seed.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>, CliError> {
    let dist = config
        .model
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let model = SourceModel::new(dist)?;
    if config.trials == 0 {
        return Err(CliError::Usage("trials must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for (k, &n) in config.n_list.iter().enumerate() {
        let start = Instant::now();
        let k = k as u64;
        let profile = construct(
            model.xor_probability(),
            n,
            config.samples,
            rng::derive(config.seed, 3 * k),
        )?;
        let epsilon = config.epsilon.resolve(n, config.samples);
        let session = AspSession::new(&model, n, epsilon, &profile)?;
        let errors = session.block_errors(config.trials, rng::derive(config.seed, 3 * k + 1))?;
        let fano = fano_bound(&model, n, session.set().len())?;
        let attack_error_rate = match config.attack {
            AttackMode::None => None,
            AttackMode::Exact => Some(exact_map_errors(&model, session.set())?.joint),
            AttackMode::Sampled => {
                security_assessment(
                    &model,
                    n,
                    epsilon,
                    &profile,
                    AttackMode::Sampled,
                    config.trials,
                    rng::derive(config.seed, 3 * k + 2),
                )?
                .attack_error_rate
            }
        };
        let wall_time_ms = if config.record_timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        rows.push(SweepRow {
            n,
            epsilon,
            r_size: session.set().len(),
            block_error_rate: errors as f64 / config.trials as f64,
            fano_bound: fano.finite,
            attack_error_rate,
            wall_time_ms,
        });
    }
    Ok(rows)
}

/// CSV text for `rows`; a fresh file also gets the format-version line and
/// the header. Each batch is preceded by its config as a comment.
pub fn sweep_csv(config: &SweepConfig, rows: &[SweepRow], fresh: bool) -> Result<String, CliError> {
    let mut text = String::new();
    if fresh {
        text.push_str(&format!("# format_version={FORMAT_VERSION}\n"));
    }
    text.push_str(&format!(
        "# config={}\n",
        serde_json::to_string(config).expect("config serializes")
    ));
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    if fresh {
        writer
            .write_record(CSV_COLUMNS)
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    for r in rows {
        writer
            .write_record([
                r.n.to_string(),
                r.epsilon.to_string(),
                r.r_size.to_string(),
                r.block_error_rate.to_string(),
                r.fano_bound.to_string(),
                r.attack_error_rate
                    .map(|a| a.to_string())
                    .unwrap_or_default(),
                r.wall_time_ms.to_string(),
            ])
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| CliError::Failed(e.to_string()))?;
    text.push_str(&String::from_utf8(bytes).expect("csv is utf-8"));
    Ok(text)
}

fn cmd_asp(command: &AspCommand) -> Result<i32, CliError> {
    match command {
        AspCommand::Sweep { config, out } => {
            let cfg: SweepConfig = read_json(config)?;
            let rows = run_sweep(&cfg)?;
            for r in &rows {
                eprintln!(
                    "n={} |R|={} block_error_rate={} fano_bound={}",
                    r.n, r.r_size, r.block_error_rate, r.fano_bound
                );
            }
            match output_path(out, "asp-sweep.csv") {
                Some(path) => {
                    let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
                    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(parent)?;
                    }
                    let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
                    file.write_all(sweep_csv(&cfg, &rows, fresh)?.as_bytes())?;
                    eprintln!("appended {} rows to {}", rows.len(), path.display());
                }
                None => write_output(None, &sweep_csv(&cfg, &rows, true)?)?,
            }
            let bound_ok = rows
                .iter()
                .all(|r| r.attack_error_rate.is_none_or(|a| a >= r.fano_bound - 1e-9));
            Ok(if bound_ok { EXIT_PASS } else { EXIT_FAIL })
        }
        AspCommand::Attack {
            model,
            p,
            n,
            epsilon,
            attack,
            trials,
            samples,
            seed,
            out,
        } => {
            let spec = match model {
                Some(path) => read_json::<DistributionSpec>(path)?,
                None => DistributionSpec::Preset(crate::infotheory::Preset::BscTriple { p: *p }),
            };
            let model =
                SourceModel::new(spec.build().map_err(|e| CliError::Usage(e.to_string()))?)?;
            let profile = construct(model.xor_probability(), *n, *samples, rng::derive(*seed, 0))?;
            let eps = epsilon.resolve(*n, *samples);
            transmitted_set(&model, *n, eps, &profile)?;
            let assessment = security_assessment(
                &model,
                *n,
                eps,
                &profile,
                (*attack).into(),
                *trials,
                rng::derive(*seed, 1),
            )?;
            eprintln!(
                "n={n} |R|={} fano_bound={} attack_error_rate={:?}",
                assessment.r_size, assessment.fano.finite, assessment.attack_error_rate
            );
            let config = json!({
                "command": "asp attack",
                "model": spec, "n": n, "epsilon": epsilon, "attack": AttackMode::from(*attack),
                "trials": trials, "samples": samples, "seed": seed,
            });
            write_output(
                output_path(out, &format!("asp-attack-n{n}.json")),
                &document(config, "assessment", to_value(&assessment)),
            )?;
            Ok(match assessment.bound_respected() {
                Some(false) => EXIT_FAIL,
                _ => EXIT_PASS,
            })
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Oneshot(OneshotCommand::Analyze {
            protocol,
            m,
            inputs,
            out,
        }) => cmd_oneshot_analyze(protocol, m, inputs, out),
        Command::Oneshot(OneshotCommand::Run {
            protocol,
            m,
            inputs,
            seeds,
            out,
        }) => cmd_oneshot_run(protocol, *m, inputs, seeds, out),
        Command::Net(c) => cmd_net(c),
        Command::Polar(c) => cmd_polar(c),
        Command::Asp(c) => cmd_asp(c),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_PASS
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_parsing() {
        assert_eq!(
            "0.25".parse::<EpsilonSetting>().unwrap(),
            EpsilonSetting::Fixed(0.25)
        );
        assert_eq!(
            "paper_schedule".parse::<EpsilonSetting>().unwrap(),
            EpsilonSetting::Named(EpsilonName::PaperSchedule)
        );
        assert!("often".parse::<EpsilonSetting>().is_err());
        let v: EpsilonSetting = serde_json::from_str("\"paper_schedule\"").unwrap();
        assert_eq!(v.resolve(1024, 2000), scheduled_epsilon(1024, 2000));
        let v: EpsilonSetting = serde_json::from_str("0.5").unwrap();
        assert_eq!(v.resolve(8, 2000), 0.5);
    }

    #[test]
    fn sweep_config_parsing() {
        let cfg: SweepConfig = serde_json::from_str(
            r#"{"model": {"preset": "bsc_triple", "p": 0.1}, "n_list": [8], "epsilon": 0.5,
                "trials": 10, "seed": 1, "attack": "exact"}"#,
        )
        .unwrap();
        assert_eq!(cfg.attack, AttackMode::Exact);
        assert_eq!(cfg.samples, 2000);
        assert!(!cfg.record_timing);
        assert!(serde_json::from_str::<SweepConfig>(r#"{"n_list": [8]}"#).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let cfg: SweepConfig = serde_json::from_str(
            r#"{"model": {"preset": "bsc_triple", "p": 0.1}, "n_list": [8], "epsilon": 0.5,
                "trials": 20, "seed": 1, "attack": "exact"}"#,
        )
        .unwrap();
        let rows = run_sweep(&cfg).unwrap();
        let row = &rows[0];
        assert!(row.attack_error_rate.unwrap() >= row.fano_bound);
        let text = sweep_csv(&cfg, &rows, true).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# format_version=1");
        assert!(lines[1].starts_with("# config={"));
        assert_eq!(lines[2], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 4);
        let appended = sweep_csv(&cfg, &rows, false).unwrap();
        assert_eq!(appended.lines().count(), 2);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(
            run(["smclab", "polar", "profile", "--p", "0.1", "--n", "3"]),
            EXIT_USAGE
        );
        assert_eq!(run(["smclab", "oneshot", "analyze", "nope"]), EXIT_USAGE);
        assert_eq!(run(["smclab", "bogus"]), EXIT_USAGE);
    }
}
