use std::fmt;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use meshgate::auth::IssueRequest;
use meshgate::clock::{Clock, ClockMode, Pacer, SharedClock, SimClock, SystemClock};
use meshgate::facility::{
    load_scenario, run_consumer, run_producer, run_scenario, ConsumerConfig, FacilityError, GatewayApi,
    ProducerConfig, LCLSTREAM_SMALL,
};
use meshgate::gateway::{AuditFilter, Gateway, GatewayConfig, GatewayError};
use meshgate::ids::Id128;
use meshgate::policy::Verdict;
use meshgate::profiles::{check_promotion_readiness, EnclaveLevel, ProfileTable, WorkflowManifest};
use meshgate::scheduler::{read_trace, replay, write_action_log, ReservationWindow, SchedulerConfig, Tier};
use meshgate_cli::{server, HttpGateway};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "meshgate", version, about = "Facility API gateway, scheduler, and streaming node")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Clock source: `simulated` or `real`.
    #[arg(long, global = true, value_parser = parse_clock)]
    clock: Option<ClockMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Remote {
    /// Gateway base URL.
    #[arg(long, env = "MESHGATE_URL", default_value = "http://127.0.0.1:8080")]
    gateway: String,
    /// Bearer token.
    #[arg(long, env = "MESHGATE_TOKEN", hide_env_values = true)]
    token: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gateway over HTTP and print a bootstrap admin token.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
        /// Token signing secret when no config file is given.
        #[arg(long, env = "MESHGATE_SECRET", hide_env_values = true)]
        secret: Option<String>,
        #[arg(long, value_parser = parse_level)]
        profile: Option<EnclaveLevel>,
        /// Simulated clock start, Unix seconds.
        #[arg(long)]
        origin: Option<u64>,
    },
    IssueToken {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        project: String,
        /// Repeat or comma-separate.
        #[arg(long = "scope", value_delimiter = ',', required = true)]
        scopes: Vec<String>,
        #[arg(long, default_value_t = 3600)]
        ttl: u64,
        #[arg(long)]
        mfa: bool,
        #[arg(long, value_parser = parse_level, default_value = "development")]
        max_enclave: EnclaveLevel,
    },
    RevokeToken {
        #[command(flatten)]
        remote: Remote,
        /// Token id, 32 hex digits.
        token_id: String,
    },
    LoadPolicies {
        #[command(flatten)]
        remote: Remote,
        file: PathBuf,
    },
    AddTemplate {
        #[command(flatten)]
        remote: Remote,
        file: PathBuf,
    },
    AddReservation {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        project: String,
        /// Unix seconds.
        #[arg(long)]
        start: u64,
        #[arg(long)]
        end: u64,
        #[arg(long, value_parser = parse_tier)]
        tier: Tier,
        #[arg(long)]
        node_cap: u32,
    },
    ApproveReservation {
        #[command(flatten)]
        remote: Remote,
        reservation_id: u64,
    },
    /// Print matching audit records as JSON lines.
    AuditQuery {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
        #[arg(long, value_parser = parse_verdict)]
        verdict: Option<Verdict>,
        #[arg(long)]
        request_id: Option<String>,
    },
    ProfileSet {
        #[command(flatten)]
        remote: Remote,
        #[arg(value_parser = parse_level)]
        profile: EnclaveLevel,
    },
    /// Stream seeded payloads into a channel.
    Producer {
        #[command(flatten)]
        remote: Remote,
        #[arg(long, default_value = "")]
        template: String,
        #[arg(long, default_value = "")]
        target: String,
        /// Publish on an existing channel instead of provisioning one.
        #[arg(long)]
        channel: Option<u32>,
        #[arg(long, default_value_t = 1024)]
        size: u64,
        #[arg(long, default_value_t = 10.0)]
        rate: f64,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, default_value = "frames")]
        topic: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        teardown: bool,
    },
    /// Subscribe and count messages; exits 2 if the stream ends short.
    Consumer {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        channel: u32,
        #[arg(long, default_value = "frames")]
        topic: String,
        #[arg(long)]
        expected: u64,
        #[arg(long, default_value_t = 30)]
        idle_timeout: u64,
    },
    /// Run a scenario file on a fresh in-process stack.
    Scenario {
        file: Option<PathBuf>,
        /// Run a bundled scenario by name.
        #[arg(long, conflicts_with = "file")]
        bundled: Option<String>,
    },
    /// Check a workflow manifest against a target enclave profile.
    Readiness {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_level)]
        target: EnclaveLevel,
        #[arg(long)]
        overrides: Option<PathBuf>,
    },
    /// Replay a JSONL job trace and print the action log as JSON lines.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 64)]
        nodes: u32,
        /// Scheduler config JSON; overrides `--nodes`.
        #[arg(long)]
        scheduler_config: Option<PathBuf>,
        /// JSON array of reservation windows.
        #[arg(long)]
        windows: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        origin: u64,
        #[arg(long)]
        until: u64,
    },
}

fn parse_clock(s: &str) -> Result<ClockMode, String> {
    s.parse()
}

fn parse_level(s: &str) -> Result<EnclaveLevel, String> {
    s.parse().map_err(|e: meshgate::profiles::ProfileError| e.to_string())
}

fn parse_tier(s: &str) -> Result<Tier, String> {
    s.parse()
}

fn parse_verdict(s: &str) -> Result<Verdict, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("verdict must be allow or deny, not {s:?}"))
}

/// An error with a stable name for stderr.
#[derive(Debug)]
struct Failure {
    code: String,
    message: String,
}

impl Failure {
    fn new(code: &str, message: impl fmt::Display) -> Self {
        Failure { code: code.to_string(), message: message.to_string() }
    }
}

impl From<FacilityError> for Failure {
    fn from(e: FacilityError) -> Self {
        let message = match &e {
            FacilityError::Api { message, .. } => message.clone(),
            other => other.to_string(),
        };
        Failure { code: e.code().to_string(), message }
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Failure::new(e.code(), &e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new("IO_ERROR", e)
    }
}

type Outcome = Result<ExitCode, Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new("IO_ERROR", format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::new("INVALID_CONFIG", format!("{}: {e}", path.display())))
}

struct Out {
    json: bool,
}

impl Out {
    /// Prints `value` in JSON mode, otherwise `text`.
    fn emit(&self, value: &Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }
}

fn remote(r: &Remote) -> Result<HttpGateway, Failure> {
    Ok(HttpGateway::new(&r.gateway)?)
}

fn pacer(mode: ClockMode) -> Pacer {
    let sim = SimClock::at_secs(SystemClock.now_secs());
    Pacer::for_mode(mode, &sim)
}

fn run(cli: Cli) -> Outcome {
    let out = Out { json: cli.json };
    let mode = cli.clock;
    match cli.command {
        Command::Serve { config, listen, secret, profile, origin } => {
            serve(&out, mode.unwrap_or(ClockMode::Real), config, listen, secret, profile, origin)
        }
        Command::IssueToken { remote: r, subject, project, scopes, ttl, mfa, max_enclave } => {
            let req = IssueRequest { subject, project, scopes, ttl_seconds: ttl, mfa, max_enclave };
            let v = remote(&r)?.call("POST", "/v1/tokens", &r.token, Some(&json!(req)))?;
            out.emit(&v, || v["token"].as_str().unwrap_or_default().to_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::RevokeToken { remote: r, token_id } => {
            let v = remote(&r)?.call("DELETE", &format!("/v1/tokens/{token_id}"), &r.token, None)?;
            out.emit(&v, || format!("revoked {}", v["revoked"]));
            Ok(ExitCode::SUCCESS)
        }
        Command::LoadPolicies { remote: r, file } => {
            let v = remote(&r)?.call_raw("POST", "/v1/policies", &r.token, read(&file)?.into_bytes())?;
            out.emit(&v, || format!("loaded {} rules", v["rules"]));
            Ok(ExitCode::SUCCESS)
        }
        Command::AddTemplate { remote: r, file } => {
            let v = remote(&r)?.call_raw("POST", "/v1/templates", &r.token, read(&file)?.into_bytes())?;
            out.emit(&v, || v["template_id"].as_str().unwrap_or_default().to_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::AddReservation { remote: r, project, start, end, tier, node_cap } => {
            let w = ReservationWindow { window_id: 0, project, start, end, elevated_tier: tier, node_cap };
            let v = remote(&r)?.call("POST", "/v1/reservations", &r.token, Some(&json!(w)))?;
            out.emit(&v, || reservation_text(&v));
            Ok(ExitCode::SUCCESS)
        }
        Command::ApproveReservation { remote: r, reservation_id } => {
            let v = remote(&r)?.call("POST", &format!("/v1/reservations/{reservation_id}/approve"), &r.token, None)?;
            out.emit(&v, || reservation_text(&v));
            Ok(ExitCode::SUCCESS)
        }
        Command::AuditQuery { remote: r, subject, from, to, verdict, request_id } => {
            let request_id = match request_id {
                Some(s) => Some(Id128::from_hex(&s).ok_or_else(|| Failure::new("INVALID_REQUEST", "request id must be 32 hex digits"))?),
                None => None,
            };
            let filter = AuditFilter { subject, from, to, verdict, request_id };
            let v = remote(&r)?.get_query("/v1/audit", &r.token, &filter)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            for rec in v["records"].as_array().into_iter().flatten() {
                writeln!(lock, "{rec}")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ProfileSet { remote: r, profile } => {
            let v = remote(&r)?.call("POST", "/v1/profile", &r.token, Some(&json!({"profile": profile})))?;
            out.emit(&v, || format!("profile {}", v["profile"]["name"].as_str().unwrap_or(profile.name())));
            Ok(ExitCode::SUCCESS)
        }
        Command::Producer { remote: r, template, target, channel, size, rate, duration, topic, seed, teardown } => {
            let cfg = ProducerConfig {
                token: r.token.clone(),
                template_id: template,
                internal_target: target,
                channel_id: channel,
                message_bytes: size,
                rate,
                duration_seconds: duration,
                topic,
                seed,
                teardown,
            };
            let s = run_producer(&remote(&r)?, &cfg, &pacer(mode.unwrap_or(ClockMode::Real)))?;
            out.emit(&json!(s), || {
                format!(
                    "channel {}\nsent {}\nrejected {}\nachieved_rate {:.2}\nchecksum {}",
                    s.channel_id, s.sent, s.rejected, s.achieved_rate, s.checksum
                )
            });
            Ok(ExitCode::SUCCESS)
        }
        Command::Consumer { remote: r, channel, topic, expected, idle_timeout } => {
            let cfg = ConsumerConfig {
                token: r.token.clone(),
                channel_id: channel,
                topic,
                expected_count: expected,
                idle_timeout_seconds: idle_timeout,
            };
            let s = run_consumer(&remote(&r)?, &cfg)?;
            out.emit(&json!(s), || format!("received {}/{}\nchecksum {}", s.received, s.expected, s.checksum));
            Ok(ExitCode::from(s.exit_code() as u8))
        }
        Command::Scenario { file, bundled } => {
            let text = match (file, bundled.as_deref()) {
                (Some(f), _) => read(&f)?,
                (None, Some("lclstream_small")) => LCLSTREAM_SMALL.to_string(),
                (None, Some(other)) => return Err(Failure::new("UNKNOWN_SCENARIO", format!("no bundled scenario {other:?}"))),
                (None, None) => return Err(Failure::new("INVALID_REQUEST", "give a scenario file or --bundled NAME")),
            };
            let sc = load_scenario(&text)?;
            let report = run_scenario(&sc, mode.unwrap_or(ClockMode::Simulated))?;
            out.emit(&json!(report), || {
                let mut t = String::new();
                for s in &report.steps {
                    let status = if s.ok && s.assertions.iter().all(|a| a.pass) { "ok" } else { "FAIL" };
                    t.push_str(&format!("[{status}] t={} {}", s.at, s.action));
                    if let Some(e) = &s.error {
                        t.push_str(&format!(": {e}"));
                    }
                    t.push('\n');
                    for a in &s.assertions {
                        let mark = if a.pass { "pass" } else { "FAIL" };
                        t.push_str(&format!("    {mark} {} = {} (expected {})\n", a.metric, a.observed, a.expected));
                    }
                }
                t.push_str(if report.pass { "scenario PASS" } else { "scenario FAIL" });
                t
            });
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Readiness { manifest, target, overrides } => {
            let table = match overrides {
                Some(p) => ProfileTable::with_overrides(&read(&p)?).map_err(|e| Failure::new(e.code(), e))?,
                None => ProfileTable::default(),
            };
            let m: WorkflowManifest = parse_json(&manifest)?;
            m.validate().map_err(|e| Failure::new(e.code(), e))?;
            let report = check_promotion_readiness(&m, table.get(target));
            out.emit(&json!(report), || report.to_table().trim_end().to_string());
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Replay { trace, nodes, scheduler_config, windows, origin, until } => {
            let cfg = match scheduler_config {
                Some(p) => parse_json(&p)?,
                None => SchedulerConfig::new(nodes),
            };
            let windows: Vec<ReservationWindow> = match windows {
                Some(p) => parse_json(&p)?,
                None => Vec::new(),
            };
            let entries = read_trace(BufReader::new(fs::File::open(&trace)?))
                .map_err(|e| Failure::new("INVALID_TRACE", format!("{}: {e}", trace.display())))?;
            let sched = replay(cfg, origin, &entries, &windows, until).map_err(|e| Failure::new(e.code(), e))?;
            let stdout = io::stdout();
            write_action_log(stdout.lock(), sched.action_log())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn reservation_text(v: &Value) -> String {
    match v["status"].as_str() {
        Some("pending-approval") => format!("pending-approval {}", v["reservation_id"]),
        Some(s) => format!("{s} {}", v["window"]["window_id"]),
        None => v.to_string(),
    }
}

fn serve(
    out: &Out,
    mode: ClockMode,
    config: Option<PathBuf>,
    listen: Option<std::net::SocketAddr>,
    secret: Option<String>,
    profile: Option<EnclaveLevel>,
    origin: Option<u64>,
) -> Outcome {
    let mut cfg = match (config, secret) {
        (Some(p), _) => GatewayConfig::load(&p)?,
        (None, Some(s)) => GatewayConfig::new(&s),
        (None, None) => return Err(Failure::new("INVALID_CONFIG", "pass --config or --secret")),
    };
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if let Some(p) = profile {
        cfg.profile = p;
    }
    let clock: SharedClock = match mode {
        ClockMode::Real => Arc::new(SystemClock),
        ClockMode::Simulated => Arc::new(SimClock::at_secs(origin.unwrap_or_else(|| SystemClock.now_secs()))),
    };
    let gw = Arc::new(Gateway::from_config(&cfg, clock.clone())?);
    let admin = gw
        .authority()
        .issue_token(
            &IssueRequest {
                subject: "bootstrap".into(),
                project: "ops".into(),
                scopes: vec!["admin.*".into(), "status.read".into()],
                ttl_seconds: gw.profile().max_token_ttl_seconds,
                mfa: true,
                max_enclave: EnclaveLevel::Leadership,
            },
            clock.now_secs(),
        )
        .map_err(|e| Failure::new(e.code(), e))?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
        let addr = listener.local_addr()?;
        out.emit(&json!({"listen": format!("http://{addr}"), "admin_token": admin, "profile": gw.profile().name}), || {
            format!("listening on http://{addr}\nprofile {}\nadmin token {admin}", gw.profile().name)
        });
        io::stdout().flush()?;
        log::info!("gateway listening on {addr}");
        server::serve(gw, listener).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(f) if f.message.starts_with(&f.code) => {
            eprintln!("error: {}", f.message);
            ExitCode::FAILURE
        }
        Err(f) => {
            eprintln!("error: {}: {}", f.code, f.message);
            ExitCode::FAILURE
        }
    }
}
