//! `dossync`: agent, synchronizer and benchmark entry points.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0  | success |
//! | 1  | local error (bad input, missing table or row, file I/O) |
//! | 2  | usage error |
//! | 10 | AUTH_FAILED |
//! | 11 | NOT_FOUND |
//! | 12 | AFFIRMATIVELY_ABSENT, also used when `use` finds the row revoked |
//! | 13 | SIGNATURE_INVALID |
//! | 14 | METHOD_UNKNOWN |
//! | 15 | SCHEMA_ERROR |
//! | 16 | FRAME_TOO_LARGE |
//! | 17 | INTERNAL |
//! | 20 | synchronizer unreachable, or a key is unavailable offline |
//! | 21 | shared row failed integrity checks |
//! | 30 | injected fault (`DOSSYNC_FAULT`) |

use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dossync_core::agent::{
    Agent, AgentError, DossierRef, FaultPoint, GrantOutcome, RevokeOutcome, SendOutcome, UseOutcome,
};
use dossync_core::bench::{self, BenchConfig, BenchResult, InProcess, Launcher};
use dossync_core::store::statement::format_insert;
use dossync_core::store::{RevokedPolicy, Row, Value};
use dossync_core::sync::{server, Synchronizer};
use dossync_core::wire::ErrorCode;

/// Environment variable naming a fault point, for crash tests.
const FAULT_ENV: &str = "DOSSYNC_FAULT";

const EXIT_LOCAL: u8 = 1;
const EXIT_REVOKED: u8 = 12;
const EXIT_UNAVAILABLE: u8 = 20;
const EXIT_INTEGRITY: u8 = 21;
const EXIT_FAULT: i32 = 30;

#[derive(Parser)]
#[command(name = "dossync", version, about = "Encrypted dossier sharing through an untrusted synchronizer")]
struct Cli {
    #[command(subcommand)]
    command: Top,
}

#[derive(Subcommand)]
enum Top {
    /// Run one operation of a client agent.
    Agent(AgentArgs),
    /// Run a synchronizer until killed.
    Synchronizer(SyncArgs),
    /// Time the encrypted path against the plain baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct AgentArgs {
    /// Agent state directory.
    #[arg(long)]
    dir: PathBuf,
    /// Synchronizer address (host:port). Without it the agent works offline.
    #[arg(long = "sync")]
    sync_addr: Option<String>,
    /// Revoked-row policy, stored in the agent state once given.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[command(subcommand)]
    op: AgentOp,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Delete,
    Retain,
}

#[derive(Subcommand)]
enum AgentOp {
    /// Create a new identity in the state directory.
    InitIdentity {
        #[arg(long)]
        user: String,
        #[arg(long)]
        password: String,
    },
    /// Publish this identity's public keys to the synchronizer.
    Register,
    /// Create a table.
    CreateTable {
        name: String,
        /// Comma-separated column names.
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        /// Primary key column.
        #[arg(long)]
        pk: String,
    },
    /// Insert or replace an owned row from column=value pairs.
    Put {
        table: String,
        #[arg(required = true)]
        values: Vec<String>,
    },
    /// Grant a receiver access to some fields of a dossier and deliver it.
    Grant {
        table: String,
        pk: String,
        receiver: String,
        /// Comma-separated permitted columns; the primary key is always included.
        #[arg(long, value_delimiter = ',')]
        fields: Vec<String>,
        /// Expiry of the deposited key, in milliseconds since the epoch.
        #[arg(long)]
        expiry: Option<u64>,
    },
    /// Send the current version of a dossier to every granted receiver.
    Send { table: String, pk: String },
    /// Fetch pending rows into the journal; prints how many were new.
    Receive,
    /// Open a received row.
    Use { id: u64 },
    /// Revoke a receiver's access to a dossier.
    Revoke {
        table: String,
        pk: String,
        receiver: String,
    },
    /// Write the journal and agent state.
    Save,
    /// Load the journal and print the load report.
    Load,
    /// Print every row held locally.
    List,
}

#[derive(Args)]
struct SyncArgs {
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:7411")]
    listen: String,
    /// Operation log. State is replayed from it on start. Without it the state is in memory only.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Record every frame to this file (direction byte, length, body).
    #[arg(long)]
    capture: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1000)]
    n_dossiers: usize,
    #[arg(long, default_value_t = 2)]
    n_clients: usize,
    #[arg(long, default_value_t = 20)]
    pct_shared: u32,
    /// Approximate dossier size in bytes.
    #[arg(long, default_value_t = 200)]
    dossier_size: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Repeat beyond --repetitions until the measured runs took this long.
    #[arg(long, default_value_t = 0)]
    min_time_ms: u64,
    #[arg(long, default_value_t = 2011)]
    seed: u64,
    /// Sweep these dossier counts instead of --n-dossiers.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Sweep these percentages instead of --pct-shared.
    #[arg(long, value_delimiter = ',')]
    pcts: Vec<u32>,
    /// CSV file to append results to.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Run the synchronizer on a thread instead of a child process.
    #[arg(long)]
    in_process: bool,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if let Some(agent) = e.downcast_ref::<AgentError>() {
            return Failure {
                code: agent_exit_code(agent),
                message: format!("{e:#}"),
            };
        }
        Failure {
            code: EXIT_LOCAL,
            message: format!("{e:#}"),
        }
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        Failure {
            code: agent_exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn wire_exit_code(code: ErrorCode) -> u8 {
    match code {
        ErrorCode::AuthFailed => 10,
        ErrorCode::NotFound => 11,
        ErrorCode::AffirmativelyAbsent => 12,
        ErrorCode::SignatureInvalid => 13,
        ErrorCode::MethodUnknown => 14,
        ErrorCode::SchemaError => 15,
        ErrorCode::FrameTooLarge => 16,
        ErrorCode::Internal => 17,
    }
}

fn agent_exit_code(e: &AgentError) -> u8 {
    match e {
        AgentError::Remote(body) => wire_exit_code(body.code),
        AgentError::Offline(_) | AgentError::Protocol(_) => EXIT_UNAVAILABLE,
        AgentError::Integrity(_) => EXIT_INTEGRITY,
        _ => EXIT_LOCAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Top::Agent(args) => run_agent(args),
        Top::Synchronizer(args) => run_synchronizer(args).map_err(Failure::from),
        Top::Bench(args) => run_bench(args).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn fault_from_env() -> anyhow::Result<Option<FaultPoint>> {
    match std::env::var(FAULT_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.is_empty() => Ok(None),
        Ok(v) if v == "after-receive-store" => Ok(Some(FaultPoint::AfterReceiveStore)),
        Ok(v) => bail!("unknown {FAULT_ENV} value {v:?}"),
    }
}

fn dossier(agent: &Agent, table: &str, pk: &str) -> Result<DossierRef, Failure> {
    if agent.store().table(table).is_none() {
        return Err(AgentError::NotFound(format!("table {table}")).into());
    }
    Ok(DossierRef::new(table, Value::parse_loose(pk)))
}

fn parse_row(table: &str, pairs: &[String]) -> Result<Row, Failure> {
    let mut row = Row::new(table);
    for pair in pairs {
        let (column, value) = pair.split_once('=').ok_or_else(|| Failure {
            code: EXIT_LOCAL,
            message: format!("expected column=value, got {pair:?}"),
        })?;
        row = row.with(column, Value::parse_loose(value));
    }
    Ok(row)
}

fn print_send_outcomes(outcomes: &[(String, SendOutcome)]) {
    for (receiver, outcome) in outcomes {
        match outcome {
            SendOutcome::Sent(id) => println!("sent {receiver} {id}"),
            SendOutcome::Queued => println!("queued {receiver}"),
            SendOutcome::Rejected(e) => println!("rejected {receiver} {}", e.code.as_str()),
        }
    }
}

fn run_agent(args: AgentArgs) -> Result<(), Failure> {
    if let AgentOp::InitIdentity { user, password } = &args.op {
        Agent::init(&args.dir, user, password)?;
        println!("identity {user}");
        return Ok(());
    }
    let mut agent = Agent::open(&args.dir, args.sync_addr.as_deref())?;
    if let Some(p) = args.policy {
        let policy = match p {
            PolicyArg::Delete => RevokedPolicy::Delete,
            PolicyArg::Retain => RevokedPolicy::Retain,
        };
        if agent.policy() != policy {
            agent.set_policy(policy)?;
            agent.reload()?;
        }
    }
    agent.set_fault(fault_from_env().map_err(Failure::from)?);

    match args.op {
        AgentOp::InitIdentity { .. } => unreachable!("handled above"),
        AgentOp::Register => {
            agent.register()?;
            println!("registered {}", agent.user_id());
        }
        AgentOp::CreateTable { name, columns, pk } => {
            let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
            agent.create_table(&name, &columns, &pk)?;
            agent.save()?;
            println!("table {name}");
        }
        AgentOp::Put { table, values } => {
            let row = parse_row(&table, &values)?;
            agent.put(row.clone())?;
            agent.save()?;
            println!("{}", format_insert(&row));
        }
        AgentOp::Grant {
            table,
            pk,
            receiver,
            fields,
            expiry,
        } => {
            let d = dossier(&agent, &table, &pk)?;
            let fields: Vec<&str> = fields.iter().map(String::as_str).collect();
            match agent.grant(&d, &receiver, &fields, expiry)? {
                GrantOutcome::Sent(id) => println!("sent {receiver} {id}"),
                GrantOutcome::Restored(id) => println!("restored {receiver} {id}"),
                GrantOutcome::Queued => println!("queued {receiver}"),
            }
            agent.save()?;
        }
        AgentOp::Send { table, pk } => {
            let d = dossier(&agent, &table, &pk)?;
            let outcomes = agent.send(&d)?;
            print_send_outcomes(&outcomes);
            agent.save()?;
        }
        AgentOp::Receive => {
            let n = match agent.receive() {
                Ok(n) => n,
                Err(AgentError::Injected(point)) => {
                    eprintln!("fault {point:?}: stopping without cleanup");
                    std::process::exit(EXIT_FAULT);
                }
                Err(e) => return Err(e.into()),
            };
            agent.save()?;
            println!("{n}");
        }
        AgentOp::Use { id } => {
            let revoked_at_load = agent.last_load().revoked.contains(&id);
            let outcome = match agent.use_row(id) {
                Err(AgentError::NotFound(_)) if revoked_at_load => UseOutcome::Revoked,
                other => other?,
            };
            agent.save()?;
            match outcome {
                UseOutcome::Row(row) => println!("{}", format_insert(&row)),
                UseOutcome::Revoked => {
                    return Err(Failure {
                        code: EXIT_REVOKED,
                        message: format!("row {id} is revoked"),
                    })
                }
                UseOutcome::Unavailable => {
                    return Err(Failure {
                        code: EXIT_UNAVAILABLE,
                        message: format!("key for row {id} is unavailable"),
                    })
                }
            }
        }
        AgentOp::Revoke { table, pk, receiver } => {
            let d = DossierRef::new(table, Value::parse_loose(&pk));
            match agent.revoke(&d, &receiver)? {
                RevokeOutcome::Done => println!("revoked {receiver}"),
                RevokeOutcome::Pending => println!("pending {receiver}"),
            }
            agent.save()?;
        }
        AgentOp::Save => {
            let report = agent.save()?;
            println!("saved {} {} {}", report.plain_lines, report.shared_lines, report.sealed_lines);
        }
        AgentOp::Load => {
            let r = agent.last_load().clone();
            println!("plain {}", r.plain_rows);
            println!("shared {}", r.shared_rows);
            for (label, ids) in [
                ("revoked", &r.revoked),
                ("unavailable", &r.unavailable),
                ("integrity", &r.integrity_failures),
                ("conflict", &r.conflicts),
                ("superseded", &r.superseded),
            ] {
                for id in ids {
                    println!("{label} {id}");
                }
            }
            for (line, message) in &r.parse_errors {
                println!("parse-error {line} {message}");
            }
        }
        AgentOp::List => {
            for table in agent.store().tables() {
                for row in table.rows() {
                    match row.shared_id {
                        None => println!("owned {}", format_insert(row)),
                        Some(id) => println!("shared {id} {}", format_insert(row)),
                    }
                }
            }
            for (id, _) in agent.store().sealed_lines() {
                println!("sealed {id}");
            }
        }
    }
    Ok(())
}

fn run_synchronizer(args: SyncArgs) -> anyhow::Result<()> {
    let sync = match &args.log {
        Some(path) => Synchronizer::open(path).with_context(|| format!("opening log {}", path.display()))?,
        None => Synchronizer::in_memory(),
    };
    let handle = server::serve(Arc::new(sync), &args.listen, args.capture.as_deref())
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", handle.addr())?;
    out.flush()?;
    drop(out);
    handle.wait();
    Ok(())
}

/// Runs each synchronizer as a child `dossync synchronizer` process.
struct ChildProcess {
    exe: PathBuf,
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

impl Launcher for ChildProcess {
    type Guard = ChildGuard;

    fn launch(&mut self) -> io::Result<(String, ChildGuard)> {
        let child = Command::new(&self.exe)
            .args(["synchronizer", "--listen", "127.0.0.1:0"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .spawn()?;
        let mut guard = ChildGuard(child);
        let stdout = guard.0.stdout.take().expect("stdout is piped");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line)?;
        let addr = line.trim().to_string();
        if addr.is_empty() {
            return Err(io::Error::new(io::ErrorKind::Other, "synchronizer exited before listening"));
        }
        Ok((addr, guard))
    }
}

fn run_bench(args: BenchArgs) -> anyhow::Result<()> {
    let sizes = if args.sizes.is_empty() { vec![args.n_dossiers] } else { args.sizes.clone() };
    let pcts = if args.pcts.is_empty() { vec![args.pct_shared] } else { args.pcts.clone() };
    let mut child = ChildProcess {
        exe: std::env::current_exe().context("locating the dossync executable")?,
    };
    for &pct in &pcts {
        let mut results = Vec::new();
        for &n in &sizes {
            let cfg = BenchConfig {
                n_dossiers: n,
                n_clients: args.n_clients,
                pct_shared: pct,
                dossier_size: args.dossier_size,
                repetitions: args.repetitions,
                min_time_ms: args.min_time_ms,
                seed: args.seed,
            };
            let result = if args.in_process {
                bench::run_benchmark(&cfg, &mut InProcess)
            } else {
                bench::run_benchmark(&cfg, &mut child)
            }
            .map_err(|e| anyhow!("n={n} pct={pct}: {e}"))?;
            print_result(&result);
            if let Some(csv) = &args.csv {
                bench::append_csv(csv, std::slice::from_ref(&result))
                    .with_context(|| format!("writing {}", csv.display()))?;
            }
            results.push(result);
        }
        if results.len() >= 2 {
            let xs: Vec<f64> = results.iter().map(|r| r.n_dossiers as f64).collect();
            let ys: Vec<f64> = results.iter().map(|r| r.modified_total).collect();
            let (slope, intercept, r2) = bench::linear_fit(&xs, &ys);
            println!("fit pct_shared={pct} slope_ms={slope:.6} intercept_ms={intercept:.3} r2={r2:.5}");
        }
    }
    Ok(())
}

fn print_result(r: &BenchResult) {
    println!(
        "result n_dossiers={} pct_shared={} modified_ms={:.3} baseline_ms={:.3} share_ms={:.3} overhead={:.5}",
        r.n_dossiers,
        r.pct_shared,
        r.modified_total,
        r.baseline_total,
        r.modified.get("share"),
        r.overhead()
    );
}
