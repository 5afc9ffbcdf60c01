//! Benchmark harness: create, populate, share, receive and load with
//! encrypted sharing, timed against a baseline that stores the same final
//! number of dossiers in plain form.
//!
//! Client 0 owns every dossier and shares `pct_shared` percent of them, spread
//! round-robin over the other clients. The baseline runs the same agents
//! offline, with client 0 holding `n + shared` plain dossiers.
//!
//! The total delay of a variant is create + populate + receive + load. Share
//! time is reported separately.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use rand::distributions::Alphanumeric;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::agent::{Agent, AgentError, DossierRef, SendOutcome};
use crate::store::Row;

pub const CSV_HEADER: &str = "n_dossiers,pct_shared,phase,variant,median_ms";
pub const PHASES: [&str; 5] = ["create", "populate", "share", "receive", "load"];
pub const MAX_REPETITIONS: usize = 200;
const TABLE: &str = "dossiers";
const COLUMNS: [&str; 4] = ["id", "owner", "title", "body"];

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_dossiers: usize,
    pub n_clients: usize,
    pub pct_shared: u32,
    /// Approximate size of one serialized dossier.
    pub dossier_size: usize,
    /// Measured repetitions; one extra warm-up run is discarded.
    pub repetitions: usize,
    /// Keep repeating past `repetitions` until this much wall time has been
    /// spent on measured runs (capped at [`MAX_REPETITIONS`]). Small
    /// configurations need many runs for a stable median.
    pub min_time_ms: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_dossiers: 1000,
            n_clients: 2,
            pct_shared: 20,
            dossier_size: 200,
            repetitions: 3,
            min_time_ms: 0,
            seed: 2011,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pct_shared > 100 {
            return Err(format!("pct_shared must be at most 100, got {}", self.pct_shared));
        }
        if self.pct_shared > 0 && self.n_clients < 2 {
            return Err("sharing needs at least 2 clients".into());
        }
        if self.n_clients == 0 {
            return Err("at least one client is needed".into());
        }
        if self.repetitions == 0 {
            return Err("at least one repetition is needed".into());
        }
        Ok(())
    }

    pub fn shared_count(&self) -> usize {
        self.n_dossiers * self.pct_shared as usize / 100
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Modified,
    Baseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Modified => "modified",
            Variant::Baseline => "baseline",
        }
    }
}

/// Wall time of each phase of one run, in milliseconds, in [`PHASES`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes(pub [f64; 5]);

impl PhaseTimes {
    pub fn get(&self, phase: &str) -> f64 {
        PHASES.iter().position(|p| *p == phase).map_or(0.0, |i| self.0[i])
    }

    /// create + populate + receive + load.
    pub fn total(&self) -> f64 {
        self.get("create") + self.get("populate") + self.get("receive") + self.get("load")
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub n_dossiers: usize,
    pub pct_shared: u32,
    pub modified: PhaseTimes,
    pub baseline: PhaseTimes,
    pub modified_total: f64,
    pub baseline_total: f64,
}

impl BenchResult {
    /// (modified_total - baseline_total) / baseline_total.
    pub fn overhead(&self) -> f64 {
        (self.modified_total - self.baseline_total) / self.baseline_total
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (variant, times, total) in [
            (Variant::Modified, &self.modified, self.modified_total),
            (Variant::Baseline, &self.baseline, self.baseline_total),
        ] {
            for (phase, ms) in PHASES.iter().zip(times.0) {
                let _ = writeln!(out, "{},{},{phase},{},{ms:.3}", self.n_dossiers, self.pct_shared, variant.as_str());
            }
            let _ = writeln!(out, "{},{},total,{},{total:.3}", self.n_dossiers, self.pct_shared, variant.as_str());
        }
        out
    }
}

/// Appends result rows to `path`, writing the header first if the file is new or empty.
pub fn append_csv(path: &Path, results: &[BenchResult]) -> io::Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{CSV_HEADER}")?;
    }
    for r in results {
        file.write_all(r.csv_rows().as_bytes())?;
    }
    file.sync_data()
}

/// Provides a fresh, empty synchronizer for each run.
pub trait Launcher {
    type Guard;
    fn launch(&mut self) -> io::Result<(String, Self::Guard)>;
}

/// Runs synchronizers inside the current process.
pub struct InProcess;

impl Launcher for InProcess {
    type Guard = crate::sync::server::ServerHandle;

    fn launch(&mut self) -> io::Result<(String, Self::Guard)> {
        let sync = std::sync::Arc::new(crate::sync::Synchronizer::in_memory());
        let handle = crate::sync::server::serve(sync, "127.0.0.1:0", None)?;
        Ok((handle.addr().to_string(), handle))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("launching synchronizer: {0}")]
    Launch(io::Error),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("benchmark invariant violated: {0}")]
    Invariant(String),
}

/// Deterministic dossiers of roughly `size` bytes each.
pub fn generate_dossiers(count: usize, size: usize, seed: u64) -> Vec<Row> {
    let mut rng = StdRng::seed_from_u64(seed);
    // Insert text overhead plus id, owner and title is roughly 70 bytes.
    let body_len = size.saturating_sub(70).max(8);
    (0..count)
        .map(|i| {
            let title: String = (&mut rng).sample_iter(&Alphanumeric).take(16).map(char::from).collect();
            let body: String = (&mut rng)
                .sample_iter(&Alphanumeric)
                .take(body_len)
                .map(char::from)
                .collect();
            Row::new(TABLE)
                .with("id", i as i64)
                .with("owner", "client0")
                .with("title", title)
                .with("body", body)
        })
        .collect()
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

fn client_name(run: usize, i: usize) -> String {
    format!("r{run}c{i}")
}

fn open_agents(root: &Path, run: usize, n: usize, addr: Option<&str>) -> Result<Vec<Agent>, AgentError> {
    (0..n)
        .map(|i| Agent::open(&root.join(client_name(run, i)), addr))
        .collect()
}

fn run_once<L: Launcher>(
    cfg: &BenchConfig,
    variant: Variant,
    dossiers: &[Row],
    run: usize,
    launcher: &mut L,
) -> Result<PhaseTimes, BenchError> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let shared = cfg.shared_count();
    let (addr, _guard) = match variant {
        Variant::Modified => {
            let (addr, guard) = launcher.launch().map_err(BenchError::Launch)?;
            (Some(addr), Some(guard))
        }
        Variant::Baseline => (None, None),
    };
    let addr = addr.as_deref();

    // Identities are set up outside the timed phases.
    for i in 0..cfg.n_clients {
        let dir = root.join(client_name(run, i));
        Agent::init(&dir, &client_name(run, i), "bench")?;
        if addr.is_some() {
            Agent::open(&dir, addr)?.register()?;
        }
    }
    let mut t = PhaseTimes::default();

    let start = Instant::now();
    let mut agents = open_agents(root, run, cfg.n_clients, addr)?;
    for a in &mut agents {
        a.create_table(TABLE, &COLUMNS, "id")?;
        a.save()?;
    }
    t.0[0] = ms(start);

    let owned = match variant {
        Variant::Modified => cfg.n_dossiers,
        Variant::Baseline => cfg.n_dossiers + shared,
    };
    let start = Instant::now();
    for row in dossiers.iter().take(owned) {
        agents[0].put(row.clone())?;
    }
    agents[0].save()?;
    t.0[1] = ms(start);

    if variant == Variant::Modified && shared > 0 {
        let start = Instant::now();
        let mut refs = Vec::with_capacity(shared);
        for (k, row) in dossiers.iter().take(shared).enumerate() {
            let d = DossierRef::new(TABLE, row.get("id").cloned().expect("generated rows have ids"));
            let receiver = client_name(run, 1 + k % (cfg.n_clients - 1));
            agents[0].set_access(&d, &receiver, &COLUMNS, None)?;
            refs.push(d);
        }
        let outcomes = agents[0].send_all(&refs)?;
        t.0[2] = ms(start);
        let sent = outcomes.iter().filter(|(_, _, o)| matches!(o, SendOutcome::Sent(_))).count();
        if sent != shared {
            return Err(BenchError::Invariant(format!("sent {sent} of {shared} dossiers")));
        }

        let start = Instant::now();
        let mut received = 0;
        for a in agents.iter_mut().skip(1) {
            received += a.receive()?;
        }
        t.0[3] = ms(start);
        if received != shared {
            return Err(BenchError::Invariant(format!("received {received} of {shared} dossiers")));
        }
    }
    drop(agents);

    let start = Instant::now();
    let agents = open_agents(root, run, cfg.n_clients, addr)?;
    t.0[4] = ms(start);
    let rows: usize = agents.iter().map(|a| a.store().row_count()).sum();
    let expected = cfg.n_dossiers + shared;
    if rows != expected {
        return Err(BenchError::Invariant(format!(
            "{} run loaded {rows} dossiers, expected {expected}",
            variant.as_str()
        )));
    }
    Ok(t)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// Runs one configuration: a discarded warm-up, then at least `repetitions`
/// runs of each variant, interleaved. Reports per-phase medians.
pub fn run_benchmark<L: Launcher>(cfg: &BenchConfig, launcher: &mut L) -> Result<BenchResult, BenchError> {
    cfg.validate().map_err(BenchError::Config)?;
    let dossiers = generate_dossiers(cfg.n_dossiers + cfg.shared_count(), cfg.dossier_size, cfg.seed);
    run_once(cfg, Variant::Modified, &dossiers, 0, launcher)?;
    run_once(cfg, Variant::Baseline, &dossiers, 0, launcher)?;

    let mut runs = [Vec::new(), Vec::new()];
    let started = Instant::now();
    let mut rep = 0;
    while rep < cfg.repetitions
        || (started.elapsed().as_millis() < u128::from(cfg.min_time_ms) && rep < MAX_REPETITIONS)
    {
        rep += 1;
        runs[0].push(run_once(cfg, Variant::Modified, &dossiers, rep, launcher)?);
        runs[1].push(run_once(cfg, Variant::Baseline, &dossiers, rep, launcher)?);
    }
    let summarize = |runs: &[PhaseTimes]| {
        let mut phases = PhaseTimes::default();
        for i in 0..PHASES.len() {
            phases.0[i] = median(&mut runs.iter().map(|r| r.0[i]).collect::<Vec<_>>());
        }
        let total = median(&mut runs.iter().map(PhaseTimes::total).collect::<Vec<_>>());
        (phases, total)
    };
    let (modified, modified_total) = summarize(&runs[0]);
    let (baseline, baseline_total) = summarize(&runs[1]);
    Ok(BenchResult {
        n_dossiers: cfg.n_dossiers,
        pct_shared: cfg.pct_shared,
        modified,
        baseline,
        modified_total,
        baseline_total,
    })
}

/// Least-squares line through the points: (slope, intercept, R²).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}
