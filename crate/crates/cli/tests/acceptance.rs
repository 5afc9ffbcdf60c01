//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any failed. Pass criterion numbers (e.g. `-- 1 5`) to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;
use std::time::Instant;

use dossync_core::agent::{Agent, DossierRef, UseOutcome};
use dossync_core::client::SyncClient;
use dossync_core::crypto::{
    decrypt_row, encrypt_row, sign_payload, unwrap_key, verify_payload, wrap_key, EncryptionKeyPair, RowKey,
    Signature, SigningKeyPair,
};
use dossync_core::store::{load_script, save_script, KeyLookup, LoadOptions, Row, Store};
use dossync_core::sync::server::{read_capture, serve, CAPTURE_IN};
use dossync_core::sync::Synchronizer;
use dossync_core::wire::{PendingRow, UserKeys, WrappedKeyRecord};
use rand::distributions::Uniform;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dossync")
}

/// A `dossync synchronizer` child process, killed on drop.
struct SyncProcess {
    child: Child,
    addr: String,
}

impl SyncProcess {
    fn start(log: &Path, capture: Option<&Path>) -> SyncProcess {
        let mut cmd = Command::new(bin());
        cmd.args(["synchronizer", "--listen", "127.0.0.1:0", "--log"]).arg(log);
        if let Some(c) = capture {
            cmd.arg("--capture").arg(c);
        }
        let mut child = cmd.stdin(Stdio::null()).stdout(Stdio::piped()).spawn().expect("spawn synchronizer");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        SyncProcess {
            child,
            addr: line.trim().to_string(),
        }
    }

    /// SIGKILL, no chance to flush anything.
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for SyncProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn agent_cmd(dir: &Path, addr: &str, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.arg("agent").arg("--dir").arg(dir).args(["--sync", addr]).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run dossync agent")
}

fn run_ok(dir: &Path, addr: &str, args: &[&str]) -> Result<String, String> {
    let out = agent_cmd(dir, addr, args, &[]);
    if !out.status.success() {
        return Err(format!(
            "`{}` failed ({}): {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn new_agent(root: &Path, user: &str, addr: &str) -> Result<PathBuf, String> {
    let dir = root.join(user);
    run_ok(&dir, addr, &["init-identity", "--user", user, "--password", &format!("{user}-pw")])?;
    run_ok(&dir, addr, &["register"])?;
    Ok(dir)
}

fn contains(haystack: &[u8], needle: &str) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle.as_bytes())
}

/// Uppercase letters outside the hex alphabet: a byte scan of hex text for them is exact.
fn secret(rng: &mut StdRng) -> String {
    (0..12).map(|_| rng.sample(Uniform::new_inclusive(b'G', b'Z')) as char).collect()
}

fn sent_id(stdout: &str, receiver: &str) -> Result<u64, String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("sent {receiver} ")))
        .and_then(|id| id.trim().parse().ok())
        .ok_or_else(|| format!("no `sent {receiver} <id>` line in {stdout:?}"))
}

fn journal_ids(dir: &Path) -> Vec<u64> {
    let text = std::fs::read_to_string(dir.join("journal.script")).unwrap_or_default();
    text.lines()
        .filter_map(|l| l.strip_prefix('$')?.split_once('@')?.0.parse().ok())
        .collect()
}

fn criterion_1() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("sync.log");
    let cap = tmp.path().join("frames.bin");
    let sync = SyncProcess::start(&log, Some(&cap));
    let addr = sync.addr.clone();
    let alice = new_agent(tmp.path(), "alice", &addr)?;
    let bob = new_agent(tmp.path(), "bob", &addr)?;
    run_ok(&alice, &addr, &["create-table", "dossiers", "--columns", "id,f1,f2,f3", "--pk", "id"])?;

    let mut rng = StdRng::seed_from_u64(1);
    let columns = ["f1", "f2", "f3"];
    let mut expected = BTreeMap::new();
    let mut values = Vec::new();
    for i in 0..100 {
        let row: Vec<String> = (0..3).map(|_| secret(&mut rng)).collect();
        let mut permitted: Vec<usize> = (0..3).collect();
        permitted.shuffle(&mut rng);
        permitted.truncate(2);
        permitted.sort();
        let put: Vec<String> = std::iter::once(format!("id={i}"))
            .chain(columns.iter().zip(&row).map(|(c, v)| format!("{c}={v}")))
            .collect();
        let mut args = vec!["put", "dossiers"];
        args.extend(put.iter().map(String::as_str));
        run_ok(&alice, &addr, &args)?;
        let fields = permitted.iter().map(|&k| columns[k]).collect::<Vec<_>>().join(",");
        let out = run_ok(&alice, &addr, &["grant", "dossiers", &i.to_string(), "bob", "--fields", &fields])?;
        let id = sent_id(&out, "bob")?;
        // Independent oracle: the statement a filtered copy must print as.
        let want = format!(
            "INSERT INTO dossiers(id,{}) VALUES({i},{});",
            fields,
            permitted.iter().map(|&k| format!("'{}'", row[k])).collect::<Vec<_>>().join(",")
        );
        expected.insert(id, want);
        values.extend(row);
    }
    let received = run_ok(&bob, &addr, &["receive"])?;
    ensure!(received.trim() == "100", "receive printed {received:?}");
    for (id, want) in &expected {
        let got = run_ok(&bob, &addr, &["use", &id.to_string()])?;
        ensure!(got.trim() == want, "row {id}: got {:?}, want {want:?}", got.trim());
    }
    sync.kill();

    let frames = read_capture(&cap).map_err(|e| e.to_string())?;
    let log_bytes = std::fs::read(&log).map_err(|e| e.to_string())?;
    let journal = std::fs::read(bob.join("journal.script")).map_err(|e| e.to_string())?;
    for v in &values {
        ensure!(!frames.iter().any(|(_, b)| contains(b, v)), "value {v} seen on the wire");
        ensure!(!contains(&log_bytes, v), "value {v} in the synchronizer log");
        ensure!(!contains(&journal, v), "value {v} in the receiver journal");
    }
    Ok(format!(
        "100 rows filtered exactly; {} values absent from {} frames, {} log bytes",
        values.len(),
        frames.len(),
        log_bytes.len()
    ))
}

fn criterion_2() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let sync = SyncProcess::start(&tmp.path().join("sync.log"), None);
    let addr = sync.addr.clone();
    let alice = new_agent(tmp.path(), "alice", &addr)?;
    let bob = new_agent(tmp.path(), "bob", &addr)?;
    let carol = new_agent(tmp.path(), "carol", &addr)?;
    run_ok(&alice, &addr, &["create-table", "students", "--columns", "id,name,grade", "--pk", "id"])?;
    run_ok(&alice, &addr, &["put", "students", "id=12", "name=Alice", "grade=A"])?;

    // Default policy: the line disappears.
    let id = sent_id(&run_ok(&alice, &addr, &["grant", "students", "12", "bob", "--fields", "name"])?, "bob")?;
    run_ok(&bob, &addr, &["receive"])?;
    let row = run_ok(&bob, &addr, &["use", &id.to_string()])?;
    ensure!(row.trim() == "INSERT INTO students(id,name) VALUES(12,'Alice');", "bob read {row:?}");
    run_ok(&alice, &addr, &["revoke", "students", "12", "bob"])?;
    let out = agent_cmd(&bob, &addr, &["use", &id.to_string()], &[]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure!(out.status.code() == Some(12), "use after revoke exited {}", out.status);
    ensure!(stderr.contains(&format!("row {id} is revoked")), "stderr {stderr:?}");
    ensure!(!journal_ids(&bob).contains(&id), "bob's journal still holds ${id}@");

    // Retention policy: the line stays sealed and a re-grant restores it.
    let id = sent_id(&run_ok(&alice, &addr, &["grant", "students", "12", "carol", "--fields", "grade"])?, "carol")?;
    run_ok(&carol, &addr, &["--policy", "retain", "receive"])?;
    let before = run_ok(&carol, &addr, &["use", &id.to_string()])?;
    run_ok(&alice, &addr, &["revoke", "students", "12", "carol"])?;
    let out = agent_cmd(&carol, &addr, &["use", &id.to_string()], &[]);
    ensure!(out.status.code() == Some(12), "carol use after revoke exited {}", out.status);
    run_ok(&carol, &addr, &["save"])?;
    ensure!(journal_ids(&carol) == vec![id], "carol's journal ids {:?}", journal_ids(&carol));
    let journal = std::fs::read(carol.join("journal.script")).unwrap();
    ensure!(!contains(&journal, "INSERT"), "retained line is not encrypted");
    let regrant = run_ok(&alice, &addr, &["grant", "students", "12", "carol", "--fields", "grade"])?;
    ensure!(regrant.trim() == format!("restored carol {id}"), "re-grant printed {regrant:?}");
    let fresh = run_ok(&carol, &addr, &["receive"])?;
    ensure!(fresh.trim() == "0", "re-grant re-sent the row: receive printed {fresh:?}");
    let after = run_ok(&carol, &addr, &["use", &id.to_string()])?;
    ensure!(after == before, "restored row {after:?} differs from {before:?}");
    Ok(format!("delete policy drops ${id}@ line; retain policy keeps it and re-grant restores without resend"))
}

fn criterion_3() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("db.script");
    let mut store = Store::new();
    store.create_table("students", &["id", "name"], "id").unwrap();
    for (id, name) in [(12, "Alice"), (31, "Bob")] {
        store.upsert_row(Row::new("students").with("id", id).with("name", name)).unwrap();
    }
    let mut keys = BTreeMap::new();
    for (shared_id, pk, name) in [(27u64, 40, "Dan"), (45, 41, "Eve")] {
        let mut row = Row::new("students").with("id", pk).with("name", name);
        row.shared_id = Some(shared_id);
        store.integrate_shared(row).unwrap();
        keys.insert(shared_id, RowKey::generate());
    }
    store.upsert_row(Row::new("students").with("id", 23).with("name", "Carol")).unwrap();
    let mut resolver = |id: u64| KeyLookup::Found(keys[&id].clone());
    save_script(&store, &path, &mut resolver).map_err(|e| e.to_string())?;

    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.len() == 5, "{} lines", lines.len());
    ensure!(text.ends_with('\n') && !text.contains("\n\n"), "unexpected blank lines");
    let golden = [
        "INSERT INTO students(id,name) VALUES(12,'Alice');",
        "INSERT INTO students(id,name) VALUES(31,'Bob');",
        "INSERT INTO students(id,name) VALUES(23,'Carol');",
    ];
    // Lines must match byte for byte; rows are written in primary-key order,
    // so their order need not follow the example.
    let mut plain: Vec<&str> = lines.iter().copied().filter(|l| !l.starts_with('$')).collect();
    plain.sort_unstable();
    let mut want = golden.to_vec();
    want.sort_unstable();
    ensure!(plain == want, "plain lines {plain:?}");
    let mut shared_ids = Vec::new();
    for l in lines.iter().filter(|l| l.starts_with('$')) {
        let (id, hex) = l[1..].split_once('@').ok_or(format!("bad shared line {l}"))?;
        ensure!(id == "27" || id == "45", "shared id {id}");
        ensure!(
            !hex.is_empty() && hex.bytes().all(|b| b.is_ascii_digit() || (b'A'..=b'F').contains(&b)),
            "shared line {l} is not uppercase hex"
        );
        shared_ids.push(id);
    }
    ensure!(shared_ids.len() == 2 && shared_ids[0] != shared_ids[1], "shared ids {shared_ids:?}");
    Ok(format!("five lines: {}", lines.iter().map(|l| &l[..l.len().min(12)]).collect::<Vec<_>>().join(" | ")))
}

fn criterion_4() -> Outcome {
    const OWNED: usize = 40;
    const SHARED: usize = 25;

    // Library level: counting resolver.
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("db.script");
    let mut store = Store::new();
    store.create_table("t", &["id", "v"], "id").unwrap();
    let mut keys = BTreeMap::new();
    for i in 0..OWNED {
        store.upsert_row(Row::new("t").with("id", i as i64).with("v", "owned")).unwrap();
    }
    for i in 0..SHARED {
        let mut row = Row::new("t").with("id", 1000 + i as i64).with("v", "shared");
        row.shared_id = Some(100 + i as u64);
        store.integrate_shared(row).unwrap();
        keys.insert(100 + i as u64, RowKey::generate());
    }
    let mut save_resolver = |id: u64| KeyLookup::Found(keys[&id].clone());
    save_script(&store, &path, &mut save_resolver).map_err(|e| e.to_string())?;
    let mut fetched = Vec::new();
    let mut resolver = |id: u64| {
        fetched.push(id);
        KeyLookup::Found(keys[&id].clone())
    };
    let (loaded, report) = load_script(&path, &mut resolver, &LoadOptions::default()).map_err(|e| e.to_string())?;
    ensure!(report.decrypts == SHARED, "{} decrypts", report.decrypts);
    ensure!(fetched.len() <= SHARED, "{} key fetches", fetched.len());
    ensure!(fetched.iter().all(|id| keys.contains_key(id)), "fetch for a non-shared row");
    ensure!(loaded == store, "loaded store differs");

    // Agent level: count key requests on the wire for a fresh session.
    let log = tmp.path().join("sync.log");
    let server = serve(Arc::new(Synchronizer::open(&log).unwrap()), "127.0.0.1:0", None).unwrap();
    let addr = server.addr().to_string();
    let mk = |user: &str| {
        let dir = tmp.path().join(user);
        Agent::init(&dir, user, "pw").unwrap();
        let mut a = Agent::open(&dir, Some(&addr)).unwrap();
        a.register().unwrap();
        a
    };
    let (mut alice, mut bob) = (mk("alice"), mk("bob"));
    alice.create_table("t", &["id", "v"], "id").unwrap();
    bob.create_table("mine", &["id", "v"], "id").unwrap();
    for i in 0..OWNED {
        bob.put(Row::new("mine").with("id", i as i64).with("v", "x")).unwrap();
    }
    for i in 0..SHARED {
        alice.put(Row::new("t").with("id", i as i64).with("v", "y")).unwrap();
        alice.grant(&DossierRef::new("t", i as i64), "bob", &["v"], None).unwrap();
    }
    ensure!(bob.receive().unwrap() == SHARED, "receive count");
    bob.save().unwrap();
    drop(bob);
    server.shutdown().unwrap();

    let cap = tmp.path().join("frames.bin");
    let server = serve(Arc::new(Synchronizer::open(&log).unwrap()), "127.0.0.1:0", Some(&cap)).unwrap();
    let mut bob = Agent::open(&tmp.path().join("bob"), Some(&server.addr().to_string())).unwrap();
    let r = bob.last_load().clone();
    for id in bob.shared_ids() {
        ensure!(matches!(bob.use_row(id), Ok(UseOutcome::Row(_))), "use {id}");
    }
    server.shutdown().unwrap();
    let key_requests = read_capture(&cap)
        .unwrap()
        .iter()
        .filter(|(dir, body)| *dir == CAPTURE_IN && contains(body, "key.getDecryptingKeyByIdPendingRow"))
        .count();
    ensure!(r.decrypts == SHARED, "agent load did {} decrypts", r.decrypts);
    ensure!(r.plain_rows == OWNED && r.shared_rows == SHARED, "load report {r:?}");
    ensure!(key_requests <= SHARED, "{key_requests} key requests for {SHARED} shared rows");
    Ok(format!(
        "O={OWNED} S={SHARED}: {} decrypts, {} fetches (library); {} decrypts, {key_requests} key requests incl. use (agent)",
        report.decrypts,
        fetched.len(),
        r.decrypts
    ))
}

struct SweepPoint {
    n: f64,
    pct: u32,
    modified: f64,
    overhead: f64,
}

fn parse_field(line: &str, key: &str) -> Option<f64> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.parse().ok())
}

/// Ordinary least squares, written out here as the reference for the CLI's fit.
fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy * sxy / (sxx * syy)
}

fn criterion_5() -> Vec<(String, Outcome)> {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    let started = Instant::now();
    let out = Command::new(bin())
        .args([
            "bench",
            "--sizes",
            "1000,5000,10000,50000,100000",
            "--pcts",
            "20,40",
            "--n-clients",
            "2",
            "--dossier-size",
            "200",
            "--repetitions",
            "3",
            "--min-time-ms",
            "4000",
            "--csv",
        ])
        .arg(&csv)
        .output()
        .expect("run dossync bench");
    let elapsed = started.elapsed().as_secs_f64();
    if !out.status.success() {
        let e = Err(format!("bench failed: {}", String::from_utf8_lossy(&out.stderr)));
        return ["5a", "5b", "5c"].iter().map(|c| (c.to_string(), e.clone())).collect();
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let points: Vec<SweepPoint> = stdout
        .lines()
        .filter(|l| l.starts_with("result "))
        .filter_map(|l| {
            Some(SweepPoint {
                n: parse_field(l, "n_dossiers")?,
                pct: parse_field(l, "pct_shared")? as u32,
                modified: parse_field(l, "modified_ms")?,
                overhead: parse_field(l, "overhead")?,
            })
        })
        .collect();
    let csv_rows = std::fs::read_to_string(&csv).unwrap_or_default().lines().count();

    let mut fit = Vec::new();
    let mut trend = Vec::new();
    let mut at_100k = Vec::new();
    let (mut ok_a, mut ok_b, mut ok_c) = (points.len() == 10, points.len() == 10, points.len() == 10);
    for pct in [20, 40] {
        let series: Vec<&SweepPoint> = points.iter().filter(|p| p.pct == pct).collect();
        let r2 = r_squared(&series.iter().map(|p| (p.n, p.modified)).collect::<Vec<_>>());
        ok_a &= r2 >= 0.98;
        fit.push(format!("{pct}%: R2={r2:.4}"));
        let overheads: Vec<String> = series.iter().map(|p| format!("{:.3}", p.overhead)).collect();
        let first = series.first().map_or(f64::NAN, |p| p.overhead);
        let last = series.last().map_or(f64::NAN, |p| p.overhead);
        ok_b &= last <= first;
        trend.push(format!("{pct}%: [{}]", overheads.join(", ")));
        ok_c &= last <= 0.25;
        at_100k.push(format!("{pct}%: {:.1}%", last * 100.0));
    }
    let status = |ok: bool, detail: String| if ok { Ok(detail) } else { Err(detail) };
    vec![
        ("5a".into(), status(ok_a, format!("linear fit of total vs n, {} ({csv_rows} CSV lines, sweep {elapsed:.0}s)", fit.join(", ")))),
        ("5b".into(), status(ok_b, format!("overhead 1k..100k {}", trend.join("; ")))),
        ("5c".into(), status(ok_c, format!("overhead at 100k {} (limit 25%)", at_100k.join(", ")))),
    ]
}

#[derive(Debug, PartialEq)]
struct View {
    users: Vec<UserKeys>,
    pending: BTreeMap<String, Vec<PendingRow>>,
    keys: BTreeMap<(u64, String), Option<WrappedKeyRecord>>,
}

fn observe(addr: &str, users: &[(&str, &str)], max_id: u64) -> Result<View, String> {
    let e = |e: dossync_core::client::ClientError| e.to_string();
    let mut view = View {
        users: Vec::new(),
        pending: BTreeMap::new(),
        keys: BTreeMap::new(),
    };
    let mut anon = SyncClient::connect(addr).map_err(|e| e.to_string())?;
    for name in anon.all_users().map_err(e)? {
        view.users.push(anon.public_keys(&name).map_err(e)?);
    }
    for (user, pw) in users {
        let mut c = SyncClient::connect(addr).map_err(|e| e.to_string())?;
        c.login(user, pw).map_err(e)?;
        view.pending.insert(user.to_string(), c.all_pending_rows().map_err(e)?);
        for id in 1..=max_id {
            view.keys.insert((id, user.to_string()), c.decrypting_key(id).map_err(e)?);
        }
    }
    Ok(view)
}

fn criterion_6() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("sync.log");
    let sync = SyncProcess::start(&log, None);
    let addr = sync.addr.clone();
    let alice = new_agent(tmp.path(), "alice", &addr)?;
    let bob = new_agent(tmp.path(), "bob", &addr)?;
    run_ok(&alice, &addr, &["create-table", "students", "--columns", "id,name", "--pk", "id"])?;
    let mut ids = Vec::new();
    for (pk, name) in [(1, "Ann"), (2, "Ben"), (3, "Cid")] {
        run_ok(&alice, &addr, &["put", "students", &format!("id={pk}"), &format!("name={name}")])?;
        let out = run_ok(&alice, &addr, &["grant", "students", &pk.to_string(), "bob", "--fields", "name"])?;
        ids.push(sent_id(&out, "bob")?);
    }

    // Receiver dies after storing, before deleting at the synchronizer.
    let out = agent_cmd(&bob, &addr, &["receive"], &[("DOSSYNC_FAULT", "after-receive-store")]);
    ensure!(out.status.code() == Some(30), "faulted receive exited {}", out.status);
    ensure!(journal_ids(&bob) == ids, "journal after crash holds {:?}", journal_ids(&bob));

    // Synchronizer dies too; its log must replay to the same state.
    let users = [("alice", "alice-pw"), ("bob", "bob-pw")];
    let max_id = *ids.last().unwrap() + 2;
    let before = observe(&addr, &users, max_id)?;
    ensure!(before.pending["bob"].len() == 3, "bob's mailbox before restart: {}", before.pending["bob"].len());
    sync.kill();
    let replayed = Synchronizer::open(&log).map_err(|e| e.to_string())?.snapshot();
    let sync = SyncProcess::start(&log, None);
    let addr = sync.addr.clone();
    let after = observe(&addr, &users, max_id)?;
    ensure!(after == before, "state after restart differs");
    ensure!(
        replayed.users.keys().cloned().collect::<Vec<_>>() == before.users.iter().map(|u| u.user_id.clone()).collect::<Vec<_>>(),
        "replayed users differ"
    );
    for (user, rows) in &before.pending {
        let replayed_rows: Vec<PendingRow> = replayed.mailbox(user).cloned().collect();
        ensure!(&replayed_rows == rows, "replayed mailbox of {user} differs");
    }
    for ((id, user), rec) in &before.keys {
        ensure!(replayed.keys.get(&(*id, user.clone())) == rec.as_ref(), "replayed key ({id},{user}) differs");
    }

    let again = run_ok(&bob, &addr, &["receive"])?;
    ensure!(again.trim() == "0", "second receive stored {again:?} new rows");
    let mut held = journal_ids(&bob);
    held.sort_unstable();
    ensure!(held == ids, "journal ids after retry {held:?}");
    let list = run_ok(&bob, &addr, &["list"])?;
    ensure!(list.lines().filter(|l| l.starts_with("shared ")).count() == 3, "bob list:\n{list}");
    for id in &ids {
        run_ok(&bob, &addr, &["use", &id.to_string()])?;
    }
    let empty = observe(&addr, &users, max_id)?;
    ensure!(empty.pending["bob"].is_empty(), "mailbox not drained");
    Ok(format!(
        "one local copy of {} rows after crash and retry; restart reproduced {} users, {} pending rows, {} key slots",
        ids.len(),
        before.users.len(),
        before.pending.values().map(Vec::len).sum::<usize>(),
        before.keys.len()
    ))
}

fn flip(bytes: &[u8], bit: usize) -> Vec<u8> {
    let mut out = bytes.to_vec();
    out[bit / 8] ^= 1 << (bit % 8);
    out
}

fn criterion_7() -> Outcome {
    const CASES: usize = 500;
    let mut rng = StdRng::seed_from_u64(7);
    let users: Vec<EncryptionKeyPair> = (0..5).map(|_| EncryptionKeyPair::generate()).collect();
    let mut tampers = 0usize;
    for case in 0..CASES {
        let len = rng.gen_range(0..96);
        let plain: Vec<u8> = (0..len).map(|_| rng.gen()).collect();

        let key = RowKey::generate();
        let sealed = encrypt_row(&plain, &key);
        ensure!(decrypt_row(&sealed, &key).ok() == Some(plain.clone()), "case {case}: decrypt round trip");
        for bit in 0..sealed.len() * 8 {
            ensure!(decrypt_row(&flip(&sealed, bit), &key).is_err(), "case {case}: row bit {bit} accepted");
        }
        tampers += sealed.len() * 8;

        let target = case % users.len();
        let wrapped = wrap_key(&key, &users[target].public()).map_err(|e| e.to_string())?;
        ensure!(unwrap_key(&wrapped, &users[target]).ok() == Some(key.clone()), "case {case}: unwrap");
        for bit in 0..wrapped.len() * 8 {
            ensure!(unwrap_key(&flip(&wrapped, bit), &users[target]).is_err(), "case {case}: wrap bit {bit} accepted");
        }
        tampers += wrapped.len() * 8;
        for (i, other) in users.iter().enumerate().filter(|(i, _)| *i != target) {
            ensure!(unwrap_key(&wrapped, other).is_err(), "case {case}: user {i} unwrapped user {target}'s key");
        }

        let signer = SigningKeyPair::generate();
        let sig = sign_payload(&plain, &signer);
        ensure!(verify_payload(&plain, &sig, &signer.public()), "case {case}: verify");
        for bit in 0..sig.as_bytes().len() * 8 {
            let bad = Signature::from_bytes(flip(sig.as_bytes(), bit));
            ensure!(!verify_payload(&plain, &bad, &signer.public()), "case {case}: signature bit {bit} accepted");
        }
        for bit in 0..plain.len() * 8 {
            ensure!(!verify_payload(&flip(&plain, bit), &sig, &signer.public()), "case {case}: payload bit {bit} accepted");
        }
        tampers += (sig.as_bytes().len() + plain.len()) * 8;
    }
    Ok(format!("{CASES} cases x (encrypt, wrap, sign); {tampers} single-bit tampers rejected; 5-user cross unwrap"))
}

fn guarded(f: fn() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let filter: BTreeSet<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| filter.is_empty() || filter.contains(n);
    let single: [(&str, fn() -> Outcome); 6] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("6", criterion_6),
        ("7", criterion_7),
    ];
    let mut results: Vec<(String, Outcome)> = Vec::new();
    for (name, f) in single {
        if name == "6" && wanted("5") {
            results.extend(criterion_5());
            print_line(&results[results.len() - 3..]);
        }
        if wanted(name) {
            let started = Instant::now();
            let outcome = guarded(f);
            results.push((name.to_string(), outcome.map(|d| format!("{d} [{:.1}s]", started.elapsed().as_secs_f64()))));
            print_line(std::slice::from_ref(results.last().unwrap()));
        }
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(results: &[(String, Outcome)]) {
    for (name, outcome) in results {
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS - {detail}"),
            Err(detail) => println!("criterion {name}: FAIL - {detail}"),
        }
    }
}
