use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin(name: &str) -> Command {
    let path = match name {
        "bvp-synth" => env!("CARGO_BIN_EXE_bvp-synth"),
        "hr-estimate" => env!("CARGO_BIN_EXE_hr-estimate"),
        "device-node" => env!("CARGO_BIN_EXE_device-node"),
        "orchestrator" => env!("CARGO_BIN_EXE_orchestrator"),
        other => panic!("no binary {other}"),
    };
    Command::new(path)
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(path: &Path, hr: &str, duration: &str, seed: &str) {
    ok(bin("bvp-synth")
        .args(["--hr", hr, "--duration", duration, "--noise", "0.02", "--seed", seed, "--out"])
        .arg(path)
        .output()
        .unwrap());
}

#[test]
fn synth_writes_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    synth(&a, "72", "60", "42");
    synth(&b, "72", "60", "42");
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t_ms,value");
    assert_eq!(lines.len(), 6001);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[6000].starts_with("59990,"));
    assert!(!text.contains('\r'));
}

#[test]
fn synth_rejects_bad_rate() {
    let out = bin("bvp-synth").args(["--hr", "400", "--duration", "1"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn estimate_emits_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("hr90.csv");
    synth(&csv, "90", "120", "1");
    for mode in ["magnitude", "real-part"] {
        let out = ok(bin("hr-estimate")
            .arg("--in")
            .arg(&csv)
            .args(["--mode", mode, "--emit-jsonl"])
            .output()
            .unwrap());
        let rows: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        // (12000 - 3000) / 750 + 1
        assert_eq!(rows.len(), 13);
        assert_eq!(rows[0]["t_ms"], 29_990);
        assert_eq!(rows[1]["t_ms"], 37_490);
        for r in &rows {
            assert_eq!(r["mode"], mode);
            assert_eq!(r.as_object().unwrap().len(), 4);
            let bin = r["bin"].as_u64().unwrap();
            assert_eq!(r["bpm"], bin as f64 * 2.0);
            if mode == "magnitude" {
                assert_eq!(bin, 45);
            } else {
                // Re(X) depends on where the window starts in the beat cycle;
                // a harmonic can win when the fundamental's real part is small
                assert_eq!(bin % 45, 0, "bin {bin}");
            }
        }
    }
}

#[test]
fn estimate_reads_stdin_and_rejects_bad_mode() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("hr60.csv");
    synth(&csv, "60", "30", "3");
    let mut child = bin("hr-estimate")
        .args(["--in", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&std::fs::read(&csv).unwrap()).unwrap();
    let out = ok(child.wait_with_output().unwrap());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["t_ms\tbpm\tbin", "29990\t60.0\t30"]);

    let bad = bin("hr-estimate").arg("--in").arg(&csv).args(["--mode", "phase"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn generate_plans_counterbalances() {
    let out = ok(bin("orchestrator")
        .args(["generate-plans", "--pairs", "12", "--seed", "5"])
        .output()
        .unwrap());
    let plans: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(plans.len(), 12);
    let mut orders: Vec<String> = plans
        .iter()
        .map(|p| {
            p["segments"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| s["modality"].as_str().unwrap())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    orders.sort();
    orders.dedup();
    assert_eq!(orders.len(), 6);
}

#[test]
fn orchestrator_requires_arguments() {
    let out = bin("orchestrator").args(["--plan", "p.json"]).output().unwrap();
    assert!(!out.status.success());
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_listening(port: u16) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "nothing listening on {port}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn full_session_through_binaries() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plans.json");
    ok(bin("orchestrator")
        .args(["generate-plans", "--pairs", "6", "--seed", "9", "--out"])
        .arg(&plan)
        .output()
        .unwrap());

    let ports = [free_port(), free_port()];
    let _nodes: Vec<Killed> = [("alpha", 66, ports[0]), ("beta", 90, ports[1])]
        .into_iter()
        .map(|(id, hr, port)| {
            Killed(
                bin("device-node")
                    .args(["--id", id, "--broker", &format!("127.0.0.1:{port}")])
                    .args(["--bvp", &format!("synth:hr={hr}"), "--accel", "100", "--status-every", "0"])
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .spawn()
                    .unwrap(),
            )
        })
        .collect();
    for p in ports {
        wait_listening(p);
    }

    let log = dir.path().join("session.jsonl");
    let mut orch = bin("orchestrator")
        .arg("--plan")
        .arg(&plan)
        .args(["--pair", "2"])
        .args(["--devA", &format!("alpha@127.0.0.1:{}", ports[0])])
        .args(["--devB", &format!("127.0.0.1:{}", ports[1])])
        .arg("--log")
        .arg(&log)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = orch.stdin.take().unwrap();
    // each segment spans a few 75 ms hops at x100
    for cmd in ["", "next", "movie director's cut", "next", "status", "stop"] {
        std::thread::sleep(Duration::from_millis(600));
        writeln!(stdin, "{cmd}").unwrap();
    }
    let out = ok(orch.wait_with_output().unwrap());
    assert!(out.contains("Stopped"), "{out}");

    let text = std::fs::read_to_string(&log).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let kinds = |k: &str| records.iter().filter(|r| r["kind"] == k).count();
    assert_eq!(kinds("movie_change"), 4);
    assert_eq!(kinds("modality_change"), 3);
    assert!(kinds("hr") >= 6);
    assert!(records.windows(2).all(|w| w[0]["ts"].as_u64() <= w[1]["ts"].as_u64()));
    let movies: Vec<&str> = records
        .iter()
        .filter(|r| r["kind"] == "hr")
        .map(|r| r["movie"].as_str().unwrap())
        .collect();
    assert!(movies.contains(&"director's cut"));
    assert!(records
        .iter()
        .filter(|r| r["kind"] == "hr")
        .all(|r| r["device"] == "A" || r["device"] == "B"));
}
