use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reuseplan"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("spawn");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = r#"{
  "backbone": {"kind": "toy_dit", "layers": 2, "tokens": 8, "channels": 16, "heads": 2, "cond_classes": 10, "seed": 1},
  "steps": 12,
  "inputs": 2
}"#;

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

#[test]
fn calibrate_echoes_preset_thresholds() {
    let dir = workdir();
    run_ok(
        &["calibrate", "--config", "small.json", "--preset", "dit-fast", "--out", "plan.json"],
        dir.path(),
    );
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    let th = &plan["thresholds"];
    assert_eq!(th["tau_step"], 0.63);
    assert_eq!(th["tau_mhsa"], 0.22);
    assert_eq!(th["tau_ffn"], 0.22);
    assert_eq!(plan["provenance"]["phase"], "corrected");
    let inspect = stdout(&run_ok(&["plan-inspect", "plan.json"], dir.path()));
    assert!(inspect.contains("phase: corrected"), "{inspect}");
    assert!(inspect.contains("tau_step: 0.63"), "{inspect}");
    assert!(inspect.contains("reuse mhsa:"), "{inspect}");
}

#[test]
fn phase1_plan_needs_explicit_acceptance() {
    let dir = workdir();
    run_ok(
        &["calibrate", "--config", "small.json", "--preset", "dit-fast", "--phase1-only", "--out", "p1.json"],
        dir.path(),
    );
    let inspect = stdout(&run_ok(&["plan-inspect", "p1.json"], dir.path()));
    assert!(inspect.contains("phase: initial"));
    let refused = bin()
        .args(["run", "--config", "small.json", "--plan", "p1.json"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!refused.status.success());
    run_ok(
        &["run", "--config", "small.json", "--plan", "p1.json", "--accept-initial"],
        dir.path(),
    );
}

#[test]
fn baseline_checksum_is_stable() {
    let dir = workdir();
    let a = stdout(&run_ok(&["run", "--config", "small.json", "--baseline", "--seed", "5"], dir.path()));
    let b = stdout(&run_ok(&["run", "--config", "small.json", "--baseline", "--seed", "5"], dir.path()));
    let c = stdout(&run_ok(&["run", "--config", "small.json", "--baseline", "--seed", "6"], dir.path()));
    let sum = |s: &str| s.lines().find(|l| l.starts_with("checksum:")).unwrap().to_string();
    assert_eq!(sum(&a), sum(&b));
    assert_ne!(sum(&a), sum(&c));
}

#[test]
fn run_report_and_plan_checksum() {
    let dir = workdir();
    run_ok(
        &["calibrate", "--config", "small.json", "--preset", "dit-slow", "--out", "plan.json"],
        dir.path(),
    );
    let out = stdout(&run_ok(
        &["run", "--config", "small.json", "--plan", "plan.json", "--out", "report.json"],
        dir.path(),
    ));
    assert!(out.contains("final psnr:"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(out.contains(report["checksum"].as_str().unwrap()));
    assert_eq!(report["stats"]["steps"], 12);
}

#[test]
fn heatmap_of_constant_scripted_rates_is_uniform() {
    let dir = workdir();
    fs::write(
        dir.path().join("scripted.json"),
        r#"{"backbone": {"kind": "scripted", "layers": 3, "tokens": 4, "channels": 16, "heads": 1,
            "cond_classes": 1, "seed": 0, "profile": {"default": 0.5}}, "steps": 10, "inputs": 1}"#,
    )
    .unwrap();
    run_ok(&["heatmap", "--config", "scripted.json", "--out", "hm"], dir.path());
    let pgm = fs::read(dir.path().join("hm.pgm")).unwrap();
    let header = b"P5\n10 3\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let px = &pgm[header.len()..];
    assert_eq!(px.len(), 30);
    for l in 0..3 {
        let row = &px[l * 10..(l + 1) * 10];
        // boundary columns paint as log2(1) = 0, above the interior log2(0.5) = -1
        assert_eq!((row[0], row[9]), (255, 255));
        assert!(row[1..9].iter().all(|&p| p == 0), "{row:?}");
    }
    let csv = fs::read_to_string(dir.path().join("hm.csv")).unwrap();
    assert!(csv.starts_with("t,l,value\n"));
}

#[test]
fn rates_then_heatmap_from_csv() {
    let dir = workdir();
    let out = stdout(&run_ok(&["rates", "--config", "small.json", "--out", "rates"], dir.path()));
    assert_eq!(out.lines().count(), 3);
    for f in ["mhsa", "ffn", "step"] {
        assert!(dir.path().join("rates").join(format!("{f}.csv")).exists());
    }
    run_ok(
        &["heatmap", "--from", "rates/ffn.csv", "--family", "ffn", "--mode", "rho", "--out", "ffn_map"],
        dir.path(),
    );
    assert!(dir.path().join("ffn_map.pgm").exists());
}

#[test]
fn sweep_emits_35_rows() {
    let dir = workdir();
    let out = stdout(&run_ok(
        &["sweep", "--config", "small.json", "--inputs", "1", "--repeats", "1", "--jobs", "1"],
        dir.path(),
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 36);
    assert!(lines[0].starts_with("operating_point,flops,speedup_vs_baseline,latency_s,skip_mhsa,skip_ffn,"));
    assert!(lines[1].starts_with("b1_step0.40,"));
}

#[test]
fn bench_writes_baseline_and_point() {
    let dir = workdir();
    run_ok(
        &["bench", "--config", "small.json", "--preset", "dit-fast", "--repeats", "1", "--out", "stats.csv"],
        dir.path(),
    );
    let text = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("baseline,"));
    assert!(lines[2].starts_with("planned,"));
}

#[test]
fn failures_exit_non_zero() {
    let dir = workdir();
    let cases: [&[&str]; 5] = [
        &["plan-inspect", "missing.json"],
        &["run", "--bogus"],
        &["calibrate", "--config", "small.json"],
        &["calibrate", "--config", "small.json", "--preset", "sdxl"],
        &["heatmap", "--config", "small.json", "--family", "nope", "--out", "x"],
    ];
    for args in cases {
        let out = bin().args(args).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
    fs::write(dir.path().join("bad.json"), "{\"format_version\": 1").unwrap();
    let out = bin().args(["plan-inspect", "bad.json"]).current_dir(dir.path()).output().unwrap();
    assert!(!out.status.success());
}
