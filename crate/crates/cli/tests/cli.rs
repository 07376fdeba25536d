use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn mr_eit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mr-eit"))
        .current_dir(dir)
        .env("MR_EIT_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mr_eit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    mr_eit(dir, args).status.code().expect("exit code")
}

/// Small two-mesh setup: meshes, a two-inclusion phantom on the fine mesh and
/// noiseless voltages from it.
fn small_setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["mesh-gen", "--elements", "64", "--electrodes", "8", "-o", "c.txt"]);
    ok(d, &["mesh-gen", "--elements", "256", "--electrodes", "8", "-o", "f.txt"]);
    ok(
        d,
        &[
            "phantom",
            "--mesh",
            "f.txt",
            "--background",
            "1.5",
            "--inclusion",
            "0.4,0.3,0.3,3.0",
            "--inclusion=-0.4,-0.3,0.3,0.5",
            "-o",
            "truth.csv",
        ],
    );
    ok(
        d,
        &["forward", "--mesh", "f.txt", "--sigma", "truth.csv", "--electrodes", "8", "-o", "v.csv"],
    );
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn mesh_gen_reports_counts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let args = ["mesh-gen", "--shape", "disk", "--radius", "1.0", "--elements", "636", "--electrodes", "16"];
    let out = ok(d, &[&args[..], &["-o", "a.txt"]].concat());
    assert_eq!(out.trim(), "elements=640 nodes=361");
    ok(d, &[&args[..], &["-o", "b.txt"]].concat());
    assert_eq!(read(d, "a.txt"), read(d, "b.txt"));

    let bad = mr_eit(d, &["mesh-gen", "--electrodes", "3", "-o", "x.txt"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!bad.stderr.is_empty());
    assert_eq!(code(d, &["mesh-gen", "--shape", "square", "-o", "x.txt"]), 2);
    assert_eq!(code(d, &["mesh-gen", "--elements", "lots", "-o", "x.txt"]), 2);
}

#[test]
fn forward_writes_one_row_per_measurement() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["mesh-gen", "--elements", "640", "--electrodes", "16", "-o", "m.txt"]);
    ok(d, &["phantom", "--mesh", "m.txt", "--background", "1.0", "-o", "s.csv"]);
    let out = ok(d, &["forward", "--mesh", "m.txt", "--sigma", "s.csv", "-o", "v.csv"]);
    assert_eq!(out.trim(), "measurements=208");
    let text = String::from_utf8(read(d, "v.csv")).unwrap();
    assert_eq!(text.lines().count(), 209);
    assert_eq!(text.lines().next(), Some("drive,m_plus,m_minus,volts"));
    assert!(d.join("v.protocol.json").exists());

    ok(d, &["forward", "--mesh", "m.txt", "--sigma", "s.csv", "-o", "w.csv"]);
    assert_eq!(read(d, "v.csv"), read(d, "w.csv"));
    ok(d, &["forward", "--mesh", "m.txt", "--sigma", "s.csv", "--snr", "40", "--seed", "3", "-o", "n1.csv"]);
    ok(d, &["forward", "--mesh", "m.txt", "--sigma", "s.csv", "--snr", "40", "--seed", "3", "-o", "n2.csv"]);
    assert_eq!(read(d, "n1.csv"), read(d, "n2.csv"));
    assert_ne!(read(d, "n1.csv"), read(d, "v.csv"));
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = small_setup();
    let d = dir.path();
    std::fs::write(d.join("corrupt.csv"), "element,sigma_s_per_m\n0,1.0\n1,oops\n").unwrap();
    assert_eq!(code(d, &["forward", "--mesh", "f.txt", "--sigma", "corrupt.csv", "--electrodes", "8", "-o", "x.csv"]), 2);
    // conductivity for the wrong mesh
    assert_eq!(code(d, &["forward", "--mesh", "c.txt", "--sigma", "truth.csv", "--electrodes", "8", "-o", "x.csv"]), 2);
    assert_eq!(code(d, &["forward", "--mesh", "f.txt", "--sigma", "missing.csv", "--electrodes", "8", "-o", "x.csv"]), 2);
    std::fs::write(d.join("junk.txt"), "not a mesh").unwrap();
    assert_eq!(code(d, &["render", "--mesh", "junk.txt", "--sigma", "truth.csv", "-o", "x.pgm"]), 2);
    assert_eq!(code(d, &["recon", "unsup", "--coarse", "c.txt", "--voltage", "v.csv", "-o", "x.csv"]), 2);
    assert_eq!(code(d, &["recon", "l2", "--mesh", "c.txt", "--voltage", "v.csv", "-o", "x.csv"]), 2);
    assert_eq!(code(d, &["metrics", "--truth-mesh", "f.txt", "--truth", "truth.csv", "--mesh", "c.txt", "--sigma", "truth.csv"]), 2);
    assert_eq!(code(d, &["--threads", "0", "mesh-gen", "-o", "x.txt"]), 2);
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = small_setup();
    let d = dir.path();
    // an invalid regularization weight is an input error
    assert_eq!(code(d, &["recon", "gn", "--mesh", "c.txt", "--voltage", "v.csv", "--lambda", "-1", "-o", "x.csv"]), 2);
    // finite but absurd voltages overflow the loss on the first iteration
    let text = String::from_utf8(read(d, "v.csv")).unwrap();
    let huge: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let (head, _) = l.rsplit_once(',').unwrap();
                format!("{head},1e300\n")
            }
        })
        .collect();
    std::fs::write(d.join("huge.csv"), huge).unwrap();
    std::fs::copy(d.join("v.protocol.json"), d.join("huge.protocol.json")).unwrap();
    let out = mr_eit(d, &["recon", "unsup", "--coarse", "c.txt", "--fine", "f.txt", "--voltage", "huge.csv", "--iters1", "3", "--iters2", "1", "-o", "x.csv"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration"));
}

#[test]
fn unsupervised_run_writes_fine_field_and_two_stage_report() {
    let dir = small_setup();
    let d = dir.path();
    let args = [
        "recon", "unsup", "--coarse", "c.txt", "--fine", "f.txt", "--voltage", "v.csv", "--iters1", "8", "--iters2", "3",
        "--k1", "4", "--k2", "8", "--seed", "0",
    ];
    let out = ok(d, &[&args[..], &["-o", "s1.csv", "--report", "r1.json", "--timing", "t1.json", "--params-out", "p.bin"]].concat());
    assert_eq!(out.trim(), "elements=256");
    let sigma = String::from_utf8(read(d, "s1.csv")).unwrap();
    assert_eq!(sigma.lines().count(), 257);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "r1.json")).unwrap();
    assert_eq!(report["method"], "unsup");
    assert_eq!(report["seed"], 0);
    let stages = report["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[0]["elements"], 64);
    assert_eq!(stages[1]["elements"], 256);
    assert_eq!(stages[0]["loss_history"].as_array().unwrap().len(), 8);
    assert_eq!(stages[1]["k"], 8);
    let timing: serde_json::Value = serde_json::from_slice(&read(d, "t1.json")).unwrap();
    assert_eq!(timing["stage_seconds"].as_array().unwrap().len(), 2);
    assert!(read(d, "p.bin").starts_with(b"MREITNP1"));
    assert!(d.join("p.json").exists());

    ok(d, &[&args[..], &["-o", "s2.csv", "--report", "r2.json"]].concat());
    assert_eq!(read(d, "s1.csv"), read(d, "s2.csv"));
    assert_eq!(read(d, "r1.json"), read(d, "r2.json"));
}

#[test]
fn baselines_write_single_stage_reports() {
    let dir = small_setup();
    let d = dir.path();
    ok(d, &["recon", "l2", "--mesh", "c.txt", "--voltage", "v.csv", "--lambda", "1e-3", "-o", "l2.csv", "--report", "l2.json"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "l2.json")).unwrap();
    assert_eq!(report["method"], "l2");
    assert_eq!(report["stages"].as_array().unwrap().len(), 1);
    assert_eq!(report["stages"][0]["iterations"], 1);
    assert_eq!(report["config"]["lambda"], 1e-3);

    ok(d, &["recon", "gn", "--mesh", "c.txt", "--voltage", "v.csv", "--lambda-rel", "1e-2", "--iterations", "3", "-o", "gn.csv", "--report", "gn.json"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "gn.json")).unwrap();
    assert_eq!(report["stages"][0]["iterations"], 3);
    assert_eq!(String::from_utf8(read(d, "gn.csv")).unwrap().lines().count(), 65);
}

#[test]
fn metrics_of_identical_pairs() {
    let dir = small_setup();
    let d = dir.path();
    let out = ok(d, &["metrics", "--truth-mesh", "f.txt", "--truth", "truth.csv", "--mesh", "f.txt", "--sigma", "truth.csv"]);
    assert_eq!(out, "SSIM=1.00000000\nRIE=0.000000000\n");

    ok(d, &["phantom", "--mesh", "c.txt", "--background", "1.5", "-o", "flat.csv"]);
    let out = ok(d, &["metrics", "--truth-mesh", "f.txt", "--truth", "truth.csv", "--mesh", "c.txt", "--sigma", "flat.csv"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, key) in lines.iter().zip(["SSIM=", "RIE="]) {
        let v = line.strip_prefix(key).unwrap();
        let digits = v.chars().filter(char::is_ascii_digit).skip_while(|&c| c == '0').count();
        assert_eq!(digits, 9, "{line}");
    }
}

#[test]
fn render_is_deterministic_and_flat_fields_are_black() {
    let dir = small_setup();
    let d = dir.path();
    ok(d, &["render", "--mesh", "f.txt", "--sigma", "truth.csv", "--resolution", "64", "-o", "a.pgm", "--csv", "a.csv"]);
    ok(d, &["render", "--mesh", "f.txt", "--sigma", "truth.csv", "--resolution", "64", "-o", "b.pgm"]);
    assert_eq!(read(d, "a.pgm"), read(d, "b.pgm"));
    assert!(read(d, "a.pgm").starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(String::from_utf8(read(d, "a.csv")).unwrap().lines().count(), 64 * 64 + 1);

    ok(d, &["phantom", "--mesh", "f.txt", "--background", "2.0", "-o", "flat.csv"]);
    ok(d, &["render", "--mesh", "f.txt", "--sigma", "flat.csv", "--resolution", "32", "-o", "flat.pgm"]);
    let pgm = read(d, "flat.pgm");
    let header = b"P5\n32 32\n255\n".len();
    assert!(pgm[header..].iter().all(|&p| p == 0));
    assert_eq!(code(d, &["render", "--mesh", "f.txt", "--sigma", "flat.csv", "--resolution", "4", "-o", "x.pgm"]), 2);
}

#[test]
fn phantom_spec_files_round_trip() {
    let dir = small_setup();
    let d = dir.path();
    ok(d, &["phantom", "--mesh", "f.txt", "--background", "1.5", "--inclusion", "0.4,0.3,0.3,3.0", "--inclusion", "-0.4,-0.3,0.3,0.5", "--spec-out", "spec.json", "-o", "a.csv"]);
    ok(d, &["phantom", "--mesh", "f.txt", "--spec", "spec.json", "-o", "b.csv"]);
    assert_eq!(read(d, "a.csv"), read(d, "b.csv"));
    assert_eq!(code(d, &["phantom", "--mesh", "f.txt", "--background", "1.5", "--inclusion", "1,2", "-o", "x.csv"]), 2);
    assert_eq!(code(d, &["phantom", "--mesh", "f.txt", "--background", "-1", "-o", "x.csv"]), 2);
}
