use std::path::{Path, PathBuf};
use std::process::Command;

use base64::Engine;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_with_stdin(args: &[&str], stdin: &[u8]) -> Outcome {
    let mut argv = vec!["cctrace"];
    argv.extend_from_slice(args);
    let mut input = stdin;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cctrace::cli::run(argv, &mut input, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn run(args: &[&str]) -> Outcome {
    run_with_stdin(args, b"")
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[test]
fn wireshark_map_default_line() {
    let o = run(&["wireshark-map"]);
    assert_eq!(o.code, 0);
    assert_eq!(o.stdout, "\"User 3 (DLT=150)\",\"corecapture\",\"0\",\"\",\"0\",\"\"\n");
}

#[test]
fn wireshark_map_rejects_public_dlt() {
    let o = run(&["wireshark-map", "--dlt", "1"]);
    assert_eq!(o.code, 2);
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_verb_and_flag_are_usage_errors() {
    for args in [&["frobnicate"][..], &["scan", "--bogus", "x"][..], &[][..]] {
        let o = run(args);
        assert_eq!(o.code, 2, "{args:?}");
        assert!(o.stderr.contains("Usage:"), "{args:?}: {}", o.stderr);
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn help_goes_to_stdout() {
    let o = run(&["--help"]);
    assert_eq!(o.code, 0);
    for verb in ["configure", "emit-profile", "emit-cctool", "simulate", "dump", "scan", "extract", "wireshark-map", "nvram-help"] {
        assert!(o.stdout.contains(verb), "{verb} missing from help");
    }
}

#[test]
fn configure_cctool_sets_policy_continuous() {
    let o = run(&["configure", "--cctool", "-o", "com.apple.driver.AirPort.Brcm4360.0", "-p", "DriverLogs", "-x", "1"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["pipes"]["com.apple.driver.AirPort.Brcm4360.0"]["DriverLogs"]["policy"], 1);
    assert_eq!(v["provenance"], serde_json::json!(["command_line"]));
}

#[test]
fn configure_profile_fixture() {
    let path = fixture("megawifi_excerpt.mobileconfig");
    let o = run(&["configure", "--profile", path.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    let stream = &v["streams"]["com.apple.driver.AppleBCMWLANCoreV3.0"]["FirmwareLogs"]["Chip_UART"];
    assert_eq!(stream["log_level"], 5);
    assert_eq!(stream["log_flags"], 1);
}

#[test]
fn configure_reads_profile_from_stdin() {
    let bytes = std::fs::read(fixture("megawifi_excerpt.mobileconfig")).unwrap();
    let o = run_with_stdin(&["configure", "--profile", "-"], &bytes);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("Chip_UART"));
}

#[test]
fn configure_bad_inputs() {
    let o = run(&["configure", "--profile", "/nonexistent/profile.mobileconfig"]);
    assert_eq!(o.code, 3);
    let o = run_with_stdin(&["configure", "--profile", "-"], b"<plist><dict><key>x</key>");
    assert_eq!(o.code, 3);
    let o = run(&["configure", "--cctool", "-o", "a", "-p", "b", "-q", "1"]);
    assert_eq!(o.code, 2);
}

#[test]
fn emit_cctool_from_figure_file_round_trips() {
    let path = fixture("cctool_commands.sh");
    let o = run(&["emit-cctool", "--cctool-file", path.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(
        lines,
        [
            "-o com.apple.driver.AirPort.Brcm4360.0 -p DriverLogs -x 1",
            "-o com.apple.driver.AirPort.Brcm4360.0 -p DriverLogs -s DriverLogs -l 5 -f 8388608",
            "-o com.apple.iokit.IO80211Family -p IO80211AWDLPeerManager -x 1",
            "-o com.apple.iokit.IO80211Family -p IO80211AWDLPeerManager -s bpfIO80211Awdl -l 5 -f 27358198660246032 -g 1 -m 0",
        ]
    );
    assert!(o.stderr.contains("manual_dump"), "capture line should be reported as ignored");

    let o = run(&["emit-cctool", "--prefix", "sudo cctool", "--cctool-file", path.to_str().unwrap()]);
    assert!(o.stdout.lines().all(|l| l.starts_with("sudo cctool -o ")));
}

#[test]
fn emit_profile_then_configure_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.mobileconfig");
    let script = fixture("cctool_commands.sh");
    let o = run(&["emit-profile", "--cctool-file", script.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let from_profile = run(&["emit-cctool", "--profile", out.to_str().unwrap()]);
    let from_script = run(&["emit-cctool", "--cctool-file", script.to_str().unwrap()]);
    assert_eq!(from_profile.stdout, from_script.stdout);

    let again = dir.path().join("q.mobileconfig");
    run(&["emit-profile", "--profile", out.to_str().unwrap(), "--output", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn command_line_overrides_profile() {
    let path = fixture("megawifi_excerpt.mobileconfig");
    let o = run(&[
        "configure",
        "--profile",
        path.to_str().unwrap(),
        "--cctool",
        "-o",
        "com.apple.driver.AppleBCMWLANCoreV3.0",
        "-p",
        "FirmwareLogs",
        "-x",
        "0",
    ]);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["pipes"]["com.apple.driver.AppleBCMWLANCoreV3.0"]["FirmwareLogs"]["policy"], 0);
    assert_eq!(v["provenance"], serde_json::json!(["unsigned_profile", "command_line"]));
}

#[test]
fn scan_fixture_lists_control_path() {
    let path = fixture("sample_capture");
    let o = run(&["scan", path.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stdout);
    assert!(o.stdout.contains("ControlPath.pcap"));
    assert!(o.stdout.contains("platform: macos"));
    assert!(o.stdout.contains("findings: 0 info, 0 warning, 0 error"));
}

#[test]
fn scan_json_is_valid() {
    let path = fixture("sample_capture");
    let o = run(&["scan", "--json", "--platform", "ios", path.to_str().unwrap()]);
    assert_eq!(o.code, 0);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["schema"], "cctrace-report/1");
    assert_eq!(v["platform"], "ios");
    // The iOS-only kinds are missing from a macOS capture.
    assert_eq!(v["counts"]["warning"], 3);
    assert_eq!(v["counts"]["pcap_records"], 3);
}

#[test]
fn scan_errors() {
    let o = run(&["scan", "/nonexistent/capture"]);
    assert_eq!(o.code, 3);
    let o = run(&["scan", "--platform", "windows", "x"]);
    assert_eq!(o.code, 2);

    let dir = tempfile::tempdir().unwrap();
    let owner = dir.path().join("com.apple.iokit.IO80211Family");
    std::fs::create_dir(&owner).unwrap();
    std::fs::write(owner.join("ControlPath.pcap"), "not a capture\n").unwrap();
    let o = run(&["scan", dir.path().to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.stdout.contains("format-mismatch"));
}

#[test]
fn extract_dissects_fixture() {
    let path = fixture("sample_capture/com.apple.iokit.IO80211Family/ControlPath.pcap");
    let o = run(&["extract", "--json", path.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["link_type"], 150);
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[0]["timestamp_ns"], 1_551_434_400_250_000_000u64);
    assert_eq!(frames[0]["frame"]["schema"], "cctrace-frame/1");
    assert_eq!(frames[0]["frame"]["protocol"], "cc-tlv");

    let awdl = fixture("sample_capture/com.apple.iokit.IO80211Family/IO80211AWDLPeerManager.pcap");
    let o = run(&["extract", awdl.to_str().unwrap()]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("cc-logtext"));
}

#[test]
fn extract_truncated_reports_finding() {
    let src = fixture("sample_capture/com.apple.iokit.IO80211Family/ControlPath.pcap");
    let mut bytes = std::fs::read(src).unwrap();
    bytes.truncate(bytes.len() - 1);
    let o = run_with_stdin(&["extract", "-"], &bytes);
    assert_eq!(o.code, 1);
    assert!(o.stdout.contains("frame 1"));
    assert!(!o.stdout.contains("frame 2"));
}

fn write_script(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("script.txt");
    std::fs::write(&p, body).unwrap();
    p
}

const BCM: &str = "com.apple.driver.AppleBCMWLANCoreV3.0";

#[test]
fn simulate_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        &format!(
            "PIPE {BCM} DriverLogs capacity=2 policy=1\n\
             STREAM {BCM} DriverLogs DriverLogs log\n\
             CCTOOL -o {BCM} -p DriverLogs -s DriverLogs -l 3 -f 0x4\n\
             EVENT {BCM} DriverLogs DriverLogs 3 4 {a}\n\
             EVENT {BCM} DriverLogs DriverLogs 4 4 {a}\n\
             EVENT {BCM} DriverLogs DriverLogs 1 1 {a}\n\
             EVENT {BCM} DriverLogs DriverLogs 1 c {a}\n\
             EVENT {BCM} DriverLogs DriverLogs 0 0 {a}\n\
             EVENT {BCM} DriverLogs DriverLogs 0 0 {a}\n",
            a = b64(b"x")
        ),
    );
    let o = run(&["simulate", script.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["accepted"], 4);
    assert_eq!(v["rejected"], 2);
    assert_eq!(v["clock"], 6000);
    assert_eq!(v["pipes"][0]["buffered"], 2);
}

#[test]
fn simulate_script_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), "# header\nPIPE a b\nEVENT a b missing 0 0 AA==\n");
    let o = run(&["simulate", script.to_str().unwrap()]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.contains("line 3"), "{}", o.stderr);
    let o = run_with_stdin(&["simulate", "-"], b"WIBBLE\n");
    assert_eq!(o.code, 3);
}

#[test]
fn dump_refuses_non_empty_destination() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), "PIPE a b policy=1\n");
    let o = run(&["dump", script.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.contains("not empty"));
}

#[test]
fn simulate_dump_scan_closure() {
    let dir = tempfile::tempdir().unwrap();
    let fam = "com.apple.iokit.IO80211Family";
    let mut script = String::new();
    for (owner, pipe, kind) in [
        (BCM, "DatapathEvents", "log"),
        (BCM, "DriverLogs", "log"),
        (BCM, "FirmwareBusLogs", "log"),
        (BCM, "FirmwareLogs", "log"),
        (BCM, "StateSnapshots", "data"),
        (fam, "AssociationEventHistory", "log"),
        (fam, "ControlPath", "log"),
        (fam, "IO80211AWDLPeerManager", "log"),
        (fam, "OneStats", "data"),
        (fam, "IOReporters", "data"),
    ] {
        script.push_str(&format!("PIPE {owner} {pipe}\nSTREAM {owner} {pipe} {pipe} {kind}\n"));
        if kind == "log" {
            script.push_str(&format!("EVENT {owner} {pipe} {pipe} 0 0 {}\n", b64(b"dropped, policy off")));
        }
    }
    script.push_str("CCTOOL -o \"*\" -p \"*\" -x 1\nTIME 1551434400000000000\n");
    script.push_str(&format!("SNAPSHOT {BCM} StateSnapshots StateSnapshots {}\n", b64(&[0, 1, 2, 0xff])));
    script.push_str(&format!("SNAPSHOT {fam} OneStats OneStats {}\n", b64(b"<plist><dict/></plist>")));
    for i in 0..20u8 {
        let (owner, pipe) = match i % 6 {
            0 => (BCM, "DatapathEvents"),
            1 => (BCM, "DriverLogs"),
            2 => (BCM, "FirmwareBusLogs"),
            3 => (BCM, "FirmwareLogs"),
            4 => (fam, "ControlPath"),
            _ => (fam, "IO80211AWDLPeerManager"),
        };
        script.push_str(&format!("EVENT {owner} {pipe} {pipe} 0 0 {}\n", b64(&[i, 0, 1, i])));
    }
    script.push_str(&format!("EVENT {fam} AssociationEventHistory AssociationEventHistory 0 0 {}\n", b64(b"assoc lab")));
    let script = write_script(dir.path(), &script);
    let out = dir.path().join("capture");

    let o = run(&["dump", script.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}{}", o.stdout, o.stderr);
    let o = run(&["scan", "--json", out.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stdout);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["counts"]["error"], 0);
    assert_eq!(v["platform"], "ios");
    // DriverLogs and FirmwareLogs are text kinds; the other four pipes fed
    // here become PCAP records.
    let pcap_events = (0..20u8).filter(|i| ![1, 3].contains(&(i % 6))).count();
    assert_eq!(v["counts"]["pcap_records"], pcap_events as u64);
    // IOReporters had no provider: an empty XML wrapper is still written.
    assert_eq!(v["counts"]["warning"], 0, "{}", o.stdout);
}

#[test]
fn nvram_help_prints_commands_and_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let before: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    let o = Command::new(env!("CARGO_BIN_EXE_cctrace"))
        .arg("nvram-help")
        .current_dir(dir.path())
        .env("PATH", "")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("WARNING"));
    assert!(text.contains("non-production"));
    assert!(text.lines().any(|l| l.trim() == "csrutil enable --without nvram"));
    assert!(text.lines().any(|l| l.trim()
        == "nvram boot-args=debug=0x10000 awdl_log_flags=0xffffffffffffffff awdl_log_flags_verbose=0xffffffffffffffff awdl_log_flags_config=1 wlan.debug.enable=0xff"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), before.len());
}

#[test]
fn binary_exit_codes_match_library() {
    let o = Command::new(env!("CARGO_BIN_EXE_cctrace")).arg("nope").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}
