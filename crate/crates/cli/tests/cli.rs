use std::process::{Command, Output};

fn microgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microgrid")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn generate_writes_a_readable_grid() {
    let text = stdout(&microgrid(&["generate", "--nodes", "12", "--dg-fraction", "0.5", "--seed", "4"]));
    let grid = microgrid::grid::read_grid(&text).unwrap();
    assert_eq!(grid.len(), 12);
    assert_eq!(grid.dgs().count(), 6);
    assert_eq!(text, stdout(&microgrid(&["generate", "--nodes", "12", "--dg-fraction", "0.5", "--seed", "4"])));
}

#[test]
fn run_emits_long_format_csv() {
    let args = ["run", "--controller", "cbsc", "--replications", "2", "--nodes", "15"];
    let text = stdout(&microgrid(&args));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "scenario_id,replication,controller,mode,dg_fraction,q,step,loss_w,pcc_w,msgs");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.starts_with("cbsc-full-n15-dg0.30-q0.00,1,cbsc,full,0.3,0.0,0,")));
    assert_eq!(text, stdout(&microgrid(&args)));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "controller = \"vbsc\"\nmode = \"reactive\"\nreplications = 3\n[gen]\nn_nodes = 10\n").unwrap();
    let out = dir.path().join("sweep.csv");
    let summary = dir.path().join("summary.csv");
    stdout(&microgrid(&[
        "sweep-links",
        "--config",
        cfg.to_str().unwrap(),
        "--values",
        "0,0.5",
        "--replications",
        "4",
        "-o",
        out.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert!(text.lines().nth(1).unwrap().starts_with("vbsc-reactive-n10-"));
    assert_eq!(std::fs::read_to_string(&summary).unwrap().lines().count(), 3);
}

#[test]
fn sweeps_and_ec_comparison_run() {
    let text = stdout(&microgrid(&["sweep-dg", "--values", "0.2,0.6", "--replications", "2", "--controller", "elc"]));
    assert_eq!(text.lines().count(), 5);
    let text = stdout(&microgrid(&["sweep-impedance", "--values", "0.05e-3:0.05e-3,1e-4:5e-5", "--replications", "2"]));
    assert_eq!(text.lines().count(), 5);
    let out = microgrid(&["compare-ec", "--replications", "2", "--dg-fraction", "0.5"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ec gain "));
    assert_eq!(stdout(&out).lines().count(), 5);
}

#[test]
fn bad_input_fails_with_one_line() {
    for args in [
        vec!["run", "--controller", "dorpf"],
        vec!["run", "--broken-links", "1.5"],
        vec!["run", "--config", "/nonexistent/s.toml"],
        vec!["generate", "--nodes", "3"],
        vec!["run", "--controller", "vbsc", "--ec"],
    ] {
        let out = microgrid(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    assert!(!microgrid(&["sweep-impedance", "--values", "0.1"]).status.success());
}
