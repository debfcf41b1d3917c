use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_padic-limits"))
}

#[test]
fn bound_prints_both_parts() {
    let out = bin().args(["bound", "--p", "5", "--f", "1", "--e", "1", "--d", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("prime-to-p 24") && text.contains("p-power 1"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = std::env::temp_dir().join(format!("padic-cli-{}", std::process::id()));
    let code = |args: &[&str]| bin().args(args).env("PADIC_OUT_DIR", &dir).output().unwrap().status.code();
    assert_eq!(code(&["align", "--family", "missing.json"]), Some(1));
    assert_eq!(code(&["analyze", "--family", "sec2_3_diag", "--n", "5..1"]), Some(1));
    assert_eq!(code(&["align", "--family", "sec1_3_counterexample", "--ball", "2", "--n", "1..4"]), Some(2));
    assert_eq!(code(&["analyze", "--family", "sec2_3_diag", "--ball", "4", "--n", "0..12"]), Some(0));
    let csv = std::fs::read_to_string(dir.join("analyze.csv")).unwrap();
    assert!(csv.starts_with("n,delta_n\n0,1\n1,2\n"), "{csv}");
    assert!(csv.ends_with("12,13\n"));
    let _ = std::fs::remove_dir_all(&dir);
}
