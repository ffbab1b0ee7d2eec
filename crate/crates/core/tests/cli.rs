use std::process::{Command, Output};

fn mmgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgraph")).args(args).output().unwrap()
}

#[test]
fn classify_prints_the_class() {
    let out = mmgraph(&["classify", "--response", "4:Graphic T-Shirts and Sweatshirts."]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains('4'));
}

#[test]
fn bad_input_exits_with_two() {
    for args in [
        &["extract-subgraph", "--target", "999999"][..],
        &["--alpha", "1.5", "diffuse"][..],
        &["--config", "/nonexistent/config.json", "simulate-energy"][..],
    ] {
        let out = mmgraph(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{err}");
    }
}

#[test]
fn malformed_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, "{\n  \"seed\": 1,\n  \"bogus\": true\n}").unwrap();
    let out = mmgraph(&["--config", path.to_str().unwrap(), "assemble"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 3"));
}

#[test]
fn diffuse_matrix_reports_ppr_gap() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, "[[0.0, 1.0], [1.0, 0.0]]").unwrap();
    let out = mmgraph(&["diffuse", "--matrix", path.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_abs_diff_to_ppr"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["diffused"].as_array().unwrap().len(), 2);
}
