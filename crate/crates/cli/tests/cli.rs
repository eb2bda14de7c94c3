use std::path::Path;
use std::process::Command;

fn spinlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spinlab"))
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    spinlab()
        .arg("run")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("SPINLAB_THREADS")
        .output()
        .unwrap()
}

#[test]
fn gaussian_gap_writes_p_near_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "gap.json",
        r#"{"experiment":{"kind":"gap","model":{"n":2,"M":0.0,"perturbation":{"kind":"zero"}}}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("gap.csv")).unwrap();
    let h = rdr.headers().unwrap().clone();
    assert_eq!(h.iter().collect::<Vec<_>>(), ["n", "M", "family", "P", "L", "method", "err"]);
    let rec = rdr.records().next().unwrap().unwrap();
    let p: f64 = rec[3].parse().unwrap();
    assert!((p - 1.0).abs() < 0.02, "P = {p}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "gap");
    assert_eq!(manifest["config"]["experiment"]["grid"]["nodes"], 64);
    assert_eq!(manifest["config"]["experiment"]["method"], "grid");
}

#[test]
fn unknown_key_exits_two_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"experiment":{"kind":"gap","model":{"n":2},"colour":"red"}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_kind_and_empty_sweep_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for body in [
        r#"{"experiment":{"kind":"teleport"}}"#,
        r#"{"experiment":{"kind":"uniformity_sweep","families":[{"kind":"zero"}],"n_list":[]}}"#,
        "not json",
    ] {
        let cfg = write(dir.path(), "c.json", body);
        let out = dir.path().join("out");
        let o = run(&cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(!out.exists());
    }
}

#[test]
fn degenerate_lattice_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "k.json",
        r#"{"experiment":{"kind":"kawasaki","d":1,"perturbation":{"kind":"zero"},"l_list":[1]}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn identical_seed_gives_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "v.json",
        r#"{"seed":5,"experiment":{"kind":"gap","method":"variational","save_draws":true,
            "model":{"n":4,"M":5.0,"perturbation":{"kind":"sine","eps":0.1}},
            "chain":{"kind":"metropolis_langevin","step":1.0,"burn_in":200,"samples":2000,"thin":1,"seed":0}}}"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&cfg, &a, &["--threads", "2"]).status.code(), Some(0));
    assert_eq!(run(&cfg, &b, &["--threads", "1"]).status.code(), Some(0));
    for f in ["gap.csv", "variational.json", "draws.f64", "draws.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let draws = std::fs::read(a.join("draws.f64")).unwrap();
    assert_eq!(draws.len(), 2000 * 4 * 8);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("draws.json")).unwrap()).unwrap();
    assert_eq!(side["n"], 4);
    assert_eq!(side["seed"], 5);

    let c = dir.path().join("c");
    assert_eq!(run(&cfg, &c, &["--seed", "6"]).status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("gap.csv")).unwrap(), std::fs::read(c.join("gap.csv")).unwrap());
}

#[test]
fn paths_and_sweep_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.json",
        r#"{"experiment":{"kind":"paths","d":1,"l_list":[2,4,8],"dump_congestion":true}}"#,
    );
    let out = dir.path().join("p");
    assert_eq!(run(&cfg, &out, &[]).status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("paths.csv")).unwrap();
    let second = text.lines().nth(1).unwrap();
    assert!(second.starts_with("1,2,2,0.5,0.125,"), "{second}");
    assert!(out.join("congestion_d1_L8.csv").exists());

    let cfg = write(
        dir.path(),
        "s.json",
        r#"{"experiment":{"kind":"uniformity_sweep","families":[{"kind":"zero"}],"n_list":[1,2],"grid_max_n":2}}"#,
    );
    let out = dir.path().join("s");
    let o = run(&cfg, &out, &["--threads", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["cells"], 4);
    // F ≡ 0: P = 1 for n = 2; at n = 1 the Hessian is 2, so P = 1/2.
    assert!((s["max"].as_f64().unwrap() - 1.0).abs() < 0.02, "{s}");
    assert!((s["min"].as_f64().unwrap() - 0.5).abs() < 0.01, "{s}");
    assert!(out.join("cells/cell_0003.csv").exists());
}

#[test]
fn threads_env_var_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.json", r#"{"experiment":{"kind":"paths","d":1,"l_list":[2]}}"#);
    let o = spinlab()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .env("SPINLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = spinlab()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .env("SPINLAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 2);
}
