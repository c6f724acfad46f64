use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosketch")).args(args).output().expect("spawn geosketch")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// `src` is `[term, c, alpha, center_lat, center_lon, n]`.
fn gen(path: &Path, src: [&str; 6], seed: &str, append: bool) {
    let [term, c, alpha, lat, lon, n] = src;
    let p = path.to_str().unwrap();
    let mut args = vec![
        "--cell-size",
        "10",
        "--seed",
        seed,
        "gen",
        "--term",
        term,
        "--c",
        c,
        "--alpha",
        alpha,
        "--center-lat",
        lat,
        "--center-lon",
        lon,
        "--n",
        n,
        "--out",
        p,
    ];
    if append {
        args.push("--append");
    }
    ok(&args);
}

fn stream(dir: &Path) -> String {
    let p = dir.join("events.jsonl");
    gen(&p, ["bitcoin", "0.3", "1.0", "40.5", "-74.5", "6000"], "7", false);
    gen(&p, ["flu", "0.3", "2.0", "-20", "30", "3000"], "8", true);
    p.to_str().unwrap().to_owned()
}

#[test]
fn ingest_then_query_both_backends() {
    let dir = tempfile::tempdir().unwrap();
    let input = stream(dir.path());
    for backend in ["tsum_plus", "ringsum"] {
        let snap = dir.path().join(backend);
        let snap = snap.to_str().unwrap();
        let s =
            ok(&["--cell-size", "10", "ingest", "--input", &input, "--backend", backend, "--snapshot", snap, "--csv"]);
        assert!(s.contains("terms=2 events=9000 occurrences=9000"), "{s}");

        let csv = dir.path().join(format!("{backend}_rfs.csv"));
        let s = ok(&["rfs", "--term", "flu", "--k", "3", "--snapshot", snap, "--out", csv.to_str().unwrap()]);
        assert!(s.starts_with(&format!("rfs term=flu k=3 backend={backend} entries=3")), "{s}");
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("rank,cell_id,lat,lon,score,delta"));
        // The flu source center is the most frequent cell.
        assert!(lines.next().unwrap().contains(",-15,35,"), "{text}");

        let s = ok(&["tfs", "--term", "flu", "--lat", "-20", "--lon", "30", "--snapshot", snap]);
        assert!(s.contains("stored=yes"), "{s}");
        let s = ok(&["tfs", "--term", "flu", "--lat", "80", "--lon", "170", "--snapshot", snap]);
        assert!(s.contains("upper_bound="), "{s}");
        assert!(s.contains(" stored=yes f=") || s.contains(" stored=no center="), "{s}");

        for mode in ["independent", "min_bound", "intersection"] {
            let s = ok(&["multi", "--terms", "bitcoin,flu", "--k", "2", "--mode", mode, "--snapshot", snap]);
            assert!(s.starts_with(&format!("multi terms=bitcoin,flu mode={mode}")), "{s}");
        }
        let s = ok(&["multi", "--terms", "bitcoin,flu", "--k", "2", "--cell", "5", "--snapshot", snap]);
        assert!(s.contains("estimate="), "{s}");

        let models = dir.path().join(format!("{backend}_models.csv"));
        ok(&["fit", "--snapshot", snap, "--out", models.to_str().unwrap()]);
        let text = std::fs::read_to_string(&models).unwrap();
        assert!(text.starts_with("term,center_cell,C,alpha,log_lik\nbitcoin,"), "{text}");
        assert_eq!(text.lines().count(), 3);
    }
}

#[test]
fn gen_is_replay_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    gen(&a, ["t", "0.2", "1.5", "0", "0", "500"], "3", false);
    gen(&b, ["t", "0.2", "1.5", "0", "0", "500"], "3", false);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let stdout = ok(&[
        "--cell-size",
        "10",
        "--seed",
        "3",
        "gen",
        "--term",
        "t",
        "--c",
        "0.2",
        "--alpha",
        "1.5",
        "--center-lat",
        "0",
        "--center-lon",
        "0",
        "--n",
        "500",
    ]);
    assert_eq!(stdout.as_bytes(), std::fs::read(&a).unwrap());
}

#[test]
fn exit_codes_separate_usage_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let missing = missing.to_str().unwrap();
    assert_eq!(run(&["rfs", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["rfs", "--term", "x"]).status.code(), Some(2), "snapshot is required");
    assert_eq!(run(&["multi", "--terms", "x", "--snapshot", missing]).status.code(), Some(2));

    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "ratio=0.6\n").unwrap();
    assert_eq!(run(&["--config", conf.to_str().unwrap(), "rfs", "--term", "x"]).status.code(), Some(3));
    assert_eq!(run(&["--ratio", "1.5", "rfs", "--term", "x", "--snapshot", missing]).status.code(), Some(3));
    assert_eq!(run(&["--backend", "btree", "rfs", "--term", "x", "--snapshot", missing]).status.code(), Some(3));

    assert_eq!(run(&["rfs", "--term", "x", "--snapshot", missing]).status.code(), Some(4));
    assert_eq!(run(&["ingest", "--input", missing, "--snapshot", missing]).status.code(), Some(4));
    let input = stream(dir.path());
    let snap = dir.path().join("snap");
    let snap = snap.to_str().unwrap();
    ok(&["--cell-size", "10", "ingest", "--input", &input, "--backend", "tsum_plus", "--snapshot", snap]);
    assert_eq!(run(&["rfs", "--term", "absent", "--snapshot", snap]).status.code(), Some(4));
    std::fs::write(Path::new(snap).join("t_flu.bin"), b"garbage").unwrap();
    assert_eq!(run(&["rfs", "--term", "flu", "--snapshot", snap]).status.code(), Some(4));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let input = stream(dir.path());
    let snap = dir.path().join("snap");
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!("# test run\ncell_size_deg=10\nbackend=tsum_plus\nm=5\nsnapshot={}\n", snap.display()),
    )
    .unwrap();
    let conf = conf.to_str().unwrap();
    let s = ok(&["--config", conf, "--m", "7", "ingest", "--input", &input]);
    assert!(s.starts_with("ingest backend=tsum_plus m=7 "), "{s}");
    let s = ok(&["--config", conf, "rfs", "--term", "bitcoin", "--k", "20"]);
    assert!(s.contains("entries=7"), "{s}");
}

#[test]
fn gen_eval_bench_table_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let input = stream(dir.path());
    let eval_dir = dir.path().join("eval");
    let bench_dir = dir.path().join("bench");
    let tables = dir.path().join("tables");
    let s = ok(&[
        "--cell-size",
        "10",
        "eval",
        "model",
        "--input",
        &input,
        "--out-dir",
        eval_dir.to_str().unwrap(),
        "--tfs-terms",
        "2",
        "--tfs-cells",
        "5",
        "--ratios",
        "0.6",
    ]);
    // Exact fits recover the generator spreads.
    for (term, alpha) in [("bitcoin", 1.0), ("flu", 2.0)] {
        let line = s.lines().find(|l| l.starts_with(&format!("{term}\t"))).unwrap();
        let got: f64 = line.split('\t').nth(5).unwrap().parse().unwrap();
        assert!((got - alpha).abs() / alpha < 0.05, "{term}: alpha {got}");
    }
    ok(&[
        "--cell-size",
        "10",
        "bench",
        "--input",
        &input,
        "--out-dir",
        bench_dir.to_str().unwrap(),
        "--runs",
        "1",
        "--tfs-terms",
        "1",
        "--tfs-cells",
        "2",
        "--curve-points",
        "4",
    ]);
    let s = ok(&[
        "table",
        "--model-dir",
        eval_dir.to_str().unwrap(),
        "--bench-dir",
        bench_dir.to_str().unwrap(),
        "--out-dir",
        tables.to_str().unwrap(),
    ]);
    assert_eq!(s.lines().count(), 3);
    let t3 = std::fs::read_to_string(tables.join("table3.csv")).unwrap();
    for strategy in ["standard", "fixed_center", "light_update", "proximity_aware"] {
        assert!(t3.contains(&format!("\n{strategy},")), "{t3}");
    }
    assert_eq!(run(&["table", "--out-dir", tables.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn eval_multi_writes_the_bin_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("multi");
    let s =
        ok(&["--cell-size", "10", "--seed", "5", "eval", "multi", "--out-dir", out.to_str().unwrap(), "--pairs", "1"]);
    for bin in ["all", "rare", "medium", "frequent", "very_frequent"] {
        assert!(s.lines().any(|l| l.starts_with(&format!("{bin}\ttsum_intersection\t"))), "{s}");
    }
    assert!(out.join("multiterm_summary.csv").is_file());
}
