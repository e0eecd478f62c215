use serde_json::Value;
use std::path::Path;
use std::process::Command;

const CONSTANT_SPEC: &str = "dim = 2\nlambda = 2.0\n[law]\nkind = \"constant\"\nmatrix = 2.0\n";
const CHECKER_SPEC: &str = "dim = 2\nlambda = 4.0\n[law]\nkind = \"checkerboard\"\nvalues = [1.0, 4.0]\nprobs = [0.5, 0.5]\n";

fn homolab(args: &[&str], threads: Option<&str>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_homolab"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("HOMOLAB_THREADS", t);
    }
    let out = cmd.output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn payload(dir: &Path, name: &str) -> Value {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap();
    v["payload"].clone()
}

#[test]
fn estimate_on_constant_field_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, CONSTANT_SPEC).unwrap();
    let out = tmp.path().join("out");
    let (code, err) = homolab(
        &[
            "estimate-ahom",
            "--spec",
            spec.to_str().unwrap(),
            "--level",
            "1",
            "--k",
            "2",
            "--samples",
            "3",
            "--output",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code, 0, "{err}");
    let p = payload(&out, "estimate_ahom.json");
    let a: Vec<f64> = serde_json::from_value(p["estimate"]["a"].clone()).unwrap();
    let se: Vec<f64> = serde_json::from_value(p["estimate"]["a_stderr"].clone()).unwrap();
    for (x, y) in a.iter().zip([2.0, 0.0, 0.0, 2.0]) {
        assert!((x - y).abs() < 1e-10);
    }
    assert!(se.iter().all(|s| *s == 0.0));
    let v: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("estimate_ahom.json")).unwrap())
            .unwrap();
    let prov = &v["provenance"];
    assert!(
        prov["config_hash"].is_string()
            && prov["version"].is_string()
            && prov["wall_time_s"].is_number()
    );
}

#[test]
fn reruns_are_bit_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, CHECKER_SPEC).unwrap();
    let mut payloads = Vec::new();
    for (i, threads) in [None, Some("1"), None].iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let (code, err) = homolab(
            &[
                "energies",
                "--spec",
                spec.to_str().unwrap(),
                "--level",
                "1",
                "--k",
                "2",
                "--samples",
                "4",
                "--seed",
                "5",
                "--output",
                out.to_str().unwrap(),
            ],
            *threads,
        );
        assert_eq!(code, 0, "{err}");
        payloads.push(serde_json::to_string(&payload(&out, "energies.json")).unwrap());
        let csv = std::fs::read_to_string(out.join("energies.csv")).unwrap();
        assert!(csv.starts_with("# command=energies"));
    }
    assert_eq!(payloads[0], payloads[1]);
    assert_eq!(payloads[0], payloads[2]);
}

#[test]
fn cache_hit_equals_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, CHECKER_SPEC).unwrap();
    let run = |out: &Path| {
        let (code, err) = homolab(
            &[
                "estimate-ahom",
                "--spec",
                spec.to_str().unwrap(),
                "--level",
                "1",
                "--k",
                "2",
                "--samples",
                "4",
                "--output",
                out.to_str().unwrap(),
            ],
            None,
        );
        assert_eq!(code, 0, "{err}");
        payload(out, "estimate_ahom.json")
    };
    let a = tmp.path().join("a");
    let first = run(&a);
    let second = run(&a);
    let fresh = run(&tmp.path().join("b"));
    assert_eq!(first, second);
    assert_eq!(first, fresh);
    let cache: Vec<_> = std::fs::read_dir(a.join("cache")).unwrap().collect();
    assert_eq!(cache.len(), 1);
}

#[test]
fn report_counts_cached_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, CONSTANT_SPEC).unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    let s = spec.to_str().unwrap();
    for args in [
        vec![
            "estimate-ahom",
            "--spec",
            s,
            "--level",
            "1",
            "--k",
            "2",
            "--samples",
            "2",
            "--output",
            o,
        ],
        vec![
            "sample-field",
            "--spec",
            s,
            "--level",
            "1",
            "--k",
            "2",
            "--output",
            o,
        ],
        vec!["gff", "--grid", "8", "--samples", "4", "--output", o],
        vec!["gff", "--grid", "8", "--samples", "5", "--output", o],
    ] {
        let (code, err) = homolab(&args, None);
        assert_eq!(code, 0, "{err}");
    }
    let (code, err) = homolab(&["report", "--output", o], None);
    assert_eq!(code, 0, "{err}");
    let runs = std::fs::read_dir(out.join("runs")).unwrap().count();
    assert_eq!(runs, 4);
    assert_eq!(payload(&out, "report.json")["rows"], 4);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, runs);
}

#[test]
fn strict_config_and_missing_cache_are_infrastructure_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 1\n[grid]\nk = 2\nkk = 3\n").unwrap();
    let (code, err) = homolab(&["report", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code, 2);
    assert!(err.contains("kk"), "{err}");
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, CHECKER_SPEC).unwrap();
    let out = tmp.path().join("out");
    let (code, err) = homolab(
        &[
            "two-scale",
            "--spec",
            spec.to_str().unwrap(),
            "--eps",
            "1/3",
            "--output",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code, 2);
    assert!(err.contains("estimate-ahom"), "{err}");
}

#[test]
fn two_scale_after_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, CHECKER_SPEC).unwrap();
    let out = tmp.path().join("out");
    let (s, o) = (spec.to_str().unwrap(), out.to_str().unwrap());
    let (code, err) = homolab(
        &[
            "estimate-ahom",
            "--spec",
            s,
            "--method",
            "periodic",
            "--torus",
            "3",
            "--k",
            "2",
            "--samples",
            "2",
            "--output",
            o,
        ],
        None,
    );
    assert_eq!(code, 0, "{err}");
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "[estimate]\nmethod = \"periodic\"\ntorus = 3\nsamples = 2\n[grid]\nk = 2\n",
    )
    .unwrap();
    let (code, err) = homolab(
        &[
            "two-scale",
            "--config",
            cfg.to_str().unwrap(),
            "--spec",
            s,
            "--eps",
            "1/3",
            "--samples",
            "1",
            "--output",
            o,
        ],
        None,
    );
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(out.join("twoscale.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "eps,sample,l2_err,h1_err,weighted_err,interior_err");
}

#[test]
fn certify_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("x.csv");
    let mut text = String::from("value\n");
    for i in 0..64 {
        text.push_str(&format!("{}\n", (i % 7) as f64 * 0.1));
    }
    std::fs::write(&data, text).unwrap();
    let out = tmp.path().join("out");
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
    let (code, err) = homolab(
        &[
            "certify", "--input", d, "--s", "1", "--theta", "1", "--output", o,
        ],
        None,
    );
    assert_eq!(code, 0, "{err}");
    let (code, _) = homolab(
        &[
            "certify", "--input", d, "--s", "1", "--theta", "0.05", "--output", o,
        ],
        None,
    );
    assert_eq!(code, 1);
}
