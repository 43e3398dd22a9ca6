use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use permfl_cli::commands::cmd_tune;
use permfl_cli::config::ExperimentConfig;

fn permfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_permfl"))
}

fn run(args: &[&str]) -> Output {
    permfl().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"
[problem]
d = 24
n = 4
rows_per_client = 3
spectrum = "exact"
[run]
algorithm = "dcgd_permk_aes"
gamma = 0.05
rounds = 40
compressor_seed = 5
[output]
dump_iterates = true
"#;

#[test]
fn exit_codes_distinguish_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    for (text, code) in [
        ("[run]\nrounds = 0", 2),
        ("[run]\nalgorithm = \"sgd\"", 2),
        ("[problem]\nd = 3\n[run]\nalgorithm = \"dcgd_permk\"", 2),
        ("[run]\ngamma = 50.0\nrounds = 200", 3),
        ("[run]\nrounds = 5", 0),
    ] {
        let cfg = write_config(tmp.path(), "c.toml", text);
        let o = run(&["run", "--config", s(&cfg), "--out-dir", s(&out)]);
        assert_eq!(
            o.status.code(),
            Some(code),
            "{text}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = run(&["run", "--config", s(&tmp.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_run_still_writes_its_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[run]\ngamma = 50.0\nrounds = 500");
    let out = tmp.path().join("o");
    let o = run(&["run", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with(",true"));
    let rows = fs::read_to_string(out.join("metrics.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert!(
        rows < 500,
        "run should stop at divergence, ran {rows} rounds"
    );
}

#[test]
fn reruns_from_emitted_config_are_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    for precision in ["fp16", "fp32", "fp64"] {
        let a = tmp.path().join(format!("a-{precision}"));
        let b = tmp.path().join(format!("b-{precision}"));
        let o = run(&[
            "run",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&a),
            "--precision",
            precision,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let emitted = a.join("config.toml");
        let o = run(&["run", "--config", s(&emitted), "--out-dir", s(&b)]);
        assert!(o.status.success());
        for f in ["metrics.csv", "iterates.csv", "summary.csv"] {
            assert_eq!(
                fs::read(a.join(f)).unwrap(),
                fs::read(b.join(f)).unwrap(),
                "{precision} {f}"
            );
        }
        let reloaded = ExperimentConfig::load(&emitted).unwrap();
        assert_eq!(reloaded.run.precision, precision);
    }
}

#[test]
fn seed_flag_changes_the_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&a),
        "--seed",
        "7"
    ])
    .status
    .success());
    assert!(run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&b),
        "--seed",
        "8"
    ])
    .status
    .success());
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    let emitted = ExperimentConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!((emitted.problem.seed, emitted.run.compressor_seed), (7, 7));
}

fn metrics_column(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines
        .next()
        .unwrap()
        .split(',')
        .position(|c| c == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().to_string())
        .collect()
}

#[test]
fn encryption_changes_traffic_not_convergence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[problem]\nd = 60\nn = 6\nrows_per_client = 4\n[run]\nrounds = 30\n",
    );
    let plain = tmp.path().join("gd");
    let aes = tmp.path().join("gd_aes");
    assert!(run(&["run", "--config", s(&cfg), "--out-dir", s(&plain)])
        .status
        .success());
    assert!(run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&aes),
        "--algorithm",
        "gd_aes"
    ])
    .status
    .success());
    assert_eq!(
        metrics_column(&plain.join("metrics.csv"), "grad_norm_sq"),
        metrics_column(&aes.join("metrics.csv"), "grad_norm_sq")
    );
    let down = |p: &Path| {
        metrics_column(&p.join("metrics.csv"), "down_bytes_per_client")[0]
            .parse::<f64>()
            .unwrap()
    };
    let factor = down(&aes) / down(&plain);
    assert!((6.0..6.0 * 1.2).contains(&factor), "factor {factor}");
}

#[test]
fn schedule_emits_two_dot_files_and_one_csv_per_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["schedule", "--out-dir", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "gd_makespans.csv",
            "gd_naive.dot",
            "gd_refined.dot",
            "permk_makespans.csv",
            "permk_naive.dot",
            "permk_refined.dot"
        ]
    );
    for name in ["gd", "permk"] {
        let rows: Vec<f64> = fs::read_to_string(tmp.path().join(format!("{name}_makespans.csv")))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(rows.last().unwrap() <= &rows[0], "{name}: {rows:?}");
        let dot = fs::read_to_string(tmp.path().join(format!("{name}_refined.dot"))).unwrap();
        assert!(dot.starts_with("digraph"));
    }
    let bad = write_config(
        tmp.path(),
        "bad.toml",
        "name = \"x\"\nalgorithm = \"sgd\"\n",
    );
    assert_eq!(
        run(&["schedule", "--scenario", s(&bad)]).status.code(),
        Some(2)
    );
}

#[test]
fn shipped_scenarios_match_the_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenarios");
    let gd = permfl_cli::config::ScenarioConfig::load(&root.join("gd_straggler.toml")).unwrap();
    assert_eq!(gd, permfl_cli::config::ScenarioConfig::default());
    let permk =
        permfl_cli::config::ScenarioConfig::load(&root.join("permk_straggler.toml")).unwrap();
    assert_eq!(
        permk.scenario().unwrap().algorithm,
        permfl_core::SchedAlgorithm::DcgdPermkAes
    );
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            ExperimentConfig::load(&p).unwrap().validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 5);
    let desk = ExperimentConfig::load(&root.join("desk.toml")).unwrap();
    let mut default = ExperimentConfig::default();
    default.output.dir = desk.output.dir.clone();
    assert_eq!(desk, default);
}

#[test]
fn sweep_dim_joins_runs_with_cost_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        r#"
[problem]
n = 4
rows_per_client = 3
[run]
gamma = 0.01
rounds = 7
[sweep]
dims = [20, 400, 8000]
algorithms = ["dcgd_permk_aes", "dcgd_permk", "gd_aes"]
"#,
    );
    let o = run(&["sweep-dim", "--config", s(&cfg), "--out-dir", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(tmp.path().join("sweep_dim.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 9);
    for d in ["20", "400", "8000"] {
        let at_d: Vec<&Vec<String>> = rows.iter().filter(|r| r[col("d")] == d).collect();
        for c in [
            "ckks_up_bytes_per_client",
            "ckks_down_bytes_per_client",
            "ckks_key_bytes",
        ] {
            assert!(
                at_d.iter().all(|r| r[col(c)] == at_d[0][col(c)]),
                "{c} differs at d={d}"
            );
        }
        for alg in ["dcgd_permk_aes", "dcgd_permk", "gd_aes"] {
            let per_d = tmp
                .path()
                .join("sweep")
                .join(format!("d{d}_{alg}_fp64.csv"));
            assert_eq!(fs::read_to_string(per_d).unwrap().lines().count() - 1, 7);
        }
    }
    let overhead = |d: &str| -> f64 {
        let r = rows
            .iter()
            .find(|r| r[col("d")] == d && r[col("algorithm")] == "dcgd_permk_aes")
            .unwrap();
        r[col("aes_overhead_fraction")].parse().unwrap()
    };
    assert!(overhead("20") > 1.0);
    assert!(overhead("8000") < 0.01);
}

#[test]
fn ckks_model_writes_the_cost_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "ckks-model",
        "--dims",
        "1000,11181642",
        "--out-dir",
        s(tmp.path()),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(tmp.path().join("ckks_model.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1000,16384,210,860160,860160,430080,"));
    assert_eq!(run(&["ckks-model", "--dims", "0"]).status.code(), Some(2));
}

#[test]
fn keygen_writes_a_private_hex_key_and_never_leaks_it() {
    let tmp = tempfile::tempdir().unwrap();
    let key = tmp.path().join("k.hex");
    assert!(run(&["keygen", "--key-file", s(&key)]).status.success());
    let hex = fs::read_to_string(&key).unwrap().trim().to_string();
    assert_eq!(hex.len(), 32);
    assert!(hex.chars().all(|c| c.is_ascii_hexdigit()));
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(
            fs::metadata(&key).unwrap().permissions().mode() & 0o777,
            0o600
        );
    }
    assert_eq!(
        run(&["keygen", "--key-file", s(&key)]).status.code(),
        Some(2)
    );
    assert!(run(&["keygen", "--key-file", s(&key), "--force"])
        .status
        .success());
    let hex = fs::read_to_string(&key).unwrap().trim().to_string();

    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("o");
    let o = run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--key-file",
        s(&key),
    ]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).contains(&hex));
    for e in fs::read_dir(&out).unwrap() {
        let text = fs::read_to_string(e.unwrap().path()).unwrap();
        assert!(!text.contains(&hex));
    }
}

fn spawn_hub(cfg: &Path) -> (Child, String) {
    let mut hub = permfl()
        .args(["run", "--config", s(cfg), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(hub.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("hub prints its address")
        .to_string();
    (hub, addr)
}

#[test]
fn mismatched_keys_halt_with_auth_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &SMALL.replace("n = 4", "n = 2"));
    let keys: Vec<PathBuf> = (0..2)
        .map(|i| {
            let k = tmp.path().join(format!("k{i}"));
            assert!(run(&["keygen", "--key-file", s(&k)]).status.success());
            k
        })
        .collect();
    let (mut hub, addr) = spawn_hub(&cfg);
    let clients: Vec<Child> = (0..2)
        .map(|i| {
            permfl()
                .args([
                    "run",
                    "--config",
                    s(&cfg),
                    "--connect",
                    &addr,
                    "--client-id",
                    &i.to_string(),
                ])
                .args([
                    "--key-file",
                    s(&keys[i]),
                    "--out-dir",
                    s(&tmp.path().join("c")),
                ])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in clients {
        assert_eq!(c.wait().unwrap().code(), Some(4));
    }
    assert_ne!(hub.wait().unwrap().code(), Some(0));
}

#[test]
fn permk_half_inverse_smoothness_diverges_at_d1000() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut cfg = ExperimentConfig::load(&root.join("tune_permk_d1000.toml")).unwrap();
    cfg.run.rounds = 300;
    let tmp = tempfile::tempdir().unwrap();
    let report = cmd_tune(&cfg, tmp.path()).unwrap();
    let at = |g: f64| report.entries.iter().find(|e| e.gamma == g).unwrap();
    assert!(at(0.05).outcomes.iter().all(|o| o.diverged));
    assert!(!at(0.007).any_diverged());
    assert_eq!(report.best_gamma, 0.007);
}
