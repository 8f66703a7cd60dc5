use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::tempdir;

fn sibp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sibp")).args(args).output().expect("binary runs")
}

fn json_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("one output line")).expect("json output")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, n: usize, seed: u64) {
    let out = sibp(&["simulate", "--scenario", "I", "--n", &n.to_string(), "--n-test", "6", "--seed", &seed.to_string(), "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_fit_predict_metrics() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let fit = tmp.path().join("fit");
    simulate(&data, 25, 4);
    for f in ["locations.csv", "observations.csv", "test_locations.csv", "test_probabilities.csv", "true_z.csv", "scenario.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let out = sibp(&[
        "fit", "--locations", p(&data.join("locations.csv")), "--observations", p(&data.join("observations.csv")),
        "--burn-in", "30", "--keep", "20", "--chains", "2", "--store-u", "--out", p(&fit),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json_line(&out);
    assert_eq!(summary["draws"], 40);
    assert!(fit.join("chain-2.jsonl").exists());
    let lines = std::fs::read_to_string(fit.join("chain-1.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);

    let pred = tmp.path().join("pred.csv");
    let probs = tmp.path().join("probs.csv");
    let out = sibp(&["predict", "--fit", p(&fit), "--sites", p(&data.join("test_locations.csv")), "--out", p(&pred), "--probabilities", p(&probs)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // 6 sites × 10 factors plus a header.
    assert_eq!(std::fs::read_to_string(&pred).unwrap().lines().count(), 61);

    let out = sibp(&["metrics", "mse", "--estimate", p(&probs), "--truth", p(&data.join("test_probabilities.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mse = json_line(&out)["value"].as_f64().unwrap();
    assert!(mse > 0.0 && mse < 1.0, "{mse}");

    let out = sibp(&["metrics", "rand", "--truth", p(&data.join("true_z.csv")), "--presence", p(&fit.join("presence.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ri = json_line(&out);
    assert_eq!(ri["values"].as_array().unwrap().len(), 3);

    let out = sibp(&["metrics", "dic", "--fit", p(&fit)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = json_line(&out);
    let (dic, mean, pd) = (d["dic"].as_f64().unwrap(), d["mean_deviance"].as_f64().unwrap(), d["p_d"].as_f64().unwrap());
    assert!((dic - mean - pd).abs() < 1e-6 * dic.abs());
}

#[test]
fn predict_without_stored_u_fails_cleanly() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let fit = tmp.path().join("fit");
    simulate(&data, 10, 1);
    let out = sibp(&[
        "fit", "--locations", p(&data.join("locations.csv")), "--observations", p(&data.join("observations.csv")),
        "--burn-in", "2", "--keep", "3", "--out", p(&fit),
    ]);
    assert!(out.status.success());
    let out = sibp(&["predict", "--fit", p(&fit), "--sites", p(&data.join("test_locations.csv")), "--out", p(&tmp.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent fields"));
}

#[test]
fn nngp_and_exchangeable_flags() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, 15, 2);
    let (locs, obs) = (data.join("locations.csv"), data.join("observations.csv"));
    for extra in [&["--nngp", "5"][..], &["--exchangeable"][..]] {
        let fit = tmp.path().join(format!("fit{}", extra.len()));
        let mut args = vec![
            "fit", "--locations", p(&locs), "--observations", p(&obs),
            "--burn-in", "5", "--keep", "5", "--out", p(&fit),
        ];
        args.extend_from_slice(extra);
        let out = sibp(&args);
        assert!(out.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        let meta: Value = serde_json::from_str(&std::fs::read_to_string(fit.join("meta.json")).unwrap()).unwrap();
        if extra[0] == "--nngp" {
            assert_eq!(meta["config"]["sampler"]["latent"]["neighbors"], 5);
        } else {
            assert_eq!(meta["kernel"]["family"], "exchangeable");
        }
    }
}

#[test]
fn negbin_fit() {
    let tmp = tempdir().unwrap();
    let locs = tmp.path().join("locs.csv");
    let obs = tmp.path().join("counts.csv");
    std::fs::write(&locs, "id,x,y\na,0,0\nb,0.5,0\nc,0,0.5\nd,1,1\n").unwrap();
    std::fs::write(&obs, "id,sp1,sp2\na,0,3\nb,2,0\nc,5,1\nd,0,0\n").unwrap();
    let fit = tmp.path().join("fit");
    let out = sibp(&[
        "fit", "--model", "negbin", "--locations", p(&locs), "--observations", p(&obs),
        "--burn-in", "10", "--keep", "10", "--truncation", "3", "--out", p(&fit),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = sibp(&["metrics", "dic", "--fit", p(&fit)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_defaults_round_trip_and_unknown_keys() {
    let tmp = tempdir().unwrap();
    let out = sibp(&["config"]);
    assert!(out.status.success());
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, &out.stdout).unwrap();
    let data = tmp.path().join("data");
    simulate(&data, 8, 3);
    let fit_args = |config: &Path| {
        sibp(&[
            "fit", "--config", p(config), "--locations", p(&data.join("locations.csv")),
            "--observations", p(&data.join("observations.csv")), "--burn-in", "2", "--keep", "2",
            "--out", p(&tmp.path().join("fit")),
        ])
    };
    let out = fit_args(&cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "model = \"multinomial\"\n[sampler]\nbogus = 1\n").unwrap();
    let out = fit_args(&bad);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn input_errors_exit_one_with_line_numbers() {
    let tmp = tempdir().unwrap();
    let locs = tmp.path().join("locs.csv");
    let obs = tmp.path().join("obs.csv");
    std::fs::write(&locs, "id,x,y\na,0,0\nb,1,0\n").unwrap();
    std::fs::write(&obs, "id,f1\na,1\nb,x\n").unwrap();
    let out = sibp(&["fit", "--locations", p(&locs), "--observations", p(&obs), "--out", p(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = sibp(&["fit", "--locations", p(&tmp.path().join("missing.csv")), "--observations", p(&obs), "--out", p(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_abort_exits_two() {
    let tmp = tempdir().unwrap();
    let locs = tmp.path().join("locs.csv");
    let obs = tmp.path().join("obs.csv");
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&locs, "id,x,y\na,0,0\nb,1,0\n").unwrap();
    std::fs::write(&obs, "id,f1\na,1\nb,2\n").unwrap();
    // A μ prior this extreme overflows the τ conditional.
    std::fs::write(&cfg, "[sampler.mu_prior]\nmean = 1e200\nvar = 1e300\n").unwrap();
    let out = sibp(&["fit", "--config", p(&cfg), "--locations", p(&locs), "--observations", p(&obs), "--out", p(&tmp.path().join("f"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_quick_report() {
    let tmp = tempdir().unwrap();
    let report = tmp.path().join("report.jsonl");
    let out = sibp(&["verify", "--quick", "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.len() > 10);
    for r in &records {
        for key in ["check", "estimate", "oracle", "se", "pass"] {
            assert!(r.get(key).is_some(), "{key} missing in {r}");
        }
    }
    let mus: std::collections::BTreeSet<String> = records
        .iter()
        .filter(|r| r["check"] == "expected_common_features")
        .map(|r| r["params"]["mu"].to_string())
        .collect();
    assert_eq!(mus.len(), 3);
}
