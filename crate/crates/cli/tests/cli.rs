//! Drives the `fedsilo` binary end to end.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedsilo::datagen::DatasetBundle;
use fedsilo::eval::{FusionMap, TaskScore};
use fedsilo::model::{forward, load_head, load_trunk, ModelParams};
use tempfile::TempDir;

fn fedsilo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsilo")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fedsilo(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn read_scores(path: &Path) -> Vec<TaskScore> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

fn read_predictions(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn load_model(run: &Path, partner: u32) -> ModelParams {
    ModelParams::from_parts(
        load_trunk(&run.join("trunk.mdym")).unwrap(),
        load_head(&run.join(format!("head_p{partner}.mdym"))).unwrap(),
        None,
    )
    .unwrap()
}

fn mean_auroc(scores: &[TaskScore]) -> f64 {
    scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64
}

#[test]
fn generate_is_deterministic_and_writes_one_dir_per_partner() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--partners", "4", "--variant", "CLS", "--seed", "7", "--out", p(d)]);
    }
    for i in 0..4 {
        assert!(a.join(format!("partner_{i}")).join("X.mdys").exists());
    }
    assert!(!a.join("partner_4").exists());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn invalid_variant_exits_2_and_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = fedsilo(&["generate", "--variant", "XYZ", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));
}

#[test]
fn invalid_config_field_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"federation": {"k_fraction": 1.5}}"#).unwrap();
    let out = fedsilo(&["run", "--config", p(&cfg), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k_fraction"));

    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let out = fedsilo(&["run", "--config", p(&cfg), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"partners": 5, "federation": {"epochs": 9, "k_fraction": 1.5}}"#).unwrap();
    let run = tmp.path().join("run");
    let json = ok(&[
        "run", "--config", p(&cfg), "--partners", "2", "--epochs", "1", "--k-fraction", "0.5", "--out", p(&run), "--json",
    ]);
    let summary: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(summary["partners"], 2);
    assert_eq!(summary["rounds"], 4);
}

#[test]
fn run_writes_checkpoints_metrics_and_transcript() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    ok(&["run", "--seed", "3", "--partners", "2", "--epochs", "2", "--out", p(&run)]);
    for f in ["metrics.csv", "transcript.bin", "trunk.mdym", "head_p0.mdym", "head_p1.mdym", "scores_p0.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(header.starts_with("round,partner_anon_id,task_idx,metric_name,value\n"));

    let final_run = tmp.path().join("final");
    ok(&["run", "--seed", "3", "--partners", "2", "--epochs", "1", "--phase", "3", "--out", p(&final_run)]);
    let metrics = fs::read_to_string(final_run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "final phase must not publish scores");
    assert!(!final_run.join("scores_p0.csv").exists());
}

#[test]
fn predict_reproduces_forward_and_filters_tasks() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&["generate", "--partners", "2", "--seed", "4", "--out", p(&data)]);
    ok(&["run", "--data", p(&data), "--partners", "2", "--seed", "4", "--epochs", "2", "--out", p(&run)]);
    let input = data.join("partner_0");
    let out = tmp.path().join("pred.csv");
    ok(&[
        "predict", "--trunk", p(&run.join("trunk.mdym")), "--head", p(&run.join("head_p0.mdym")), "--input", p(&input),
        "--out", p(&out),
    ]);
    let model = load_model(&run, 0);
    let bundle = DatasetBundle::load(&input).unwrap();
    let pass = forward(&model, &bundle.x).unwrap();
    let (header, rows) = read_predictions(&out);
    assert_eq!(header.len(), 1 + model.n_outputs());
    assert_eq!(rows.len(), bundle.n_rows());
    for (i, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert_eq!(v.to_bits(), pass.output(i, c).to_bits(), "row {i} col {c}");
        }
    }

    ok(&[
        "predict", "--trunk", p(&run.join("trunk.mdym")), "--head", p(&run.join("head_p0.mdym")), "--input", p(&input),
        "--tasks", "3", "--out", p(&out),
    ]);
    let (header, rows) = read_predictions(&out);
    assert_eq!(header, vec!["row", "task_3"]);
    assert_eq!(rows[5][0].to_bits(), pass.output(5, 3).to_bits());
}

#[test]
fn predict_featurizes_compound_ids() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    ok(&["run", "--partners", "1", "--epochs", "1", "--out", p(&run)]);
    let input = tmp.path().join("ids");
    fs::create_dir_all(&input).unwrap();
    fs::write(input.join("ids.txt"), "17\n42\n\n99\n").unwrap();
    let out = tmp.path().join("pred.csv");
    ok(&[
        "predict", "--trunk", p(&run.join("trunk.mdym")), "--head", p(&run.join("head_p0.mdym")), "--input", p(&input),
        "--out", p(&out),
    ]);
    let x = fedsilo::eval::featurize_compounds(&[17, 42, 99], 256, 12);
    let pass = forward(&load_model(&run, 0), &x).unwrap();
    let (_, rows) = read_predictions(&out);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0].to_bits(), pass.output(1, 0).to_bits());
}

#[test]
fn fusion_routes_each_task_to_its_selected_model() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--partners", "2", "--seed", "5", "--out", p(&data)]);
    let (ra, rb) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--data", p(&data), "--partners", "2", "--seed", "5", "--epochs", "3", "--out", p(&ra)]);
    ok(&[
        "run", "--data", p(&data), "--partners", "1", "--seed", "5", "--epochs", "3", "--model-id", "1", "--out", p(&rb),
    ]);
    let map_path = tmp.path().join("fusion.json");
    ok(&[
        "fuse", "--scores", p(&ra.join("scores_p0.csv")), "--scores", p(&rb.join("scores_p0.csv")), "--out", p(&map_path),
    ]);
    let map: FusionMap = serde_json::from_slice(&fs::read(&map_path).unwrap()).unwrap();
    assert!(!map.selection.is_empty());

    // the selection is the per-task argmax of the validation scores
    let (sa, sb) = (read_scores(&ra.join("scores_p0.csv")), read_scores(&rb.join("scores_p0.csv")));
    for (a, b) in sa.iter().zip(&sb) {
        let want = if b.value > a.value { 1 } else { 0 };
        assert_eq!(map.model_for(a.task_idx), Some(want), "task {}", a.task_idx);
    }

    let input = data.join("partner_0");
    let fused = tmp.path().join("fused.csv");
    ok(&[
        "predict", "--trunk", p(&ra.join("trunk.mdym")), "--head", p(&ra.join("head_p0.mdym")), "--trunk",
        p(&rb.join("trunk.mdym")), "--head", p(&rb.join("head_p0.mdym")), "--fusion", p(&map_path), "--input", p(&input),
        "--out", p(&fused),
    ]);
    let (header, fused_rows) = read_predictions(&fused);
    let standalone: Vec<Vec<Vec<f64>>> = [&ra, &rb]
        .iter()
        .map(|r| {
            let out = tmp.path().join("single.csv");
            ok(&[
                "predict", "--trunk", p(&r.join("trunk.mdym")), "--head", p(&r.join("head_p0.mdym")), "--input",
                p(&input), "--out", p(&out),
            ]);
            read_predictions(&out).1
        })
        .collect();
    for (k, name) in header.iter().skip(1).enumerate() {
        let task: usize = name.trim_start_matches("task_").parse().unwrap();
        let model = map.model_for(task).unwrap_or(0) as usize;
        for (i, row) in fused_rows.iter().enumerate() {
            assert_eq!(row[k].to_bits(), standalone[model][i][task].to_bits());
        }
    }
}

#[test]
fn federation_beats_the_single_partner_baseline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--partners", "4", "--compounds", "2000", "--seed", "8", "--out", p(&data)]);
    let (fed, solo) = (tmp.path().join("fed"), tmp.path().join("solo"));
    ok(&["run", "--data", p(&data), "--partners", "4", "--seed", "8", "--out", p(&fed)]);
    ok(&["run", "--data", p(&data), "--partners", "1", "--seed", "8", "--out", p(&solo)]);
    let f = mean_auroc(&read_scores(&fed.join("scores_p0.csv")));
    let s = mean_auroc(&read_scores(&solo.join("scores_p0.csv")));
    assert!(f >= s, "federated {f:.3} < solo {s:.3}");
}

#[test]
fn report_counts_runs_per_phase_and_variant() {
    let tmp = TempDir::new().unwrap();
    let mut runs = Vec::new();
    for (i, (variant, phase)) in [("CLS", "1"), ("CLS", "1"), ("REG", "1"), ("CLS", "2")].iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        ok(&[
            "run", "--partners", "2", "--variant", variant, "--phase", phase, "--epochs", "1", "--seed", &i.to_string(),
            "--out", p(&dir),
        ]);
        runs.push(dir);
    }
    let csv_path = tmp.path().join("report.csv");
    let mut args = vec!["report".to_string(), "--json".into(), "--out".into(), p(&csv_path).into()];
    for r in &runs {
        args.push("--run".into());
        args.push(p(r).into());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let rows: Vec<serde_json::Value> = serde_json::from_str(&ok(&args)).unwrap();
    let counts: Vec<(u64, String, u64)> = rows
        .iter()
        .map(|r| (r["phase"].as_u64().unwrap(), r["variant"].as_str().unwrap().to_string(), r["runs"].as_u64().unwrap()))
        .collect();
    assert_eq!(
        counts,
        vec![(1, "CLS".into(), 2), (1, "REG".into(), 1), (2, "CLS".into(), 1)]
    );
    assert_eq!(counts.iter().map(|c| c.2).sum::<u64>(), runs.len() as u64);
    assert!(rows[1]["mean_rmse"].as_f64().is_some() && rows[1]["mean_auroc"].is_null());
    assert_eq!(fs::read_to_string(&csv_path).unwrap().lines().count(), 4);

    let one = ok(&["report", "--run", p(&runs[0])]);
    assert!(one.contains("total runs: 1"));
    assert_eq!(one.lines().count(), 3);
}

#[test]
fn report_rejects_missing_runs() {
    let tmp = TempDir::new().unwrap();
    let out = fedsilo(&["report", "--run", p(&tmp.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attack_emits_results_as_json_and_csv() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("attack.csv");
    let json = ok(&[
        "attack", "--kind", "mia", "--aggregate", "1,8", "--trials", "60", "--seed", "2", "--json", "--out", p(&out),
    ]);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["kind"], "MIA_SINGLE");
    assert_eq!(rows[1]["kind"], "MIA_AGGREGATE");
    let text = fs::read_to_string(out).unwrap();
    assert!(text.starts_with("kind,accuracy,advantage,n_trials,target"));
    assert_eq!(text.lines().count(), 3);
}
