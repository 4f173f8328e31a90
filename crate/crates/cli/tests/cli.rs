use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rsnet::autodiff::Tensor;
use rsnet::graph::{build_adjacency, normalize_adjacency, SkeletonTopology};
use rsnet::splitting::{solve_direct, split};

fn rsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_skeleton(dir: &Path) -> String {
    let path = dir.join("h36m17.json");
    fs::write(
        &path,
        serde_json::to_string(&SkeletonTopology::h36m17()).unwrap(),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&rsnet(&[])), 1);
    assert_eq!(code(&rsnet(&["frobnicate"])), 1);
    assert_eq!(
        code(&rsnet(&["verify-splitting", "--s", "1", "--bogus"])),
        1
    );
    assert_eq!(code(&rsnet(&["verify-splitting", "--s", "one"])), 1);
    assert_eq!(code(&rsnet(&["--help"])), 0);
}

#[test]
fn verify_splitting_reports_all_properties() {
    let dir = tempfile::tempdir().unwrap();
    let skeleton = write_skeleton(dir.path());
    let manifest = dir.path().join("manifest.json");
    let out = rsnet(&[
        "verify-splitting",
        "--skeleton",
        &skeleton,
        "--s",
        "1.0",
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let report = &doc["report"];
    assert_eq!(report["all_passed"], true);
    let props = report["properties"].as_array().unwrap();
    assert_eq!(props.len(), 5);
    assert!(props.iter().all(|p| p["passed"] == true));
    assert!(
        doc["solution_agreement"]["iterative_vs_direct"]
            .as_f64()
            .unwrap()
            < 1e-7
    );
    assert!(
        doc["solution_agreement"]["spectral_vs_direct"]
            .as_f64()
            .unwrap()
            < 1e-7
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "verify-splitting");
    assert_eq!(m["seed"], 42);
}

#[test]
fn verify_splitting_rejects_bad_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"joints":["a","b","c"],"edges":[[0,1]],"root":0}"#,
    )
    .unwrap();
    let out = rsnet(&[
        "verify-splitting",
        "--skeleton",
        path.to_str().unwrap(),
        "--s",
        "1",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn solve_fairing_matches_direct_solve() {
    let dir = tempfile::tempdir().unwrap();
    let signal = dir.path().join("x.csv");
    let x = Tensor::from_fn(17, 2, |i, j| (i as f64 * 0.3 + j as f64).cos());
    let text: String = (0..17)
        .map(|i| format!("{},{}\n", x[(i, 0)], x[(i, 1)]))
        .collect();
    fs::write(&signal, text).unwrap();
    let trace = dir.path().join("trace.csv");
    let out = rsnet(&[
        "solve-fairing",
        "--s",
        "2.5",
        "--signal",
        signal.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let h: Vec<f64> = stdout(&out)
        .lines()
        .flat_map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().unwrap())
                .collect::<Vec<_>>()
        })
        .collect();
    let h = Tensor::from_vec(17, 2, h).unwrap();

    let (a_hat, _) =
        normalize_adjacency::<f64>(&build_adjacency(&SkeletonTopology::h36m17()).unwrap()).unwrap();
    let direct = solve_direct(&split(&a_hat, 2.5).unwrap(), &x).unwrap();
    let rel = h.sub(&direct).unwrap().frobenius_norm() / direct.frobenius_norm();
    assert!(rel < 1e-8, "{rel}");
    let trace = fs::read_to_string(trace).unwrap();
    assert!(trace.starts_with("step,residual_norm"));
    assert!(trace.lines().count() > 3);
}

#[test]
fn solve_fairing_nonconvergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let signal = dir.path().join("x.csv");
    fs::write(&signal, "1,0\n0,1\n2,2\n").unwrap();
    let skeleton = dir.path().join("p3.json");
    fs::write(
        &skeleton,
        serde_json::to_string(&SkeletonTopology::path(3).unwrap()).unwrap(),
    )
    .unwrap();
    let args = |max_iter: &'static str| {
        rsnet(&[
            "solve-fairing",
            "--s",
            "10",
            "--signal",
            signal.to_str().unwrap(),
            "--skeleton",
            skeleton.to_str().unwrap(),
            "--max-iter",
            max_iter,
        ])
    };
    assert_eq!(code(&args("2")), 2);
    assert_eq!(code(&args("10000")), 0);
}

#[test]
fn solve_fairing_rejects_ragged_csv() {
    let dir = tempfile::tempdir().unwrap();
    let signal = dir.path().join("x.csv");
    fs::write(&signal, "1,2\n3\n").unwrap();
    let out = rsnet(&[
        "solve-fairing",
        "--s",
        "1",
        "--signal",
        signal.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_all_passes() {
    let out = rsnet(&["gradcheck", "--all", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.iter().any(|r| r.starts_with("primitive,")));
    assert!(rows.iter().any(|r| r.starts_with("layer,")));
    assert!(rows.iter().any(|r| r.starts_with("model,")));
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{text}");
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.jsonl");
    let out = rsnet(&[
        "synth-data",
        "--count",
        "40",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 40);

    let config = dir.path().join("tiny.json");
    fs::write(
        &config,
        r#"{"model":{"filter_size":6,"hops":3,"num_blocks":1,"refinement_hidden":4},
            "train":{"epochs":2,"batch_size":8,"lr0":0.001,"decay":[]},
            "eval_fraction":0.25}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = rsnet(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let last: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(last["epoch"], 1);
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["seed"], 42);

    let out = rsnet(&[
        "eval",
        "--checkpoint",
        run.join("best.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    for key in ["mpjpe_mm", "pa_mpjpe_mm", "pck_150", "auc", "train_loss"] {
        assert!(record[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn train_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"model":{"filter_sz":6}}"#).unwrap();
    let data = dir.path().join("d.jsonl");
    fs::write(&data, "").unwrap();
    let out = rsnet(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.json", "detector_preset.json", "gt_preset.json"] {
        let text = fs::read_to_string(root.join(name)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let model: rsnet::model::ModelConfig = serde_json::from_value(v["model"].clone()).unwrap();
        model.validate().unwrap();
        let train: rsnet::training::TrainConfig =
            serde_json::from_value(v["train"].clone()).unwrap();
        train.validate().unwrap();
    }
}
