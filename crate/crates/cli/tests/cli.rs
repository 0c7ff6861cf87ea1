use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use metriflow::bench::{aggregate, Dataset};
use metriflow::cfm::Checkpoint;
use metriflow::integrate::RolloutRecord;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metriflow"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn metriflow")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Tiny dataset plus a three-epoch checkpoint of each kind, shared by the tests.
struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

impl Fixture {
    fn ckpt(&self, kind: &str) -> PathBuf {
        self.root.join(kind).join("checkpoint.json")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["gendata", "--train", "8", "--test", "3", "--out", s(&data)]);
        for kind in ["hard-mcfm", "baseline", "metriplectic-hard"] {
            ok(&[
                "train",
                "--data",
                s(&data),
                "--model-kind",
                kind,
                "--epochs",
                "3",
                "--width",
                "16",
                "--out",
                s(&root.join(kind)),
            ]);
        }
        Fixture { _root: dir, data, root }
    })
}

#[test]
fn default_gendata_gives_600_trajectories_of_50_steps() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gendata", "--out", s(dir.path())]);
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["counts"]["train"], 500);
    assert_eq!(m["counts"]["test"], 100);
    assert_eq!(m["steps"], 50);
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.train.len() + ds.test.len(), 600);
    assert!(ds.train.iter().chain(&ds.test).all(|t| t.states.len() == 51));
}

#[test]
fn smoke_dataset_and_same_seed_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["gendata", "--train", "5", "--test", "2", "--seed", "7", "--out", s(d)]);
    }
    let ds = Dataset::load(&a).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (5, 2));
    for f in ["manifest.json", "train/traj_0004.csv", "test/traj_0001.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    ok(&["gendata", "--train", "5", "--test", "2", "--seed", "8", "--out", s(&c)]);
    assert_ne!(
        std::fs::read(a.join("train/traj_0000.csv")).unwrap(),
        std::fs::read(c.join("train/traj_0000.csv")).unwrap()
    );
}

#[test]
fn provenance_records_resolved_config_and_version() {
    let f = fixture();
    let p = read_json(&f.root.join("hard-mcfm/run_config.json"));
    assert_eq!(p["tool"], "metriflow");
    assert_eq!(p["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(p["command"], "train");
    assert_eq!(p["config"]["epochs"], 3);
    assert_eq!(p["config"]["width"], 16);
    assert_eq!(p["config"]["model_kind"], "hard-mcfm");
    assert!(f.data.join("run_config.json").exists());
}

#[test]
fn checkpoint_descriptors_follow_model_kind() {
    let f = fixture();
    let d = |k: &str| read_json(&f.ckpt(k))["descriptor"].clone();
    let hard = d("metriplectic-hard");
    assert_eq!(hard["kind"], "metriplectic");
    assert_eq!(hard["degeneracy"], "hard");
    assert_eq!(d("baseline")["kind"], "baseline");
    assert_eq!(d("hard-mcfm")["h_mode"], "e_phys");
    let ck = Checkpoint::load(&f.ckpt("hard-mcfm")).unwrap();
    assert_eq!(ck.time_scale, 5.0);
    let loss = std::fs::read_to_string(f.root.join("hard-mcfm/loss.csv")).unwrap();
    assert!(loss.starts_with("step,lr,loss,mse,soft_penalty,reg_penalty\n"));
    // 8 trajectories × 50 transitions fit in two batches of 256, for three epochs
    assert_eq!(loss.lines().count(), 1 + 6);
}

#[test]
fn one_epoch_smoke_run_is_fast() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(&[
        "train",
        "--data",
        s(&f.data),
        "--model-kind",
        "metriplectic-hard",
        "--epochs",
        "1",
        "--out",
        s(out.path()),
    ]);
    assert!(t.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model_kind": "baseline", "epochs": 2, "width": 8, "lr_max": 0.01}"#,
    )
    .unwrap();
    let o = out.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--epochs",
        "1",
        "--out",
        s(&o),
    ]);
    let p = read_json(&o.join("run_config.json"))["config"].clone();
    assert_eq!(p["model_kind"], "baseline");
    assert_eq!(p["epochs"], 1);
    assert_eq!(p["width"], 8);
    assert_eq!(p["lr_max"], 0.01);
}

#[test]
fn rollout_rows_follow_horizon_and_step() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "rollout",
        "--checkpoint",
        s(&f.ckpt("hard-mcfm")),
        "--data",
        s(&f.data),
        "--horizon",
        "5",
        "--h",
        "0.1",
        "--out",
        s(out.path()),
    ]);
    for i in 0..3 {
        let text = std::fs::read_to_string(out.path().join(format!("traj_{i:04}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,q,p,E,dEdt,Phi,dH_ham,dPhi_ham,dPhi_metric");
        assert_eq!(lines.count(), 51);
    }
    let p = read_json(&out.path().join("run_config.json"));
    assert_eq!(p["config"]["sampler"], "strang-prox");
}

#[test]
fn projected_rollout_never_reports_energy_growth() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "rollout",
        "--checkpoint",
        s(&f.ckpt("baseline")),
        "--data",
        s(&f.data),
        "--projection",
        "on",
        "--out",
        s(out.path()),
    ]);
    for i in 0..3 {
        let r = RolloutRecord::load_csv(&out.path().join(format!("traj_{i:04}.csv"))).unwrap();
        assert!(r.energy_rate.iter().all(|&v| v <= 0.0), "trajectory {i}");
    }
}

#[test]
fn strang_prox_on_baseline_is_refused() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "rollout",
        "--checkpoint",
        s(&f.ckpt("baseline")),
        "--data",
        s(&f.data),
        "--sampler",
        "strang-prox",
        "--out",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("metriplectic"));
}

#[test]
fn verify_analytic_pendulum_passes_slope_checks() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "verify",
        "--analytic",
        "shrink-pendulum",
        "--points",
        "200",
        "--out",
        s(out.path()),
    ]);
    let t2 = read_json(&out.path().join("theorem2.json"));
    assert_eq!(t2["slope_pass"], true);
    assert_eq!(t2["bound_pass"], true);
    assert_eq!(t2["rows"].as_array().unwrap().len(), 4);
    assert!(out.path().join("theorem1.json").exists());
    assert_eq!(read_json(&out.path().join("descent.json"))["passed"], true);
}

#[test]
fn verify_hard_checkpoint_conserves_h_everywhere() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "verify",
        "--checkpoint",
        s(&f.ckpt("metriplectic-hard")),
        "--points",
        "300",
        "--out",
        s(out.path()),
    ]);
    let t1 = read_json(&out.path().join("theorem1.json"));
    assert_eq!(t1["n"], 300);
    assert_eq!(t1["pass_counts"]["conservation"], 300);
    assert_eq!(t1["pass_counts"]["dissipation"], 300);
    assert_eq!(t1["passed"], true);
}

#[test]
fn verify_refuses_baseline() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--checkpoint", s(&f.ckpt("baseline")), "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("baseline"));
    assert!(!out.path().join("theorem1.json").exists());
}

fn rollouts_of(f: &Fixture, kind: &str, dir: &Path) {
    ok(&[
        "rollout",
        "--checkpoint",
        s(&f.ckpt(kind)),
        "--data",
        s(&f.data),
        "--out",
        s(dir),
    ]);
}

#[test]
fn report_outputs_and_recomputation() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let (a, b) = (out.path().join("a"), out.path().join("b"));
    rollouts_of(f, "hard-mcfm", &a);
    rollouts_of(f, "baseline", &b);
    let rep = out.path().join("report");
    ok(&[
        "report",
        "--run",
        &format!("mcfm={}", s(&a)),
        "--run",
        &format!("uf={}", s(&b)),
        "--data",
        s(&f.data),
        "--out",
        s(&rep),
    ]);
    let mut svgs: Vec<String> = std::fs::read_dir(&rep)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    svgs.sort();
    assert_eq!(
        svgs,
        ["energy_rate.svg", "energy_ratio.svg", "metrics.svg", "phase.svg"]
    );
    let m = read_json(&rep.join("metrics.json"));
    assert_eq!(m["models"].as_array().unwrap().len(), 2);
    assert_eq!(m["comparison"]["first"], "mcfm");

    // recompute from the CSVs with the library
    let ds = Dataset::load(&f.data).unwrap();
    let reference: Vec<Vec<f64>> = ds.test.iter().map(|t| t.terminal().to_vec()).collect();
    for (k, (name, dir)) in [("mcfm", &a), ("uf", &b)].into_iter().enumerate() {
        let recs: Vec<RolloutRecord> = (0..3)
            .map(|i| RolloutRecord::load_csv(&dir.join(format!("traj_{i:04}.csv"))).unwrap())
            .collect();
        let again = aggregate(name, &recs, &reference, 128, 0).unwrap();
        assert_eq!(m["models"][k], serde_json::to_value(&again).unwrap());
    }
}

#[test]
fn single_model_report_has_null_comparison() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let a = out.path().join("a");
    rollouts_of(f, "hard-mcfm", &a);
    let rep = out.path().join("report");
    ok(&[
        "report",
        "--run",
        &format!("only={}", s(&a)),
        "--data",
        s(&f.data),
        "--out",
        s(&rep),
    ]);
    let m = read_json(&rep.join("metrics.json"));
    assert!(m["comparison"].is_null());
    assert_eq!(m["models"][0]["model"], "only");
    let svg = std::fs::read_to_string(rep.join("phase.svg")).unwrap();
    assert!(svg.contains(">only<"));
}

#[test]
fn report_without_rollouts_fails() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let empty = out.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&[
        "report",
        "--run",
        &format!("x={}", s(&empty)),
        "--data",
        s(&f.data),
        "--out",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let base = f.ckpt("baseline");
    let cases: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["train", "--epochs", "many"],
        vec![
            "train",
            "--data",
            s(&f.data),
            "--model-kind",
            "nope",
            "--out",
            s(out.path()),
        ],
        vec!["gendata", "--dt", "-1", "--out", s(out.path())],
        vec![
            "rollout",
            "--checkpoint",
            s(&base),
            "--data",
            s(&f.data),
            "--sampler",
            "euler",
            "--out",
            s(out.path()),
        ],
        vec!["report", "--run", "missing-equals", "--data", s(&f.data)],
        vec!["verify", "--out", s(out.path())],
    ];
    for c in cases {
        assert_eq!(run(&c).status.code(), Some(1), "{c:?}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let mut files = vec![];
    for n in ["1", "4"] {
        let o = out.path().join(n);
        let st = bin()
            .env("METRIFLOW_THREADS", n)
            .args([
                "train",
                "--data",
                s(&f.data),
                "--model-kind",
                "metriplectic-hard",
                "--epochs",
                "2",
                "--width",
                "16",
                "--out",
                s(&o),
            ])
            .status()
            .unwrap();
        assert!(st.success());
        files.push(std::fs::read(o.join("checkpoint.json")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}
