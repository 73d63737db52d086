use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volimpute::fixtures::linear_gaussian;
use volimpute::nd::AdamConfig;
use volimpute::vae::{Checkpoint, VaeConfig, VaeParams};
use volimpute::RngStream;

const SMALL_RUN: &str = r#"
checkpoint_every = 25
log_every = 10

[model]
latent_dim = 4
hidden_dim = 16
dropout = 0.0

[training]
steps = 50
seed = 3

[data]
source = "synthetic_surfaces"
days = 120
seed = 1

[data.split]
by = "counts"
train = 80
validation = 20
test = 20

[eval]
iwae_k = 5

[eval.imputation]
n_samples = 200
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_volimpute"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn volimpute")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstdout {}\nstderr {}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, SMALL_RUN).unwrap();
    p
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir);
    let o = dir.join(out);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&o)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn zero_steps_saves_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    ok(&train(dir.path(), "r0", &["--set", "training.steps=0"]));
    let ck = Checkpoint::load(dir.path().join("r0/checkpoint.json")).unwrap();
    let cfg = VaeConfig { feature_dim: 40, latent_dim: 4, hidden_dim: 16, dropout: 0.0, ..VaeConfig::default() };
    let init = VaeParams::init(&cfg, &mut RngStream::new(3).fork(u64::MAX)).unwrap();
    assert_eq!(ck.vae_params().unwrap(), init);
}

#[test]
fn same_seed_runs_are_bit_identical_and_resume_is_guarded() {
    let dir = tempfile::tempdir().unwrap();
    ok(&train(dir.path(), "a", &[]));
    ok(&train(dir.path(), "b", &[]));
    // checkpoints embed their own output_dir, so compare weights and logs
    let a = Checkpoint::load(dir.path().join("a/checkpoint.json")).unwrap();
    let b = Checkpoint::load(dir.path().join("b/checkpoint.json")).unwrap();
    let bits = |c: &Checkpoint| {
        let p = c.vae_params().unwrap();
        p.names().flat_map(|n| p.get(n).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    let log = std::fs::read_to_string(dir.path().join("a/loss_log.csv")).unwrap();
    assert_eq!(log, std::fs::read_to_string(dir.path().join("b/loss_log.csv")).unwrap());
    assert!(log.starts_with("step,total,recon,kl,lr"));
    assert!(dir.path().join("a/config.toml").exists());

    // existing checkpoint without --resume is refused
    let again = train(dir.path(), "a", &[]);
    assert_eq!(again.status.code(), Some(2));
    // resuming with a changed model is refused
    let changed = train(dir.path(), "a", &["--resume", "--set", "model.hidden_dim=8"]);
    assert_eq!(changed.status.code(), Some(2));
    // resuming to more steps continues the same trajectory as one long run
    ok(&train(dir.path(), "a", &["--resume", "--set", "training.steps=80"]));
    ok(&train(dir.path(), "c", &["--set", "training.steps=80"]));
    let a = Checkpoint::load(dir.path().join("a/checkpoint.json")).unwrap();
    let c = Checkpoint::load(dir.path().join("c/checkpoint.json")).unwrap();
    assert_eq!(a.vae_params().unwrap(), c.vae_params().unwrap());
}

#[test]
fn impute_matches_linear_gaussian_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("lg.json");
    Checkpoint::new(&linear_gaussian(0.1).unwrap(), 0, 0, AdamConfig::default()).save(&ck).unwrap();
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "x1,x2\n0.5,\n0.3,0.31\n").unwrap();
    let output = dir.path().join("out.csv");
    ok(&run(&["impute", "--checkpoint", s(&ck), "--input", s(&input), "--output", s(&output), "--n-samples", "100000"]));
    let mut rd = csv::Reader::from_path(&output).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let s2: f64 = 0.01;
    let (mean, var) = (0.5 / (1.0 + s2), s2 / (1.0 + s2) + s2);
    let miss = rows.iter().find(|r| &r[0] == "0" && &r[2] == "0").expect("missing cell row");
    assert!((miss[3].parse::<f64>().unwrap() - mean).abs() < 5e-3);
    assert!((miss[4].parse::<f64>().unwrap() - var).abs() < 5e-3);
    // a fully observed row passes through: observed cells report no variance
    for r in rows.iter().filter(|r| &r[0] == "1") {
        assert_eq!(&r[2], "1");
        assert_eq!(&r[4], "");
    }
    assert!(dir.path().join("out.csv.results.json").exists() || output.with_extension("results.json").exists());
}

#[test]
fn synth_outputs_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let two = dir.path().join("two.csv");
    ok(&run(&["synth", "--kind", "two-gauss-equal", "--out", s(&two)]));
    let text = std::fs::read_to_string(&two).unwrap();
    assert_eq!(text.lines().count(), 1001);

    let surf = dir.path().join("surf.csv");
    ok(&run(&["synth", "--kind", "surfaces", "--n", "30", "--seed", "4", "--out", s(&surf)]));
    let ds = volimpute::surfaces::load_csv(&surf).unwrap();
    assert_eq!(ds.len(), 30);
    assert_eq!(ds.surfaces, volimpute::surfaces::gen_synthetic_surfaces(30, 4).unwrap().surfaces);
    // and the generated surfaces are arbitrage-free
    ok(&run(&["arb-check", "--input", s(&surf)]));
}

#[test]
fn arb_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.csv");
    let mut text = String::from("tenor,strike,price\n");
    for t in [0.25, 0.5, 1.0] {
        for k in [0.8, 0.9, 1.0, 1.1, 1.2] {
            text.push_str(&format!("{t},{k},{}\n", volimpute::surfaces::bs_call(1.0, k, t, 0.2)));
        }
    }
    std::fs::write(&flat, &text).unwrap();
    ok(&run(&["arb-check", "--input", s(&flat)]));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "tenor,strike,price\n0.5,1.0,0.05\n1.0,1.0,0.04\n").unwrap();
    let out = run(&["arb-check", "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("calendar"), "{stdout}");

    let missing = run(&["arb-check", "--input", s(&dir.path().join("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn eval_reports_every_rate() {
    let dir = tempfile::tempdir().unwrap();
    ok(&train(dir.path(), "m", &[]));
    let out = dir.path().join("eval");
    ok(&run(&["eval", "--checkpoint", s(&dir.path().join("m/checkpoint.json")), "--out", s(&out)]));
    let mae = std::fs::read_to_string(out.join("mae.csv")).unwrap();
    assert_eq!(mae.lines().count(), 10);
    for f in ["report.json", "calibration.csv", "collapse.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn sweep_ranks_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "[axes]\n\"model.hidden_dim\" = [8, 16]\n").unwrap();
    let out = dir.path().join("sweep");
    ok(&run(&["sweep", "--config", s(&cfg), "--grid", s(&grid), "--out", s(&out)]));
    let board = std::fs::read_to_string(out.join("leaderboard.csv")).unwrap();
    assert_eq!(board.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("leaderboard.json")).unwrap()).unwrap();
    let rho = json["rank_correlation"].as_f64();
    if let Some(r) = rho {
        assert!((-1.0..=1.0).contains(&r));
    }
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--seed", "1"]);
    ok(&out);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let out = run(&["train", "--set", "model.no_such_key=1", "--set", "training.steps=0"]);
    assert_eq!(out.status.code(), Some(2));
}
