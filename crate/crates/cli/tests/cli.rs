use std::fs;
use std::path::Path;
use std::process::Command;

fn bino() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bino"))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_bench_empty_writes_manifests_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let st = bino().args(["gen-bench", "--out"]).arg(&out).args(["--set", "bench.count=0"]).status().unwrap();
    assert!(st.success());
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["manifest.json", "run_manifest.json"]);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "ok");
    assert_eq!(run["config"]["bench.count"], "0");
}

#[test]
fn gen_bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let st = bino()
            .args(["gen-bench", "--out"])
            .arg(out)
            .args(["--set", "bench.preset=EASY_S1", "--set", "bench.count=8", "--set", "bench.seed=5"])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 8 * 3 + 1);
    assert_eq!(ta, tree(&b));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bench");
    assert!(bino().args(["gen-bench", "--out"]).arg(&data).args(["--set", "bench.count=1"]).status().unwrap().success());

    let missing = bino()
        .args(["eval-synth", "--ckpt"])
        .arg(dir.path().join("nope.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.bin"));

    let bad_key = bino().args(["gen-bench", "--out"]).arg(&data).args(["--set", "bench.nonsense=1"]).status().unwrap();
    assert_eq!(bad_key.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "encoder.depth = 2\nencoder.depth = 3\n").unwrap();
    let dup = bino().args(["gen-bench", "--out"]).arg(&data).arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(dup.code(), Some(2));
}

#[test]
fn pretrain_then_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "encoder.dim = 16\nencoder.heads = 2\nencoder.depth = 1\n\
         encoder.height = 16\nencoder.width = 32\n\
         distill.steps = 2\ndistill.batch = 1\ndistill.proj_dim = 32\ndistill.head_hidden = 16\n\
         bench.preset = EASY_S1\nbench.count = 2\nbench.height = 16\nbench.width = 32\nbench.shift = 2,6\n",
    )
    .unwrap();
    let data = dir.path().join("bench");
    let run = dir.path().join("run");
    let ok = |c: &mut Command| {
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    ok(bino().args(["gen-bench", "--out"]).arg(&data).arg("--config").arg(&cfg));
    ok(bino().args(["pretrain", "--out"]).arg(&run).arg("--data").arg(&data).arg("--config").arg(&cfg));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,mask_ratio,ema_momentum"));
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("final.bin");
    let stereo = dir.path().join("stereo.json");
    ok(bino()
        .arg("probe-stereo")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&stereo)
        .args(["--dmax", "4", "--p1", "0.1", "--p2", "0.5"]));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(&stereo).unwrap()).unwrap();
    assert_eq!(rep["config"]["probe.p1"], "0.1");
    assert!(rep["metrics"]["gt_sgmloc_epe"].is_number());
    assert!(dir.path().join("stereo.run.json").exists());

    let mech = dir.path().join("mech.json");
    ok(bino()
        .arg("probe-mech")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&mech)
        .args(["--counterfactual", "duplicate-left"]));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(&mech).unwrap()).unwrap();
    assert!(rep["metrics"]["row_conc"].is_number());

    let desc = dir.path().join("desc.bin");
    ok(bino().arg("export-desc").arg("--ckpt").arg(&ckpt).arg("--data").arg(&data).arg("--out").arg(&desc));
    assert!(desc.exists());

    let synth = dir.path().join("synth.json");
    ok(bino().arg("eval-synth").arg("--ckpt").arg(&ckpt).arg("--data").arg(&data).arg("--out").arg(&synth));
    let first = fs::read(&synth).unwrap();
    ok(bino().arg("eval-synth").arg("--ckpt").arg(&ckpt).arg("--data").arg(&data).arg("--out").arg(&synth));
    assert_eq!(first, fs::read(&synth).unwrap());
}
