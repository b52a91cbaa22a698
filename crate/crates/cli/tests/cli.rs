use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_gamseg");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env_remove("GAMSEG_JOBS")
        .output()
        .expect("spawn gamseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a spec and builds the dataset under `dir/name`.
fn synth(dir: &Path, name: &str, spec: &str) -> Output {
    let spec_path = dir.join(format!("{name}.spec"));
    fs::write(&spec_path, spec).unwrap();
    run(dir, &["synth", spec_path.to_str().unwrap(), name])
}

fn subdirs(p: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    v.sort();
    v
}

const TINY: &str = "seed=5\ntrain_count=5\nval_count=2\nheight=32\nwidth=32\n";

#[test]
fn synth_writes_the_requested_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = synth(tmp.path(), "data", "seed=1\ntrain_count=3\nval_count=2\n");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(subdirs(&tmp.path().join("data/train")).len(), 3);
    assert_eq!(subdirs(&tmp.path().join("data/val")).len(), 2);
    for seq in subdirs(&tmp.path().join("data/val")) {
        assert!(seq.join("manifest.txt").is_file());
    }
}

#[test]
fn malformed_spec_exits_2_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let o = synth(tmp.path(), "data", "seed=1\nno equals sign\n");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = synth(tmp.path(), "other", "seed=1\ncolour=red\n");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn bad_usage_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(tmp.path(), &["train", "--no-such-key=1"])), 2);
    assert_eq!(code(&run(tmp.path(), &["train", "--lambda=7"])), 2);
    // No dataset present.
    assert_eq!(code(&run(tmp.path(), &["train", "--data=missing"])), 2);
}

#[test]
fn tiny_training_run_writes_its_artifacts_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(tmp.path(), "data", "seed=2\ntrain_count=5\nval_count=2\n")), 0);
    let start = Instant::now();
    let o = run(
        tmp.path(),
        &["train", "--out=run", "--stage1-epochs=1", "--stage2-epochs=1", "--ablation", "no_appearance"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let run_dir = tmp.path().join("run");
    assert!(run_dir.join("checkpoint.bundle").is_file());
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,stage,mean_fine_loss,mean_coarse_loss,val_J_seen,val_J_unseen\n"));
    assert_eq!(log.lines().count(), 3);
    let resolved = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "no_appearance=1"));
    assert!(resolved.lines().any(|l| l == "stage1_epochs=1"));
}

#[test]
fn eval_beats_untrained_and_dumps_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&synth(dir, "data", "seed=4\ntrain_count=5\nval_count=2\n")), 0);
    let o = run(dir, &["train", "--out=untrained", "--stage1-epochs=0", "--stage2-epochs=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        dir,
        &["train", "--out=trained", "--stage1-epochs=30", "--stage2-epochs=0", "--batch-size=1", "--val-every=100"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let j_seen = |out: &str| -> f64 {
        let csv = fs::read_to_string(dir.join(out).join("metrics.csv")).unwrap();
        let line = csv.lines().find(|l| l.starts_with("J_seen,")).unwrap();
        line[7..].parse().unwrap()
    };
    for (ckpt, out) in [("untrained", "eval_u"), ("trained", "eval_t")] {
        let o = run(
            dir,
            &["eval", &format!("--checkpoint={ckpt}/checkpoint.bundle"), "--split=train", &format!("--out={out}")],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(dir.join(out).join("config.txt").is_file());
    }
    let (ju, jt) = (j_seen("eval_u"), j_seen("eval_t"));
    assert!(jt > ju, "trained {jt} vs untrained {ju}");

    let o = run(dir, &["eval", "--checkpoint=trained/checkpoint.bundle", "--out=dump", "--dump-masks"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for seq in subdirs(&dir.join("data/val")) {
        let id = seq.file_name().unwrap();
        let frames = fs::read_dir(&seq).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".pgm")).count();
        let dumped = fs::read_dir(dir.join("dump/masks/val").join(id)).unwrap().count();
        assert_eq!(dumped, frames);
    }
    let csv = fs::read_to_string(dir.join("dump/metrics.csv")).unwrap();
    assert!(csv.starts_with("seq_id,object_id,class,seen,J,F\n"));

    // Width mismatch is reported with the tensor name.
    let o = run(dir, &["eval", "--checkpoint=trained/checkpoint.bundle", "--out=bad", "--feature-dim=8"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(".w`"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(tmp.path(), "data", TINY)), 0);
    assert_eq!(code(&run(tmp.path(), &["eval", "--checkpoint=nowhere.bundle"])), 2);
    assert_eq!(code(&run(tmp.path(), &["eval"])), 2);
}

#[test]
fn ablate_reports_every_variant_in_table_order() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(tmp.path(), "data", TINY)), 0);
    let o = run(tmp.path(), &["ablate", "--out=abl", "--stage1-epochs=1", "--stage2-epochs=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("abl/ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["full", "no_appearance", "no_maskprop", "unimodal", "no_update", "appearance_softmax", "no_end_to_end"]
    );
    assert!(csv.starts_with("variant,G,J_seen,J_unseen,F_seen,F_unseen\n"));
    assert!(tmp.path().join("abl/train_log_no_update.csv").is_file());
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gradcheck", "--instances=2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for path in ["op.conv2d", "appearance.scores", "appearance.weighted_moments", "pipeline.frame_to_loss"] {
        let line = out.lines().find(|l| l.starts_with(path)).unwrap_or_else(|| panic!("{path} missing"));
        assert!(line.contains("max_rel_error=") && line.ends_with("PASS"), "{line}");
    }
    let o = run(tmp.path(), &["gradcheck", "--instances=1", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn jobs_flag_and_env_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(tmp.path(), "data", TINY)), 0);
    let o = run(tmp.path(), &["--jobs", "1", "train", "--out=a", "--stage1-epochs=1", "--stage2-epochs=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = Command::new(BIN)
        .current_dir(tmp.path())
        .args(["train", "--out=b", "--stage1-epochs=1", "--stage2-epochs=0"])
        .env("GAMSEG_JOBS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Thread count does not change results.
    assert_eq!(
        fs::read(tmp.path().join("a/checkpoint.bundle")).unwrap(),
        fs::read(tmp.path().join("b/checkpoint.bundle")).unwrap()
    );
    assert_eq!(code(&run(tmp.path(), &["--jobs", "0", "gradcheck"])), 2);
}
