use std::process::{Command, Output};

/// Runs the binary with whitespace-separated arguments.
fn hyda(cmdline: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyda"))
        .args(cmdline.split_whitespace())
        .output()
        .expect("binary runs")
}

fn ok(cmdline: &str) -> String {
    let out = hyda(cmdline);
    assert!(
        out.status.success(),
        "{cmdline} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(cmdline: &str) -> i32 {
    hyda(cmdline).status.code().expect("exit code")
}

const CONFIG: &str = "k = 4\nc_res = 1\nbatch_size = 16\nepochs = 2\nfolds = 2\n";

/// A 40-subject cohort with 64-wide embeddings plus a matching config, as
/// `(tempdir, "--data D --config F")`.
fn workspace() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().display();
    ok(&format!(
        "synth --subjects 40 --imaging 2 --tabular true --emb-dim 64 --map-dims 16x4x4x4 \
         --classes 2 --imbalance 1 --complementarity 0.5 --noise 0.5 --seed 3 --out {root}/data"
    ));
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let io = format!("--data {root}/data --config {root}/cfg.toml");
    (dir, io)
}

#[test]
fn train_then_evaluate_reproduces_validation_predictions() {
    let (w, io) = workspace();
    let root = w.path().display();
    ok(&format!("train {io} --out {root}/train --fold 1"));
    let fold = w.path().join("train/fold_1");
    for f in ["checkpoint.hyck", "fold.json", "loss.csv", "val_predictions.csv"] {
        assert!(fold.join(f).exists(), "{f} missing");
    }

    let val = std::fs::read_to_string(fold.join("val_predictions.csv")).unwrap();
    let ids: Vec<&str> = val
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    std::fs::write(w.path().join("ids.txt"), ids.join("\n")).unwrap();
    ok(&format!(
        "eval --checkpoint {}/checkpoint.hyck --data {root}/data --ids {root}/ids.txt --out {root}/eval",
        fold.display()
    ));
    let pred = std::fs::read_to_string(w.path().join("eval/predictions.csv")).unwrap();
    assert_eq!(pred, val);
}

#[test]
fn cross_validation_output_is_byte_identical_across_runs() {
    let (w, io) = workspace();
    let root = w.path().display();
    let printed = ok(&format!("cv {io} --out {root}/a"));
    ok(&format!("cv {io} --out {root}/b"));
    let read = |run: &str, f: &str| std::fs::read(w.path().join(run).join(f)).unwrap();
    assert_eq!(read("a", "metrics.json"), read("b", "metrics.json"));
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    assert_eq!(printed.as_bytes(), read("a", "metrics.csv"));

    let csv = ok(&format!("report --runs {root}/a --format csv"));
    assert!(csv.starts_with("run,modalities,ablation,acc_mean"));
    assert!(csv.contains("\n.,mri+pet+tabular,full_hyda,"));
    let json = ok(&format!("report --runs {root} --format json"));
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);
}

#[test]
fn sweeps_and_ablation_write_their_tables() {
    let (w, io) = workspace();
    let root = w.path().display();
    let table = ok(&format!("sweep-k {io} --values 2,4 --out {root}/sk"));
    assert_eq!(table.lines().count(), 3);
    let plot = std::fs::read_to_string(w.path().join("sk/plot_auc.csv")).unwrap();
    assert!(plot.starts_with("x,mean,std\n2,"));
    assert!(w.path().join("sk/k_4/metrics.json").exists());

    ok(&format!(
        "sweep-modalities {io} --subsets mri;mri+pet+tabular --out {root}/sm"
    ));
    let report = std::fs::read_to_string(w.path().join("sm/mri/metrics.json")).unwrap();
    assert!(report.contains("\"tag\": \"mri\""));

    let rows = ok(&format!("ablation {io} --out {root}/ab"));
    let names: Vec<&str> = rows
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(names, ["disc_only", "hg_only", "avg_heads", "full_hyda"]);
    assert!(w.path().join("ab/ablation.json").exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let (w, io) = workspace();
    let root = w.path().display();

    std::fs::write(w.path().join("bad.toml"), "k = 4\nlearning_rate = 0.1\n").unwrap();
    let bad = format!("--data {root}/data --config {root}/bad.toml --out {root}/out");
    assert_eq!(code(&format!("cv {bad}")), 2);
    std::fs::write(w.path().join("bad.toml"), "k = 99\n").unwrap();
    assert_eq!(code(&format!("cv {bad}")), 2);
    assert_eq!(code(&format!("cv --data {root}/data")), 2);
    assert_eq!(code("gradcheck --seed 0 --scale huge"), 2);
    assert_eq!(code(&format!("train {io} --out {root}/out --fold 7")), 2);

    let missing = format!("--data {root}/nowhere --config {root}/cfg.toml --out {root}/out");
    assert_eq!(code(&format!("cv {missing}")), 3);
    assert_eq!(code(&format!("report --runs {root}/nowhere --format csv")), 3);

    let junk = w.path().join("junk.hyck");
    std::fs::write(&junk, b"HYCK1\0 but nothing after").unwrap();
    std::fs::write(w.path().join("ids.txt"), "S0000\n").unwrap();
    let eval = format!(
        "eval --checkpoint {} --data {root}/data --ids {root}/ids.txt --out {root}/out",
        junk.display()
    );
    assert_eq!(code(&eval), 3);

    let tensors = w.path().join("data/tensors");
    let victim = std::fs::read_dir(tensors)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    assert_eq!(code(&format!("cv {io} --out {root}/out")), 3);
}

#[test]
fn unknown_subject_ids_are_data_errors() {
    let (w, io) = workspace();
    let root = w.path().display();
    ok(&format!("train {io} --out {root}/train"));
    std::fs::write(w.path().join("ids.txt"), "# header\nS0001\nS9999\n").unwrap();
    let out = hyda(&format!(
        "eval --checkpoint {root}/train/fold_0/checkpoint.hyck --data {root}/data \
         --ids {root}/ids.txt --out {root}/e"
    ));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("S9999"));
}
