use std::path::Path;
use std::process::{Command, Output};

use grdnet::corpus::{generate_corpus, CorpusSpec};

const TINY: &[&str] = &[
    "--resolution=16",
    "--base_width=4",
    "--width_cap=8",
    "--stages=2",
    "--blocks_per_stage=1",
    "--latent_channels=4",
    "--unet_base_width=4",
    "--unet_levels=2",
    "--synth_cells_max=2",
    "--kernel=3",
    "--batch_size=4",
];

fn grdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grdnet")).args(args).env_remove("GRD_SEED").env("RUST_LOG", "warn").output().expect("binary runs")
}

fn corpus(dir: &Path) -> String {
    let root = dir.join("corpus");
    generate_corpus(&root, &CorpusSpec { size: 16, train: 8, test_good: 4, test_defect: 4, seed: 1 }).unwrap();
    root.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_preview_writes_n_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prev");
    let o = grdnet(&["synth-preview", "--seed", "7", "--n", "4", "--resolution", "64", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 4);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(grdnet(&["bogus"]).status.code(), Some(2));
    assert_eq!(grdnet(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = grdnet(&["train", "--out", out, "--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
    let o = grdnet(&["train", "--out", out, "--patience", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("patience"));
}

#[test]
fn help_documents_every_key() {
    let o = grdnet(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for (key, _) in grdnet::config::KEYS {
        assert!(text.contains(&format!("--{key}")), "{key} missing from help");
    }
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let mut args = vec!["train", "--out", run_s, "--data", &data, "--epochs", "0"];
    args.extend_from_slice(TINY);
    let o = grdnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("ckpt_last").is_file() && run.join("ckpt_best").is_file());

    let mut args = vec!["train", "--out", run_s, "--data", &data, "--epochs", "2", "--save_epochs", "1,2"];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_grdnet")).args(&args).env("GRD_SEED", "5").env("RUST_LOG", "warn").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = std::fs::read_to_string(run.join("config.snapshot")).unwrap();
    assert!(snapshot.lines().any(|l| l == "seed = 5"), "{snapshot}");

    // The snapshot next to the checkpoint supplies the architecture.
    let eval = dir.path().join("eval");
    let o = grdnet(&["eval", "--run", run_s, "--out", eval.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "split,class,auroc_image,auroc_pixel,accuracy,n_images,n_defects");
    let all = lines.next().unwrap();
    assert!(!all.contains("n/a") && all.split(',').count() == 7, "{all}");
    assert!(eval.join("score_histogram.png").is_file() && eval.join("loss_curve.png").is_file());
    assert!(eval.join("scores.csv").is_file());

    let at = dir.path().join("at");
    let o = grdnet(&["eval", "--run", run_s, "--at-epochs", "1,2", "--out", at.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(at.join("epoch_1/metrics.csv").is_file() && at.join("epoch_2/metrics.csv").is_file());

    let img = Path::new(&data).join("test/stain/000.png");
    let inf = dir.path().join("infer");
    let ck = run.join("ckpt_best");
    let o = grdnet(&["infer", "--checkpoint", ck.to_str().unwrap(), "--out", inf.to_str().unwrap(), img.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_dir(inf.join("heatmaps")).unwrap().count() == 1);
    assert!(std::fs::read_to_string(inf.join("scores.csv")).unwrap().lines().count() == 2);

    // Runtime failures exit 1.
    let bad = dir.path().join("bad_ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = grdnet(&["infer", "--checkpoint", bad.to_str().unwrap(), "--out", inf.to_str().unwrap(), img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
