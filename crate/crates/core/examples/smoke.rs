//! Desk-scale end-to-end run on the procedural corpus.
//!
//! `cargo run --release -p grdnet --example smoke -- [key=value ...]`

use std::time::Instant;

use grdnet::config::{build_config, split_pair};
use grdnet::corpus::{generate_corpus, CorpusSpec};
use grdnet::pipeline::{evaluate, train};

fn main() -> grdnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = tempfile::tempdir().expect("temp dir");
    let corpus = dir.path().join("corpus");
    generate_corpus(&corpus, &CorpusSpec::default())?;
    let mut overrides: Vec<(String, String)> = grdnet::smoke::SMOKE_OVERRIDES.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    overrides.push(("data".into(), corpus.display().to_string()));
    for arg in std::env::args().skip(1) {
        let (k, v) = split_pair(&arg)?;
        overrides.push((k.into(), v.into()));
    }
    let cfg = build_config(None, &overrides, None)?;
    let t0 = Instant::now();
    let run = dir.path().join("run");
    let fitted = train::<f32>(&cfg, &run, None)?;
    println!("train {:.1}s", t0.elapsed().as_secs_f64());
    let mut checkpoints: Vec<std::path::PathBuf> = cfg.train.save_epochs.iter().map(|&e| grdnet::trainer::epoch_checkpoint(&run, e)).collect();
    checkpoints.push(fitted.last.clone());
    checkpoints.push(fitted.best.clone());
    for ck in &checkpoints {
        let out = evaluate::<f32>(&cfg, ck, &dir.path().join("eval"))?;
        let r = &out.report.rows[0];
        println!("{}: image {:?} pixel {:?} acc {:?}", ck.file_name().unwrap().to_string_lossy(), r.auroc_image, r.auroc_pixel, r.accuracy);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
