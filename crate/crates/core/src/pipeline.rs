//! Dataset-to-report glue shared by the command-line tool and the tests.

use std::path::Path;

use grdnet_tensor::Scalar;

use crate::config::RunConfig;
use crate::dataset_io::{attach_rois, load_dataset, load_sample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, ReportFiles};
use crate::inference::{batch_infer, write_outputs, InferRow};
use crate::trainer::{fit, load_checkpoint, read_history, FitOutcome, TrainData, HISTORY_CSV};

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.as_deref().ok_or_else(|| Error::InvalidKey { key: "data".into(), reason: "no dataset root given".into() })
}

/// Decodes the training and validation splits at the working resolution.
pub fn training_data<T: Scalar>(cfg: &RunConfig) -> Result<TrainData<T>> {
    let root = data_root(cfg)?;
    let load = cfg.load_config();
    let mut out = TrainData { train: Vec::new(), val: Vec::new() };
    for (split, dst) in [(Split::Train, &mut out.train), (Split::Validation, &mut out.val)] {
        let index = attach_rois(load_dataset(root, split, &load)?, cfg.roi_dir.as_deref(), load.resolution)?;
        for e in &index.entries {
            let s = load_sample::<T>(e, &load)?;
            dst.push((s.image, s.roi));
        }
    }
    Ok(out)
}

/// Trains into `out`, writing the config snapshot alongside the checkpoints.
pub fn train<T: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let data = training_data::<T>(cfg)?;
    log::info!("{} training / {} validation images", data.train.len(), data.val.len());
    fit(&cfg.train, &data, out, resume, Some(&cfg.serialize()))
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub rows: Vec<InferRow>,
    pub report: ReportFiles,
}

/// Scores the test split with `checkpoint` and writes per-image outputs plus the report.
pub fn evaluate<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let root = data_root(cfg)?;
    let mut ck = load_checkpoint::<T>(checkpoint, Some(&cfg.train.network))?;
    let load = cfg.load_config();
    let index = attach_rois(load_dataset(root, Split::Test, &load)?, cfg.roi_dir.as_deref(), load.resolution)?;
    let rows = batch_infer(&mut ck.bundle, &index, &load, &cfg.infer);
    write_outputs(out, &rows)?;
    let records: Vec<_> = rows.iter().filter_map(|r| r.record().cloned()).collect();
    let history_path = checkpoint.parent().map(|d| d.join(HISTORY_CSV));
    let history = match history_path.filter(|p| p.is_file()) {
        Some(p) => Some(read_history(&p)?),
        None => None,
    };
    let split = format!("test@{}", ck.header.state.epoch);
    let report = emit_report(&records, out, &split, history.as_deref())?;
    Ok(EvalOutcome { rows, report })
}
