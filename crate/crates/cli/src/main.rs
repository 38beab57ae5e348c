use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use grdnet::anomaly_synth::make_triplet;
use grdnet::config::{parse_config, split_pair, Precision, RunConfig, KEYS};
use grdnet::corpus::texture;
use grdnet::dataset_io::{attach_rois, load_dataset, load_sample, Split, MASK_TOLERANCE};
use grdnet::inference::{infer, overlay};
use grdnet::pipeline;
use grdnet::tensor::Scalar;
use grdnet::trainer::{epoch_checkpoint, load_checkpoint, CKPT_BEST, SNAPSHOT};
use grdnet::{Error, Image, RoiMask};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").value_parser(value_parser!(PathBuf)).help("key = value config file"))
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override any config key; repeatable"),
        )
        .arg(Arg::new("out").long("out").value_name("DIR").value_parser(value_parser!(PathBuf)).required(true).help("output directory"));
    KEYS.iter().fold(cmd, |cmd, (key, help)| cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help)))
}

fn cli() -> Command {
    Command::new("grdnet")
        .about("Surface anomaly detection by reconstruction and ROI-aware segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            config_args(Command::new("train").about("Train on train/good of a dataset root"))
                .arg(Arg::new("resume").long("resume").value_name("CKPT").value_parser(value_parser!(PathBuf)).help("continue from a checkpoint")),
        )
        .subcommand(
            config_args(Command::new("eval").about("Score the test split and write metrics.csv, plots and per-image maps"))
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("CKPT")
                        .value_parser(value_parser!(PathBuf))
                        .help("checkpoint to evaluate (default: <run>/ckpt_best)"),
                )
                .arg(Arg::new("run").long("run").value_name("DIR").value_parser(value_parser!(PathBuf)).help("training run directory"))
                .arg(
                    Arg::new("at-epochs")
                        .long("at-epochs")
                        .value_name("LIST")
                        .help("evaluate the run's ckpt_epoch_<n> checkpoints, e.g. 10,35,100"),
                ),
        )
        .subcommand(
            config_args(Command::new("infer").about("Score and localize individual images"))
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("CKPT")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(Arg::new("roi").long("roi").value_name("PNG").value_parser(value_parser!(PathBuf)).help("ROI mask applied to every image"))
                .arg(Arg::new("images").value_name("IMAGE").value_parser(value_parser!(PathBuf)).num_args(1..).required(true)),
        )
        .subcommand(
            config_args(Command::new("synth-preview").about("Write x | x_n | m | roi strips of synthetic training triplets"))
                .arg(Arg::new("n").long("n").value_name("N").value_parser(value_parser!(usize)).default_value("8").help("number of previews")),
        )
}

/// Config file (explicit, else `fallback`), then `--<key>` flags, then `--set` pairs.
fn run_config(m: &ArgMatches, fallback: Option<&Path>) -> grdnet::Result<RunConfig> {
    let mut overrides = Vec::new();
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    for pair in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = split_pair(pair)?;
        overrides.push((k.to_string(), v.to_string()));
    }
    let file = m.get_one::<PathBuf>("config").map(PathBuf::as_path).or(fallback.filter(|p| p.is_file()));
    parse_config(file, &overrides)
}

fn out_dir(m: &ArgMatches) -> grdnet::Result<PathBuf> {
    let out = m.get_one::<PathBuf>("out").expect("required").clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn train<T: Scalar>(m: &ArgMatches, cfg: &RunConfig) -> grdnet::Result<()> {
    let out = out_dir(m)?;
    let fitted = pipeline::train::<T>(cfg, &out, m.get_one::<PathBuf>("resume").map(PathBuf::as_path))?;
    println!("best checkpoint: {}", fitted.best.display());
    println!("last checkpoint: {}", fitted.last.display());
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig, targets: &[(PathBuf, PathBuf)]) -> grdnet::Result<()> {
    for (ck, out) in targets {
        let result = pipeline::evaluate::<T>(cfg, ck, out)?;
        let failed = result.rows.iter().filter(|r| r.record().is_none()).count();
        if failed > 0 {
            log::warn!("{failed} images could not be scored; see scores.csv");
        }
        println!("{}: {}", ck.display(), result.report.metrics.display());
        for r in &result.report.rows {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
            println!("  {:<10} image {} pixel {} acc {}", r.class, f(r.auroc_image), f(r.auroc_pixel), f(r.accuracy));
        }
    }
    Ok(())
}

fn eval_targets(m: &ArgMatches) -> grdnet::Result<Vec<(PathBuf, PathBuf)>> {
    let out = out_dir(m)?;
    let run = m.get_one::<PathBuf>("run");
    let checkpoint = m.get_one::<PathBuf>("checkpoint");
    if let Some(list) = m.get_one::<String>("at-epochs") {
        let run = run.ok_or_else(|| Error::Config("--at-epochs needs --run".into()))?;
        let mut targets = Vec::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let epoch: usize = item.parse().map_err(|_| Error::Config(format!("--at-epochs: `{item}` is not an epoch number")))?;
            targets.push((epoch_checkpoint(run, epoch), out.join(format!("epoch_{epoch}"))));
        }
        if targets.is_empty() {
            return Err(Error::Config("--at-epochs lists no epochs".into()));
        }
        return Ok(targets);
    }
    match (checkpoint, run) {
        (Some(ck), _) => Ok(vec![(ck.clone(), out)]),
        (None, Some(run)) => Ok(vec![(run.join(CKPT_BEST), out)]),
        (None, None) => Err(Error::Config("eval needs --checkpoint or --run".into())),
    }
}

fn infer_images<T: Scalar>(m: &ArgMatches, cfg: &RunConfig) -> grdnet::Result<()> {
    let out = out_dir(m)?;
    let ck = m.get_one::<PathBuf>("checkpoint").expect("required");
    let mut bundle = load_checkpoint::<T>(ck, None)?.bundle;
    let net = bundle.config.clone();
    let roi = match m.get_one::<PathBuf>("roi") {
        Some(p) => Some(RoiMask::load(p, net.resolution, MASK_TOLERANCE)?),
        None => None,
    };
    for sub in ["heatmaps", "localization", "overlay"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let csv_path = out.join("scores.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    let csv_err = |e: csv::Error| Error::csv(&csv_path, e);
    w.write_record(["path", "score", "label", "status"]).map_err(csv_err)?;
    let mut failures = 0;
    for (i, path) in m.get_many::<PathBuf>("images").expect("required").enumerate() {
        let scored = Image::<T>::load(path, net.channels, net.resolution).and_then(|x| {
            let r = infer(&mut bundle, &x, roi.as_ref(), &cfg.infer)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = format!("{i:03}_{stem}.png");
            r.heat_smooth.save(&out.join("heatmaps").join(&name))?;
            r.localization.save(&out.join("localization").join(&name))?;
            overlay(&x, &r.heat_smooth).save(&out.join("overlay").join(&name))?;
            Ok(r.score)
        });
        let row = match scored {
            Ok(score) => {
                println!("{}\t{score:.6}", path.display());
                [path.display().to_string(), score.to_string(), String::new(), "ok".into()]
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", path.display());
                [path.display().to_string(), String::new(), String::new(), format!("failed: {e}")]
            }
        };
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    if failures > 0 {
        return Err(Error::InvalidArgument(format!("{failures} images failed")));
    }
    Ok(())
}

fn synth_preview<T: Scalar>(m: &ArgMatches, cfg: &RunConfig) -> grdnet::Result<()> {
    let out = out_dir(m)?;
    let n = *m.get_one::<usize>("n").expect("defaulted");
    let res = cfg.train.network.resolution;
    cfg.train.synth.validate(res)?;
    let sources: Vec<(Image<T>, RoiMask)> = match &cfg.data {
        Some(root) => {
            let load = cfg.load_config();
            let index = attach_rois(load_dataset(root, Split::Train, &load)?, cfg.roi_dir.as_deref(), res)?;
            index.entries.iter().take(n).map(|e| load_sample::<T>(e, &load).map(|s| (s.image, s.roi))).collect::<grdnet::Result<_>>()?
        }
        None => (0..n as u64)
            .map(|i| {
                let t = texture(res, cfg.train.seed.wrapping_add(i));
                let img = Image::from_fn(cfg.train.network.channels, res, res, |c, y, x| T::of(t.get(c.min(2), y, x)));
                (img, RoiMask::ones(res, res))
            })
            .collect(),
    };
    for i in 0..n {
        let (x, roi) = &sources[i % sources.len()];
        let t = make_triplet(x, roi, &cfg.train.synth, cfg.train.seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
        let c = x.channels();
        let strip = Image::<f64>::from_fn(c, res, 4 * res, |ch, y, xx| {
            let (panel, px) = (xx / res, xx % res);
            match panel {
                0 => t.x.get(ch, y, px).to_f64_lossy(),
                1 => t.x_n.get(ch, y, px).to_f64_lossy(),
                2 => f64::from(u8::from(t.m.get(y, px))),
                _ => f64::from(u8::from(t.roi.get(y, px))),
            }
        });
        let path = out.join(format!("triplet_{i:03}.png"));
        strip.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch<T: Scalar>(name: &str, m: &ArgMatches, cfg: &RunConfig, targets: &[(PathBuf, PathBuf)]) -> grdnet::Result<()> {
    match name {
        "train" => train::<T>(m, cfg),
        "eval" => eval::<T>(cfg, targets),
        "infer" => infer_images::<T>(m, cfg),
        "synth-preview" => synth_preview::<T>(m, cfg),
        _ => unreachable!("clap only yields known subcommands"),
    }
}

fn run(name: &str, m: &ArgMatches) -> grdnet::Result<()> {
    let mut targets = Vec::new();
    let snapshot = match name {
        "eval" => {
            targets = eval_targets(m)?;
            targets[0].0.parent().map(|d| d.join(SNAPSHOT))
        }
        "infer" => m.get_one::<PathBuf>("checkpoint").and_then(|ck| ck.parent()).map(|d| d.join(SNAPSHOT)),
        _ => None,
    };
    let cfg = run_config(m, snapshot.as_deref())?;
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(name, m, &cfg, &targets),
        Precision::F64 => dispatch::<f64>(name, m, &cfg, &targets),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidKey { .. } | Error::Config(_) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
