use std::fs;
use std::path::{Path, PathBuf};

use aggrnet_core::ablation;
use aggrnet_core::checkpoint::{self, Archive};
use aggrnet_core::config::{self, RunConfig};
use aggrnet_core::data::{self, Dataset};
use aggrnet_core::metrics::EvalReport;
use aggrnet_core::params::ParamKind;
use aggrnet_core::tensor::Element;
use aggrnet_core::train::Trainer;
use aggrnet_core::verify::{self, Fault, VerifyOptions};
use aggrnet_core::{Error, Result};
use serde::Serialize;

use crate::table::Table;
use crate::{Failure, FaultArg, RunArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = config::load(args.config.as_deref(), &overrides)?;
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let path = cfg.output.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").map_err(io_err(&path))
}

/// JSON rendering of a number, so printed tables and report.json agree.
fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("f64 serializes")
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

pub fn train(args: &RunArgs, f64_mode: bool) -> Result<(), Failure> {
    let cfg = resolve(args)?;
    if f64_mode { train_as::<f64>(&cfg) } else { train_as::<f32>(&cfg) }.map_err(Failure::from)
}

fn train_as<F: Element>(cfg: &RunConfig) -> Result<()> {
    let (train_set, eval_set) = cfg.data.load(&cfg.model)?;
    let mut trainer = Trainer::<F>::new(&cfg.model, &cfg.train)?;
    trainer.check_dataset(&train_set)?;
    prepare_output(cfg)?;
    log::info!(
        "training {} parameters on {} samples ({} held out) for {} epochs",
        trainer.model.param_count(),
        train_set.len(),
        eval_set.as_ref().map_or(0, Dataset::len),
        cfg.train.epochs
    );

    let hist_path = cfg.output.join("history.csv");
    let mut history = csv::Writer::from_path(&hist_path).map_err(csv_err(&hist_path))?;
    history.write_record(["epoch", "loss", "accuracy", "qwk", "mae"]).map_err(csv_err(&hist_path))?;
    println!("{:>5}  {:>12}  {:>9}  {:>9}  {:>9}", "epoch", "loss", "accuracy", "qwk", "mae");
    for _ in 0..cfg.train.epochs {
        let r = trainer.fit_epoch(&train_set, eval_set.as_ref())?;
        history
            .write_record([r.epoch.to_string(), num(r.loss), num(r.accuracy), num(r.qwk), num(r.mae)])
            .map_err(csv_err(&hist_path))?;
        history.flush().map_err(io_err(&hist_path))?;
        println!("{:>5}  {:>12.6}  {:>9.4}  {:>9.4}  {:>9.4}", r.epoch, r.loss, r.accuracy, r.qwk, r.mae);
        let every = cfg.train.checkpoint_every;
        if every > 0 && r.epoch % every == 0 && r.epoch < cfg.train.epochs {
            checkpoint::save(&trainer, &cfg.output.join(format!("epoch_{:04}.ckpt", r.epoch)))?;
        }
    }
    let final_path = cfg.output.join("final.ckpt");
    checkpoint::save(&trainer, &final_path)?;
    log::info!("wrote {}", final_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    checkpoint: String,
    split: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(
    ckpt: &Path,
    data_dir: Option<&Path>,
    train_split: bool,
    config_path: Option<&Path>,
    overrides: &[String],
    out: Option<PathBuf>,
    f64_mode: bool,
) -> Result<(), Failure> {
    let archive = Archive::read(ckpt)?;
    let ds = match data_dir {
        Some(dir) => data::load_dataset(dir)?,
        None => {
            // Fall back to the config the run was trained with.
            let sibling = ckpt.parent().map(|p| p.join("config.json")).filter(|p| p.is_file());
            let cfg = config::load(config_path.or(sibling.as_deref()), overrides)?;
            let (train_set, eval_set) = cfg.data.load(&archive.manifest.model)?;
            match eval_set {
                Some(e) if !train_split => e,
                _ => train_set,
            }
        }
    };
    let report = if f64_mode { eval_as::<f64>(&archive, &ds)? } else { eval_as::<f32>(&archive, &ds)? };

    let mut summary = Table::new(&["metric", "value"], &[false, true]);
    let mut put = |k: &str, v: String| summary.row(vec![k.into(), v]);
    put("samples", report.samples.to_string());
    put("accuracy", num(report.accuracy));
    put("macro_precision", num(report.macro_precision));
    put("macro_recall", num(report.macro_recall));
    put("macro_f1", num(report.macro_f1));
    put("qwk", num(report.qwk));
    put("mae", num(report.mae));
    put("auc", report.auc.map_or_else(|| "null".into(), num));
    print!("{}", summary.render());
    println!();
    let mut per_class = Table::new(&["class", "precision", "recall", "f1"], &[false, true, true, true]);
    for (i, name) in ds.class_names.iter().enumerate() {
        per_class.row(vec![name.clone(), num(report.precision[i]), num(report.recall[i]), num(report.f1[i])]);
    }
    print!("{}", per_class.render());
    println!();
    let mut heads = vec!["true\\pred".to_string()];
    heads.extend((0..ds.num_classes()).map(|c| c.to_string()));
    let head_refs: Vec<&str> = heads.iter().map(String::as_str).collect();
    let mut right = vec![true; heads.len()];
    right[0] = false;
    let mut confusion = Table::new(&head_refs, &right);
    for (i, row) in report.confusion.iter().enumerate() {
        confusion.row(std::iter::once(i.to_string()).chain(row.iter().map(u64::to_string)).collect());
    }
    print!("{}", confusion.render());

    let out_dir = out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir)).map_err(Failure::from)?;
    let path = out_dir.join("report.json");
    let file = ReportFile { checkpoint: ckpt.display().to_string(), split: &ds.split, report: &report };
    let text = serde_json::to_string_pretty(&file).map_err(Error::from)? + "\n";
    fs::write(&path, text).map_err(io_err(&path))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn eval_as<F: Element>(archive: &Archive, ds: &Dataset) -> Result<EvalReport> {
    archive.into_trainer::<F>()?.evaluate(ds)
}

pub fn ablate(args: &RunArgs, f64_mode: bool) -> Result<(), Failure> {
    let cfg = resolve(args)?;
    let (train_set, eval_set) = cfg.data.load(&cfg.model)?;
    prepare_output(&cfg)?;
    let log_row = |r: &ablation::AblationRow| match r.accuracy {
        Some(a) => log::info!("{}: accuracy {a:.4}, {} params", r.variant, r.params),
        None => log::warn!("{}: FAILED", r.variant),
    };
    let (rows, failure) = if f64_mode {
        ablation::run_grid::<f64>(&cfg, &train_set, eval_set.as_ref(), log_row)
    } else {
        ablation::run_grid::<f32>(&cfg, &train_set, eval_set.as_ref(), log_row)
    };
    let path = cfg.output.join("ablation.csv");
    fs::write(&path, ablation::to_csv(&rows)?).map_err(io_err(&path))?;

    let mut t = Table::new(&["variant", "accuracy", "params"], &[false, true, true]);
    for r in &rows {
        t.row(vec![
            r.variant.clone(),
            r.accuracy.map_or_else(|| "FAILED".into(), |a| format!("{a:.6}")),
            r.params.to_string(),
        ]);
    }
    print!("{}", t.render());
    log::info!("wrote {}", path.display());
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn verify(seed: u64, trials: usize, fault: Option<FaultArg>) -> Result<(), Failure> {
    let fault = fault.map(|FaultArg::FlipKey| Fault::FlipKey);
    let opts = VerifyOptions { seed, fault, trials, ..VerifyOptions::default() };
    let start = std::time::Instant::now();
    let checks = verify::run_all(&opts);
    let mut t = Table::new(&["check", "result", "detail"], &[false, false, false]);
    for c in &checks {
        t.row(vec![c.name.clone(), if c.passed { "pass" } else { "FAIL" }.into(), c.detail.clone()]);
    }
    print!("{}", t.render());
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    println!(
        "{} of {} checks passed in {:.1}s",
        checks.len() - failed.len(),
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed))
    }
}

pub fn inspect(ckpt: &Path) -> Result<(), Failure> {
    let archive = Archive::read(ckpt)?;
    let (model, params) = archive.into_model::<f64>()?;
    let m = &archive.manifest;
    println!("checkpoint  {}", ckpt.display());
    println!("dtype       {}", m.dtype);
    println!("epoch       {}", m.epoch);
    println!("step        {}", m.step);
    println!();

    let mut t = Table::new(&["name", "shape", "count", "kind"], &[false, false, true, false]);
    let (mut learnable, mut buffers) = (0usize, 0usize);
    for e in model.manifest() {
        let kind = match e.kind {
            ParamKind::Learnable => {
                learnable += e.count;
                "learnable"
            }
            ParamKind::Buffer => {
                buffers += e.count;
                "buffer"
            }
        };
        t.row(vec![e.name, format!("{:?}", e.shape), e.count.to_string(), kind.into()]);
    }
    print!("{}", t.render());
    println!("total learnable parameters  {learnable}");
    println!("total buffer values         {buffers}");
    println!();

    let mut taus = Table::new(&["threshold", "value"], &[false, true]);
    for id in model.tau_ids() {
        taus.row(vec![params.spec(id).name.clone(), num(params.get(id).data()[0])]);
    }
    print!("{}", taus.render());
    println!();

    #[derive(Serialize)]
    struct Snapshot<'a> {
        model: &'a aggrnet_core::model::ModelConfig,
        train: &'a aggrnet_core::train::TrainConfig,
    }
    let snap = Snapshot { model: &m.model, train: &m.train };
    println!("{}", serde_json::to_string_pretty(&snap).map_err(Error::from)?);
    Ok(())
}

pub fn synth(
    out: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    difficulty: f64,
    seed: u64,
) -> Result<(), Failure> {
    let ds = data::generate_synthetic(classes, per_class, size, size, seed, difficulty)?;
    data::save_dataset(&ds, out)?;
    log::info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}
