//! `mhcaf` command-line interface: preprocess, train, eval, kfold, gradcam.

use std::path::PathBuf;
use std::process::ExitCode;

use mhcaf_core::checkpoint;
use mhcaf_core::config::RunConfig;
use mhcaf_core::dataset::{self, synth, LoadedDataset};
use mhcaf_core::error::Error;
use mhcaf_core::eval;
use mhcaf_core::gradcam;
use mhcaf_core::graph::Graph;
use mhcaf_core::imageproc::{preprocess_pipeline_stages, Image};
use mhcaf_core::model::{Model, Phase};
use mhcaf_core::train;
use mhcaf_core::tune_allocator;

const USAGE: &str = "\
usage: mhcaf <preprocess|train|eval|kfold|gradcam> [options] [key=value ...] [inputs ...]

options:
  --config FILE       flat key=value configuration file
  --data DIR          dataset root (one folder per class)
  --out DIR           output directory (default: out)
  --seed N            master seed (splits, init, shuffling)
  --synthetic CxN     use a generated glyph corpus with C classes, N per class
  --dump-stages DIR   (preprocess) write per-stage intermediate images
  --help              print this text

commands:
  preprocess   materialize a preprocessed mirror tree under OUT/preprocessed
  train        train a model; writes OUT/model.ckpt and OUT/metrics.csv
  eval         score the test split; writes OUT/report.csv and OUT/confusion.csv
  kfold        stratified k-fold cross-validation; writes OUT/kfold.csv
  gradcam      render heatmaps for the listed input images into OUT

any key=value argument overrides a configuration key (see README for the
schema); unknown keys are rejected.

exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    synthetic: Option<(usize, usize)>,
    dump_stages: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
}

fn usage_error(msg: &str) -> Error {
    Error::Config(format!("usage: {}", msg))
}

fn parse_args(args: &[String]) -> Result<Option<Cli>, Error> {
    if args.is_empty() {
        return Err(usage_error("missing command"));
    }
    if args[0] == "--help" || args[0] == "-h" {
        return Ok(None);
    }
    let command = args[0].clone();
    if !["preprocess", "train", "eval", "kfold", "gradcam"].contains(&command.as_str()) {
        return Err(usage_error(&format!("unknown command {:?}", command)));
    }
    let mut cli = Cli {
        command,
        config: None,
        data: None,
        out: None,
        seed: None,
        synthetic: None,
        dump_stages: None,
        overrides: Vec::new(),
        inputs: Vec::new(),
    };
    let value_of = |args: &[String], i: usize, flag: &str| -> Result<String, Error> {
        args.get(i + 1)
            .cloned()
            .ok_or_else(|| usage_error(&format!("{} needs a value", flag)))
    };
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        match a.as_str() {
            "--help" | "-h" => return Ok(None),
            "--config" => {
                cli.config = Some(PathBuf::from(value_of(args, i, a)?));
                i += 2;
            }
            "--data" => {
                cli.data = Some(PathBuf::from(value_of(args, i, a)?));
                i += 2;
            }
            "--out" => {
                cli.out = Some(PathBuf::from(value_of(args, i, a)?));
                i += 2;
            }
            "--seed" => {
                let v = value_of(args, i, a)?;
                cli.seed = Some(v.parse().map_err(|_| usage_error(&format!("bad seed {:?}", v)))?);
                i += 2;
            }
            "--synthetic" => {
                let v = value_of(args, i, a)?;
                let (c, n) = v
                    .split_once(['x', 'X'])
                    .ok_or_else(|| usage_error(&format!("--synthetic expects CxN, got {:?}", v)))?;
                let c = c.parse().map_err(|_| usage_error("bad class count in --synthetic"))?;
                let n = n.parse().map_err(|_| usage_error("bad per-class count in --synthetic"))?;
                cli.synthetic = Some((c, n));
                i += 2;
            }
            "--dump-stages" => {
                cli.dump_stages = Some(PathBuf::from(value_of(args, i, a)?));
                i += 2;
            }
            flag if flag.starts_with("--") => {
                return Err(usage_error(&format!("unknown flag {}", flag)));
            }
            kv if kv.contains('=') => {
                let (k, v) = kv.split_once('=').unwrap();
                cli.overrides.push((k.trim().to_string(), v.trim().to_string()));
                i += 1;
            }
            path => {
                cli.inputs.push(PathBuf::from(path));
                i += 1;
            }
        }
    }
    Ok(Some(cli))
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cli.config {
        rc.apply_file(path)?;
    }
    if let Some(out) = &cli.out {
        rc.apply("out_dir", &out.to_string_lossy())?;
    }
    if let Some(seed) = cli.seed {
        rc.apply("seed", &seed.to_string())?;
    }
    for (k, v) in &cli.overrides {
        rc.apply(k, v)?;
    }
    Ok(rc)
}

fn dir_is_missing_or_empty(root: &PathBuf) -> bool {
    !root.exists() || root.read_dir().map(|mut d| d.next().is_none()).unwrap_or(true)
}

/// Resolves the dataset: an explicit tree, a generated synthetic tree, or an
/// in-memory synthetic corpus.
fn load_data(cli: &Cli, rc: &RunConfig) -> Result<LoadedDataset, Error> {
    match (&cli.data, cli.synthetic) {
        (Some(root), synthetic) => {
            if let Some((classes, per_class)) = synthetic {
                if dir_is_missing_or_empty(root) {
                    synth::generate_tree(root, classes, per_class, rc.seed, 128)?;
                }
            }
            let manifest = dataset::load_dataset(root, rc.seed)?;
            dataset::prepare(&manifest, &rc.pipe)
        }
        (None, Some((classes, per_class))) => synth::dataset(classes, per_class, rc.seed, &rc.pipe),
        (None, None) => Err(Error::Data(
            "no dataset: pass --data DIR or --synthetic CxN".into(),
        )),
    }
}

fn cmd_preprocess(cli: &Cli, rc: &RunConfig) -> Result<(), Error> {
    let root = match (&cli.data, cli.synthetic) {
        (Some(root), synthetic) => {
            if let Some((classes, per_class)) = synthetic {
                if dir_is_missing_or_empty(root) {
                    synth::generate_tree(root, classes, per_class, rc.seed, 128)?;
                }
            }
            root.clone()
        }
        (None, Some((classes, per_class))) => {
            let root = rc.out_dir.join("synthetic");
            if dir_is_missing_or_empty(&root) {
                synth::generate_tree(&root, classes, per_class, rc.seed, 128)?;
            }
            root
        }
        (None, None) => {
            return Err(Error::Data("no dataset: pass --data DIR or --synthetic CxN".into()))
        }
    };
    let manifest = dataset::load_dataset(&root, rc.seed)?;
    let mirror = rc.out_dir.join("preprocessed");
    let mut count = 0usize;
    for (class, files) in manifest.classes.iter().zip(manifest.files.iter()) {
        let dir = mirror.join(class);
        std::fs::create_dir_all(&dir)?;
        for path in files {
            let img = Image::load(path)?;
            let mut stages = Vec::new();
            let dump = cli.dump_stages.as_ref().map(|_| &mut stages);
            let norm = preprocess_pipeline_stages(&img, &rc.pipe, dump)
                .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
            let out = dataset::normalized_to_rgb8(&norm);
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            out.save_png(&dir.join(format!("{}.png", stem)))?;
            if let Some(dump_dir) = &cli.dump_stages {
                std::fs::create_dir_all(dump_dir)?;
                for (stage, im) in &stages {
                    im.save_png(&dump_dir.join(format!("{}.{}.png", stem, stage)))?;
                }
            }
            count += 1;
        }
    }
    println!(
        "preprocessed {} images from {} classes into {}",
        count,
        manifest.classes.len(),
        mirror.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, rc: &mut RunConfig) -> Result<(), Error> {
    let data = load_data(cli, rc)?;
    rc.model.classes = data.num_classes();
    let mut model = Model::init(rc.model.clone(), rc.seed)?;
    let snapshot = rc.model_snapshot();
    let outcome = train::train(&mut model, &data, &rc.train, Some(&rc.out_dir), &snapshot)?;
    for row in &outcome.log {
        println!("{}", row.csv_row());
    }
    println!(
        "best epoch {} with validation accuracy {:.4}; checkpoint at {}",
        outcome.best_epoch,
        outcome.best_val_acc,
        rc.out_dir.join("model.ckpt").display()
    );
    Ok(())
}

fn load_model(rc: &RunConfig) -> Result<Model, Error> {
    let path = rc
        .checkpoint
        .clone()
        .unwrap_or_else(|| rc.out_dir.join("model.ckpt"));
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = checkpoint::load(&path)?;
    let cfg = RunConfig::model_from_snapshot(&ckpt.config)?;
    let fresh = Model::init(cfg.clone(), 0)?;
    checkpoint::check_compat(&ckpt.params, &fresh.params)?;
    Ok(Model {
        cfg,
        params: ckpt.params,
    })
}

fn cmd_eval(cli: &Cli, rc: &RunConfig) -> Result<(), Error> {
    let model = load_model(rc)?;
    let data = load_data(cli, rc)?;
    if data.num_classes() != model.cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the checkpoint was trained with {}",
            data.num_classes(),
            model.cfg.classes
        )));
    }
    let out = eval::evaluate(&model, &data, &data.test, rc.train.batch_size)?;
    let report = eval::compute_metrics(&out.confusion, Some((&out.probs, &out.labels)))?;
    std::fs::create_dir_all(&rc.out_dir)?;
    std::fs::write(rc.out_dir.join("report.csv"), eval::report_csv(&report, &data.class_names))?;
    std::fs::write(rc.out_dir.join("confusion.csv"), out.confusion.to_csv())?;
    println!(
        "test accuracy {:.4} | macro F1 {:.4} | MCC {:.4} | kappa {:.4} | AUC {}",
        report.accuracy,
        report.macro_f1,
        report.mcc,
        report.kappa,
        report
            .macro_auc
            .map(|a| format!("{:.4}", a))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_kfold(cli: &Cli, rc: &mut RunConfig) -> Result<(), Error> {
    let data = load_data(cli, rc)?;
    rc.model.classes = data.num_classes();
    let outcome = eval::run_kfold(&data, &rc.model, &rc.train, rc.kfold_k)?;
    let mut csv =
        String::from("fold,accuracy,macro_precision,macro_recall,macro_f1,mcc,kappa,macro_auc\n");
    for (i, r) in outcome.fold_reports.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i + 1,
            r.accuracy,
            r.macro_precision,
            r.macro_recall,
            r.macro_f1,
            r.mcc,
            r.kappa,
            r.macro_auc.unwrap_or(0.5)
        ));
    }
    csv.push_str(&format!(
        "mean,{},{},{},{},{},{},{}\n",
        outcome.accuracy.mean,
        outcome.macro_precision.mean,
        outcome.macro_recall.mean,
        outcome.macro_f1.mean,
        outcome.mcc.mean,
        outcome.kappa.mean,
        outcome.macro_auc.mean
    ));
    csv.push_str(&format!(
        "std,{},{},{},{},{},{},{}\n",
        outcome.accuracy.std,
        outcome.macro_precision.std,
        outcome.macro_recall.std,
        outcome.macro_f1.std,
        outcome.mcc.std,
        outcome.kappa.std,
        outcome.macro_auc.std
    ));
    std::fs::create_dir_all(&rc.out_dir)?;
    std::fs::write(rc.out_dir.join("kfold.csv"), csv)?;
    println!(
        "{}-fold mean accuracy {:.4} (std {:.4})",
        rc.kfold_k, outcome.accuracy.mean, outcome.accuracy.std
    );
    Ok(())
}

fn predict_class(model: &Model, image: &mhcaf_core::tensor::Tensor) -> Result<usize, Error> {
    let mut g = Graph::new();
    let mut phase = Phase::Eval;
    let (fwd, _) = model.forward_batch(&mut g, std::slice::from_ref(image), &mut phase, false)?;
    let logits = g.data(fwd.logits);
    Ok(logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap())
}

fn cmd_gradcam(cli: &Cli, rc: &RunConfig) -> Result<(), Error> {
    if cli.inputs.is_empty() {
        return Err(usage_error("gradcam needs at least one input image path"));
    }
    let model = load_model(rc)?;
    let layer = rc
        .gradcam_layer
        .clone()
        .unwrap_or_else(|| model.gradcam_layers().last().unwrap().clone());
    std::fs::create_dir_all(&rc.out_dir)?;
    for path in &cli.inputs {
        if !path.exists() {
            return Err(Error::Data(format!("input {} not found", path.display())));
        }
        let img = Image::load(path)?;
        let norm = preprocess_pipeline_stages(&img, &rc.pipe, None)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
        let tensor = norm.to_tensor();
        let target = match rc.gradcam_class {
            Some(c) => c,
            None => predict_class(&model, &tensor)?,
        };
        let heat = gradcam::grad_cam(&model, &tensor, target, &layer)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let blended = gradcam::overlay(&tensor, &heat);
        blended.save_png(&rc.out_dir.join(format!("{}.cam.png", stem)))?;
        gradcam::write_pgm16(&rc.out_dir.join(format!("{}.cam.raw.pgm", stem)), &heat)?;
        println!("{} -> class {} -> {}.cam.png / {}.cam.raw.pgm", path.display(), target, stem, stem);
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::NoForeground => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tune_allocator();
    if let Ok(threads) = std::env::var("MHCAF_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(Some(cli)) => cli,
        Ok(None) => {
            println!("{}", USAGE);
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: {}", e);
            eprintln!("{}", USAGE);
            return ExitCode::from(1);
        }
    };
    let mut rc = match build_config(&cli) {
        Ok(rc) => rc,
        Err(e) => {
            eprintln!("error: {}", e);
            return ExitCode::from(1);
        }
    };
    let result = match cli.command.as_str() {
        "preprocess" => cmd_preprocess(&cli, &rc),
        "train" => cmd_train(&cli, &mut rc),
        "eval" => cmd_eval(&cli, &rc),
        "kfold" => cmd_kfold(&cli, &mut rc),
        "gradcam" => cmd_gradcam(&cli, &rc),
        _ => unreachable!("validated in parse_args"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
