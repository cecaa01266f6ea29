use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vesselseg::data::{load_pair, scan_dataset, split, DatasetEntry, DatasetManifest};
use vesselseg::eda::write_stats;
use vesselseg::imaging::{
    augment_dataset, format_augment_manifest, normalize, preprocess_image, preprocess_mask, resize_image,
    to_grayscale, write_netpbm, AugmentRecord, AugmentSpec, BinaryMask, ClaheConfig, GrayImage, ImageU8,
    PreprocessConfig, ProbabilityMap,
};
use vesselseg::metrics::{self, emit_report, EvalOptions, MetricValues, RocOptions};
use vesselseg::model::{binarize, load_checkpoint, probability_maps, Checkpoint, UNet};
use vesselseg::selfcheck::{run_suite, TOLERANCE};
use vesselseg::training::{self, read_epoch_log, EpochLog, Sample, TrainOptions};
use vesselseg::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_entries(entries: &[&DatasetEntry]) -> Result<Vec<(String, ImageU8, BinaryMask)>, CliError> {
    let pairs = entries
        .par_iter()
        .map(|e| load_pair(e).map(|(img, mask)| (e.label(), img, mask)))
        .collect::<vesselseg::Result<Vec<_>>>()?;
    Ok(pairs)
}

fn all_entries(manifest: &DatasetManifest) -> Vec<&DatasetEntry> {
    manifest.entries.iter().collect()
}

pub fn stats(root: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = scan_dataset(root)?;
    let pairs = load_entries(&all_entries(&manifest))?;
    let (images, masks): (Vec<(String, ImageU8)>, Vec<BinaryMask>) =
        pairs.into_iter().map(|(id, img, mask)| ((id, img), mask)).unzip();
    write_stats(&images, &masks, out)?;
    println!("summarized {} image/mask pairs into {}", images.len(), out.display());
    Ok(())
}

pub struct PreprocessArgs {
    pub clahe: Option<ClaheConfig>,
    pub size: usize,
}

pub fn preprocess(root: &Path, out: &Path, args: &PreprocessArgs) -> Result<(), CliError> {
    let cfg = PreprocessConfig {
        clahe: args.clahe.clone(),
        size: (args.size != 0).then_some((args.size, args.size)),
    };
    if let Some(c) = &cfg.clahe {
        c.validate()?;
    }
    let manifest = scan_dataset(root)?;
    let (images_dir, masks_dir) = (out.join("images"), out.join("masks"));
    create_dir(&images_dir)?;
    create_dir(&masks_dir)?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let (img, mask) = load_pair(e)?;
            let gray = preprocess_image(&img, &cfg)?;
            let mask = preprocess_mask(&mask, &cfg)?;
            write_netpbm(&images_dir.join(format!("{}.pgm", e.label())), &gray.to_u8())?;
            write_netpbm(&masks_dir.join(format!("{}.pgm", e.label())), &mask.to_u8())
        })
        .collect::<vesselseg::Result<()>>()?;
    println!("preprocessed {} pairs into {}", manifest.entries.len(), out.display());
    Ok(())
}

fn to_gray(img: &ImageU8) -> vesselseg::Result<GrayImage> {
    if img.channels == 3 {
        normalize(&to_grayscale(img)?)
    } else {
        normalize(img)
    }
}

pub fn augment(root: &Path, out: &Path, spec: &AugmentSpec) -> Result<(), CliError> {
    spec.validate()?;
    let manifest = scan_dataset(root)?;
    let sources: Vec<(String, GrayImage, BinaryMask)> = load_entries(&all_entries(&manifest))?
        .into_par_iter()
        .map(|(id, img, mask)| Ok((id, to_gray(&img)?, mask)))
        .collect::<vesselseg::Result<_>>()?;
    let pairs = augment_dataset(&sources, spec)?;

    let (images_dir, masks_dir) = (out.join("images"), out.join("masks"));
    create_dir(&images_dir)?;
    create_dir(&masks_dir)?;
    let records = pairs
        .par_iter()
        .map(|p| {
            let file = format!("{}.pgm", p.stem());
            write_netpbm(&images_dir.join(&file), &p.image.to_u8())?;
            write_netpbm(&masks_dir.join(&file), &p.mask.to_u8())?;
            Ok(AugmentRecord {
                source_id: p.source_id.clone(),
                op: p.op.name().to_string(),
                angle_millidegrees: p.op.millidegrees(),
                output_file: format!("images/{file}"),
            })
        })
        .collect::<vesselseg::Result<Vec<_>>>()?;
    write_text(&out.join("augment_manifest.csv"), &format_augment_manifest(&records))?;
    println!("{} sources -> {} pairs in {}", sources.len(), pairs.len(), out.display());
    Ok(())
}

fn format_split(split: &vesselseg::data::Split) -> String {
    let mut rows: Vec<(u32, &str)> = Vec::new();
    for (ids, set) in [(&split.train, "train"), (&split.val, "val"), (&split.test, "test")] {
        rows.extend(ids.iter().map(|&id| (id, set)));
    }
    rows.sort_unstable();
    let mut out = String::from("id,set\n");
    for (id, set) in rows {
        let _ = writeln!(out, "{id:02},{set}");
    }
    out
}

/// Ids listed as `test` in a `split.csv` written by `train`.
fn read_test_ids(path: &Path) -> Result<BTreeSet<u32>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,set") {
        return Err(CliError::Data(format!("{}: expected header \"id,set\"", path.display())));
    }
    let mut ids = BTreeSet::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let bad = || CliError::Data(format!("{}: malformed row {line:?}", path.display()));
        let (id, set) = line.split_once(',').ok_or_else(bad)?;
        if set == "test" {
            ids.insert(id.parse().map_err(|_| bad())?);
        }
    }
    Ok(ids)
}

pub fn train(config: &Path, out: &Path, record_wall_time: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let manifest = scan_dataset(&cfg.data.root)?;
    let split = split(&manifest, &cfg.split)?;
    let pre = cfg.preprocess_config();

    let mut pool: Vec<u32> = split.train.iter().chain(&split.val).copied().collect();
    pool.sort_unstable();
    let entries: Vec<&DatasetEntry> = pool.iter().filter_map(|&id| manifest.get(id)).collect();
    let sources: Vec<(String, GrayImage, BinaryMask)> = load_entries(&entries)?
        .into_par_iter()
        .map(|(id, img, mask)| Ok((id, preprocess_image(&img, &pre)?, preprocess_mask(&mask, &pre)?)))
        .collect::<vesselseg::Result<_>>()?;

    let val_labels: BTreeSet<String> = split.val.iter().map(|id| format!("{id:02}")).collect();
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for p in augment_dataset(&sources, &cfg.augment)? {
        let sample = Sample { id: p.stem(), image: p.image, mask: p.mask };
        if val_labels.contains(&p.source_id) {
            val_set.push(sample);
        } else {
            train_set.push(sample);
        }
    }

    create_dir(out)?;
    write_text(&out.join("run_config.toml"), &cfg.to_toml())?;
    write_text(&out.join("split.csv"), &format_split(&split))?;
    eprintln!(
        "training on {} images ({} sources), validating on {} images ({} sources)",
        train_set.len(),
        split.train.len(),
        val_set.len(),
        split.val.len()
    );
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), record_wall_time };
    let epochs = cfg.train.epochs;
    let outcome = training::train(&cfg.model, &cfg.train, &cfg.loss, &train_set, &val_set, &opts, |log| {
        let val = log.val_loss.map_or("-".to_string(), |v| format!("{v:.5}"));
        eprintln!("epoch {}/{epochs}  train_loss {:.5}  val_loss {val}", log.epoch, log.train_loss);
    })?;
    println!("{} steps; final checkpoint {}", outcome.steps, out.join("final.ckpt").display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, UNet<f32>), CliError> {
    let ckpt = load_checkpoint(path)?;
    let model = UNet::from_parts(ckpt.config.clone(), ckpt.params.clone())?;
    Ok((ckpt, model))
}

/// Preprocessing for inference: CLAHE only when a run config enables it,
/// then resize to the checkpoint's training size.
fn inference_preprocess(ckpt: &Checkpoint, config: Option<&Path>) -> Result<PreprocessConfig, CliError> {
    let clahe = match config {
        Some(path) => RunConfig::load(path)?.preprocess_config().clahe,
        None => None,
    };
    let (h, w) = ckpt.input_size;
    Ok(PreprocessConfig { clahe, size: Some((w, h)) })
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub out: &'a Path,
    pub prob: Option<&'a Path>,
    pub threshold: f32,
    pub config: Option<&'a Path>,
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let (ckpt, model) = load_model(args.checkpoint)?;
    let pre = inference_preprocess(&ckpt, args.config)?;
    let img = vesselseg::imaging::read_netpbm(args.image)?;
    let input = preprocess_image(&img, &pre)?;
    let batch = Tensor::new(&[1, 1, input.height, input.width], input.data)?;
    let mut prob = probability_maps(&model.predict(&batch)?)?.remove(0);
    if (prob.width, prob.height) != (img.width, img.height) {
        let plane = GrayImage { width: prob.width, height: prob.height, data: prob.data };
        let back = resize_image(&plane, img.width, img.height)?;
        prob = ProbabilityMap::new(back.width, back.height, back.data)?;
    }
    let mask = binarize(&prob, args.threshold)?;
    write_netpbm(args.out, &mask.to_u8())?;
    if let Some(path) = args.prob {
        write_netpbm(path, &prob.to_u8())?;
    }
    println!(
        "{} vessel pixels of {} ({}x{}) -> {}",
        mask.positives(),
        mask.data.len(),
        mask.width,
        mask.height,
        args.out.display()
    );
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub options: EvalOptions,
    pub config: Option<&'a Path>,
    pub split: Option<&'a Path>,
    pub log: Option<PathBuf>,
}

fn format_per_image(per_image: &[metrics::ImageMetrics]) -> String {
    let mut out = format!("id,tp,fp,tn,fn,{}\n", MetricValues::NAMES.join(","));
    for m in per_image {
        let c = m.counts;
        let _ = write!(out, "{},{},{},{},{}", m.id, c.tp, c.fp, c.tn, c.fn_);
        match m.values {
            Some(v) => v.as_array().iter().for_each(|x| {
                let _ = write!(out, ",{x}");
            }),
            None => out.push_str(",,,,,,"),
        }
        out.push('\n');
    }
    out
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let (ckpt, model) = load_model(args.checkpoint)?;
    let pre = inference_preprocess(&ckpt, args.config)?;
    let manifest = scan_dataset(args.data)?;
    let entries: Vec<&DatasetEntry> = match args.split {
        Some(path) => {
            let ids = read_test_ids(path)?;
            let picked: Vec<&DatasetEntry> = manifest.entries.iter().filter(|e| ids.contains(&e.id)).collect();
            if picked.len() != ids.len() {
                return Err(CliError::Data(format!(
                    "{} lists {} test ids but only {} are present under {}",
                    path.display(),
                    ids.len(),
                    picked.len(),
                    args.data.display()
                )));
            }
            picked
        }
        None => all_entries(&manifest),
    };
    if entries.is_empty() {
        return Err(CliError::Data("no test images selected".into()));
    }
    let samples: Vec<Sample> = load_entries(&entries)?
        .into_par_iter()
        .map(|(id, img, mask)| {
            Ok(Sample { id, image: preprocess_image(&img, &pre)?, mask: preprocess_mask(&mask, &pre)? })
        })
        .collect::<vesselseg::Result<_>>()?;

    let eval = metrics::evaluate(&model, &samples, &args.options)?;
    let log_path = args
        .log
        .clone()
        .or_else(|| args.checkpoint.parent().map(|d| d.join("train_log.csv")).filter(|p| p.exists()));
    let logs: Vec<EpochLog> = match log_path {
        Some(p) => read_epoch_log(&p)?,
        None => Vec::new(),
    };
    emit_report(&eval.report, eval.roc(), &logs, args.out)?;
    write_text(&args.out.join("per_image.csv"), &format_per_image(&eval.report.per_image))?;

    let r = &eval.report;
    println!(
        "{} images, {} aggregation, {} ROC",
        samples.len(),
        r.aggregation.as_str(),
        r.roc_mode.as_str()
    );
    for (name, v) in MetricValues::NAMES.iter().zip(r.values.as_array()) {
        println!("{name:>10} {v:.4}");
    }
    Ok(())
}

pub fn roc_options(mode: metrics::RocMode) -> RocOptions {
    RocOptions { mode, ..RocOptions::default() }
}

pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let suite = run_suite(seed)?;
    println!("{:<18} {:>14} {:>8}  result", "op", "max_rel_error", "checked");
    let mut failed = Vec::new();
    for entry in &suite {
        let ok = entry.passed();
        println!(
            "{:<18} {:>14.3e} {:>8}  {}",
            entry.name,
            entry.report.max_rel_error,
            entry.report.checked,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(entry.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {TOLERANCE:e}", suite.len());
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check above {TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}
