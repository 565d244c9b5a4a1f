//! Command implementations behind the `skinseg` executable.
//!
//! Every command writes into an output directory; reports are
//! `report.csv` (header plus one row) and `report.txt` (`key: value`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use crate::checkpoint;
use crate::codec;
use crate::config::TrainConfig;
use crate::dataset::{load_dataset_with, load_samples, Sample, Split};
use crate::error::{Error, Result};
use crate::kernels;
use crate::metrics::{Metrics, EVAL_THRESHOLD};
use crate::network::{build_model, forward, parameter_count, ModelParams};
use crate::parallel::num_workers;
use crate::provider::{MaskProvider, MaskProviderConfig};
use crate::relabel::{run_recursive_training, DirStore, GenerationStore, RelabelInputs, RelabelState};
use crate::synth::{pooled_iou, write_synthetic_dataset, SynthConfig, SynthSummary};
use crate::train::{confusions, predict_all, ModelTrainer};
use crate::types::{BinaryMask, ImageTensor, PartMask, SkinProbMap};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Evaluation metrics plus model size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    pub metrics: Metrics,
    pub params: usize,
}

impl Report {
    pub const CSV_HEADER: &'static str = "precision,recall,f1,cdr,dsc,iou,params";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            m.precision, m.recall, m.f1, m.cdr, m.dsc, m.iou, self.params
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        for (k, v) in [
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("cdr", m.cdr),
            ("dsc", m.dsc),
            ("iou", m.iou),
        ] {
            writeln!(s, "{k}: {v:.6}").expect("string write");
        }
        writeln!(s, "params: {}", self.params).expect("string write");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("report.csv"), self.to_csv().as_bytes())?;
        write_file(&dir.join("report.txt"), self.to_text().as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Decode one split, reporting skipped records through `log`.
pub fn load_split(
    root: &Path,
    split: Split,
    parts_dir: Option<&Path>,
    input_size: usize,
    log: &mut dyn FnMut(String),
) -> Result<Vec<Sample>> {
    let index = load_dataset_with(root, split, parts_dir)?;
    for r in &index.rejected {
        log(format!("{split}: skipping {r}"));
    }
    let samples = load_samples(&index, None, num_workers())?;
    for s in &samples {
        if (s.image.height(), s.image.width()) != (input_size, input_size) {
            return Err(Error::DimensionMismatch {
                stem: s.stem.clone(),
                detail: format!(
                    "image is {}x{} but the model expects {input_size}x{input_size}",
                    s.image.height(),
                    s.image.width()
                ),
            });
        }
    }
    Ok(samples)
}

fn nonempty(samples: Vec<Sample>, split: Split, root: &Path) -> Result<Vec<Sample>> {
    if samples.is_empty() {
        Err(Error::DatasetEmpty(format!(
            "no usable {split} records under {}",
            root.display()
        )))
    } else {
        Ok(samples)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: usize,
    /// Absent for dry runs.
    pub report: Option<Report>,
    pub checkpoint: Option<PathBuf>,
}

/// Train on `train`, validate on `val`, write checkpoint, log and report.
pub fn cmd_train(cfg: &TrainConfig, dry_run: bool, log: &mut dyn FnMut(String)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = cfg.require_data_dir()?;
    let parts = cfg.parts_dir.as_deref();
    let train = nonempty(
        load_split(root, Split::Train, parts, cfg.input_size, log)?,
        Split::Train,
        root,
    )?;
    let val = nonempty(
        load_split(root, Split::Val, parts, cfg.input_size, log)?,
        Split::Val,
        root,
    )?;
    let model = build_model(&cfg.model_config())?;
    let params = parameter_count(&model);
    log(format!(
        "{} train / {} val images, {params} parameters",
        train.len(),
        val.len()
    ));
    if dry_run {
        return Ok(TrainOutcome {
            params,
            report: None,
            checkpoint: None,
        });
    }

    mkdir(&cfg.out_dir)?;
    let labels: Vec<BinaryMask> = train.iter().map(|s| s.label.clone()).collect();
    let mut trainer = ModelTrainer::new(model, &train, &val, cfg.settings(num_workers()))?;
    let mut table = String::from("epoch,lr,train_loss,precision,recall,f1,cdr,dsc,iou\n");
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let lr = trainer.current_lr();
        let loss = trainer.run_epoch(&labels)?;
        let m = trainer.evaluate_val()?;
        writeln!(
            table,
            "{epoch},{lr:e},{loss:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.precision, m.recall, m.f1, m.cdr, m.dsc, m.iou
        )
        .expect("string write");
        log(format!("epoch {epoch}: lr {lr:.3e} loss {loss:.4} val f1 {:.4}", m.f1));
        last = Some(m);
    }
    write_file(&cfg.out_dir.join(TRAIN_LOG_FILE), table.as_bytes())?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, trainer.params())?;
    let report = Report {
        metrics: last.expect("at least one epoch"),
        params,
    };
    report.write(&cfg.out_dir)?;
    Ok(TrainOutcome {
        params,
        report: Some(report),
        checkpoint: Some(ckpt),
    })
}

/// Evaluate a checkpoint on one split. Binarized predictions are written to
/// `out_dir/predictions/<stem>.png`.
pub fn cmd_eval(
    ckpt: &Path,
    data_dir: &Path,
    split: Split,
    parts_dir: Option<&Path>,
    out_dir: &Path,
    log: &mut dyn FnMut(String),
) -> Result<Report> {
    let model = checkpoint::load(ckpt)?;
    let samples = nonempty(
        load_split(data_dir, split, parts_dir, model.config.input_size, log)?,
        split,
        data_dir,
    )?;
    let preds = predict_all(&model, &samples, num_workers())?;
    let pred_dir = out_dir.join("predictions");
    mkdir(&pred_dir)?;
    for (p, s) in preds.iter().zip(&samples) {
        let mask = BinaryMask::from_threshold(&p.prob, EVAL_THRESHOLD);
        codec::save_binary_mask(&pred_dir.join(format!("{}.png", s.stem)), &mask)?;
    }
    let report = Report {
        metrics: Metrics::from_images(&confusions(&preds, &samples)?),
        params: parameter_count(&model),
    };
    report.write(out_dir)?;
    Ok(report)
}

/// Where `cmd_infer` takes the part mask from.
#[derive(Clone, Debug)]
pub enum PartsSource {
    File(PathBuf),
    /// Directory of `<stem>.png` masks, looked up by the image stem.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferOutputs {
    pub mask: PathBuf,
    pub attention: PathBuf,
}

fn resize_map(map: &SkinProbMap, h: usize, w: usize) -> Result<SkinProbMap> {
    let v = kernels::resize_forward(map.values(), 1, (map.height(), map.width()), (h, w));
    SkinProbMap::new(h, w, v)
}

/// Segment one image; writes `<stem>_mask.png` and `<stem>_attention.png`.
/// With `resize`, inputs of another size are scaled to the model size and
/// the outputs scaled back.
pub fn cmd_infer(ckpt: &Path, image: &Path, parts: &PartsSource, out_dir: &Path, resize: bool) -> Result<InferOutputs> {
    let model = checkpoint::load(ckpt)?;
    let rgb = codec::load_rgb(image)?;
    let (w0, h0) = (rgb.width() as usize, rgb.height() as usize);
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidValue(format!("cannot take a file stem from {}", image.display())))?
        .to_string();
    let mask = match parts {
        PartsSource::File(p) => codec::load_part_mask(p)?,
        PartsSource::Dir(d) => MaskProvider::new(MaskProviderConfig::file(d))?.get_parts(&stem, h0, w0)?,
    };
    let mismatch = |detail: String| Error::DimensionMismatch {
        stem: stem.clone(),
        detail,
    };
    let mask = if (mask.height(), mask.width()) == (h0, w0) {
        mask
    } else if resize {
        mask.resized(h0, w0)?
    } else {
        return Err(mismatch(format!(
            "image is {h0}x{w0} but the part mask is {}x{}; pass --resize to rescale",
            mask.height(),
            mask.width()
        )));
    };

    let s = model.config.input_size;
    let (img, mask) = if (h0, w0) == (s, s) {
        (codec::rgb_to_tensor(&rgb)?, mask)
    } else if resize {
        let scaled = imageops::resize(&rgb, s as u32, s as u32, FilterType::Triangle);
        (codec::rgb_to_tensor(&scaled)?, mask.resized(s, s)?)
    } else {
        return Err(mismatch(format!(
            "image is {h0}x{w0} but the model expects {s}x{s}; pass --resize to rescale"
        )));
    };
    let pred = run_forward(&model, &img, &mask)?;
    let (prob, attention) = if (h0, w0) == (s, s) {
        (pred.0, pred.1)
    } else {
        (resize_map(&pred.0, h0, w0)?, resize_map(&pred.1, h0, w0)?)
    };

    mkdir(out_dir)?;
    let out = InferOutputs {
        mask: out_dir.join(format!("{stem}_mask.png")),
        attention: out_dir.join(format!("{stem}_attention.png")),
    };
    codec::save_binary_mask(&out.mask, &BinaryMask::from_threshold(&prob, EVAL_THRESHOLD))?;
    codec::write(&out.attention, &codec::encode_attention(&attention))?;
    Ok(out)
}

fn run_forward(model: &ModelParams, img: &ImageTensor, parts: &PartMask) -> Result<(SkinProbMap, SkinProbMap)> {
    let p = forward(model, img, parts)?;
    Ok((p.prob, p.attention))
}

#[derive(Clone, Debug)]
pub struct RelabelSummary {
    pub state: RelabelState,
    pub recursive: Report,
    pub direct: Report,
    /// Pooled IoU of every label generation against `train/labels_true`,
    /// when that directory is present.
    pub generation_ious: Option<Vec<f64>>,
}

/// Recursive relabeling and a direct-training baseline with the same epoch
/// budget and seed.
///
/// Layout under `out_dir`: `model.ckpt` and `report.*` (recursive arm),
/// `direct/` (baseline), `relabel/labels_gen<k>/`, `relabel/relabel_state.log`,
/// `comparison.csv`, and `label_quality.csv` when clean labels are known.
pub fn cmd_relabel(cfg: &TrainConfig, log: &mut dyn FnMut(String)) -> Result<RelabelSummary> {
    cfg.validate()?;
    let root = cfg.require_data_dir()?;
    let parts = cfg.parts_dir.as_deref();
    let train = nonempty(
        load_split(root, Split::Train, parts, cfg.input_size, log)?,
        Split::Train,
        root,
    )?;
    let val = nonempty(
        load_split(root, Split::Val, parts, cfg.input_size, log)?,
        Split::Val,
        root,
    )?;
    let workers = num_workers();
    mkdir(&cfg.out_dir)?;

    let stems: Vec<String> = train.iter().map(|s| s.stem.clone()).collect();
    let labels: Vec<BinaryMask> = train.iter().map(|s| s.label.clone()).collect();

    let model = build_model(&cfg.model_config())?;
    let params = parameter_count(&model);
    let mut trainer = ModelTrainer::new(model, &train, &val, cfg.settings(workers))?;
    let bodies = trainer.train_bodies();
    let mut store = DirStore::create(&cfg.out_dir.join("relabel"))?;
    let outcome = run_recursive_training(
        &mut trainer,
        RelabelInputs {
            stems: &stems,
            labels: &labels,
            bodies: &bodies,
        },
        &cfg.schedule(),
        cfg.epochs,
        &mut store,
        workers,
    )?;
    log(format!(
        "recursive: {} modification rounds, final generation {}, current t {:.2}",
        outcome.modification_rounds,
        outcome.state.final_generation.unwrap_or(0),
        outcome.state.current_t
    ));
    checkpoint::save(&cfg.out_dir.join(CHECKPOINT_FILE), trainer.params())?;
    let recursive = Report {
        metrics: trainer.evaluate_val()?,
        params,
    };
    recursive.write(&cfg.out_dir)?;

    let direct_dir = cfg.out_dir.join("direct");
    mkdir(&direct_dir)?;
    let mut direct_trainer = ModelTrainer::new(build_model(&cfg.model_config())?, &train, &val, cfg.settings(workers))?;
    for _ in 0..cfg.epochs {
        direct_trainer.run_epoch(&labels)?;
    }
    checkpoint::save(&direct_dir.join(CHECKPOINT_FILE), direct_trainer.params())?;
    let direct = Report {
        metrics: direct_trainer.evaluate_val()?,
        params,
    };
    direct.write(&direct_dir)?;
    log(format!(
        "val f1: recursive {:.4}, direct {:.4}",
        recursive.metrics.f1, direct.metrics.f1
    ));

    let comparison = format!(
        "arm,{}\ndirect,{}\nrecursive,{}\n",
        Report::CSV_HEADER,
        direct.csv_row(),
        recursive.csv_row()
    );
    write_file(&cfg.out_dir.join("comparison.csv"), comparison.as_bytes())?;

    let truth_dir = root.join(Split::Train.as_str()).join("labels_true");
    let generation_ious = if truth_dir.is_dir() {
        let truth: Vec<BinaryMask> = stems
            .iter()
            .map(|s| codec::load_binary_mask(&truth_dir.join(format!("{s}.png"))))
            .collect::<Result<_>>()?;
        let mut table = String::from("generation,iou\n");
        let mut ious = Vec::new();
        for k in 0..outcome.state.label_generations.len() {
            let gen = store.load(k, &stems)?;
            let iou = pooled_iou(gen.iter().zip(&truth));
            writeln!(table, "{k},{iou:.6}").expect("string write");
            ious.push(iou);
        }
        write_file(&cfg.out_dir.join("label_quality.csv"), table.as_bytes())?;
        Some(ious)
    } else {
        None
    };

    Ok(RelabelSummary {
        state: outcome.state,
        recursive,
        direct,
        generation_ious,
    })
}

/// Write a synthetic dataset plus `synth_report.txt`.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let summary = write_synthetic_dataset(out, cfg)?;
    let text = format!(
        "train: {}\nval: {}\ntest: {}\nsize: {}\nseed: {}\ntrain_noise_iou: {:.6}\n",
        summary.train, summary.val, summary.test, cfg.size, cfg.seed, summary.train_noise_iou
    );
    write_file(&out.join("synth_report.txt"), text.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_formats() {
        let r = Report {
            metrics: Metrics {
                precision: 0.88,
                recall: 88.0 / 102.0,
                f1: 0.5,
                cdr: 0.974,
                dsc: 1.0,
                iou: 0.0,
            },
            params: 112,
        };
        assert_eq!(
            r.to_csv(),
            "precision,recall,f1,cdr,dsc,iou,params\n0.880000,0.862745,0.500000,0.974000,1.000000,0.000000,112\n"
        );
        assert!(r.to_text().starts_with("precision: 0.880000\nrecall: 0.862745\n"));
        assert!(r.to_text().ends_with("params: 112\n"));
    }
}
