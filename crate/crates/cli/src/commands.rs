use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::GrayImage;
use wearseg::acquisition::{blur_in_pixels, exposure_displacement, solve_trigger_offset};
use wearseg::augment::expand_dataset;
use wearseg::dataio::{gray_to_tensor, load_gray, load_mask, save_mask, ClassPalette, DatasetSplit, LabelMask, Subset, WearClass};
use wearseg::metrics::{evaluate_dataset, pixel_count_series};
use wearseg::numerics::Tensor;
use wearseg::synth::{generate_sequence, read_sequence_manifest, write_sequence};
use wearseg::training::{self, continue_training, grid_search, train_in_dir, TrainingData};
use wearseg::unet::{Checkpoint, UNet};

use crate::config::RunConfig;
use crate::dataset::{fit_image, fit_mask, to_examples, write_dataset, DatasetDir, Item};
use crate::error::{CliError, CliResult};
use crate::{manifest, Common};

pub struct Context {
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Context {
    pub fn new(common: &Common) -> Self {
        Context {
            out_dir: common.out_dir.clone(),
            threads: common.threads,
        }
    }

    /// Creates the output directory; called once inputs are validated.
    fn prepare(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| CliError::io(&self.out_dir, e))?;
        Ok(&self.out_dir)
    }

    fn finish(&self, command: &str, cfg: &RunConfig, outputs: Vec<PathBuf>) -> CliResult<()> {
        let path = manifest::write(&self.out_dir, command, cfg, self.threads, outputs)?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

fn require<'a>(slot: &'a Option<PathBuf>, what: &str, flag: &str, key: &str) -> CliResult<&'a Path> {
    let path = slot
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} given; pass {flag} or set {key}")))?;
    if !path.exists() {
        return Err(CliError::MissingPath {
            path: path.to_path_buf(),
            what: what.to_string(),
        });
    }
    Ok(path)
}

fn palette(cfg: &RunConfig) -> CliResult<ClassPalette> {
    match &cfg.paths.palette {
        Some(_) => Ok(ClassPalette::load(require(&cfg.paths.palette, "palette", "--set paths.palette=...", "paths.palette")?)?),
        None => Ok(ClassPalette::default()),
    }
}

fn open_data(cfg: &RunConfig) -> CliResult<DatasetDir> {
    DatasetDir::open(require(&cfg.paths.data, "dataset", "--data", "paths.data")?)
}

fn load_checkpoint(cfg: &RunConfig) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(require(&cfg.paths.checkpoint, "checkpoint", "--checkpoint", "paths.checkpoint")?)?)
}

fn training_data(cfg: &RunConfig, dir: &DatasetDir, palette: &ClassPalette) -> CliResult<TrainingData> {
    let m = cfg.unet.size_multiple();
    let fit = cfg.fit(m);
    let data = TrainingData {
        train: to_examples(dir.load(Subset::Train, palette)?, fit, m)?,
        validation: to_examples(dir.load(Subset::Validation, palette)?, fit, m)?,
    };
    if data.train.is_empty() {
        return Err(CliError::Usage(format!("{} has no training items", dir.root.display())));
    }
    Ok(data)
}

fn labels_to_mask(labels: Vec<u8>, width: usize, height: usize) -> CliResult<LabelMask> {
    Ok(LabelMask::new(width, height, labels)?)
}

/// Predicts one frame of any extent, fitting it to the network stride and
/// cutting padding off the result.
fn predict_frame(model: &UNet<f32>, cfg: &RunConfig, id: &str, image: &GrayImage) -> CliResult<LabelMask> {
    let (fitted, place) = fit_image(id, image, cfg.fit(model.config().size_multiple()), model.config().size_multiple())?;
    let labels = model.predict_labels(&gray_to_tensor(&fitted))?.remove(0);
    Ok(place.restore_mask(&labels_to_mask(labels, place.width, place.height)?)?)
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn flush<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn synth(ctx: &Context, cfg: RunConfig, sequence: bool) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let out = ctx.prepare()?;
    let d = &cfg.data;
    let (data, test) = TrainingData::synthetic(&cfg.synth, d.n_train, d.n_validation, d.n_test, None)?;
    let named = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i:05}")).collect::<Vec<_>>();
    let split = DatasetSplit {
        train: named("train", data.train.len()),
        validation: named("val", data.validation.len()),
        test: named("test", test.len()),
        fractions: {
            let n = (d.n_train + d.n_validation + d.n_test).max(1) as f64;
            [d.n_train as f64 / n, d.n_validation as f64 / n, d.n_test as f64 / n]
        },
        seed: cfg.synth.seed,
    };
    let ids = split.train.iter().chain(&split.validation).chain(&split.test);
    let examples = data.train.iter().chain(&data.validation).chain(&test);
    write_dataset(
        out,
        &split,
        ids.zip(examples).map(|(id, e)| (id.as_str(), &e.image, &e.mask)),
        &palette,
    )?;
    let mut outputs = vec![out.join(crate::dataset::SPLIT_FILE)];
    println!(
        "synth: {} train, {} validation, {} test items in {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        out.display()
    );
    if sequence {
        let dir = out.join("sequence");
        let rows = write_sequence(&dir, &cfg.series.sequence(), &cfg.synth, &palette)?;
        println!("synth: {} sequence frames in {}", rows.len(), dir.display());
        outputs.push(dir.join("sequence.csv"));
    }
    ctx.finish("synth", &cfg, outputs)
}

pub fn augment(ctx: &Context, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let dir = open_data(&cfg)?;
    let out = ctx.prepare()?;
    let train = dir.load(Subset::Train, &palette)?;
    let expanded = expand_dataset(&train, &cfg.augment)?;
    let mut items: Vec<Item> = expanded
        .into_iter()
        .map(|a| {
            let id = if a.copy == 0 { a.id } else { format!("{}_aug{}", a.id, a.copy) };
            (id, a.image, a.mask)
        })
        .collect();
    let split = DatasetSplit {
        train: items.iter().map(|(id, _, _)| id.clone()).collect(),
        ..dir.split.clone()
    };
    items.extend(dir.load(Subset::Validation, &palette)?);
    items.extend(dir.load(Subset::Test, &palette)?);
    write_dataset(out, &split, items.iter().map(|(id, i, m)| (id.as_str(), i, m)), &palette)?;
    println!(
        "augment: {} training images became {} in {}",
        train.len(),
        split.train.len(),
        out.display()
    );
    ctx.finish("augment", &cfg, vec![out.join(crate::dataset::SPLIT_FILE)])
}

fn report_training(out: &training::TrainOutcome) {
    match out.best_val_mean_iou() {
        Some(v) => println!(
            "train: best validation mean IoU {v:.4} at epoch {} (last epoch {})",
            out.best.meta.epoch, out.last_epoch
        ),
        None => println!("train: finished epoch {} without validation", out.last_epoch),
    }
}

fn training_outputs(out: &Path) -> Vec<PathBuf> {
    ["best.ckpt", "last.ckpt", "history.csv"].iter().map(|f| out.join(f)).collect()
}

pub fn train(ctx: &Context, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let dir = open_data(&cfg)?;
    let data = training_data(&cfg, &dir, &palette)?;
    let out = ctx.prepare()?;
    let model = UNet::build(cfg.unet.clone(), cfg.run.seed)?;
    let outcome = train_in_dir(model, &data, &cfg.train, out)?;
    report_training(&outcome);
    ctx.finish("train", &cfg, training_outputs(out))
}

pub fn resume(ctx: &Context, mut cfg: RunConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(&cfg)?;
    if !cfg.section_is_explicit("unet") {
        cfg.unet = ckpt.model.config().clone();
    }
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let dir = open_data(&cfg)?;
    let data = training_data(&cfg, &dir, &palette)?;
    let out = ctx.prepare()?;
    let outcome = continue_training(&ckpt, &cfg.unet, &data, &cfg.train, Some(out))?;
    report_training(&outcome);
    ctx.finish("continue", &cfg, training_outputs(out))
}

pub fn eval(ctx: &Context, cfg: RunConfig, subset: &str) -> CliResult<()> {
    let which = Subset::parse(subset)
        .ok_or_else(|| CliError::Usage(format!("unknown subset `{subset}` (train, validation or test)")))?;
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let dir = open_data(&cfg)?;
    let model = load_checkpoint(&cfg)?.model;
    let items = dir.load(which, &palette)?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("subset `{subset}` of {} is empty", dir.root.display())));
    }
    let out = ctx.prepare()?;
    let m = model.config().size_multiple();
    let mut pairs = Vec::with_capacity(items.len());
    for (id, image, truth) in items {
        let pred = predict_frame(&model, &cfg, &id, &image)?;
        // Padding is undone on the prediction; a crop applies to the truth too.
        let (_, place) = fit_image(&id, &image, cfg.fit(m), m)?;
        let truth = if place.padded { truth } else { fit_mask(&truth, &place)? };
        pairs.push((id, pred, truth));
    }
    let report = evaluate_dataset(&pairs)?;
    let path = out.join("metrics.csv");
    report.write_csv(BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?))?;
    println!(
        "eval: {} {} images, mean IoU {:.4} (per-image mean {:.4})",
        pairs.len(),
        which.as_str(),
        report.micro.mean_iou,
        report.macro_mean
    );
    for k in WearClass::ALL {
        match report.micro.class_iou(k) {
            Some(v) => println!("  {:<18} {v:.4}", k.name()),
            None => println!("  {:<18} absent", k.name()),
        }
    }
    ctx.finish("eval", &cfg, vec![path])
}

pub fn predict(ctx: &Context, cfg: RunConfig, inputs: &[PathBuf]) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    for input in inputs {
        if !input.is_file() {
            return Err(CliError::MissingPath {
                path: input.clone(),
                what: "input image".into(),
            });
        }
    }
    let model = load_checkpoint(&cfg)?.model;
    ctx.prepare()?;
    let mut outputs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let image = load_gray(input)?;
        let mask = predict_frame(&model, &cfg, &input.display().to_string(), &image)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = input.with_file_name(format!("{stem}_mask.png"));
        save_mask(&path, &mask, &palette)?;
        println!("predict: {}", path.display());
        outputs.push(path);
    }
    ctx.finish("predict", &cfg, outputs)
}

fn write_series(path: &Path, frames: &[(u64, LabelMask)]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["stroke", "class", "count"])?;
    for k in WearClass::ALL {
        for (stroke, count) in pixel_count_series(frames.iter().map(|(s, m)| (*s, m)), k) {
            w.write_record([stroke.to_string().as_str(), k.name(), &count.to_string()])?;
        }
    }
    flush(w, path)
}

pub fn series(ctx: &Context, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let model = load_checkpoint(&cfg)?.model;
    let frames: Vec<(u64, GrayImage, LabelMask)> = match &cfg.paths.sequence {
        Some(_) => {
            let dir = require(&cfg.paths.sequence, "sequence", "--sequence", "paths.sequence")?;
            let manifest = dir.join("sequence.csv");
            if !manifest.is_file() {
                return Err(CliError::MissingPath {
                    path: manifest,
                    what: "sequence manifest".into(),
                });
            }
            read_sequence_manifest(&manifest)?
                .into_iter()
                .map(|(stroke, image, mask)| {
                    Ok((stroke, load_gray(dir.join(image))?, load_mask(dir.join(mask), &palette)?))
                })
                .collect::<CliResult<_>>()?
        }
        None => generate_sequence(&cfg.series.sequence(), &cfg.synth)?
            .map(|f| (f.stroke, f.image, f.mask))
            .collect(),
    };
    let out = ctx.prepare()?;
    let m = model.config().size_multiple();
    let fit = cfg.fit(m);
    let mut predicted = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(cfg.series.batch_size.max(1)) {
        let mut fitted = Vec::with_capacity(chunk.len());
        for (stroke, image, _) in chunk {
            fitted.push(fit_image(&format!("stroke {stroke}"), image, fit, m)?);
        }
        let tensors: Vec<Tensor<f32>> = fitted.iter().map(|(img, _)| gray_to_tensor(img)).collect();
        let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
        let labels = model.predict_labels(&Tensor::stack_batch(&refs)?)?;
        for (((stroke, _, _), (_, place)), l) in chunk.iter().zip(&fitted).zip(labels) {
            let mask = place.restore_mask(&labels_to_mask(l, place.width, place.height)?)?;
            predicted.push((*stroke, mask));
        }
    }
    let pred_path = out.join("series.csv");
    let truth_path = out.join("series_truth.csv");
    write_series(&pred_path, &predicted)?;
    let truth: Vec<(u64, LabelMask)> = frames.into_iter().map(|(s, _, m)| (s, m)).collect();
    write_series(&truth_path, &truth)?;
    println!("series: {} frames -> {}", predicted.len(), pred_path.display());
    ctx.finish("series", &cfg, vec![pred_path, truth_path])
}

pub fn grid(ctx: &Context, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let dir = open_data(&cfg)?;
    let data = training_data(&cfg, &dir, &palette)?;
    let out = ctx.prepare()?;
    let result = grid_search(&cfg.grid, &cfg.unet, &data, &cfg.train, cfg.run.seed)?;
    let path = out.join("grid.csv");
    result.write_csv(BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?))?;
    match result.argmax() {
        Some(c) => println!(
            "grid: best phi {} batch {} with validation mean IoU {:.4}",
            c.phi,
            c.batch_size,
            c.result.as_ref().unwrap()
        ),
        None => println!("grid: every cell failed"),
    }
    ctx.finish("grid", &cfg, vec![path])
}

pub fn bayes(ctx: &Context, cfg: RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let palette = palette(&cfg)?;
    let dir = open_data(&cfg)?;
    let data = training_data(&cfg, &dir, &palette)?;
    if data.validation.is_empty() {
        return Err(CliError::Usage("the weight search needs a validation subset".into()));
    }
    let out = ctx.prepare()?;
    let outcome = training::bayes_opt(&cfg.bayes, |w| {
        let mut tc = cfg.train.clone();
        tc.class_weights[WearClass::AdhesiveWear.index() as usize] = w[0];
        tc.class_weights[WearClass::SurfaceSpalling.index() as usize] = w[1];
        let model = UNet::build(cfg.unet.clone(), cfg.run.seed)?;
        let adhesive = WearClass::AdhesiveWear.index() as usize;
        let v = training::train(model, &data, &tc)?
            .history
            .iter()
            .filter_map(|r| r.val_class_iou[adhesive])
            .reduce(f64::max)
            .ok_or_else(|| wearseg::Error::Data("no adhesive-wear pixels in the validation subset".into()))?;
        println!("bayes: weights ({:.3}, {:.3}) -> {v:.4}", w[0], w[1]);
        Ok(v)
    })?;
    let path = out.join("bayes.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "evaluation",
        "w_adhesive",
        "w_spalling",
        "val_adhesive_iou",
        "best_w_adhesive",
        "best_w_spalling",
        "best_val_adhesive_iou",
    ])?;
    for (i, s) in outcome.trace.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            s.point[0].to_string(),
            s.point[1].to_string(),
            s.value.to_string(),
            s.incumbent_point[0].to_string(),
            s.incumbent_point[1].to_string(),
            s.incumbent_value.to_string(),
        ])?;
    }
    flush(w, &path)?;
    println!(
        "bayes: best weights adhesive {:.3}, spalling {:.3} with validation adhesive-wear IoU {:.4}",
        outcome.best_point[0], outcome.best_point[1], outcome.best_value
    );
    ctx.finish("bayes", &cfg, vec![path])
}

pub fn timing(ctx: &Context, cfg: RunConfig) -> CliResult<()> {
    cfg.press.validate()?;
    let out = ctx.prepare()?;
    let path = out.join("timing.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["target_um", "theta0_deg", "displacement_um", "blur_px"])?;
    println!(
        "{} spm, stroke {} mm, exposure {} us, {} px over {} mm",
        cfg.press.stroke_rate,
        cfg.press.stroke_length * 1e3,
        cfg.press.exposure * 1e6,
        cfg.timing.image_width,
        cfg.timing.fov_width * 1e3
    );
    println!("{:>10} {:>11} {:>16} {:>8}", "target_um", "theta0_deg", "displacement_um", "blur_px");
    for &target in &cfg.timing.targets_um {
        match solve_trigger_offset(&cfg.press, target * 1e-6) {
            Ok(theta) => {
                let k = cfg.press.with_trigger_offset(theta);
                let d = exposure_displacement(&k) * 1e6;
                let blur = blur_in_pixels(&k, cfg.timing.fov_width, cfg.timing.image_width)?;
                let deg = theta.to_degrees();
                println!("{target:>10.2} {deg:>11.2} {d:>16.4} {blur:>8.3}");
                w.write_record([target.to_string(), deg.to_string(), d.to_string(), blur.to_string()])?;
            }
            Err(wearseg::Error::Range(_)) => {
                println!("{target:>10.2} {:>11} {:>16} {:>8}", "-", "unreachable", "-");
                w.write_record([target.to_string(), String::new(), String::new(), String::new()])?;
            }
            Err(e) => return Err(e.into()),
        }
    }
    flush(w, &path)?;
    ctx.finish("timing", &cfg, vec![path])
}
