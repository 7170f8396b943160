use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, TrainConfig, TrainingData};
use crate::dataio::{gray_to_tensor, LabelMask, WearClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, DatasetReport};
use crate::numerics::{make_optimizer, Mode, Tape, Tensor};
use crate::unet::{Checkpoint, TrainingMeta, UNet, UNetConfig};

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses of the epoch.
    pub train_loss: f64,
    /// Per-image averaged validation IoU; `None` on epochs without validation.
    pub val_mean_iou: Option<f64>,
    pub val_class_iou: [Option<f64>; NUM_CLASSES],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model after the last epoch.
    pub model: UNet<f32>,
    pub last_epoch: usize,
    /// Model with the highest validation mean IoU seen so far.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_mean_iou(&self) -> Option<f64> {
        self.best.meta.metrics.get("val_mean_iou").copied()
    }

    pub fn final_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::new(
            self.model.clone(),
            TrainingMeta {
                epoch: self.last_epoch,
                seed,
                metrics: BTreeMap::new(),
            },
        )
    }
}

/// History CSV: `epoch,train_loss,val_mean_iou,iou_<class>...`, with empty
/// cells where validation was skipped or a class was absent.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "epoch".to_string(),
        "train_loss".into(),
        "val_mean_iou".into(),
    ];
    header.extend(WearClass::ALL.iter().map(|c| format!("iou_{}", c.name())));
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let mut rec = vec![r.epoch.to_string(), r.train_loss.to_string(), cell(r.val_mean_iou)];
        rec.extend(r.val_class_iou.iter().map(|&v| cell(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<history csv>", e))?;
    Ok(())
}

struct Prepared {
    images: Vec<Tensor<f32>>,
    masks: Vec<LabelMask>,
}

fn prepare(examples: &[Example], what: &str) -> Result<Prepared> {
    if examples.is_empty() {
        return Err(Error::data(format!("the {what} set is empty")));
    }
    let (w, h) = (examples[0].mask.width(), examples[0].mask.height());
    for e in examples {
        if (e.mask.width(), e.mask.height()) != (w, h)
            || (e.image.width() as usize, e.image.height() as usize) != (w, h)
        {
            return Err(Error::data(format!(
                "all {what} images must share one extent ({w} x {h})"
            )));
        }
    }
    Ok(Prepared {
        images: examples.iter().map(|e| gray_to_tensor(&e.image)).collect(),
        masks: examples.iter().map(|e| e.mask.clone()).collect(),
    })
}

/// Dataset report of `model` on `examples`, predicted in batches. The
/// training history's validation scores are the `micro` figures of this.
pub fn evaluate_model(
    model: &UNet<f32>,
    examples: &[Example],
    batch_size: usize,
) -> Result<DatasetReport> {
    let prep = prepare(examples, "validation")?;
    validate_prepared(model, &prep, batch_size)
}

fn validate_prepared(model: &UNet<f32>, prep: &Prepared, batch_size: usize) -> Result<DatasetReport> {
    let mut pairs = Vec::with_capacity(prep.images.len());
    for (chunk_idx, chunk) in prep.images.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let labels = model.predict_labels(&Tensor::stack_batch(&refs)?)?;
        for (j, lab) in labels.into_iter().enumerate() {
            let idx = chunk_idx * batch_size.max(1) + j;
            let truth = &prep.masks[idx];
            let pred = LabelMask::new(truth.width(), truth.height(), lab)?;
            pairs.push((format!("val{idx:05}"), pred, truth.clone()));
        }
    }
    evaluate_dataset(&pairs)
}

fn metrics_map(report: &DatasetReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("val_mean_iou".to_string(), report.micro.mean_iou);
    for (c, v) in WearClass::ALL.iter().zip(report.micro.per_class_iou) {
        if let Some(v) = v {
            m.insert(format!("val_iou_{}", c.name()), v);
        }
    }
    m
}

struct Run<'a> {
    data: &'a TrainingData,
    cfg: &'a TrainConfig,
    start_epoch: usize,
    dir: Option<&'a Path>,
}

fn run(mut model: UNet<f32>, initial_best: Checkpoint, r: Run<'_>) -> Result<TrainOutcome> {
    let cfg = r.cfg;
    cfg.validate()?;
    let train = prepare(&r.data.train, "training")?;
    let val = prepare(&r.data.validation, "validation")?;
    model.check_input(&train.images[0])?;

    let mut optimizer = make_optimizer::<f32>(cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.images.len()).collect();
    let mut best_iou = initial_best
        .meta
        .metrics
        .get("val_mean_iou")
        .copied()
        .unwrap_or(f64::NEG_INFINITY);
    let mut best = initial_best;
    let mut history = Vec::with_capacity(cfg.epochs);

    for e in 1..=cfg.epochs {
        let epoch = r.start_epoch + e;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &train.images[i]).collect();
            let images = Tensor::stack_batch(&refs)?;
            let mut target = Vec::with_capacity(images.len());
            for &i in idx {
                target.extend_from_slice(train.masks[i].classes());
            }
            let weights: Vec<f64> = target
                .iter()
                .map(|&t| cfg.class_weights[t as usize])
                .collect();

            let context = |err: Error| match err {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}"))
                }
                other => other,
            };
            let mut tape = Tape::new();
            let x = tape.leaf(images, false);
            let fwd = model
                .forward_tape(&mut tape, x, Mode::Train, &mut rng, true)
                .map_err(context)?;
            let loss = tape
                .softmax_cross_entropy(fwd.logits, &target, &weights)
                .map_err(context)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {loss_value} at epoch {epoch}, batch {b}"
                )));
            }
            tape.backward(loss).map_err(context)?;
            let grads = fwd
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| match tape.take_grad(v) {
                    Some(g) => Ok(g),
                    None => Tensor::zeros(p.shape().to_vec()),
                })
                .collect::<Result<Vec<_>>>()?;
            optimizer.step(model.params_mut(), &grads)?;
            loss_sum += loss_value;
            batches += 1;
        }

        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mean_iou: None,
            val_class_iou: [None; NUM_CLASSES],
        };
        if e % cfg.validate_every == 0 || e == cfg.epochs {
            let report = validate_prepared(&model, &val, cfg.batch_size)?;
            record.val_mean_iou = Some(report.micro.mean_iou);
            record.val_class_iou = report.micro.per_class_iou;
            if report.micro.mean_iou > best_iou {
                best_iou = report.micro.mean_iou;
                best = Checkpoint::new(
                    model.clone(),
                    TrainingMeta {
                        epoch,
                        seed: cfg.seed,
                        metrics: metrics_map(&report),
                    },
                );
                if let Some(dir) = r.dir {
                    best.save(dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some(dir) = r.dir {
            if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
                let meta = TrainingMeta {
                    epoch,
                    seed: cfg.seed,
                    metrics: BTreeMap::new(),
                };
                Checkpoint::new(model.clone(), meta).save(dir.join(format!("epoch_{epoch:05}.ckpt")))?;
            }
        }
        history.push(record);
    }

    Ok(TrainOutcome {
        model,
        last_epoch: r.start_epoch + cfg.epochs,
        best,
        history,
    })
}

fn untrained_checkpoint(model: &UNet<f32>, epoch: usize, seed: u64) -> Checkpoint {
    Checkpoint::new(
        model.clone(),
        TrainingMeta {
            epoch,
            seed,
            metrics: BTreeMap::new(),
        },
    )
}

/// Trains `model` for `cfg.epochs` epochs. Pixels are weighted by the class
/// weight of their ground-truth label.
pub fn train(model: UNet<f32>, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let best = untrained_checkpoint(&model, 0, cfg.seed);
    run(
        model,
        best,
        Run {
            data,
            cfg,
            start_epoch: 0,
            dir: None,
        },
    )
}

/// Like [`train`], additionally writing `best.ckpt`, periodic
/// `epoch_<n>.ckpt`, `last.ckpt` and `history.csv` into `dir`.
pub fn train_in_dir(
    model: UNet<f32>,
    data: &TrainingData,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best = untrained_checkpoint(&model, 0, cfg.seed);
    let out = run(
        model,
        best,
        Run {
            data,
            cfg,
            start_epoch: 0,
            dir: Some(dir),
        },
    )?;
    finish_dir(&out, cfg, dir)?;
    Ok(out)
}

fn finish_dir(out: &TrainOutcome, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    out.final_checkpoint(cfg.seed).save(dir.join("last.ckpt"))?;
    let path = dir.join("history.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_history_csv(&out.history, std::io::BufWriter::new(file))
}

/// Resumes training from `checkpoint` with a fresh optimizer. Epoch numbers
/// continue from the checkpoint and the checkpoint's own validation score
/// (if recorded) is the score to beat.
pub fn continue_training(
    checkpoint: &Checkpoint,
    expected: &UNetConfig,
    data: &TrainingData,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if checkpoint.model.config() != expected {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained with {:?}, requested {:?}",
            checkpoint.model.config(),
            expected
        )));
    }
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let out = run(
        checkpoint.model.clone(),
        checkpoint.clone(),
        Run {
            data,
            cfg,
            start_epoch: checkpoint.meta.epoch,
            dir,
        },
    )?;
    if let Some(dir) = dir {
        finish_dir(&out, cfg, dir)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticSpec;

    fn tiny() -> (UNet<f32>, TrainingData) {
        let spec = SyntheticSpec {
            width: 32,
            height: 32,
            band_jitter: 0.0,
            band_fractions: [0.2; 5],
            ..Default::default()
        };
        let (data, _) = TrainingData::synthetic(&spec, 4, 2, 0, None).unwrap();
        let mut cfg = UNetConfig::with_phi(1.0 / 16.0);
        cfg.depth = 2;
        cfg.base_dropout = vec![0.1, 0.1, 0.2];
        (UNet::build(cfg, 1).unwrap(), data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_history() {
        let (model, data) = tiny();
        let a = train(model.clone(), &data, &quick()).unwrap();
        let b = train(model, &data, &quick()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn uniform_class_weights_are_normalised_away() {
        let (model, data) = tiny();
        let a = train(model.clone(), &data, &quick()).unwrap();
        let cfg = TrainConfig {
            class_weights: [4.0; NUM_CLASSES],
            ..quick()
        };
        let b = train(model, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn continuing_zero_epochs_keeps_the_model() {
        let (model, data) = tiny();
        let out = train(model, &data, &quick()).unwrap();
        let ckpt = out.final_checkpoint(0);
        let cfg = TrainConfig {
            epochs: 0,
            ..quick()
        };
        let cont = continue_training(&ckpt, ckpt.model.config(), &data, &cfg, None).unwrap();
        assert_eq!(cont.model, ckpt.model);
        assert!(cont.history.is_empty());
    }

    #[test]
    fn continuing_with_another_architecture_is_rejected() {
        let (model, data) = tiny();
        let ckpt = untrained_checkpoint(&model, 3, 0);
        let other = UNetConfig::with_phi(1.0 / 8.0);
        let err = continue_training(&ckpt, &other, &data, &quick(), None).unwrap_err();
        assert_eq!(err.category(), "incompatible");
    }

    #[test]
    fn continued_epochs_follow_the_checkpoint() {
        let (model, data) = tiny();
        let ckpt = untrained_checkpoint(&model, 7, 0);
        let out = continue_training(&ckpt, ckpt.model.config(), &data, &quick(), None).unwrap();
        let epochs: Vec<usize> = out.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![8, 9]);
    }

    #[test]
    fn huge_learning_rate_reports_epoch_and_batch() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 5,
            optimizer: crate::numerics::OptimizerKind::Sgd { momentum: 0.0 },
            ..quick()
        };
        let err = train(model, &data, &cfg).unwrap_err();
        assert_eq!(err.category(), "numeric");
        let msg = err.to_string();
        assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
    }

    #[test]
    fn empty_validation_set_is_rejected() {
        let (model, mut data) = tiny();
        data.validation.clear();
        assert_eq!(train(model, &data, &quick()).unwrap_err().category(), "data");
    }
}
