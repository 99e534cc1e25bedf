//! Training loop, loss, dataset evaluation and the ablation runner.
//!
//! One optimization step: for every sample in the mini-batch, build a
//! fresh tape, run the model forward, take
//! `0.5 * cross-entropy + 0.5 * soft-Dice`, run backward, and chain the
//! kernel gradients to the raw filter parameters. Per-sample gradients
//! are averaged in sample order (batch members may run on separate
//! threads; the merge order is fixed, so results are bit-identical for
//! any thread count), then AdamW updates every parameter group.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{BankConfig, FilterBank};
use crate::metrics::{self, MetricsReport};
use crate::model::{model_init, ModelConfig, ModelWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::{cast, Scalar};
use crate::synth::{synth_generate, SegmentationSample, SynthConfig};
use crate::tape::{NodeId, Tape};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_gabor: usize,
    pub n_log: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 2e-4,
            n_gabor: 2,
            n_log: 5,
            kernel_size: 7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Constraint(
                "epochs and batch_size must be at least 1".to_string(),
            ));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Constraint(
                "learning_rate must be positive and weight_decay non-negative".to_string(),
            ));
        }
        Ok(())
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            n_gabor: self.n_gabor,
            n_log: self.n_log,
            kernel_size: self.kernel_size,
        }
    }
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    /// Mean per-sample loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Validation mean Dice after each epoch.
    pub val_dice: Vec<f64>,
    pub initial_bank: FilterBank<T>,
    pub final_bank: FilterBank<T>,
    /// Gradient of every raw bank parameter on the first batch.
    pub step0_bank_grads: Vec<f64>,
    pub final_val_report: MetricsReport,
    pub wall_seconds: f64,
}

impl<T: Scalar> TrainReport<T> {
    /// `epoch,loss,val_dice` rows.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_dice\n");
        for (i, (loss, dice)) in self.epoch_loss.iter().zip(&self.val_dice).enumerate() {
            out.push_str(&format!("{i},{loss:.6},{dice:.6}\n"));
        }
        out
    }
}

/// Trained model plus its report.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: ModelWeights<T>,
    pub report: TrainReport<T>,
}

/// Combined segmentation loss: `0.5 * cross-entropy + 0.5 * soft-Dice`.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let dl = tape.dice_loss(logits, labels)?;
    let half = cast::<T>(0.5);
    let ce = tape.scale(ce, half);
    let dl = tape.scale(dl, half);
    tape.add(ce, dl)
}

/// Evaluate a model over samples, sharding across `threads`.
pub fn evaluate_model<T: Scalar>(
    model: &ModelWeights<T>,
    samples: &[SegmentationSample<T>],
    threads: usize,
    spacing: f64,
) -> Result<MetricsReport> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.labels.clone()).collect();
    metrics::evaluate_dataset(
        |image| model.forward(image),
        &images,
        &gts,
        model.config.n_classes,
        threads,
        spacing,
    )
}

/// Loss and parameter-group gradients for a single sample.
fn sample_grads<T: Scalar>(
    model: &ModelWeights<T>,
    sample: &SegmentationSample<T>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let nodes = model.insert(&mut tape);
    let logits = model.forward_on(&mut tape, &nodes, &sample.image)?;
    let labels: Vec<usize> = sample.labels.data().iter().map(|&v| v as usize).collect();
    let loss = segmentation_loss(&mut tape, logits, &labels)?;
    let loss_value = tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    tape.backward(loss)?;
    Ok((loss_value, model.collect_grads(&tape, &nodes)?))
}

/// Mean loss and gradients over a batch, merged in sample order.
fn batch_grads<T: Scalar>(
    model: &ModelWeights<T>,
    batch: &[&SegmentationSample<T>],
    threads: usize,
) -> Result<(f64, Vec<Vec<T>>)> {
    let per_sample: Vec<Result<(f64, Vec<Vec<T>>)>> = if threads <= 1 || batch.len() == 1 {
        batch.iter().map(|s| sample_grads(model, s)).collect()
    } else {
        let workers = threads.min(batch.len());
        let chunk = batch.len().div_ceil(workers);
        let mut slots: Vec<Option<Result<(f64, Vec<Vec<T>>)>>> =
            (0..batch.len()).map(|_| None).collect();
        let chunk_results: Vec<Vec<(usize, Result<(f64, Vec<Vec<T>>)>)>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let lo = w * chunk;
                        let hi = ((w + 1) * chunk).min(batch.len());
                        let slice = &batch[lo..hi];
                        scope.spawn(move || {
                            slice
                                .iter()
                                .enumerate()
                                .map(|(off, s)| (lo + off, sample_grads(model, s)))
                                .collect()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training thread panicked"))
                    .collect()
            });
        for chunk_result in chunk_results {
            for (slot, result) in chunk_result {
                slots[slot] = Some(result);
            }
        }
        slots.into_iter().map(|s| s.expect("slot filled")).collect()
    };

    let scale = cast::<T>((batch.len() as f64).recip());
    let mut loss_sum = 0.0;
    let mut acc: Option<Vec<Vec<T>>> = None;
    for result in per_sample {
        let (loss, grads) = result?;
        loss_sum += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += gv;
                    }
                }
            }
        }
    }
    let mut grads = acc.expect("nonempty batch");
    for group in &mut grads {
        for v in group.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum / batch.len() as f64, grads))
}

/// Train with an explicit model configuration.
pub fn train_with<T: Scalar>(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    synth_cfg: &SynthConfig,
    threads: usize,
) -> Result<TrainOutcome<T>> {
    train_cfg.validate()?;
    synth_cfg.validate()?;
    model_cfg.validate()?;
    model_cfg.validate_image(synth_cfg.image_size, synth_cfg.image_size)?;
    if model_cfg.n_classes != synth_cfg.n_classes {
        return Err(Error::Constraint(format!(
            "model has {} classes but the dataset has {}",
            model_cfg.n_classes, synth_cfg.n_classes
        )));
    }

    let started = Instant::now();
    let dataset = synth_generate::<T>(synth_cfg)?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut model = model_init::<T>(model_cfg, train_cfg.bank_config(), train_cfg.seed)?;
    let initial_bank = model.bank.clone();

    let mut group_sizes = vec![model.bank.learnable_param_count()];
    model.for_each_tensor(&mut |_, t| group_sizes.push(t.numel()));
    let mut opt = AdamW::<T>::new(
        AdamWConfig::new(train_cfg.learning_rate, train_cfg.weight_decay),
        &group_sizes,
    );

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(0x5EED));
    let mut epoch_loss = Vec::with_capacity(train_cfg.epochs);
    let mut val_dice = Vec::with_capacity(train_cfg.epochs);
    let mut step0_bank_grads = Vec::new();
    let mut final_val_report = None;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch_indices) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&SegmentationSample<T>> =
                batch_indices.iter().map(|&i| &dataset.train[i]).collect();
            let (loss, grads) = batch_grads(&model, &batch, threads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss * batch.len() as f64;

            if epoch == 0 && batch_idx == 0 {
                step0_bank_grads = grads[0]
                    .iter()
                    .map(|g| g.to_f64().unwrap_or(f64::NAN))
                    .collect();
            }

            opt.begin_step();
            let mut raw = model.bank.raw_params();
            opt.update(0, &mut raw, &grads[0])?;
            model.bank.set_raw_params(&raw)?;
            let mut group = 1;
            let mut failure = None;
            model.for_each_tensor_mut(&mut |_, t| {
                if failure.is_none() {
                    if let Err(e) = opt.update(group, t.data_mut(), &grads[group]) {
                        failure = Some(e);
                    }
                }
                group += 1;
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }
        epoch_loss.push(loss_sum / dataset.train.len() as f64);

        let report = evaluate_model(&model, &dataset.val, threads, 1.0)?;
        val_dice.push(report.mean_dice);
        final_val_report = Some(report);
    }

    let report = TrainReport {
        epoch_loss,
        val_dice,
        initial_bank,
        final_bank: model.bank.clone(),
        step0_bank_grads,
        final_val_report: final_val_report.expect("at least one epoch"),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { model, report })
}

/// Train with the default backbone configuration.
pub fn train<T: Scalar>(
    train_cfg: &TrainConfig,
    synth_cfg: &SynthConfig,
    threads: usize,
) -> Result<TrainOutcome<T>> {
    let model_cfg = ModelConfig {
        n_classes: synth_cfg.n_classes,
        ..ModelConfig::default()
    };
    train_with(model_cfg, train_cfg, synth_cfg, threads)
}

/// One ablation variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub n_gabor: usize,
    pub n_log: usize,
    pub extra_params: usize,
    pub mean_dice: f64,
}

/// Results of the four-variant ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,n_gabor,n_log,extra_params,mean_dice\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.variant, r.n_gabor, r.n_log, r.extra_params, r.mean_dice
            ));
        }
        out
    }

    /// Informational comparison against the expectation that the combined
    /// bank scores at least as well as each single-filter variant. Not
    /// asserted anywhere: at this scale the ordering is not reliable.
    pub fn ordering_note(&self) -> String {
        let dice = |name: &str| {
            self.rows
                .iter()
                .find(|r| r.variant == name)
                .map(|r| r.mean_dice)
                .unwrap_or(f64::NAN)
        };
        let combined = dice("glog");
        let holds = combined >= dice("gabor") && combined >= dice("log");
        format!(
            "combined bank >= each single-filter variant on mean dice: {}",
            if holds { "yes" } else { "no" }
        )
    }
}

/// Train the four bank variants (none, Gabor-only, LoG-only, combined)
/// with identical seeds and budgets.
pub fn run_ablation<T: Scalar>(
    model_cfg: ModelConfig,
    base: &TrainConfig,
    synth_cfg: &SynthConfig,
    threads: usize,
) -> Result<AblationTable> {
    let variants: [(&'static str, usize, usize); 4] = [
        ("none", 0, 0),
        ("gabor", base.n_gabor, 0),
        ("log", 0, base.n_log),
        ("glog", base.n_gabor, base.n_log),
    ];
    let mut rows = Vec::with_capacity(4);
    for (variant, n_gabor, n_log) in variants {
        let cfg = TrainConfig {
            n_gabor,
            n_log,
            ..base.clone()
        };
        let outcome = train_with::<T>(model_cfg.clone(), &cfg, synth_cfg, threads)?;
        rows.push(AblationRow {
            variant,
            n_gabor,
            n_log,
            extra_params: 5 * n_gabor + n_log,
            mean_dice: *outcome.report.val_dice.last().expect("epochs >= 1"),
        });
    }
    Ok(AblationTable { rows })
}
