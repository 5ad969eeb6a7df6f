//! Multi-source training loop with best-epoch model selection.

use alloc::vec::Vec;

use crate::data::{make_minibatches, mix_seed, Batch, DatasetBundle, Domain, FeatureLayout};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{HyperParams, Mode, RdcmModel};
use crate::optim::adam_step;
use crate::params::ParamSet;
use crate::tape::{compute_gradients, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Component means over the epoch's steps.
    pub cls: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
    /// Accuracy on the pooled source test splits after the epoch.
    pub val_accuracy: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Steps whose contrastive batch had no real-post anchor.
    pub empty_anchor_steps: usize,
    pub vanilla_equivalent: bool,
}

/// Timestamp source; the core has no clock of its own.
pub trait Clock {
    fn now_secs(&mut self) -> f64;
}

/// Reports zero elapsed time.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_secs(&mut self) -> f64 {
        0.0
    }
}

pub fn fit(model: &mut RdcmModel, bundle: &DatasetBundle, hyper: &HyperParams) -> Result<TrainReport> {
    fit_with_clock(model, bundle, hyper, &mut NoClock)
}

/// Trains `model` on the bundle's source training splits and leaves it holding
/// the parameters of the epoch with the best source-test accuracy (the
/// earliest such epoch on ties).
pub fn fit_with_clock(
    model: &mut RdcmModel,
    bundle: &DatasetBundle,
    hyper: &HyperParams,
    clock: &mut dyn Clock,
) -> Result<TrainReport> {
    hyper.validate()?;
    if bundle.sources.len() < 2 {
        return Err(Error::Config("training needs at least two source domains".into()));
    }
    let with_target = hyper.mode == Mode::Da;
    if with_target && bundle.target.is_none() {
        return Err(Error::Config("DA mode requires target domain data".into()));
    }
    let layout = bundle.layout;
    let mut records = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut empty_anchor_steps = 0;
    let start = clock.now_secs();

    for epoch in 0..hyper.epochs {
        let steps = make_minibatches(
            bundle,
            hyper.batch_size,
            mix_seed(hyper.seed, epoch as u64),
            with_target,
        )?;
        let (mut cls, mut inter, mut intra, mut total) = (0.0, 0.0, 0.0, 0.0);
        for (si, step) in steps.iter().enumerate() {
            let sources = bundle
                .sources
                .iter()
                .zip(&step.sources)
                .map(|(d, idx)| Batch::from_indices(&layout, d, idx))
                .collect::<Result<Vec<_>>>()?;
            let target = match (&step.target, &bundle.target) {
                (Some(idx), Some(d)) => Some(Batch::from_indices(&layout, d, idx)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let obj = model.objective(&mut tape, &sources, target.as_ref(), hyper)?;
            let parts = obj.breakdown(&tape);
            if !(parts.total.is_finite() && parts.cls.is_finite() && parts.inter.is_finite() && parts.intra.is_finite())
            {
                return Err(Error::NonFinite {
                    epoch,
                    step: si,
                    cls: parts.cls,
                    inter: parts.inter,
                    intra: parts.intra,
                });
            }
            if parts.anchors == 0 {
                empty_anchor_steps += 1;
            }
            model.params.zero_grad();
            compute_gradients(&tape, obj.total, &mut model.params)?;
            adam_step(&mut model.params, &hyper.adam);
            cls += parts.cls;
            inter += parts.inter;
            intra += parts.intra;
            total += parts.total;
        }
        let n = steps.len() as f64;
        let val = source_test_accuracy(model, &layout, &bundle.sources)?;
        records.push(EpochRecord {
            epoch,
            cls: cls / n,
            inter: inter / n,
            intra: intra / n,
            total: total / n,
            val_accuracy: val,
            wall_clock_secs: clock.now_secs() - start,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val > *acc) {
            best = Some((epoch, val, model.params.clone()));
        }
    }

    let (best_epoch, best_val_accuracy, best_params) = best.expect("at least one epoch");
    model.params.copy_values_from(&best_params)?;
    Ok(TrainReport {
        seed: hyper.seed,
        mode: hyper.mode,
        epochs: records,
        best_epoch,
        best_val_accuracy,
        empty_anchor_steps,
        vanilla_equivalent: hyper.is_vanilla(),
    })
}

/// Accuracy over the pooled test splits of `domains`.
pub fn source_test_accuracy(model: &RdcmModel, layout: &FeatureLayout, domains: &[Domain]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    for d in domains {
        let idx = d.test()?;
        let batch = Batch::from_indices(layout, d, idx)?;
        preds.extend(model.predict(&batch)?.into_iter().map(|p| p.label));
        gold.extend_from_slice(&batch.labels);
    }
    accuracy(&preds, &gold)
}

/// Accuracy on every sample of `domain`.
pub fn domain_accuracy(model: &RdcmModel, layout: &FeatureLayout, domain: &Domain) -> Result<f64> {
    let idx: Vec<usize> = (0..domain.samples.len()).collect();
    let batch = Batch::from_indices(layout, domain, &idx)?;
    let preds: Vec<u8> = model.predict(&batch)?.into_iter().map(|p| p.label).collect();
    accuracy(&preds, &batch.labels)
}
