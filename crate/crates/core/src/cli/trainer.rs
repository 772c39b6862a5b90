//! The per-stage training loop.

use super::config::{OptimizerKind, TrainConfig};
use super::RunError;
use crate::data::{make_batches, PairedDataset, Split};
use crate::eval::{evaluate, RetrievalReport};
use crate::losses::{batch_loss, LossError};
use crate::model::EmbeddingNetwork;
use crate::numerics::Rng;
use crate::optim::{adam_step_masked, lr_at, sgd_step, AdamState};

/// Summary of one finished epoch. `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch losses.
    pub loss: f64,
    pub val: Option<RetrievalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the best validation R@sum (the last
    /// epoch when there is no validation split).
    pub network: EmbeddingNetwork,
    pub selected_epoch: usize,
    pub initial_val: Option<RetrievalReport>,
    pub history: Vec<EpochRecord>,
}

/// RNG stream used for batch shuffling; disjoint from the initialization
/// streams.
pub const BATCH_STREAM: u64 = 200;

fn validation(net: &EmbeddingNetwork, ds: &PairedDataset) -> Result<Option<RetrievalReport>, RunError> {
    if ds.split_images(Split::Val).is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(net, ds, Split::Val)?))
}

/// Trains `net` on the train split for `cfg.epochs` epochs, evaluating on
/// the validation split after each one. `on_epoch` sees every record as it
/// is produced.
pub fn train_network(
    mut net: EmbeddingNetwork,
    ds: &PairedDataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<(), RunError>,
) -> Result<TrainOutcome, RunError> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config()?;
    let mut rng = Rng::stream(cfg.seed, BATCH_STREAM + cfg.stage as u64);
    let n_tensors = net.tensors().len();
    let frozen: Vec<bool> = (0..n_tensors)
        .map(|i| cfg.freeze_base && i < EmbeddingNetwork::BASE_TENSOR_COUNT)
        .collect();
    let mut adam = AdamState::new(net.tensors().iter().map(|(_, t)| t.shape()));

    let initial_val = validation(&net, ds)?;
    let mut best: Option<(f64, usize, EmbeddingNetwork)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let lr = lr_at(&cfg.lr, e);
        let batches = make_batches(ds, Split::Train, cfg.batch, &mut rng)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (value, grads) = match batch_loss(&net, batch, &loss_cfg) {
                Ok(r) => r,
                Err(err @ (LossError::ZeroRow { .. } | LossError::NonFinite(_))) => {
                    return Err(RunError::NonFinite {
                        epoch: e + 1,
                        batch: b,
                        what: err.to_string(),
                    })
                }
                Err(other) => return Err(other.into()),
            };
            if !value.is_finite() {
                return Err(RunError::NonFinite {
                    epoch: e + 1,
                    batch: b,
                    what: format!("loss is {value}"),
                });
            }
            if let Some(t) = grads.tensors.iter().position(|g| !g.is_finite()) {
                return Err(RunError::NonFinite {
                    epoch: e + 1,
                    batch: b,
                    what: format!("gradient of parameter tensor {t} is not finite (loss {value})"),
                });
            }
            total += value;
            let mut params = net.tensors_mut();
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step_masked(&mut params, &grads.tensors, &mut adam, lr, &frozen)?,
                OptimizerKind::Sgd => sgd_step(&mut params, &grads.tensors, lr, &frozen)?,
            }
        }
        let record = EpochRecord {
            epoch: e + 1,
            lr,
            loss: total / batches.len() as f64,
            val: validation(&net, ds)?,
        };
        let score = record.val.map_or(f64::NEG_INFINITY, |r| r.rsum);
        let improves = match &best {
            None => true,
            Some((s, _, _)) => score > *s || (record.val.is_none() && score == *s),
        };
        if improves {
            best = Some((score, record.epoch, net.clone()));
        }
        on_epoch(&record)?;
        history.push(record);
    }

    let (_, selected_epoch, network) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        network,
        selected_epoch,
        initial_val,
        history,
    })
}
