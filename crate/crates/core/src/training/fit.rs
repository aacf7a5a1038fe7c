//! Minibatch training of one segmenter with a held-out validation shard and
//! early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::early_stop::{EarlyStopping, Verdict};
use super::optim::{sgd_step, OptConfig, OptState};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::maskops::BinaryMask;
use crate::nnet::{ParamSet, Segmenter, Tag};
use crate::tensor::TensorF;

/// Fraction of the training samples held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub encoder_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    /// Checksums of the starting weights.
    pub init_encoder_checksum: u64,
    pub init_decoder_checksum: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; 0 means the initial weights.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// An input image and the mask it should produce.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: TensorF,
    pub target: BinaryMask,
}

/// Seeded split into `(train, validation)` index lists.
///
/// With a single sample the same index serves both roles.
pub fn validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Mean combined loss of `params` over `items`.
pub fn mean_loss(net: &Segmenter, params: &ParamSet, items: &[&TrainItem], loss: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let p = net.forward(params, &it.image)?;
        total += combined_loss(&p, &it.target, loss)?.value;
    }
    Ok(total / items.len() as f64)
}

/// Accumulates the gradient of the batch-mean loss into `params`; returns the summed loss.
pub fn accumulate_batch(
    net: &Segmenter,
    params: &mut ParamSet,
    batch: &[&TrainItem],
    loss: &LossConfig,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for it in batch {
        let trace = net.forward_trace(params, &it.image)?;
        let l = combined_loss(trace.output(), &it.target, loss)?;
        total += l.value;
        net.backward(params, &trace, &l.grad.map(|g| g * scale))?;
    }
    Ok(total)
}

/// Trains from `init` and returns the best-validation checkpoint.
///
/// Stops after `max_epochs`, or once `patience` consecutive epochs fail to
/// improve the validation loss. When `freeze_encoder` is set, encoder-tagged
/// parameters are never updated.
pub fn fit(
    net: &Segmenter,
    init: &ParamSet,
    items: &[TrainItem],
    opt: &OptConfig,
    loss: &LossConfig,
    freeze_encoder: bool,
) -> Result<(ParamSet, History)> {
    opt.validate()?;
    loss.validate()?;
    net.check_params(init)?;
    if items.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let frozen = freeze_encoder.then_some(Tag::Encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let (mut train_idx, val_idx) = validation_split(items.len(), opt.seed);
    let val: Vec<&TrainItem> = val_idx.iter().map(|&i| &items[i]).collect();

    let mut params = init.clone();
    params.zero_grad();
    let mut best = params.clone();
    let mut state = OptState::default();
    let mut stopper = EarlyStopping::new(opt.patience);
    let mut history = History {
        init_encoder_checksum: params.checksum(Tag::Encoder),
        init_decoder_checksum: params.checksum(Tag::Decoder),
        ..History::default()
    };
    let mut t = 0;

    for epoch in 1..=opt.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in train_idx.chunks(opt.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            train_total += accumulate_batch(net, &mut params, &batch, loss)?;
            t += 1;
            sgd_step(&mut params, &mut state, t, opt, frozen)?;
        }
        let val_loss = mean_loss(net, &params, &val, loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerics(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: train_total / train_idx.len() as f64,
            val_loss,
            encoder_checksum: params.checksum(Tag::Encoder),
        });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => {
                best = params.clone();
                history.best_epoch = epoch;
            }
            Verdict::Continue => {}
            Verdict::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    best.zero_grad();
    Ok((best, history))
}
