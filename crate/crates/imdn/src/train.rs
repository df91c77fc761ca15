//! Training loop: sample a batch, record the forward pass on a tape, take
//! the L1 loss, backpropagate, and apply one Adam step per iteration.
//!
//! Everything is driven by a single seed: batch sampling, augmentation and
//! (upstream) weight initialization. Rerunning with the same seed and the
//! same dataset reproduces the loss history and final weights exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::Tape;
use crate::image::ImageError;
use crate::metrics::{sample_patch_pair, TrainImage};
use crate::model::{ModelError, ModelGraph};
use crate::optim::{adam_step, lr_schedule, AdamState, TrainConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("hr_patch {patch} is not divisible by scale {scale}")]
    PatchNotDivisible { patch: usize, scale: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// One line of the loss history CSV.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step losses, writable as `step,lr,loss` CSV.
#[derive(Debug, Clone, Default)]
pub struct LossHistory {
    pub records: Vec<StepRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Train `model` in place for `steps` iterations and return the history.
pub fn train_loop(
    model: &mut ModelGraph,
    dataset: &[TrainImage],
    config: &TrainConfig,
    steps: u64,
    seed: u64,
) -> Result<LossHistory, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let scale = match model.kind {
        crate::model::ArchKind::Imdn => model.config.scale,
        crate::model::ArchKind::ImdnAs => 1,
    };
    if config.hr_patch % scale != 0 {
        return Err(TrainError::PatchNotDivisible {
            patch: config.hr_patch,
            scale,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<(AdamState, AdamState)> = model
        .slots()
        .iter()
        .map(|s| {
            (
                AdamState::new(s.layer.weights.shape()),
                AdamState::new([s.layer.bias.len(), 1, 1, 1]),
            )
        })
        .collect();

    let mut history = LossHistory::default();
    for step in 1..=steps {
        // assemble the batch first so the rng stream is independent of
        // anything the forward pass might consume later
        let mut lr_patches = Vec::with_capacity(config.batch_size);
        let mut hr_patches = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let image = &dataset[rng.gen_range(0..dataset.len())];
            let pair = sample_patch_pair(
                image,
                config.hr_patch,
                config.augment_flip,
                config.augment_rotate,
                &mut rng,
            )?;
            lr_patches.push(pair.lr);
            hr_patches.push(pair.hr);
        }
        let lr_batch = stack_batch(&lr_patches);
        let hr_batch = stack_batch(&hr_patches);

        let mut tape = Tape::new();
        let params = model.register_params(&mut tape);
        let pred = model.forward_on_tape(&mut tape, &params, lr_batch)?;
        let target = tape.leaf(hr_batch);
        let loss = tape.l1_loss(pred, target).map_err(ModelError::from)?;
        tape.backward(loss).map_err(ModelError::from)?;

        let loss_value = tape.value(loss).item();
        let lr_now = lr_schedule(step, config);

        for (i, (name, wid, bid)) in params.in_order().iter().enumerate() {
            let grad_w = tape.grad(*wid).cloned();
            let grad_b = tape.grad(*bid).cloned();
            let layer = model.layer_mut(name)?;
            if let Some(gw) = grad_w {
                adam_step(&mut layer.weights, &gw, &mut states[i].0, config, step);
            }
            if let Some(gb) = grad_b {
                let mut bias = Tensor::from_vec([layer.bias.len(), 1, 1, 1], layer.bias.clone());
                adam_step(&mut bias, &gb, &mut states[i].1, config, step);
                layer.bias = bias.data().to_vec();
            }
        }

        history.records.push(StepRecord {
            step,
            lr: lr_now,
            loss: loss_value,
        });
    }
    Ok(history)
}

/// Concatenate equally-shaped `1xCxHxW` tensors along the batch axis.
fn stack_batch(parts: &[Tensor]) -> Tensor {
    let [_, c, h, w] = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        debug_assert_eq!(p.shape(), [1, c, h, w]);
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec([parts.len(), c, h, w], data)
}
