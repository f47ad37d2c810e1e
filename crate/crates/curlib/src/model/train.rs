//! Plain next-token training, used to produce non-trivial "teacher" models
//! that compression and healing can then operate on.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamW};

use super::backward::{backward, cross_entropy_and_grad, Gradients, ParamScope};
use super::ToyTransformer;

/// Hyperparameters for [`train_next_token`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            lr: 1e-2,
            warmup: 20,
            seed: 0,
        }
    }
}

/// Trains the model to predict each sequence's next token with cross entropy
/// over all positions. Batches are drawn from the corpus with a seeded
/// generator, so a given `(model, corpus, config)` always produces the same
/// parameters. Returns the mean batch loss per step.
pub fn train_next_token(
    model: &mut ToyTransformer,
    corpus: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("training corpus is empty".into()));
    }
    if let Some(short) = corpus.iter().find(|s| s.len() < 2) {
        return Err(Error::EmptyDataset(format!(
            "training sequences need at least 2 tokens, found one of length {}",
            short.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::EmptyDataset("batch size must be positive".into()));
    }

    let n_params: usize = model
        .param_slices_mut(ParamScope::AllParams)
        .iter()
        .map(|s| s.len())
        .sum();
    let mut opt = AdamW::new(n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut acc = Gradients::zeros_like(model);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = &corpus[rng.gen_range(0..corpus.len())];
            let inputs = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let (out, cache) = model.forward_cached(inputs)?;
            let (loss, dlogits) = cross_entropy_and_grad(&out.logits, targets)?;
            let grads = backward(model, inputs, &out, &cache, Some(&dlogits), &[])?;
            acc.add_scaled(&grads, 1.0 / cfg.batch_size as f64);
            batch_loss += loss / cfg.batch_size as f64;
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup);
        let grad_slices = acc.slices(ParamScope::AllParams);
        opt.step(lr, model.param_slices_mut(ParamScope::AllParams), grad_slices)?;
        losses.push(batch_loss);
    }
    Ok(losses)
}
