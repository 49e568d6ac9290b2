//! Tokenizer training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nested::{hybrid_step_loss, lambda_gan, Branch, DropoutSchedule};
use crate::optim::{Adam, AdamConfig, ParamStore};
use crate::quantizer::{quantize, Axis, Codebook, Window};
use crate::tensor::Tensor;
use crate::tokenizer::{
    patchify, Autoencoder, AutoencoderConfig, AuxLosses, ImageBatch, LatentGrid, LossComponents,
    LossWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    pub autoencoder: AutoencoderConfig,
    pub axis: Axis,
    pub codebook_size: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub schedule: DropoutSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trained autoencoder plus its codebook.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    pub autoencoder: Autoencoder,
    pub codebook: Codebook,
}

impl TokenizerModel {
    pub fn axis(&self) -> Axis {
        self.codebook.axis()
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<LatentGrid> {
        self.autoencoder.encode(images)
    }

    /// Encode, quantize and decode. Returns `(reconstruction, indices)`;
    /// the reconstruction is unclamped.
    pub fn reconstruct(&self, images: &ImageBatch) -> Result<(ImageBatch, Vec<usize>)> {
        let z = self.encode(images)?;
        let q = quantize(&z, &self.codebook)?;
        Ok((self.autoencoder.decode(&q.zq)?, q.indices))
    }

    /// Quantized latent for `indices` (image-major, `tokens_per_image` each).
    pub fn dequantize(&self, indices: &[usize], batch: usize) -> Result<LatentGrid> {
        let (h, w) = self.autoencoder.config().grid();
        let c = self.autoencoder.config().latent_channels;
        let dim = self.codebook.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= self.codebook.size() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.codebook.size(),
                });
            }
            data.extend_from_slice(self.codebook.codeword(i));
        }
        LatentGrid::from_tokens(
            self.axis(),
            Tensor::new(vec![indices.len(), dim], data)?,
            batch,
            h,
            w,
            c,
        )
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub branch: Branch,
    pub c_keep: usize,
    pub lambda_gan: f64,
    pub loss: LossComponents,
    pub lifetime_utilization: f64,
    pub batch_distinct: usize,
    pub dead_codes: usize,
}

impl StepLog {
    pub const CSV_HEADER: &'static str =
        "step,branch,c_keep,lambda_gan,total,recon,codebook,commitment,utilization,distinct,dead";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.branch.label(),
            self.c_keep,
            self.lambda_gan,
            self.loss.total,
            self.loss.recon,
            self.loss.codebook,
            self.loss.commitment,
            self.lifetime_utilization,
            self.batch_distinct,
            self.dead_codes
        )
    }
}

/// Deterministic epoch-shuffled minibatch indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::InvalidArgument("empty dataset or batch".into()));
        }
        let mut s = BatchSampler {
            order: (0..len).collect(),
            cursor: 0,
            batch: batch.min(len),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Distinct RNG streams derived from the run seed.
pub(crate) fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Trains a tokenizer on `train` and calls `on_step` after every step.
pub fn train_tokenizer(
    cfg: &TokenizerTrainConfig,
    train: &ImageBatch,
    aux: &AuxLosses<'_>,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TokenizerModel> {
    cfg.autoencoder.validate()?;
    cfg.schedule.validate()?;
    if cfg.schedule.channels != cfg.autoencoder.latent_channels {
        return Err(Error::Config(
            "schedule channels differ from latent channels".into(),
        ));
    }
    if cfg.codebook_size == 0 {
        return Err(Error::EmptyCodebook);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2));
    let mut sampler = BatchSampler::new(train.batch(), cfg.batch_size, stream_seed(cfg.seed, 1))?;

    let mut ae = Autoencoder::new(cfg.autoencoder, &mut init_rng)?;
    // The codebook is seeded from the first training batch, which is also the
    // batch of step 0.
    let first = sampler.next_batch();
    let z0 = ae.encode(&train.select(&first)?)?;
    let mut codebook = Codebook::init_from_tokens(
        cfg.axis,
        cfg.codebook_size,
        &z0.tokens(cfg.axis),
        &mut init_rng,
    )?;

    let mut cb_store = ParamStore::new();
    cb_store.push("codebook", codebook.entries().clone());
    let mut adam = Adam::new(cfg.adam, ae.params());
    let mut cb_adam = Adam::new(cfg.adam, &cb_store);

    let mut pending = Some(first);
    for step in 0..cfg.steps {
        let idx = pending.take().unwrap_or_else(|| sampler.next_batch());
        let batch = train.select(&idx)?;
        let patches = patchify(&batch, cfg.autoencoder.patch)?;

        let mut tape = Tape::new();
        let vars = ae.params().bind(&mut tape);
        let cb_vars = cb_store.bind(&mut tape);
        let (branch, fl) = hybrid_step_loss(
            &mut tape,
            &ae,
            &vars,
            cb_vars[0],
            cfg.axis,
            &patches,
            idx.len(),
            &cfg.schedule,
            &cfg.weights,
            aux,
            &mut drop_rng,
        )?;
        tape.backward(fl.total)?;
        adam.step(ae.params_mut(), &tape, &vars);
        cb_adam.step(&mut cb_store, &tape, &cb_vars);
        codebook.set_entries(cb_store.get(0).clone())?;
        codebook.record(&fl.indices);

        let usage = codebook.usage_stats(Window::Lifetime)?;
        let c = cfg.autoencoder.latent_channels;
        let c_keep = branch.c_keep(c);
        on_step(&StepLog {
            step,
            branch,
            c_keep,
            lambda_gan: match branch {
                Branch::Full => cfg.weights.lambda_gan,
                Branch::Truncated(k) => lambda_gan(k, &cfg.schedule),
            },
            loss: fl.components,
            lifetime_utilization: usage.utilization,
            batch_distinct: usage.per_batch_distinct,
            dead_codes: usage.dead_code_count,
        })?;
    }
    Ok(TokenizerModel {
        autoencoder: ae,
        codebook,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, 1).unwrap();
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(7, 0), stream_seed(7, 1));
        assert_ne!(stream_seed(7, 0), stream_seed(8, 0));
    }
}
