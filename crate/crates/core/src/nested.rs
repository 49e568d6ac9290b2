//! Nested channel dropout: random prefix truncation of the latent channels,
//! the sigmoid adversarial-weight schedule, and the per-step hybrid objective.
//!
//! With probability `alpha` a step keeps only channels `1..=c_keep`, where
//! `c_keep ~ U{1..c}`, and optimizes the truncated objective; otherwise it
//! runs the ordinary full-channel objective. Averaged over steps this is the
//! Monte Carlo estimate of `alpha E[L_nested] + (1 - alpha) L_total`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::quantizer::Axis;
use crate::tensor::Tensor;
use crate::tokenizer::{
    forward_loss, Autoencoder, AuxLosses, ChannelSelection, ForwardLoss, LatentGrid, LossWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    /// Probability of a truncated step.
    pub alpha: f64,
    /// Sigmoid transition smoothness.
    pub eta: f64,
    /// Base adversarial weight.
    pub lambda0: f64,
    /// Total latent channels.
    pub channels: usize,
}

impl DropoutSchedule {
    pub fn new(alpha: f64, eta: f64, lambda0: f64, channels: usize) -> Result<Self> {
        let s = DropoutSchedule {
            alpha,
            eta,
            lambda0,
            channels,
        };
        s.validate()?;
        Ok(s)
    }

    /// Defaults `eta = 0.05`, `lambda0 = 1`.
    pub fn with_alpha(alpha: f64, channels: usize) -> Result<Self> {
        DropoutSchedule::new(alpha, 0.05, 1.0, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta {} must be positive", self.eta)));
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(Error::Config(format!(
                "lambda0 {} must be >= 0",
                self.lambda0
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("schedule needs at least one channel".into()));
        }
        Ok(())
    }
}

/// Outcome of one dropout draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Full,
    Truncated(usize),
}

impl Branch {
    pub fn c_keep(self, channels: usize) -> usize {
        match self {
            Branch::Full => channels,
            Branch::Truncated(k) => k,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Branch::Full => "full",
            Branch::Truncated(_) => "truncated",
        }
    }
}

/// Draws the branch for one step. Consumes no randomness when `alpha == 0`.
pub fn sample_c_keep<R: Rng + ?Sized>(schedule: &DropoutSchedule, rng: &mut R) -> Branch {
    if schedule.alpha <= 0.0 {
        return Branch::Full;
    }
    if rng.gen::<f64>() < schedule.alpha {
        Branch::Truncated(rng.gen_range(1..=schedule.channels))
    } else {
        Branch::Full
    }
}

/// Prefix indicator over `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationMask {
    c_keep: usize,
    mask: Vec<f64>,
}

impl TruncationMask {
    pub fn new(channels: usize, c_keep: usize) -> Result<Self> {
        if c_keep == 0 || c_keep > channels {
            return Err(Error::InvalidArgument(format!(
                "c_keep {c_keep} outside 1..={channels}"
            )));
        }
        let mask = (0..channels)
            .map(|k| if k < c_keep { 1.0 } else { 0.0 })
            .collect();
        Ok(TruncationMask { c_keep, mask })
    }

    pub fn c_keep(&self) -> usize {
        self.c_keep
    }

    pub fn channels(&self) -> usize {
        self.mask.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mask
    }
}

/// Zeroes channels past `mask.c_keep()`.
pub fn apply_mask(z: &LatentGrid, mask: &TruncationMask) -> Result<LatentGrid> {
    if z.c() != mask.channels() {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "mask over {} channels, latent has {}",
                mask.channels(),
                z.c()
            ),
        ));
    }
    let mut out = z.clone();
    let c = z.c();
    for (i, v) in out.values_mut().data_mut().iter_mut().enumerate() {
        if i % c >= mask.c_keep() {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// [`apply_mask`] recorded on a tape; masked channels receive zero gradient.
pub fn apply_mask_on_tape(tape: &mut Tape, z: Var, mask: &TruncationMask) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.last() != Some(&mask.channels()) {
        return Err(Error::shape(
            "apply_mask",
            format!("{shape:?} vs {} channels", mask.channels()),
        ));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut data = Vec::with_capacity(rows * mask.channels());
    for _ in 0..rows {
        data.extend_from_slice(mask.as_slice());
    }
    let m = tape.constant(Tensor::new(shape, data)?);
    tape.mul(z, m)
}

/// `lambda0 / (1 + exp(-eta (c_keep - c/2)))`.
pub fn lambda_gan(c_keep: usize, schedule: &DropoutSchedule) -> f64 {
    let mid = schedule.channels as f64 / 2.0;
    schedule.lambda0 / (1.0 + (-schedule.eta * (c_keep as f64 - mid)).exp())
}

/// Objective for a fixed `c_keep` on the channel axis: reconstruction from
/// the truncated latent, quantization terms over the active channels only,
/// and the adversarial term weighted by [`lambda_gan`].
#[allow(clippy::too_many_arguments)]
pub fn nested_loss(
    tape: &mut Tape,
    ae: &Autoencoder,
    vars: &[Var],
    codebook_var: Var,
    axis: Axis,
    patches: &Tensor,
    batch: usize,
    c_keep: usize,
    schedule: &DropoutSchedule,
    weights: &LossWeights,
    aux: &AuxLosses<'_>,
) -> Result<ForwardLoss> {
    if axis != Axis::Channel {
        return Err(Error::InvalidArgument(
            "nested dropout loss is defined for the channel axis; patch VQ uses the truncate-then-quantize compatibility mode".into(),
        ));
    }
    let lambda = lambda_gan(c_keep, schedule);
    forward_loss(
        tape,
        ae,
        vars,
        codebook_var,
        axis,
        patches,
        batch,
        ChannelSelection::Nested(c_keep),
        weights,
        lambda,
        aux,
    )
}

/// One step of the hybrid objective: draws a branch from `rng`, then records
/// either the nested loss or the full loss. On the patch axis a truncated
/// branch uses the truncate-then-quantize compatibility mode.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_step_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    ae: &Autoencoder,
    vars: &[Var],
    codebook_var: Var,
    axis: Axis,
    patches: &Tensor,
    batch: usize,
    schedule: &DropoutSchedule,
    weights: &LossWeights,
    aux: &AuxLosses<'_>,
    rng: &mut R,
) -> Result<(Branch, ForwardLoss)> {
    let branch = sample_c_keep(schedule, rng);
    let loss = match (branch, axis) {
        (Branch::Full, _) => forward_loss(
            tape,
            ae,
            vars,
            codebook_var,
            axis,
            patches,
            batch,
            ChannelSelection::Full,
            weights,
            weights.lambda_gan,
            aux,
        )?,
        (Branch::Truncated(k), Axis::Channel) => nested_loss(
            tape,
            ae,
            vars,
            codebook_var,
            axis,
            patches,
            batch,
            k,
            schedule,
            weights,
            aux,
        )?,
        (Branch::Truncated(k), Axis::Patch) => forward_loss(
            tape,
            ae,
            vars,
            codebook_var,
            axis,
            patches,
            batch,
            ChannelSelection::PatchTruncate(k),
            weights,
            lambda_gan(k, schedule),
            aux,
        )?,
    };
    Ok((branch, loss))
}
