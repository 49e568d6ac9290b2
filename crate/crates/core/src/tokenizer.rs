//! Image batches, latent grids and the patchify + residual-MLP autoencoder.
//!
//! The encoder cuts an `H x W` image into non-overlapping `f x f` patches,
//! maps each flattened patch through a linear layer, a stack of residual MLP
//! blocks, a layer norm and a final linear layer to `c` latent channels. The
//! decoder mirrors it. Patch vectors are flattened in `(row, col, channel)`
//! order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ResidualMlp};
use crate::optim::ParamStore;
use crate::quantizer::{quantize_on_tape, Axis};
use crate::tensor::Tensor;

/// Pixels `[B, H, W, ch]` in `[0, 1]` (decoder output may leave the range
/// until [`ImageBatch::clamped`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Tensor,
}

impl ImageBatch {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || !(s[3] == 1 || s[3] == 3) {
            return Err(Error::shape(
                "image batch",
                format!("{s:?}, want [B, H, W, 1|3]"),
            ));
        }
        Ok(ImageBatch { pixels })
    }

    /// Like [`ImageBatch::new`] but also rejects pixels outside `[0, 1]`.
    pub fn from_unit_pixels(pixels: Tensor) -> Result<Self> {
        if pixels.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        ImageBatch::new(pixels)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn batch(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn image_len(&self) -> usize {
        self.height() * self.width() * self.channels()
    }

    /// Pixels of image `b`, row-major `[H, W, ch]`.
    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels.data()[b * n..(b + 1) * n]
    }

    /// Images `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<ImageBatch> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.batch(),
                });
            }
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.pixels.shape().to_vec();
        shape[0] = indices.len();
        ImageBatch::new(Tensor::new(shape, data)?)
    }

    pub fn clamped(&self) -> ImageBatch {
        let mut p = self.pixels.clone();
        p.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        ImageBatch { pixels: p }
    }
}

/// Encoder output `[B, h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    values: Tensor,
}

impl LatentGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 || values.numel() == 0 {
            return Err(Error::shape("latent grid", format!("{:?}", values.shape())));
        }
        Ok(LatentGrid { values })
    }

    pub fn zeros(batch: usize, h: usize, w: usize, c: usize) -> Self {
        LatentGrid {
            values: Tensor::zeros(&[batch, h, w, c]),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[3]
    }

    /// `[B * h * w, c]`: one row per spatial position, raster order.
    pub fn patch_view(&self) -> Tensor {
        let (b, hw, c) = (self.batch(), self.h() * self.w(), self.c());
        Tensor::new(vec![b * hw, c], self.values.data().to_vec()).expect("patch view")
    }

    /// `[B * c, h * w]`: one row per channel map, flattened row-major.
    pub fn channel_view(&self) -> Tensor {
        let (b, hw, c) = (self.batch(), self.h() * self.w(), self.c());
        let src = self.values.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            for p in 0..hw {
                for k in 0..c {
                    out[(i * c + k) * hw + p] = src[(i * hw + p) * c + k];
                }
            }
        }
        Tensor::new(vec![b * c, hw], out).expect("channel view")
    }

    pub fn tokens(&self, axis: Axis) -> Tensor {
        match axis {
            Axis::Patch => self.patch_view(),
            Axis::Channel => self.channel_view(),
        }
    }

    /// Inverse of [`LatentGrid::tokens`].
    pub fn from_tokens(
        axis: Axis,
        tokens: Tensor,
        batch: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Self> {
        let hw = h * w;
        let want = match axis {
            Axis::Patch => [batch * hw, c],
            Axis::Channel => [batch * c, hw],
        };
        if tokens.shape() != want {
            return Err(Error::shape(
                "from_tokens",
                format!("{:?} vs {want:?}", tokens.shape()),
            ));
        }
        let values = match axis {
            Axis::Patch => tokens.reshaped(&[batch, h, w, c])?,
            Axis::Channel => {
                let src = tokens.data();
                let mut out = vec![0.0; src.len()];
                for i in 0..batch {
                    for k in 0..c {
                        for p in 0..hw {
                            out[(i * hw + p) * c + k] = src[(i * c + k) * hw + p];
                        }
                    }
                }
                Tensor::new(vec![batch, h, w, c], out)?
            }
        };
        LatentGrid::new(values)
    }

    /// Channel `k` of image `b`, flattened row-major.
    pub fn channel_map(&self, b: usize, k: usize) -> Vec<f64> {
        let (hw, c) = (self.h() * self.w(), self.c());
        let base = b * hw * c;
        (0..hw)
            .map(|p| self.values.data()[base + p * c + k])
            .collect()
    }

    /// Single-image grid.
    pub fn image(&self, b: usize) -> LatentGrid {
        let n = self.h() * self.w() * self.c();
        let data = self.values.data()[b * n..(b + 1) * n].to_vec();
        LatentGrid {
            values: Tensor::new(vec![1, self.h(), self.w(), self.c()], data).expect("image slice"),
        }
    }
}

/// `[B, H, W, ch]` -> `[B * h * w, f * f * ch]`.
pub fn patchify(images: &ImageBatch, f: usize) -> Result<Tensor> {
    let (b, hh, ww, ch) = (
        images.batch(),
        images.height(),
        images.width(),
        images.channels(),
    );
    if f == 0 || hh % f != 0 || ww % f != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{hh}x{ww} not divisible by {f}"),
        ));
    }
    let (h, w) = (hh / f, ww / f);
    let plen = f * f * ch;
    let src = images.pixels().data();
    let mut out = Vec::with_capacity(b * h * w * plen);
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for di in 0..f {
                    let row = i * f + di;
                    let start = ((n * hh + row) * ww + j * f) * ch;
                    out.extend_from_slice(&src[start..start + f * ch]);
                }
            }
        }
    }
    Tensor::new(vec![b * h * w, plen], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    f: usize,
) -> Result<ImageBatch> {
    let (h, w) = (height / f, width / f);
    let plen = f * f * channels;
    if patches.shape() != [batch * h * w, plen] {
        return Err(Error::shape("unpatchify", format!("{:?}", patches.shape())));
    }
    let src = patches.data();
    let mut out = vec![0.0; batch * height * width * channels];
    let mut p = 0;
    for n in 0..batch {
        for i in 0..h {
            for j in 0..w {
                for di in 0..f {
                    let row = i * f + di;
                    let start = ((n * height + row) * width + j * f) * channels;
                    out[start..start + f * channels].copy_from_slice(&src[p..p + f * channels]);
                    p += f * channels;
                }
            }
        }
    }
    ImageBatch::new(Tensor::new(vec![batch, height, width, channels], out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Downsample factor `f`.
    pub patch: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Residual MLP blocks in each of encoder and decoder.
    pub blocks: usize,
}

impl AutoencoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.height.is_multiple_of(self.patch)
            && self.width.is_multiple_of(self.patch)
            && self.height >= self.patch
            && self.width >= self.patch
            && (self.in_channels == 1 || self.in_channels == 3)
            && self.latent_channels > 0
            && self.hidden > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid autoencoder geometry {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore,
    enc_in: Linear,
    enc_blocks: Vec<ResidualMlp>,
    enc_norm: LayerNorm,
    enc_out: Linear,
    dec_in: Linear,
    dec_blocks: Vec<ResidualMlp>,
    dec_norm: LayerNorm,
    dec_out: Linear,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let (pl, hd, c) = (config.patch_len(), config.hidden, config.latent_channels);
        let enc_in = Linear::new(&mut p, "enc.in", pl, hd, rng);
        let enc_blocks = (0..config.blocks)
            .map(|i| ResidualMlp::new(&mut p, &format!("enc.block{i}"), hd, 2 * hd, rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut p, "enc.norm", hd);
        let enc_out = Linear::new(&mut p, "enc.out", hd, c, rng);
        let dec_in = Linear::new(&mut p, "dec.in", c, hd, rng);
        let dec_blocks = (0..config.blocks)
            .map(|i| ResidualMlp::new(&mut p, &format!("dec.block{i}"), hd, 2 * hd, rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut p, "dec.norm", hd);
        let dec_out = Linear::new(&mut p, "dec.out", hd, pl, rng);
        p.get_mut(dec_out.bias).data_mut().fill(0.0);
        Ok(Autoencoder {
            config,
            params: p,
            enc_in,
            enc_blocks,
            enc_norm,
            enc_out,
            dec_in,
            dec_blocks,
            dec_norm,
            dec_out,
        })
    }

    /// Rebuilds the layer layout for `config` and swaps in `params`.
    pub fn from_params(config: AutoencoderConfig, params: ParamStore) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut ae = Autoencoder::new(config, &mut rng)?;
        if params.shapes() != ae.params.shapes() || params.names() != ae.params.names() {
            return Err(Error::shape(
                "autoencoder params",
                "layout does not match config",
            ));
        }
        ae.params = params;
        Ok(ae)
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the final encoder layer, making every latent zero.
    pub fn zero_encoder_output(&mut self) {
        self.enc_out.zero(&mut self.params);
    }

    /// Encoder on a tape: patches `[B*h*w, P]` -> latent `[B, h, w, c]`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        patches: Var,
        batch: usize,
    ) -> Result<Var> {
        let (h, w) = self.config.grid();
        if tape.shape(patches) != [batch * h * w, self.config.patch_len()] {
            return Err(Error::shape(
                "encode",
                format!("patches {:?}", tape.shape(patches)),
            ));
        }
        let mut x = self.enc_in.forward(tape, vars, patches)?;
        for block in &self.enc_blocks {
            x = block.forward(tape, vars, x)?;
        }
        let x = self.enc_norm.forward(tape, vars, x)?;
        let z = self.enc_out.forward(tape, vars, x)?;
        tape.reshape(z, &[batch, h, w, self.config.latent_channels])
    }

    /// Decoder on a tape: latent `[B, h, w, c]` -> patches `[B*h*w, P]`.
    pub fn decode_on_tape(&self, tape: &mut Tape, vars: &[Var], zq: Var) -> Result<Var> {
        let s = tape.shape(zq).to_vec();
        let (h, w) = self.config.grid();
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != self.config.latent_channels {
            return Err(Error::shape("decode", format!("latent {s:?}")));
        }
        let rows = tape.reshape(zq, &[s[0] * h * w, s[3]])?;
        let mut x = self.dec_in.forward(tape, vars, rows)?;
        for block in &self.dec_blocks {
            x = block.forward(tape, vars, x)?;
        }
        let x = self.dec_norm.forward(tape, vars, x)?;
        self.dec_out.forward(tape, vars, x)
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        let c = &self.config;
        if images.height() != c.height
            || images.width() != c.width
            || images.channels() != c.in_channels
        {
            return Err(Error::shape(
                "encode",
                format!(
                    "images {:?} vs model {}x{}x{}",
                    images.pixels().shape(),
                    c.height,
                    c.width,
                    c.in_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<LatentGrid> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let patches = tape.constant(patchify(images, self.config.patch)?);
        let z = self.encode_on_tape(&mut tape, &vars, patches, images.batch())?;
        LatentGrid::new(tape.value(z).clone())
    }

    /// Unclamped reconstruction; clamp with [`ImageBatch::clamped`] for
    /// evaluation.
    pub fn decode(&self, zq: &LatentGrid) -> Result<ImageBatch> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let z = tape.constant(zq.values().clone());
        let patches = self.decode_on_tape(&mut tape, &vars, z)?;
        let c = &self.config;
        unpatchify(
            tape.value(patches),
            zq.batch(),
            c.height,
            c.width,
            c.in_channels,
            c.patch,
        )
    }
}

/// An auxiliary loss term (perceptual or adversarial) evaluated on the
/// reconstruction. Patches are `[B*h*w, P]`.
pub trait AuxLoss: Send + Sync {
    fn evaluate(&self, tape: &mut Tape, target: Var, reconstruction: Var) -> Result<Var>;
}

/// Contributes a constant zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroLoss;

impl AuxLoss for ZeroLoss {
    fn evaluate(&self, tape: &mut Tape, _target: Var, _reconstruction: Var) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Commitment weight.
    pub beta: f64,
    pub lambda_lpips: f64,
    /// Adversarial weight for the full-channel configuration.
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.25,
            lambda_lpips: 1.0,
            lambda_gan: 1.0,
        }
    }
}

/// Plain values of every loss term, unweighted, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub lpips: f64,
    pub gan: f64,
    pub beta: f64,
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    pub total: f64,
}

impl LossComponents {
    /// Recomputes the weighted sum from the components.
    pub fn recompute_total(&self) -> f64 {
        self.recon
            + self.codebook
            + self.beta * self.commitment
            + self.lambda_lpips * self.lpips
            + self.lambda_gan * self.gan
    }
}

/// `mse(x, x_hat) + ||sg[z] - e||^2 + beta ||z - sg[e]||^2 + l_lpips lpips + l_gan gan`
/// on plain values. Squared norms are means over elements.
pub fn tokenizer_loss(
    x: &ImageBatch,
    x_hat: &ImageBatch,
    z: &LatentGrid,
    zq: &LatentGrid,
    weights: &LossWeights,
) -> Result<LossComponents> {
    if x.pixels().shape() != x_hat.pixels().shape() {
        return Err(Error::shape("tokenizer_loss", "image shapes differ"));
    }
    if z.values().shape() != zq.values().shape() {
        return Err(Error::shape("tokenizer_loss", "latent shapes differ"));
    }
    if weights.beta <= 0.0 {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    let mse = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / a.numel() as f64
    };
    let recon = mse(x.pixels(), x_hat.pixels());
    let quant = mse(z.values(), zq.values());
    let mut c = LossComponents {
        recon,
        codebook: quant,
        commitment: quant,
        beta: weights.beta,
        lambda_lpips: weights.lambda_lpips,
        lambda_gan: weights.lambda_gan,
        ..Default::default()
    };
    c.total = c.recompute_total();
    Ok(c)
}

/// Which channels take part in a training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSelection {
    Full,
    /// Channel axis: only channel maps `0..c_keep` are quantized; the rest
    /// of the latent is zero.
    Nested(usize),
    /// Patch axis compatibility mode: channels `c_keep..` of the latent are
    /// zeroed, then every (zero-padded) patch vector is quantized.
    PatchTruncate(usize),
}

/// Everything recorded by [`forward_loss`].
#[derive(Debug, Clone)]
pub struct ForwardLoss {
    pub total: Var,
    pub z: Var,
    pub zq: Var,
    pub reconstruction: Var,
    pub components: LossComponents,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Hooks for the auxiliary terms.
pub struct AuxLosses<'a> {
    pub lpips: &'a dyn AuxLoss,
    pub gan: &'a dyn AuxLoss,
}

impl Default for AuxLosses<'static> {
    fn default() -> Self {
        AuxLosses {
            lpips: &ZeroLoss,
            gan: &ZeroLoss,
        }
    }
}

/// Zeroes channels `c_keep..` of a `[B, h, w, c]` latent on the tape.
pub fn mask_channels_on_tape(tape: &mut Tape, z: Var, c_keep: usize) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let c = s[3];
    if c_keep == 0 || c_keep > c {
        return Err(Error::InvalidArgument(format!(
            "c_keep {c_keep} outside 1..={c}"
        )));
    }
    if c_keep == c {
        return Ok(z);
    }
    let rows = s[0] * s[1] * s[2];
    let mut mask = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        mask.extend((0..c).map(|k| if k < c_keep { 1.0 } else { 0.0 }));
    }
    let m = tape.constant(Tensor::new(s, mask)?);
    tape.mul(z, m)
}

/// Records the full tokenizer objective for one batch of patches.
///
/// `vars` are the autoencoder parameters bound on `tape`; `codebook_var` is
/// the bound codebook. `lambda_gan` overrides `weights.lambda_gan`.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss(
    tape: &mut Tape,
    ae: &Autoencoder,
    vars: &[Var],
    codebook_var: Var,
    axis: Axis,
    patches: &Tensor,
    batch: usize,
    selection: ChannelSelection,
    weights: &LossWeights,
    lambda_gan: f64,
    aux: &AuxLosses<'_>,
) -> Result<ForwardLoss> {
    if weights.beta <= 0.0 {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    let x = tape.constant(patches.clone());
    let z = ae.encode_on_tape(tape, vars, x, batch)?;
    let q = match (axis, selection) {
        (_, ChannelSelection::Full) => quantize_on_tape(tape, z, codebook_var, axis, None)?,
        (Axis::Channel, ChannelSelection::Nested(k)) => {
            let masked = mask_channels_on_tape(tape, z, k)?;
            quantize_on_tape(tape, masked, codebook_var, axis, Some(k))?
        }
        (Axis::Patch, ChannelSelection::PatchTruncate(k)) => {
            let masked = mask_channels_on_tape(tape, z, k)?;
            quantize_on_tape(tape, masked, codebook_var, axis, None)?
        }
        (Axis::Patch, ChannelSelection::Nested(_)) => {
            return Err(Error::InvalidArgument(
                "nested channel dropout needs the channel axis; use the patch truncation mode for patch VQ".into(),
            ))
        }
        (Axis::Channel, ChannelSelection::PatchTruncate(_)) => {
            return Err(Error::InvalidArgument("patch truncation mode needs the patch axis".into()))
        }
    };
    let x_hat = ae.decode_on_tape(tape, vars, q.zq)?;
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff)?;
    let recon = tape.mean(sq)?;
    let lpips = aux.lpips.evaluate(tape, x, x_hat)?;
    let gan = aux.gan.evaluate(tape, x, x_hat)?;

    let commit = tape.mul_scalar(q.commitment_loss, weights.beta)?;
    let lp = tape.mul_scalar(lpips, weights.lambda_lpips)?;
    let gn = tape.mul_scalar(gan, lambda_gan)?;
    let t1 = tape.add(recon, q.codebook_loss)?;
    let t2 = tape.add(t1, commit)?;
    let t3 = tape.add(t2, lp)?;
    let total = tape.add(t3, gn)?;

    let components = LossComponents {
        recon: tape.value(recon).item(),
        codebook: tape.value(q.codebook_loss).item(),
        commitment: tape.value(q.commitment_loss).item(),
        lpips: tape.value(lpips).item(),
        gan: tape.value(gan).item(),
        beta: weights.beta,
        lambda_lpips: weights.lambda_lpips,
        lambda_gan,
        total: tape.value(total).item(),
    };
    Ok(ForwardLoss {
        total,
        z,
        zq: q.zq,
        reconstruction: x_hat,
        components,
        indices: q.indices,
        distances: q.distances,
    })
}
