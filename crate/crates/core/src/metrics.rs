//! Reconstruction metrics, progressive-channel sweeps, channel ablation and
//! the patch-vs-channel comparison harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::car::progressive_decode;
use crate::error::{Error, Result};
use crate::parallel::{map_indices, Execution};
use crate::quantizer::{quantize, separability_stats, Axis, SeparabilityStats, Window};
use crate::tokenizer::{AuxLosses, ImageBatch, LatentGrid};
use crate::train::{train_tokenizer, TokenizerModel, TokenizerTrainConfig};

/// Reported PSNR when the inputs are identical.
pub const PSNR_CAP: f64 = 99.0;

fn same_len(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape {
            op,
            detail: format!("{} vs {} values", x.len(), y.len()),
        });
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len("mse", x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10 log10(1 / MSE)` for unit-range signals; exact matches give
/// [`PSNR_CAP`].
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        PSNR_CAP
    } else {
        -10.0 * m.log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

/// SSIM of one window given its population statistics.
pub fn ssim_window(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, p: &SsimParams) -> f64 {
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM of one `[H, W, ch]` image pair over non-overlapping windows,
/// averaged over channels.
pub fn ssim_image(
    x: &[f64],
    y: &[f64],
    height: usize,
    width: usize,
    ch: usize,
    p: &SsimParams,
) -> Result<f64> {
    same_len("ssim", x, y)?;
    if x.len() != height * width * ch {
        return Err(Error::shape(
            "ssim",
            format!("{} values for {height}x{width}x{ch}", x.len()),
        ));
    }
    if p.window == 0 || p.window > height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "ssim window {} too large for {height}x{width}",
            p.window
        )));
    }
    let win = p.window;
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..ch {
        for wy in 0..height / win {
            for wx in 0..width / win {
                let (mut sx, mut sy) = (0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let o = ((wy * win + i) * width + wx * win + j) * ch + k;
                        sx += x[o];
                        sy += y[o];
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let o = ((wy * win + i) * width + wx * win + j) * ch + k;
                        let (dx, dy) = (x[o] - mx, y[o] - my);
                        vx += dx * dx;
                        vy += dy * dy;
                        cxy += dx * dy;
                    }
                }
                total += ssim_window(mx, my, vx / n, vy / n, cxy / n, p);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean over images of per-image SSIM.
pub fn ssim(x: &ImageBatch, y: &ImageBatch, p: &SsimParams) -> Result<f64> {
    check_batches(x, y)?;
    let mut acc = 0.0;
    for b in 0..x.batch() {
        acc += ssim_image(
            x.image(b),
            y.image(b),
            x.height(),
            x.width(),
            x.channels(),
            p,
        )?;
    }
    Ok(acc / x.batch() as f64)
}

fn check_batches(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.pixels().shape() != y.pixels().shape() {
        return Err(Error::shape(
            "metrics",
            format!("{:?} vs {:?}", x.pixels().shape(), y.pixels().shape()),
        ));
    }
    if x.batch() == 0 {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    Ok(())
}

/// Per-image-averaged reconstruction quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores `reconstruction` (clamped to `[0, 1]` first) against `target`.
pub fn quality(target: &ImageBatch, reconstruction: &ImageBatch) -> Result<Quality> {
    check_batches(target, reconstruction)?;
    let rec = reconstruction.clamped();
    let p = SsimParams::default();
    let (mut m, mut ps, mut ss) = (0.0, 0.0, 0.0);
    for b in 0..target.batch() {
        let (x, y) = (target.image(b), rec.image(b));
        m += mse(x, y)?;
        ps += psnr(x, y)?;
        ss += ssim_image(x, y, target.height(), target.width(), target.channels(), &p)?;
    }
    let n = target.batch() as f64;
    Ok(Quality {
        mse: m / n,
        psnr: ps / n,
        ssim: ss / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_channels: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub model_id: String,
    pub config_hash: String,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "n_channels,psnr,ssim,mse";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.n_channels, r.psnr, r.ssim, r.mse);
        }
        s
    }
}

/// Channel-wise indices of every image, `c` per image in channel order.
pub fn channel_tokens(model: &TokenizerModel, images: &ImageBatch) -> Result<Vec<Vec<usize>>> {
    if model.axis() != Axis::Channel {
        return Err(Error::InvalidArgument(
            "channel tokens need a channel-wise codebook".into(),
        ));
    }
    let q = quantize(&model.encode(images)?, &model.codebook)?;
    let c = q.tokens_per_image();
    Ok(q.indices.chunks(c).map(<[usize]>::to_vec).collect())
}

/// Reconstruction quality when only the first `n` channel tokens of each
/// validation image are kept.
pub fn progressive_sweep(
    model: &TokenizerModel,
    val: &ImageBatch,
    ns: &[usize],
) -> Result<Vec<SweepRow>> {
    let c = model.autoencoder.config().latent_channels;
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "sweep channel counts must be strictly increasing".into(),
        ));
    }
    if let Some(&bad) = ns.iter().find(|&&n| n == 0 || n > c) {
        return Err(Error::InvalidArgument(format!(
            "sweep count {bad} outside 1..={c}"
        )));
    }
    let tokens = channel_tokens(model, val)?;
    ns.iter()
        .map(|&n| {
            let prefixes: Vec<&[usize]> = tokens.iter().map(|t| &t[..n]).collect();
            let rec = progressive_decode(model, &prefixes)?;
            let q = quality(val, &rec)?;
            Ok(SweepRow {
                n_channels: n,
                psnr: q.psnr,
                ssim: q.ssim,
                mse: q.mse,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub baseline: ImageBatch,
    pub ablated: ImageBatch,
    /// `baseline - ablated`, unclamped.
    pub diff: ImageBatch,
    /// Sum of squared diff values per image.
    pub energy: Vec<f64>,
}

/// Zeroes latent channel `k` (1-based) after quantization and decodes.
pub fn channel_ablation(model: &TokenizerModel, images: &ImageBatch, k: usize) -> Result<Ablation> {
    let c = model.autoencoder.config().latent_channels;
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!(
            "ablation channel {k} outside 1..={c}"
        )));
    }
    let q = quantize(&model.encode(images)?, &model.codebook)?;
    ablate_latent(model, &q.zq, k)
}

/// [`channel_ablation`] on an already quantized latent.
pub fn ablate_latent(model: &TokenizerModel, zq: &LatentGrid, k: usize) -> Result<Ablation> {
    let c = zq.c();
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!(
            "ablation channel {k} outside 1..={c}"
        )));
    }
    let baseline = model.autoencoder.decode(zq)?;
    let mut cut = zq.clone();
    for (i, v) in cut.values_mut().data_mut().iter_mut().enumerate() {
        if i % c == k - 1 {
            *v = 0.0;
        }
    }
    let ablated = model.autoencoder.decode(&cut)?;
    let d: Vec<f64> = baseline
        .pixels()
        .data()
        .iter()
        .zip(ablated.pixels().data())
        .map(|(a, b)| a - b)
        .collect();
    let diff = ImageBatch::new(crate::tensor::Tensor::new(
        baseline.pixels().shape().to_vec(),
        d,
    )?)?;
    let energy = (0..diff.batch())
        .map(|b| diff.image(b).iter().map(|v| v * v).sum())
        .collect();
    Ok(Ablation {
        baseline,
        ablated,
        diff,
        energy,
    })
}

/// One (axis, N) cell of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub axis: Axis,
    pub codebook_size: usize,
    /// Distinct codes ever assigned during training over N.
    pub lifetime_utilization: f64,
    /// Distinct codes assigned during the last training epoch over N.
    pub last_epoch_utilization: f64,
    /// Distinct codes assigned on one pass over the validation set over N.
    pub validation_utilization: f64,
    /// `(step, lifetime utilization)` samples.
    pub series: Vec<(usize, f64)>,
    pub val: Quality,
    pub separability: Option<SeparabilityStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cells: Vec<ComparisonCell>,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
}

impl ComparisonReport {
    pub const CSV_HEADER: &'static str = "axis,codebook_size,lifetime_utilization,last_epoch_utilization,validation_utilization,val_mse,val_psnr,val_ssim,mean_intra,mean_inter,overlap_ratio";

    pub fn cell(&self, axis: Axis, n: usize) -> Option<&ComparisonCell> {
        self.cells
            .iter()
            .find(|c| c.axis == axis && c.codebook_size == n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cells {
            let sep = c
                .separability
                .map(|p| format!("{},{},{}", p.mean_intra, p.mean_inter, p.overlap_ratio))
                .unwrap_or_else(|| ",,".into());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.axis,
                c.codebook_size,
                c.lifetime_utilization,
                c.last_epoch_utilization,
                c.validation_utilization,
                c.val.mse,
                c.val.psnr,
                c.val.ssim,
                sep
            );
        }
        s
    }

    /// Utilization curves as `(x, y, series)` rows.
    pub fn plot_rows(&self) -> Vec<(f64, f64, String)> {
        self.cells
            .iter()
            .flat_map(|c| {
                let name = format!("{}-{}", c.axis, c.codebook_size);
                c.series
                    .iter()
                    .map(move |&(s, u)| (s as f64, u, name.clone()))
            })
            .collect()
    }
}

/// Options for [`run_comparison`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOptions {
    /// Record the utilization series every this many steps.
    pub series_every: usize,
    /// Validation images used for separability statistics.
    pub separability_images: usize,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        ComparisonOptions {
            series_every: 50,
            separability_images: 8,
        }
    }
}

/// Trains one tokenizer per (axis, N) cell with the same seed, split and step
/// budget, then evaluates each on `val`.
pub fn run_comparison(
    train: &ImageBatch,
    val: &ImageBatch,
    base: &TokenizerTrainConfig,
    axes: &[Axis],
    sizes: &[usize],
    opts: ComparisonOptions,
    exec: Execution,
) -> Result<ComparisonReport> {
    run_comparison_models(train, val, base, axes, sizes, opts, exec).map(|(r, _)| r)
}

/// [`run_comparison`] that also returns the trained model of every cell, in
/// report order.
pub fn run_comparison_models(
    train: &ImageBatch,
    val: &ImageBatch,
    base: &TokenizerTrainConfig,
    axes: &[Axis],
    sizes: &[usize],
    opts: ComparisonOptions,
    exec: Execution,
) -> Result<(ComparisonReport, Vec<TokenizerModel>)> {
    let grid: Vec<(Axis, usize)> = axes
        .iter()
        .flat_map(|&a| sizes.iter().map(move |&n| (a, n)))
        .collect();
    let results = map_indices(exec, grid.len(), |i| {
        let (axis, n) = grid[i];
        run_cell_model(
            train,
            val,
            &TokenizerTrainConfig {
                axis,
                codebook_size: n,
                ..*base
            },
            opts,
        )
    });
    let (cells, models): (Vec<_>, Vec<_>) = results
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let echo = (base, axes, sizes, opts);
    let report = ComparisonReport {
        cells,
        config_hash: crate::config::config_hash(&echo),
        seed: base.seed,
        steps: base.steps,
    };
    Ok((report, models))
}

/// Trains and evaluates a single comparison cell.
pub fn run_cell(
    train: &ImageBatch,
    val: &ImageBatch,
    cfg: &TokenizerTrainConfig,
    opts: ComparisonOptions,
) -> Result<ComparisonCell> {
    run_cell_model(train, val, cfg, opts).map(|(c, _)| c)
}

fn run_cell_model(
    train: &ImageBatch,
    val: &ImageBatch,
    cfg: &TokenizerTrainConfig,
    opts: ComparisonOptions,
) -> Result<(ComparisonCell, TokenizerModel)> {
    let mut series = Vec::new();
    let every = opts.series_every.max(1);
    let model = train_tokenizer(cfg, train, &AuxLosses::default(), |s| {
        if s.step % every == 0 || s.step + 1 == cfg.steps {
            series.push((s.step, s.lifetime_utilization));
        }
        Ok(())
    })?;
    let cell = cell_from_model(&model, cfg, train.batch(), val, series, opts)?;
    Ok((cell, model))
}

fn cell_from_model(
    model: &TokenizerModel,
    cfg: &TokenizerTrainConfig,
    train_len: usize,
    val: &ImageBatch,
    series: Vec<(usize, f64)>,
    opts: ComparisonOptions,
) -> Result<ComparisonCell> {
    let per_epoch = train_len.div_ceil(cfg.batch_size.max(1)).max(1);
    let lifetime = model.codebook.usage_stats(Window::Lifetime)?;
    let last = model.codebook.usage_stats(Window::LastBatches(per_epoch))?;
    let z = model.encode(val)?;
    let q = quantize(&z, &model.codebook)?;
    let mut seen = vec![false; model.codebook.size()];
    q.indices.iter().for_each(|&i| seen[i] = true);
    let validation_utilization = seen.iter().filter(|&&s| s).count() as f64 / seen.len() as f64;
    let rec = model.autoencoder.decode(&q.zq)?;
    let k = opts.separability_images.min(val.batch());
    let separability = if k >= 2 {
        let per_image: Vec<_> = (0..k).map(|b| z.image(b).tokens(cfg.axis)).collect();
        Some(separability_stats(&per_image)?)
    } else {
        None
    };
    Ok(ComparisonCell {
        axis: cfg.axis,
        codebook_size: cfg.codebook_size,
        lifetime_utilization: lifetime.utilization,
        last_epoch_utilization: last.utilization,
        validation_utilization,
        series,
        val: quality(val, &rec)?,
        separability,
    })
}

/// JSON sidecar written next to every CSV report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub seed: u64,
    /// Checkpoint name to content id.
    pub checkpoints: BTreeMap<String, String>,
    pub columns: Vec<String>,
}

/// Writes `csv` to `path` and a `<path>.json` sidecar.
pub fn write_report(path: &Path, csv: &str, sidecar: &Sidecar) -> Result<()> {
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes `x,y,series` rows for external plotting.
pub fn write_plot_data(path: &Path, rows: &[(f64, f64, String)]) -> Result<()> {
    let mut s = String::from("x,y,series\n");
    for (x, y, name) in rows {
        let _ = writeln!(s, "{x},{y},{name}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
