//! Codebooks and nearest-neighbour quantization along two partition axes.
//!
//! A [`LatentGrid`] `[B, h, w, c]` is viewed either as `h*w` patch vectors of
//! length `c` ([`Axis::Patch`]) or as `c` channel maps flattened row-major to
//! length `h*w` ([`Axis::Channel`]). Both axes share the lookup, the
//! straight-through estimator and the usage accounting. Token order is raster
//! order over `(i, j)` for patches and channel index `k` for channels.
//!
//! Squared distances are the plain `sum((a - b)^2)` so the brute-force oracle
//! in the tests and the production path agree bit for bit. Ties go to the
//! lowest index.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::parallel::{map_indices, Execution};
use crate::tensor::Tensor;
use crate::tokenizer::LatentGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Patch,
    Channel,
}

impl Axis {
    /// Codeword length for a grid of `h x w x c`.
    pub fn codeword_dim(self, h: usize, w: usize, c: usize) -> usize {
        match self {
            Axis::Patch => c,
            Axis::Channel => h * w,
        }
    }

    /// Tokens produced per image.
    pub fn tokens_per_image(self, h: usize, w: usize, c: usize) -> usize {
        match self {
            Axis::Patch => h * w,
            Axis::Channel => c,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Patch => "patch",
            Axis::Channel => "channel",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patch" | "vq" | "spatial" => Ok(Axis::Patch),
            "channel" | "cvq" => Ok(Axis::Channel),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

/// Measurement window for [`Codebook::usage_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Every assignment since the codebook was created.
    Lifetime,
    /// The most recent `n` recorded batches.
    LastBatches(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub utilization: f64,
    /// Distinct indices in the most recent batch.
    pub per_batch_distinct: usize,
    pub dead_code_count: usize,
}

/// A codebook of `N` codewords with assignment counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    axis: Axis,
    entries: Tensor,
    lifetime: Vec<u64>,
    /// Sorted distinct indices of each recorded batch.
    history: Vec<Vec<u32>>,
}

impl Codebook {
    pub fn new(axis: Axis, entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 {
            return Err(Error::shape("codebook", format!("{:?}", entries.shape())));
        }
        if entries.shape()[0] == 0 {
            return Err(Error::EmptyCodebook);
        }
        let n = entries.shape()[0];
        Ok(Codebook {
            axis,
            entries,
            lifetime: vec![0; n],
            history: Vec::new(),
        })
    }

    /// Draws `n` rows of `tokens[T, dim]`: without replacement when
    /// `T >= n`, with replacement otherwise.
    pub fn init_from_tokens<R: Rng + ?Sized>(
        axis: Axis,
        n: usize,
        tokens: &Tensor,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyCodebook);
        }
        let (t, dim) = (tokens.shape()[0], tokens.shape()[1]);
        if t == 0 {
            return Err(Error::InvalidArgument(
                "no tokens to initialize from".into(),
            ));
        }
        let rows: Vec<usize> = if t >= n {
            index::sample(rng, t, n).into_vec()
        } else {
            (0..n).map(|_| rng.gen_range(0..t)).collect()
        };
        let mut data = Vec::with_capacity(n * dim);
        for r in rows {
            data.extend_from_slice(tokens.row(r));
        }
        Codebook::new(axis, Tensor::new(vec![n, dim], data)?)
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Tensor {
        &mut self.entries
    }

    pub fn set_entries(&mut self, entries: Tensor) -> Result<()> {
        if entries.shape() != self.entries.shape() {
            return Err(Error::shape(
                "codebook",
                format!("{:?} vs {:?}", entries.shape(), self.entries.shape()),
            ));
        }
        self.entries = entries;
        Ok(())
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        self.entries.row(i)
    }

    pub fn lifetime_counts(&self) -> &[u64] {
        &self.lifetime
    }

    pub fn recorded_batches(&self) -> usize {
        self.history.len()
    }

    /// Checks that the codeword length fits a grid of the given geometry.
    pub fn check_geometry(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let want = self.axis.codeword_dim(h, w, c);
        if self.dim() != want {
            return Err(Error::shape(
                "codebook geometry",
                format!(
                    "{} axis on {h}x{w}x{c} needs dim {want}, codebook has {}",
                    self.axis,
                    self.dim()
                ),
            ));
        }
        Ok(())
    }

    /// Records one batch of assignments.
    pub fn record(&mut self, indices: &[usize]) {
        let mut distinct: Vec<u32> = Vec::with_capacity(indices.len());
        for &i in indices {
            self.lifetime[i] += 1;
            distinct.push(i as u32);
        }
        distinct.sort_unstable();
        distinct.dedup();
        self.history.push(distinct);
    }

    pub fn reset_usage(&mut self) {
        self.lifetime.iter_mut().for_each(|c| *c = 0);
        self.history.clear();
    }

    pub fn usage_stats(&self, window: Window) -> Result<UsageStats> {
        let last = self.history.last().ok_or(Error::EmptyWindow)?;
        let n = self.size();
        let used = match window {
            Window::Lifetime => self.lifetime.iter().filter(|&&c| c > 0).count(),
            Window::LastBatches(0) => return Err(Error::EmptyWindow),
            Window::LastBatches(k) => {
                let start = self.history.len().saturating_sub(k);
                let mut seen = vec![false; n];
                for batch in &self.history[start..] {
                    for &i in batch {
                        seen[i as usize] = true;
                    }
                }
                seen.iter().filter(|&&s| s).count()
            }
        };
        Ok(UsageStats {
            utilization: used as f64 / n as f64,
            per_batch_distinct: last.len(),
            dead_code_count: n - used,
        })
    }

    pub fn lookup(&self, vectors: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
        lookup(vectors, &self.entries, Execution::auto())
    }
}

fn check_lookup_dims(vectors: &Tensor, codebook: &Tensor) -> Result<(usize, usize)> {
    if codebook.rank() != 2 || codebook.shape()[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    let dim = codebook.shape()[1];
    if vectors.rank() != 2 || vectors.shape()[1] != dim {
        return Err(Error::shape(
            "lookup",
            format!(
                "vectors {:?} vs codebook {:?}",
                vectors.shape(),
                codebook.shape()
            ),
        ));
    }
    Ok((vectors.shape()[0], dim))
}

/// Nearest codeword for each row of `vectors[T, dim]` under squared
/// Euclidean distance. Returns `(indices, distances)`.
pub fn lookup(
    vectors: &Tensor,
    codebook: &Tensor,
    exec: Execution,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (t, dim) = check_lookup_dims(vectors, codebook)?;
    let n = codebook.shape()[0];
    let cb = codebook.data();
    let found = map_indices(exec, t, |r| {
        let v = vectors.row(r);
        let mut best = (0usize, f64::INFINITY);
        for i in 0..n {
            let e = &cb[i * dim..(i + 1) * dim];
            let mut d = 0.0;
            for (a, b) in v.iter().zip(e) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    });
    Ok(found.into_iter().unzip())
}

/// Channel lookup that treats every token and codeword as an `h x w` matrix
/// and compares them by squared Frobenius norm, accumulated column by column.
/// Agrees with [`lookup`] on the flattened maps.
pub fn lookup_frobenius(
    maps: &Tensor,
    codebook: &Tensor,
    h: usize,
    w: usize,
) -> Result<Vec<usize>> {
    let (t, dim) = check_lookup_dims(maps, codebook)?;
    if dim != h * w {
        return Err(Error::shape(
            "lookup_frobenius",
            format!("dim {dim} != {h}x{w}"),
        ));
    }
    let n = codebook.shape()[0];
    let at = |m: &[f64], i: usize, j: usize| m[i * w + j];
    Ok((0..t)
        .map(|r| {
            let a = maps.row(r);
            let mut best = (0usize, f64::INFINITY);
            for k in 0..n {
                let e = codebook.row(k);
                let mut fro = 0.0;
                for j in 0..w {
                    let mut col = 0.0;
                    for i in 0..h {
                        let d = at(a, i, j) - at(e, i, j);
                        col += d * d;
                    }
                    fro += col;
                }
                if fro < best.1 {
                    best = (k, fro);
                }
            }
            best.0
        })
        .collect())
}

/// Quantized latent plus bookkeeping, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub zq: LatentGrid,
    /// `batch x tokens_per_image` indices, image-major.
    pub indices: Vec<usize>,
    pub per_token_distance: Vec<f64>,
    pub commitment_loss: f64,
    pub codebook_loss: f64,
}

impl QuantizationResult {
    pub fn tokens_per_image(&self) -> usize {
        self.indices.len() / self.zq.batch()
    }

    pub fn image_indices(&self, b: usize) -> &[usize] {
        let t = self.tokens_per_image();
        &self.indices[b * t..(b + 1) * t]
    }
}

fn detached(z: &LatentGrid, codebook: &Codebook, axis: Axis) -> Result<QuantizationResult> {
    if codebook.axis() != axis {
        return Err(Error::InvalidArgument(format!(
            "{} quantization with a {} codebook",
            axis,
            codebook.axis()
        )));
    }
    let (h, w, c) = (z.h(), z.w(), z.c());
    codebook.check_geometry(h, w, c)?;
    let tokens = z.tokens(axis);
    let (indices, distances) = codebook.lookup(&tokens)?;
    let dim = codebook.dim();
    let mut q = Vec::with_capacity(tokens.numel());
    for &i in &indices {
        q.extend_from_slice(codebook.codeword(i));
    }
    let zq = LatentGrid::from_tokens(
        axis,
        Tensor::new(vec![indices.len(), dim], q)?,
        z.batch(),
        h,
        w,
        c,
    )?;
    // Both loss terms share a forward value; only their gradients differ.
    let mse = distances.iter().sum::<f64>() / tokens.numel() as f64;
    Ok(QuantizationResult {
        zq,
        indices,
        per_token_distance: distances,
        commitment_loss: mse,
        codebook_loss: mse,
    })
}

/// Replaces each of the `h*w` patch vectors by its nearest codeword.
pub fn quantize_patchwise(z: &LatentGrid, codebook: &Codebook) -> Result<QuantizationResult> {
    detached(z, codebook, Axis::Patch)
}

/// Replaces each of the `c` channel maps by its nearest codeword.
pub fn quantize_channelwise(z: &LatentGrid, codebook: &Codebook) -> Result<QuantizationResult> {
    detached(z, codebook, Axis::Channel)
}

pub fn quantize(z: &LatentGrid, codebook: &Codebook) -> Result<QuantizationResult> {
    detached(z, codebook, codebook.axis())
}

/// `z + sg[e - z]`: forward value is `e`, gradient flows to `z` unchanged.
pub fn ste_wrap(tape: &mut Tape, z: Var, e: Var) -> Result<Var> {
    let diff = tape.sub(e, z)?;
    let frozen = tape.stop_gradient(diff);
    tape.add(z, frozen)
}

/// Quantization recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeQuantization {
    /// Quantized latent, `[B, h, w, c]`, straight-through w.r.t. `z`.
    pub zq: Var,
    /// Indices of the quantized tokens, image-major. When only a prefix of
    /// channels is active this holds `c_keep` entries per image.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// `mean(||sg[z] - e||^2)`; moves the codewords.
    pub codebook_loss: Var,
    /// `mean(||z - sg[e]||^2)`; moves the encoder. Unweighted.
    pub commitment_loss: Var,
}

/// Records quantization of `z[B, h, w, c]` against `codebook_var[N, dim]`.
///
/// With `active_channels = Some(k)` on the channel axis only channel maps
/// `0..k` are looked up, contribute to the losses and receive codewords; the
/// rest of the quantized latent is zero.
pub fn quantize_on_tape(
    tape: &mut Tape,
    z: Var,
    codebook_var: Var,
    axis: Axis,
    active_channels: Option<usize>,
) -> Result<TapeQuantization> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("quantize", format!("latent {shape:?}")));
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let cb_shape = tape.shape(codebook_var).to_vec();
    if cb_shape.len() != 2 || cb_shape[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    let dim = axis.codeword_dim(h, w, c);
    if cb_shape[1] != dim {
        return Err(Error::shape(
            "quantize geometry",
            format!(
                "{axis} axis on {h}x{w}x{c} needs dim {dim}, codebook has {}",
                cb_shape[1]
            ),
        ));
    }
    let tokens = match axis {
        Axis::Patch => tape.reshape(z, &[b * h * w, c])?,
        Axis::Channel => {
            let flat = tape.reshape(z, &[b, h * w, c])?;
            let per_channel = tape.permute(flat, &[0, 2, 1])?;
            tape.reshape(per_channel, &[b * c, h * w])?
        }
    };
    let keep = match (axis, active_channels) {
        (_, None) => None,
        (Axis::Patch, Some(_)) => {
            return Err(Error::InvalidArgument(
                "channel truncation is only defined for the channel axis".into(),
            ))
        }
        (Axis::Channel, Some(k)) if k == 0 || k > c => {
            return Err(Error::InvalidArgument(format!(
                "c_keep {k} outside 1..={c}"
            )))
        }
        (Axis::Channel, Some(k)) if k == c => None,
        (Axis::Channel, Some(k)) => Some(k),
    };
    let (active, rows) = match keep {
        None => (tokens, None),
        Some(k) => {
            let rows: Vec<usize> = (0..b)
                .flat_map(|i| (0..k).map(move |j| i * c + j))
                .collect();
            (tape.index_select(tokens, &rows)?, Some(rows))
        }
    };
    let (indices, distances) = lookup(
        tape.value(active),
        tape.value(codebook_var),
        Execution::auto(),
    )?;
    let e = tape.index_select(codebook_var, &indices)?;

    let z_frozen = tape.stop_gradient(active);
    let cb_diff = tape.sub(z_frozen, e)?;
    let cb_sq = tape.square(cb_diff)?;
    let codebook_loss = tape.mean(cb_sq)?;
    let e_frozen = tape.stop_gradient(e);
    let cm_diff = tape.sub(active, e_frozen)?;
    let cm_sq = tape.square(cm_diff)?;
    let commitment_loss = tape.mean(cm_sq)?;

    let q_tokens = ste_wrap(tape, active, e)?;
    let q_tokens = match rows {
        None => q_tokens,
        Some(rows) => tape.scatter_rows(q_tokens, &rows, b * c)?,
    };
    let zq = match axis {
        Axis::Patch => tape.reshape(q_tokens, &[b, h, w, c])?,
        Axis::Channel => {
            let per_channel = tape.reshape(q_tokens, &[b, c, h * w])?;
            let flat = tape.permute(per_channel, &[0, 2, 1])?;
            tape.reshape(flat, &[b, h, w, c])?
        }
    };
    Ok(TapeQuantization {
        zq,
        indices,
        distances,
        codebook_loss,
        commitment_loss,
    })
}

/// Distance statistics between the token clouds of several images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityStats {
    /// Mean Euclidean distance over all ordered token pairs of the same
    /// image, self-pairs included.
    pub mean_intra: f64,
    /// Mean Euclidean distance over all token pairs from different images.
    pub mean_inter: f64,
    /// Fraction of tokens whose nearest other token (lowest index on ties)
    /// belongs to a different image.
    pub overlap_ratio: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `images[i]` holds the `[T_i, dim]` tokens of image `i`.
pub fn separability_stats(images: &[Tensor]) -> Result<SeparabilityStats> {
    if images.len() < 2 || images.iter().any(|t| t.rank() != 2 || t.shape()[0] < 2) {
        return Err(Error::InvalidArgument(
            "separability needs at least 2 images with at least 2 tokens each".into(),
        ));
    }
    let dim = images[0].shape()[1];
    if images.iter().any(|t| t.shape()[1] != dim) {
        return Err(Error::shape("separability", "token dims differ"));
    }
    let tokens: Vec<(usize, &[f64])> = images
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.shape()[0]).map(move |r| (i, t.row(r))))
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    let mut crossing = 0usize;
    for (a, &(img_a, va)) in tokens.iter().enumerate() {
        let mut nearest = (usize::MAX, f64::INFINITY);
        for (b, &(img_b, vb)) in tokens.iter().enumerate() {
            let d = euclid(va, vb);
            if img_a == img_b {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
            if a != b && d < nearest.1 {
                nearest = (b, d);
            }
        }
        if tokens[nearest.0].0 != img_a {
            crossing += 1;
        }
    }
    Ok(SeparabilityStats {
        mean_intra: intra / n_intra as f64,
        mean_inter: inter / n_inter as f64,
        overlap_ratio: crossing as f64 / tokens.len() as f64,
    })
}

/// Writes `image,token,v0,v1,...` rows for offline plotting.
pub fn dump_embeddings_csv(path: &Path, images: &[Tensor]) -> Result<()> {
    let mut out = String::new();
    let dim = images.first().map_or(0, |t| t.shape()[1]);
    out.push_str("image,token");
    for d in 0..dim {
        out.push_str(&format!(",v{d}"));
    }
    out.push('\n');
    for (i, t) in images.iter().enumerate() {
        for r in 0..t.shape()[0] {
            out.push_str(&format!("{i},{r}"));
            for v in t.row(r) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(b: usize, h: usize, w: usize, c: usize, seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::new(Tensor::uniform(&[b, h, w, c], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn exact_member_is_found_with_zero_distance() {
        let cb = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (idx, dist) = lookup(&v, &cb, Execution::Sequential).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(dist, vec![0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut rows = vec![5.0; 10 * 2];
        rows[3 * 2] = 0.0;
        rows[3 * 2 + 1] = 1.0;
        rows[7 * 2] = 0.0;
        rows[7 * 2 + 1] = 1.0;
        let cb = Tensor::new(vec![10, 2], rows).unwrap();
        let v = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(lookup(&v, &cb, Execution::Parallel).unwrap().0, vec![3]);
        // equidistant but not identical
        let cb = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(lookup(&v, &cb, Execution::Sequential).unwrap().0, vec![0]);
    }

    #[test]
    fn lookup_errors() {
        let v = Tensor::zeros(&[2, 3]);
        let cb = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            lookup(&v, &cb, Execution::Sequential),
            Err(Error::Shape { .. })
        ));
        assert!(Codebook::new(Axis::Patch, Tensor::new(vec![0, 3], vec![]).unwrap()).is_err());
    }

    #[test]
    fn perfect_codebook_reproduces_latent() {
        let z = grid(2, 3, 3, 4, 1);
        let cb = Codebook::new(Axis::Patch, z.tokens(Axis::Patch)).unwrap();
        let q = quantize_patchwise(&z, &cb).unwrap();
        assert_eq!(q.zq, z);
        assert!(q.per_token_distance.iter().all(|&d| d == 0.0));
        let cb = Codebook::new(Axis::Channel, z.tokens(Axis::Channel)).unwrap();
        let q = quantize_channelwise(&z, &cb).unwrap();
        assert_eq!(q.zq, z);
        assert_eq!(q.commitment_loss, 0.0);
    }

    #[test]
    fn degenerate_grids_are_single_lookups() {
        let z = grid(1, 1, 1, 5, 2);
        let cb = Codebook::new(
            Axis::Patch,
            Tensor::uniform(&[7, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
        )
        .unwrap();
        let q = quantize_patchwise(&z, &cb).unwrap();
        let (idx, _) = cb.lookup(&z.tokens(Axis::Patch)).unwrap();
        assert_eq!(q.indices, idx);
        assert_eq!(q.indices.len(), 1);

        let z = grid(1, 2, 3, 1, 3);
        let cb = Codebook::new(
            Axis::Channel,
            Tensor::uniform(&[7, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
        )
        .unwrap();
        let q = quantize_channelwise(&z, &cb).unwrap();
        assert_eq!(q.indices.len(), 1);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let z = grid(1, 4, 4, 8, 4);
        let cb = Codebook::new(Axis::Channel, Tensor::zeros(&[4, 8])).unwrap();
        assert!(quantize_channelwise(&z, &cb).is_err());
        let cb = Codebook::new(Axis::Patch, Tensor::zeros(&[4, 16])).unwrap();
        assert!(quantize_patchwise(&z, &cb).is_err());
        assert!(quantize_channelwise(&z, &cb).is_err());
    }

    #[test]
    fn ste_forward_is_codeword_and_backward_is_identity() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let e = tape.constant(Tensor::from_vec(vec![1.0, 0.5, -0.25]));
        let q = ste_wrap(&mut tape, z, e).unwrap();
        assert_eq!(tape.value(q).data(), tape.value(e).data());
        let s = tape.sum(q).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ste_composite_gradient_matches_hand_derivation() {
        // L = sum(w * ste(z, e)^2) with z = [a, b], e = [p, q]:
        // forward uses e, so dL/dz_i = 2 w_i e_i.
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_vec(vec![0.7, -0.4]));
        let e = tape.constant(Tensor::from_vec(vec![1.5, -2.0]));
        let w = tape.constant(Tensor::from_vec(vec![3.0, 0.5]));
        let q = ste_wrap(&mut tape, z, e).unwrap();
        let sq = tape.square(q).unwrap();
        let weighted = tape.mul(sq, w).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(z).unwrap().data(),
            &[2.0 * 3.0 * 1.5, 2.0 * 0.5 * -2.0]
        );
    }

    #[test]
    fn tape_quantization_matches_detached_path() {
        for axis in [Axis::Patch, Axis::Channel] {
            let z = grid(3, 2, 4, 6, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let cb = Codebook::init_from_tokens(axis, 9, &z.tokens(axis), &mut rng).unwrap();
            let detached = quantize(&z, &cb).unwrap();
            let mut tape = Tape::new();
            let zv = tape.param(z.values().clone());
            let cv = tape.param(cb.entries().clone());
            let q = quantize_on_tape(&mut tape, zv, cv, axis, None).unwrap();
            assert_eq!(q.indices, detached.indices);
            assert_eq!(tape.value(q.zq), detached.zq.values());
            assert!(
                (tape.value(q.commitment_loss).item() - detached.commitment_loss).abs() < 1e-15
            );
        }
    }

    #[test]
    fn truncated_channel_quantization_touches_only_active_channels() {
        let z = grid(2, 2, 2, 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb =
            Codebook::init_from_tokens(Axis::Channel, 6, &z.tokens(Axis::Channel), &mut rng)
                .unwrap();
        // keep every selected codeword at a nonzero distance so it gets a gradient
        cb.entries_mut()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.01);
        let mut tape = Tape::new();
        let zv = tape.param(z.values().clone());
        let cv = tape.param(cb.entries().clone());
        let q = quantize_on_tape(&mut tape, zv, cv, Axis::Channel, Some(1)).unwrap();
        assert_eq!(q.indices.len(), 2);
        let zq = LatentGrid::new(tape.value(q.zq).clone()).unwrap();
        for b in 0..2 {
            for k in 1..5 {
                assert!(zq.channel_map(b, k).iter().all(|&v| v == 0.0));
            }
        }
        let total = tape.add(q.codebook_loss, q.commitment_loss).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(cv).unwrap();
        let touched: Vec<usize> = (0..6)
            .filter(|&i| g.row(i).iter().any(|&v| v != 0.0))
            .collect();
        let mut expected = q.indices.clone();
        expected.sort_unstable();
        expected.dedup();
        assert_eq!(touched, expected);
        // Patch axis rejects truncation.
        let mut tape = Tape::new();
        let zv = tape.param(z.values().clone());
        let pv = tape.param(Tensor::zeros(&[4, 5]));
        assert!(quantize_on_tape(&mut tape, zv, pv, Axis::Patch, Some(2)).is_err());
    }

    #[test]
    fn usage_stats_counting() {
        let mut cb = Codebook::new(Axis::Patch, Tensor::zeros(&[8, 2])).unwrap();
        assert!(matches!(
            cb.usage_stats(Window::Lifetime),
            Err(Error::EmptyWindow)
        ));
        cb.record(&[0, 0, 0, 0]);
        let s = cb.usage_stats(Window::Lifetime).unwrap();
        assert_eq!(s.utilization, 1.0 / 8.0);
        assert_eq!(s.dead_code_count, 7);
        cb.record(&[1, 2, 3, 4, 5, 6, 7, 7]);
        assert_eq!(cb.usage_stats(Window::Lifetime).unwrap().utilization, 1.0);
        assert_eq!(
            cb.usage_stats(Window::LastBatches(1))
                .unwrap()
                .per_batch_distinct,
            7
        );
        assert_eq!(
            cb.usage_stats(Window::LastBatches(1)).unwrap().utilization,
            7.0 / 8.0
        );
        assert_eq!(cb.lifetime_counts(), &[4, 1, 1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn separability_edge_cases() {
        let a = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 0.5, 1.0, 1.0]).unwrap();
        let s = separability_stats(&[a.clone(), a.clone()]).unwrap();
        assert!((s.mean_inter - s.mean_intra).abs() < 1e-15);

        let x = Tensor::full(&[4, 3], 0.0);
        let y = Tensor::full(&[4, 3], 5.0);
        let s = separability_stats(&[x, y]).unwrap();
        assert_eq!(s.overlap_ratio, 0.0);
        assert_eq!(s.mean_intra, 0.0);

        assert!(separability_stats(std::slice::from_ref(&a)).is_err());
        let single = Tensor::zeros(&[1, 2]);
        assert!(separability_stats(&[a, single]).is_err());
    }

    #[test]
    fn axis_parses_and_displays() {
        assert_eq!("channel".parse::<Axis>().unwrap(), Axis::Channel);
        assert_eq!("Patch".parse::<Axis>().unwrap(), Axis::Patch);
        assert!("diagonal".parse::<Axis>().is_err());
        assert_eq!(Axis::Channel.to_string(), "channel");
    }
}
