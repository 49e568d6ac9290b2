//! Channel-wise autoregressive (CAR) generator: a small decoder-only
//! transformer over CVQ token sequences, conditioned on a class label.
//!
//! Input position 0 carries the label; position `k` carries token `x^(k)`.
//! Under teacher forcing the model reads positions `0..c` and row `k - 1` of
//! the logits predicts `x^(k)` from the label and `x^(<k)` only.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::optim::{Adam, AdamConfig, ParamStore};
use crate::quantizer::{Axis, Codebook};
use crate::tensor::Tensor;
use crate::tokenizer::{ImageBatch, LatentGrid};
use crate::train::TokenizerModel;

/// Shape of the CVQ latent a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n: usize,
}

impl TokenGeometry {
    pub fn codeword_dim(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    pub label: usize,
    pub geometry: TokenGeometry,
}

impl TokenSequence {
    pub fn new(indices: Vec<usize>, label: usize, geometry: TokenGeometry) -> Result<Self> {
        if indices.len() != geometry.c {
            return Err(Error::shape(
                "token sequence",
                format!("{} tokens for {} channels", indices.len(), geometry.c),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= geometry.n) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: geometry.n,
            });
        }
        Ok(TokenSequence {
            indices,
            label,
            geometry,
        })
    }
}

/// How tokens enter the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenInput {
    /// Two-layer MLP over the continuous codeword.
    Projector,
    /// Learned table indexed by the token id.
    IndexEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarConfig {
    pub geometry: TokenGeometry,
    pub classes: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub input: TokenInput,
}

impl CarConfig {
    pub fn new(geometry: TokenGeometry, classes: usize) -> Self {
        CarConfig {
            geometry,
            classes,
            d_model: 128,
            layers: 4,
            heads: 4,
            input: TokenInput::Projector,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.c == 0 || g.n == 0 || g.h == 0 || g.w == 0 || self.classes == 0 {
            return Err(Error::Config(format!("degenerate CAR geometry {self:?}")));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
pub struct CarModel {
    config: CarConfig,
    params: ParamStore,
    codewords: Tensor,
    proj1: Linear,
    proj2: Linear,
    token_table: Option<usize>,
    label_table: usize,
    positions: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Logit offset for future positions.
const MASKED: f64 = -1e30;

impl CarModel {
    /// Fresh model. `codewords` is the frozen `[N, h*w]` CVQ codebook.
    pub fn new<R: Rng + ?Sized>(config: CarConfig, codewords: Tensor, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g = config.geometry;
        if codewords.shape() != [g.n, g.codeword_dim()] {
            return Err(Error::shape(
                "car codewords",
                format!("{:?} vs [{}, {}]", codewords.shape(), g.n, g.codeword_dim()),
            ));
        }
        let d = config.d_model;
        let mut p = ParamStore::new();
        let proj1 = Linear::new(&mut p, "proj.1", g.codeword_dim(), d, rng);
        let proj2 = Linear::new(&mut p, "proj.2", d, d, rng);
        let token_table = match config.input {
            TokenInput::Projector => None,
            TokenInput::IndexEmbedding => {
                Some(p.push("token_emb", Tensor::normal(&[g.n, d], 0.02, rng)))
            }
        };
        let label_table = p.push("label_emb", Tensor::normal(&[config.classes, d], 0.02, rng));
        let positions = p.push("pos_emb", Tensor::normal(&[g.c + 1, d], 0.02, rng));
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("block{i}");
                Block {
                    ln1: LayerNorm::new(&mut p, &format!("{n}.ln1"), d),
                    q: Linear::new(&mut p, &format!("{n}.q"), d, d, rng),
                    k: Linear::new(&mut p, &format!("{n}.k"), d, d, rng),
                    v: Linear::new(&mut p, &format!("{n}.v"), d, d, rng),
                    o: Linear::new(&mut p, &format!("{n}.o"), d, d, rng),
                    ln2: LayerNorm::new(&mut p, &format!("{n}.ln2"), d),
                    up: Linear::new(&mut p, &format!("{n}.up"), d, 4 * d, rng),
                    down: Linear::new(&mut p, &format!("{n}.down"), 4 * d, d, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut p, "ln_f", d);
        let head = Linear::new(&mut p, "head", d, g.n, rng);
        // A small head keeps the untrained model close to the uniform predictor.
        for slot in [head.weight, head.bias] {
            p.get_mut(slot)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 0.1);
        }
        Ok(CarModel {
            config,
            params: p,
            codewords,
            proj1,
            proj2,
            token_table,
            label_table,
            positions,
            blocks,
            ln_f,
            head,
        })
    }

    /// Rebuilds the layout for `config` and swaps in `params`.
    pub fn from_params(config: CarConfig, codewords: Tensor, params: ParamStore) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut m = CarModel::new(config, codewords, &mut rng)?;
        if params.shapes() != m.params.shapes() || params.names() != m.params.names() {
            return Err(Error::shape("car params", "layout does not match config"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &CarConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codewords(&self) -> &Tensor {
        &self.codewords
    }

    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    pub fn zero_projector(&mut self) {
        self.proj1.zero(&mut self.params);
        self.proj2.zero(&mut self.params);
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.geometry != self.config.geometry {
            return Err(Error::shape(
                "car sequence",
                format!(
                    "geometry {:?} vs model {:?}",
                    seq.geometry, self.config.geometry
                ),
            ));
        }
        if seq.label >= self.config.classes {
            return Err(Error::IndexOutOfRange {
                index: seq.label,
                len: self.config.classes,
            });
        }
        TokenSequence::new(seq.indices.clone(), seq.label, seq.geometry).map(|_| ())
    }

    /// Input embeddings `[B*(len+1), d]` for `B` prefixes of equal length.
    fn embed_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        labels: &[usize],
        prefixes: &[&[usize]],
    ) -> Result<Var> {
        let d = self.config.d_model;
        let b = labels.len();
        let len = prefixes.first().map_or(0, |p| p.len());
        if prefixes.len() != b
            || prefixes.iter().any(|p| p.len() != len)
            || len > self.config.geometry.c
        {
            return Err(Error::shape("car embed", "ragged or overlong prefixes"));
        }
        let lab = tape.index_select(vars[self.label_table], labels)?;
        let lab = tape.reshape(lab, &[b, 1, d])?;
        let x = if len == 0 {
            lab
        } else {
            let flat: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
            let tok = match self.token_table {
                Some(slot) => tape.index_select(vars[slot], &flat)?,
                None => {
                    let cw = tape.constant(self.codewords.clone());
                    let rows = tape.index_select(cw, &flat)?;
                    let hdn = self.proj1.forward(tape, vars, rows)?;
                    let hdn = tape.gelu(hdn)?;
                    self.proj2.forward(tape, vars, hdn)?
                }
            };
            let tok = tape.reshape(tok, &[b, len, d])?;
            tape.concat(&[lab, tok], 1)?
        };
        let pos = tape.slice(vars[self.positions], 0, 0, len + 1)?;
        let pos = tape.expand(pos, b)?;
        let x = tape.add(x, pos)?;
        tape.reshape(x, &[b * (len + 1), d])
    }

    fn attention(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        blk: &Block,
        x: Var,
        b: usize,
        t: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let nh = self.config.heads;
        let dh = d / nh;
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, nh, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * nh, t, dh])
        };
        let q = blk.q.forward(tape, vars, x)?;
        let q = split(tape, q)?;
        let k = blk.k.forward(tape, vars, x)?;
        let k = split(tape, k)?;
        let v = blk.v.forward(tape, vars, x)?;
        let v = split(tape, v)?;
        let kt = tape.transpose(k)?;
        let s = tape.bmm(q, kt)?;
        let s = tape.mul_scalar(s, 1.0 / (dh as f64).sqrt())?;
        let mut mask = vec![0.0; b * nh * t * t];
        for m in mask.chunks_mut(t * t) {
            for i in 0..t {
                for j in i + 1..t {
                    m[i * t + j] = MASKED;
                }
            }
        }
        let mask = tape.constant(Tensor::new(vec![b * nh, t, t], mask)?);
        let s = tape.add(s, mask)?;
        let a = tape.softmax(s)?;
        let y = tape.bmm(a, v)?;
        let y = tape.reshape(y, &[b, nh, t, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[b * t, d])?;
        blk.o.forward(tape, vars, y)
    }

    /// Logits `[B*(len+1), N]`; row `i` of each group predicts token `i + 1`.
    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        labels: &[usize],
        prefixes: &[&[usize]],
    ) -> Result<Var> {
        let b = labels.len();
        let t = prefixes.first().map_or(0, |p| p.len()) + 1;
        let mut x = self.embed_on_tape(tape, vars, labels, prefixes)?;
        for blk in &self.blocks {
            let h = blk.ln1.forward(tape, vars, x)?;
            let h = self.attention(tape, vars, blk, h, b, t)?;
            x = tape.add(x, h)?;
            let h = blk.ln2.forward(tape, vars, x)?;
            let h = blk.up.forward(tape, vars, h)?;
            let h = tape.gelu(h)?;
            let h = blk.down.forward(tape, vars, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.ln_f.forward(tape, vars, x)?;
        self.head.forward(tape, vars, x)
    }

    /// Teacher-forced logits and flat targets for a batch.
    fn batch_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[&TokenSequence],
    ) -> Result<(Var, Vec<usize>)> {
        for s in batch {
            self.check(s)?;
        }
        let c = self.config.geometry.c;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let prefixes: Vec<&[usize]> = batch.iter().map(|s| &s.indices[..c - 1]).collect();
        let logits = self.logits_on_tape(tape, vars, &labels, &prefixes)?;
        let targets = batch
            .iter()
            .flat_map(|s| s.indices.iter().copied())
            .collect();
        Ok((logits, targets))
    }

    /// Input embeddings `[c+1, d]` for the whole sequence.
    pub fn embed_sequence(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.check(seq)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let e = self.embed_on_tape(&mut tape, &vars, &[seq.label], &[&seq.indices])?;
        Ok(tape.value(e).clone())
    }

    /// Teacher-forced logits `[c, N]`.
    pub fn forward_logits(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (logits, _) = self.batch_on_tape(&mut tape, &vars, &[seq])?;
        Ok(tape.value(logits).clone())
    }

    /// Per-position negative log-likelihoods `-log p(x^(k) | label, x^(<k))`.
    pub fn stepwise_nll(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let logits = self.forward_logits(seq)?;
        let n = self.config.geometry.n;
        Ok(seq
            .indices
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let row = &logits.data()[k * n..(k + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[x]
            })
            .collect())
    }

    /// Sequence negative log-likelihood, computed as one tape reduction.
    pub fn sequence_nll(&self, seq: &TokenSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (logits, targets) = self.batch_on_tape(&mut tape, &vars, &[seq])?;
        let ce = tape.cross_entropy(logits, &targets)?;
        Ok(tape.value(ce).item() * targets.len() as f64)
    }

    /// Mean cross-entropy over a batch, recorded on `tape` with the model
    /// parameters bound as trainable leaves.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&TokenSequence],
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self.params.bind(tape);
        let (logits, targets) = self.batch_on_tape(tape, &vars, batch)?;
        Ok((tape.cross_entropy(logits, &targets)?, vars))
    }

    /// Mean cross-entropy without an update.
    pub fn loss(&self, batch: &[&TokenSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (logits, targets) = self.batch_on_tape(&mut tape, &vars, batch)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        Ok(tape.value(ce).item())
    }

    /// Fraction of positions whose argmax logit equals the target.
    pub fn accuracy(&self, batch: &[&TokenSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (logits, targets) = self.batch_on_tape(&mut tape, &vars, batch)?;
        let n = self.config.geometry.n;
        let hits = tape
            .value(logits)
            .data()
            .chunks(n)
            .zip(&targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        Ok(hits as f64 / targets.len().max(1) as f64)
    }

    /// Samples `c` tokens left to right. `top_k = 1` is greedy and consumes
    /// no randomness.
    pub fn generate(&self, label: usize, sampling: Sampling, seed: u64) -> Result<TokenSequence> {
        sampling.validate(self.config.geometry.n)?;
        if label >= self.config.classes {
            return Err(Error::IndexOutOfRange {
                index: label,
                len: self.config.classes,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.geometry.n;
        let mut tokens: Vec<usize> = Vec::with_capacity(self.config.geometry.c);
        for _ in 0..self.config.geometry.c {
            let mut tape = Tape::new();
            let vars = self.params.bind_frozen(&mut tape);
            let logits = self.logits_on_tape(&mut tape, &vars, &[label], &[&tokens])?;
            let all = tape.value(logits).data();
            let row = &all[all.len() - n..];
            tokens.push(sample_row(row, sampling, &mut rng)?);
        }
        TokenSequence::new(tokens, label, self.config.geometry)
    }
}

/// Lowest index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: usize,
}

impl Sampling {
    pub fn greedy() -> Self {
        Sampling {
            temperature: 1.0,
            top_k: 1,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::InvalidArgument(format!(
                "top_k {} outside 1..={n}",
                self.top_k
            )));
        }
        Ok(())
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], s: Sampling, rng: &mut R) -> Result<usize> {
    if s.top_k == 1 {
        return Ok(argmax(row));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(s.top_k);
    let scaled: Vec<f64> = order.iter().map(|&i| row[i] / s.temperature).collect();
    let max = scaled[0];
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
    Ok(order[dist.sample(rng)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarTrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once training accuracy reaches this value, checked every
    /// `eval_every` steps.
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarStepLog {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl CarStepLog {
    pub const CSV_HEADER: &'static str = "step,loss,accuracy";

    pub fn csv_row(&self) -> String {
        let acc = self.accuracy.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{}", self.step, self.loss, acc)
    }
}

/// Next-token training with Adam. Returns the number of steps taken.
pub fn train_car(
    model: &mut CarModel,
    data: &[TokenSequence],
    cfg: &CarTrainConfig,
    mut on_step: impl FnMut(&CarStepLog) -> Result<()>,
) -> Result<usize> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("empty token set or batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(data.len());
    let all: Vec<&TokenSequence> = data.iter().collect();
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&TokenSequence> = order[cursor..cursor + bs]
            .iter()
            .map(|&i| &data[i])
            .collect();
        cursor += bs;
        let mut tape = Tape::new();
        let (loss, vars) = model.loss_on_tape(&mut tape, &batch)?;
        let loss_value = tape.value(loss).item();
        tape.backward(loss)?;
        adam.step(model.params_mut(), &tape, &vars);
        let check =
            cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        let accuracy = if check {
            Some(model.accuracy(&all)?)
        } else {
            None
        };
        on_step(&CarStepLog {
            step,
            loss: loss_value,
            accuracy,
        })?;
        if let (Some(a), Some(t)) = (accuracy, cfg.target_accuracy) {
            if a >= t {
                return Ok(step + 1);
            }
        }
    }
    Ok(cfg.steps)
}

/// Decodes `k`-token channel prefixes: channels `1..=k` are dequantized and
/// the rest are zero.
pub fn progressive_decode(model: &TokenizerModel, prefixes: &[&[usize]]) -> Result<ImageBatch> {
    let z = prefix_latent(model, prefixes)?;
    model.autoencoder.decode(&z)
}

/// Latent grid for channel prefixes, zero past the prefix.
pub fn prefix_latent(model: &TokenizerModel, prefixes: &[&[usize]]) -> Result<LatentGrid> {
    let cfg = model.autoencoder.config();
    let (h, w) = cfg.grid();
    let c = cfg.latent_channels;
    if model.axis() != Axis::Channel {
        return Err(Error::InvalidArgument(
            "progressive decoding needs a channel-wise codebook".into(),
        ));
    }
    let k = prefixes.first().map_or(0, |p| p.len());
    if k == 0 || k > c || prefixes.iter().any(|p| p.len() != k) {
        return Err(Error::InvalidArgument(format!(
            "prefix length {k} outside 1..={c}"
        )));
    }
    let mut z = LatentGrid::zeros(prefixes.len(), h, w, c);
    let cb: &Codebook = &model.codebook;
    let data = z.values_mut().data_mut();
    for (b, p) in prefixes.iter().enumerate() {
        for (ch, &i) in p.iter().enumerate() {
            if i >= cb.size() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: cb.size(),
                });
            }
            for (s, &v) in cb.codeword(i).iter().enumerate() {
                data[(b * h * w + s) * c + ch] = v;
            }
        }
    }
    Ok(z)
}

/// A labelled token corpus with a JSON manifest and NTB payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenManifest {
    pub geometry: TokenGeometry,
    pub count: usize,
    pub classes: usize,
    pub label_names: Vec<String>,
}

pub const TOKEN_MANIFEST: &str = "tokens.json";

/// Writes `indices.ntb` (`[S, c]`), `labels.ntb` (`[S]`) and the manifest.
/// Indices are stored as exact small integers in the f64 payload.
pub fn save_tokens(
    dir: &Path,
    seqs: &[TokenSequence],
    geometry: TokenGeometry,
    classes: usize,
) -> Result<TokenManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = Vec::with_capacity(seqs.len() * geometry.c);
    let mut labels = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.geometry != geometry {
            return Err(Error::shape("save tokens", "mixed geometries"));
        }
        idx.extend(s.indices.iter().map(|&i| i as f64));
        labels.push(s.label as f64);
    }
    Tensor::new(vec![seqs.len(), geometry.c], idx)?.save(&dir.join("indices.ntb"))?;
    Tensor::new(vec![seqs.len()], labels)?.save(&dir.join("labels.ntb"))?;
    let manifest = TokenManifest {
        geometry,
        count: seqs.len(),
        classes,
        label_names: (0..classes).map(|i| format!("class{i}")).collect(),
    };
    let path = dir.join(TOKEN_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_tokens(dir: &Path) -> Result<(TokenManifest, Vec<TokenSequence>)> {
    let path = dir.join(TOKEN_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: TokenManifest = serde_json::from_slice(&bytes)?;
    let idx = Tensor::load(&dir.join("indices.ntb"))?;
    let labels = Tensor::load(&dir.join("labels.ntb"))?;
    if idx.shape() != [m.count, m.geometry.c] || labels.shape() != [m.count] {
        return Err(Error::Format {
            format: "tokens",
            detail: "payload shape disagrees with manifest".into(),
        });
    }
    let to_index = |v: f64| -> Result<usize> {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Format {
                format: "tokens",
                detail: format!("non-integer index {v}"),
            });
        }
        Ok(v as usize)
    };
    let c = m.geometry.c.max(1);
    let seqs = idx
        .data()
        .chunks(c)
        .zip(labels.data())
        .map(|(row, &l)| {
            let indices = row
                .iter()
                .map(|&v| to_index(v))
                .collect::<Result<Vec<_>>>()?;
            TokenSequence::new(indices, to_index(l)?, m.geometry)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, seqs))
}
