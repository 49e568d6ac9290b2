//! Central finite-difference gradient checking for the tape.
//!
//! [`check`] records a function of some input tensors, reduces a tensor
//! output to a scalar with fixed pseudo-random weights, and compares the
//! tape's gradients with central differences. [`op_cases`] lists one case per
//! differentiable op with inputs drawn away from kinks and poles.
//! `stop_gradient` is excluded since it deliberately disagrees with finite
//! differences. [`tokenizer_ste_check`] and [`car_check`] cover whole models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BinaryOp, Tape, Var};
use crate::car::{CarModel, TokenSequence};
use crate::error::Result;
use crate::quantizer::Codebook;
use crate::tensor::Tensor;
use crate::tokenizer::{
    forward_loss, patchify, Autoencoder, AuxLosses, ChannelSelection, ImageBatch, LatentGrid,
    LossWeights,
};

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// `||a - b|| / max(||a|| + ||b||, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64) * 0.618_033_988_75 + 0.3).sin() + 0.1)
        .collect()
}

fn scalar_out(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    if n == 1 {
        return tape.reshape(out, &[1]);
    }
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, weights(n))?);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn evaluate(build: &Build, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let s = scalar_out(&mut tape, out)?;
    Ok(tape.value(s).item())
}

fn analytic(tape: &Tape, vars: &[Var], inputs: &[Tensor]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| match tape.grad(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

/// Central differences of `build` at the given `(input, element)` coordinates.
pub fn numeric_at(
    build: &Build,
    inputs: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + h;
        let up = evaluate(build, &probe)?;
        probe[i].data_mut()[j] = orig - h;
        let down = evaluate(build, &probe)?;
        probe[i].data_mut()[j] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect()
}

/// Up to `count` distinct coordinates drawn uniformly over all elements.
pub fn sample_coords(sizes: &[usize], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..n).map(move |j| (i, j)))
        .collect();
    if count >= all.len() {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, all.len(), count)
        .into_iter()
        .map(|k| all[k])
        .collect()
}

/// Analytic and numeric gradients for every input, flattened in input order.
pub fn gradients(build: &Build, inputs: &[Tensor], h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let s = scalar_out(&mut tape, out)?;
    tape.backward(s)?;
    let a = analytic(&tape, &vars, inputs).concat();
    let n = numeric_at(build, inputs, h, &all_coords(inputs))?;
    Ok((a, n))
}

/// Relative error between tape and finite-difference gradients.
pub fn check(build: &Build, inputs: &[Tensor], h: f64) -> Result<f64> {
    let (a, n) = gradients(build, inputs, h)?;
    Ok(relative_error(&a, &n))
}

/// Checks the straight-through tokenizer gradient on one batch.
///
/// The STE gradient is not the derivative of the recorded loss, so the
/// oracle is a surrogate that freezes the argmin indices `I0`, the latent
/// `z0` and the quantized latent `e0` at the base point:
/// `recon(dec(z + e0 - z0)) + mean((z0 - E[I0])^2) + beta mean((z - e0)^2)`.
/// Its exact gradient at the base point equals the STE gradient. Compares
/// `count` sampled coordinates over the autoencoder parameters and codebook.
pub fn tokenizer_ste_check(
    ae: &Autoencoder,
    codebook: &Codebook,
    images: &ImageBatch,
    beta: f64,
    h: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let axis = codebook.axis();
    let cfg = *ae.config();
    let patches = patchify(images, cfg.patch)?;
    let b = images.batch();
    let weights = LossWeights {
        beta,
        lambda_lpips: 0.0,
        lambda_gan: 0.0,
    };
    let mut tape = Tape::new();
    let vars = ae.params().bind(&mut tape);
    let cb = tape.param(codebook.entries().clone());
    let fl = forward_loss(
        &mut tape,
        ae,
        &vars,
        cb,
        axis,
        &patches,
        b,
        ChannelSelection::Full,
        &weights,
        0.0,
        &AuxLosses::default(),
    )?;
    let z0 = tape.value(fl.z).clone();
    let e0 = tape.value(fl.zq).clone();
    let indices = fl.indices.clone();
    tape.backward(fl.total)?;

    let mut inputs: Vec<Tensor> = ae.params().iter().map(|(_, t)| t.clone()).collect();
    inputs.push(codebook.entries().clone());
    let mut all_vars = vars.clone();
    all_vars.push(cb);
    let grads = analytic(&tape, &all_vars, &inputs);

    let offset = Tensor::new(
        z0.shape().to_vec(),
        e0.data()
            .iter()
            .zip(z0.data())
            .map(|(e, z)| e - z)
            .collect(),
    )?;
    let z0_tokens = LatentGrid::new(z0)?.tokens(axis);
    let model = ae.clone();
    let build: Build = Box::new(move |t, v| {
        let n = v.len() - 1;
        let x = t.constant(patches.clone());
        let z = model.encode_on_tape(t, &v[..n], x, b)?;
        let off = t.constant(offset.clone());
        let shifted = t.add(z, off)?;
        let x_hat = model.decode_on_tape(t, &v[..n], shifted)?;
        let d = t.sub(x_hat, x)?;
        let d = t.square(d)?;
        let recon = t.mean(d)?;
        let e = t.index_select(v[n], &indices)?;
        let zt = t.constant(z0_tokens.clone());
        let d = t.sub(zt, e)?;
        let d = t.square(d)?;
        let cbl = t.mean(d)?;
        let target = t.constant(e0.clone());
        let d = t.sub(z, target)?;
        let d = t.square(d)?;
        let com = t.mean(d)?;
        let com = t.mul_scalar(com, beta)?;
        let s = t.add(recon, cbl)?;
        t.add(s, com)
    });
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let coords = sample_coords(&sizes, count, seed);
    let numeric = numeric_at(&build, &inputs, h, &coords)?;
    let a: Vec<f64> = coords.iter().map(|&(i, j)| grads[i][j]).collect();
    Ok(relative_error(&a, &numeric))
}

/// Checks the CAR cross-entropy gradient on `count` sampled parameters.
pub fn car_check(
    model: &CarModel,
    batch: &[&TokenSequence],
    h: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, vars) = model.loss_on_tape(&mut tape, batch)?;
    tape.backward(loss)?;
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let grads = analytic(&tape, &vars, &inputs);
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let coords = sample_coords(&sizes, count, seed);
    let mut probe = model.clone();
    let mut a = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for (i, j) in coords {
        let orig = inputs[i].data()[j];
        probe.params_mut().get_mut(i).data_mut()[j] = orig + h;
        let up = probe.loss(batch)?;
        probe.params_mut().get_mut(i).data_mut()[j] = orig - h;
        let down = probe.loss(batch)?;
        probe.params_mut().get_mut(i).data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * h));
        a.push(grads[i][j]);
    }
    Ok(relative_error(&a, &numeric))
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn uniform_in<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values with `|x| >= 0.1`, keeping piecewise ops away from their kinks.
fn off_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(f),
    }
}

/// One case per differentiable op, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let g = |s: &[usize], r: &mut ChaCha8Rng| uniform_in(s, -1.0, 1.0, r);
    let pos = |s: &[usize], r: &mut ChaCha8Rng| uniform_in(s, 0.5, 2.0, r);
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
    let mut rows: Vec<usize> = (0..6).collect();
    rows.sort_by_key(|_| r.gen::<u32>());
    rows.truncate(3);
    let picks: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
    let p2 = r.gen_range(0.5..3.0);
    vec![
        case(
            "add",
            vec![g(&[3, 4], &mut r), g(&[3, 4], &mut r)],
            |t, v| t.add(v[0], v[1]),
        ),
        case(
            "sub",
            vec![g(&[3, 4], &mut r), g(&[3, 4], &mut r)],
            |t, v| t.sub(v[0], v[1]),
        ),
        case(
            "mul",
            vec![g(&[3, 4], &mut r), g(&[3, 4], &mut r)],
            |t, v| t.mul(v[0], v[1]),
        ),
        case(
            "div",
            vec![g(&[3, 4], &mut r), pos(&[3, 4], &mut r)],
            |t, v| t.div(v[0], v[1]),
        ),
        case(
            "pow",
            vec![pos(&[3, 4], &mut r), g(&[3, 4], &mut r)],
            |t, v| t.binary(BinaryOp::Pow, v[0], v[1]),
        ),
        case("add_scalar", vec![g(&[5], &mut r)], |t, v| {
            t.add_scalar(v[0], 0.7)
        }),
        case("mul_scalar", vec![g(&[5], &mut r)], |t, v| {
            t.mul_scalar(v[0], -1.3)
        }),
        case("div_scalar", vec![g(&[5], &mut r)], |t, v| {
            t.div_scalar(v[0], 2.5)
        }),
        case("pow_scalar", vec![pos(&[5], &mut r)], move |t, v| {
            t.pow_scalar(v[0], p2)
        }),
        case("square", vec![g(&[2, 3], &mut r)], |t, v| t.square(v[0])),
        case("exp", vec![g(&[2, 3], &mut r)], |t, v| t.exp(v[0])),
        case("log", vec![pos(&[2, 3], &mut r)], |t, v| t.log(v[0])),
        case("relu", vec![off_zero(&[2, 5], &mut r)], |t, v| t.relu(v[0])),
        case("gelu", vec![g(&[2, 5], &mut r)], |t, v| t.gelu(v[0])),
        case("sigmoid", vec![g(&[2, 5], &mut r)], |t, v| t.sigmoid(v[0])),
        case("tanh", vec![g(&[2, 5], &mut r)], |t, v| t.tanh(v[0])),
        case(
            "matmul",
            vec![g(&[3, 4], &mut r), g(&[4, 2], &mut r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "bmm",
            vec![g(&[2, 3, 4], &mut r), g(&[2, 4, 3], &mut r)],
            |t, v| t.bmm(v[0], v[1]),
        ),
        case("sum", vec![g(&[3, 4], &mut r)], |t, v| t.sum(v[0])),
        case("mean", vec![g(&[3, 4], &mut r)], |t, v| t.mean(v[0])),
        case("sum_axis", vec![g(&[2, 3, 4], &mut r)], |t, v| {
            t.sum_axis(v[0], 1)
        }),
        case("mean_axis", vec![g(&[2, 3, 4], &mut r)], |t, v| {
            t.mean_axis(v[0], 2)
        }),
        case("softmax", vec![g(&[3, 5], &mut r)], |t, v| t.softmax(v[0])),
        case("log_softmax", vec![g(&[3, 5], &mut r)], |t, v| {
            t.log_softmax(v[0])
        }),
        case("layer_norm", vec![g(&[3, 6], &mut r)], |t, v| {
            t.layer_norm(v[0], 1e-5)
        }),
        case("cross_entropy", vec![g(&[4, 5], &mut r)], move |t, v| {
            t.cross_entropy(v[0], &targets)
        }),
        case("reshape", vec![g(&[2, 6], &mut r)], |t, v| {
            t.reshape(v[0], &[3, 4])
        }),
        case("permute", vec![g(&[2, 3, 4], &mut r)], |t, v| {
            t.permute(v[0], &[2, 0, 1])
        }),
        case("transpose", vec![g(&[2, 3, 4], &mut r)], |t, v| {
            t.transpose(v[0])
        }),
        case("slice", vec![g(&[3, 5, 2], &mut r)], |t, v| {
            t.slice(v[0], 1, 1, 4)
        }),
        case(
            "concat",
            vec![g(&[2, 3], &mut r), g(&[2, 2], &mut r)],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        case("expand", vec![g(&[2, 3], &mut r)], |t, v| t.expand(v[0], 3)),
        case("index_select", vec![g(&[4, 3], &mut r)], move |t, v| {
            t.index_select(v[0], &picks)
        }),
        case("scatter_rows", vec![g(&[3, 2], &mut r)], move |t, v| {
            t.scatter_rows(v[0], &rows, 6)
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_one_seed() {
        for c in op_cases(0) {
            let err = check(&c.build, &c.inputs, 1e-6).unwrap();
            assert!(err < 1e-4, "{}: {err}", c.name);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // stop_gradient hides a real dependence, so the check must fail.
        let b: Build = Box::new(|t, v| {
            let s = t.stop_gradient(v[0]);
            t.mul(s, v[0])
        });
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        assert!(check(&b, &[x], 1e-6).unwrap() > 0.1);
    }
}
