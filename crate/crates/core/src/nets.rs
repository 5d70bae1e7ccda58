//! Stateless evaluators for the network families the model uses.
//!
//! Weights are always passed in, either generated per sample by the
//! hypernetwork or owned by the trainer. Structures are generic over the
//! weight handle `W`: `Tensor<T>` for storage, [`Var`] once bound to a tape.
//!
//! Dense weights are stored input-major, `[in, out]`, so a layer computes
//! `x·W + b` on row vectors. Per-sample weights carry a leading batch axis,
//! `[B, in, out]`, and a bias of shape `[B, out]`.

use rand::Rng;
use thiserror::Error;

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetsError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dimension { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Elu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<W> {
    pub weight: W,
    pub bias: W,
}

impl<W> Linear<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Linear<U> {
        Linear { weight: f(&self.weight), bias: f(&self.bias) }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a W)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut W)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<W> {
    pub layers: Vec<Linear<W>>,
    pub activations: Vec<Activation>,
}

impl<W> MlpWeights<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> MlpWeights<U> {
        MlpWeights { layers: self.layers.iter().map(|l| l.map(f)).collect(), activations: self.activations.clone() }
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a W)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.{i}"), out);
        }
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut W)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Vanilla tanh cell: `h' = tanh(h·W_h + x·W_x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnWeights<W> {
    pub w_h: W,
    pub w_x: W,
    pub bias: W,
}

impl<W> RnnWeights<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> RnnWeights<U> {
        RnnWeights { w_h: f(&self.w_h), w_x: f(&self.w_x), bias: f(&self.bias) }
    }
}

/// `y = elu(skip(x) + conv2(elu(conv1(x))))`, 3×3 kernels. `proj` is a
/// strided 1×1 convolution used when the block changes resolution or width.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<W> {
    pub conv1: Linear<W>,
    pub conv2: Linear<W>,
    pub proj: Option<Linear<W>>,
    pub stride: usize,
}

impl<W> ResBlock<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> ResBlock<U> {
        ResBlock {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
            proj: self.proj.as_ref().map(|p| p.map(f)),
            stride: self.stride,
        }
    }
}

/// Residual convolutional encoder producing `(μ, log σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<W> {
    pub image_size: usize,
    pub blocks: Vec<ResBlock<W>>,
    pub fc: MlpWeights<W>,
    pub mu: Linear<W>,
    pub logvar: Linear<W>,
}

pub const ENCODER_CHANNELS: usize = 32;
pub const HIDDEN: usize = 64;

impl<W> EncoderWeights<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            image_size: self.image_size,
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            fc: self.fc.map(f),
            mu: self.mu.map(f),
            logvar: self.logvar.map(f),
        }
    }

    pub fn params(&self) -> Vec<(String, &W)> {
        let mut out = vec![];
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.collect(&format!("encoder.block{i}.conv1"), &mut out);
            b.conv2.collect(&format!("encoder.block{i}.conv2"), &mut out);
            if let Some(p) = &b.proj {
                p.collect(&format!("encoder.block{i}.proj"), &mut out);
            }
        }
        self.fc.collect("encoder.fc", &mut out);
        self.mu.collect("encoder.mu", &mut out);
        self.logvar.collect("encoder.logvar", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut W)> {
        let mut out = vec![];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.collect_mut(&format!("encoder.block{i}.conv1"), &mut out);
            b.conv2.collect_mut(&format!("encoder.block{i}.conv2"), &mut out);
            if let Some(p) = &mut b.proj {
                p.collect_mut(&format!("encoder.block{i}.proj"), &mut out);
            }
        }
        self.fc.collect_mut("encoder.fc", &mut out);
        self.mu.collect_mut("encoder.mu", &mut out);
        self.logvar.collect_mut("encoder.logvar", &mut out);
        out
    }
}

/// Spatial size after a 3×3, pad-1 convolution with `stride`.
pub fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// LeCun-uniform weight (`U(±√(3/fan_in))`) and zero bias, scaled by `gain`.
pub fn init_linear<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Linear<Tensor<T>> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| gain * rng.random_range(-bound..bound)).collect();
    Linear { weight: Tensor::from_f64([fan_in, fan_out], &data).unwrap(), bias: Tensor::zeros([fan_out]) }
}

impl<T: Real> EncoderWeights<Tensor<T>> {
    /// Five residual blocks of 32 channels (blocks 1 and 3 downsample by
    /// two), four 64-unit fully connected layers, and linear `μ`/`log σ²`
    /// heads of width `z_dim`.
    pub fn init<R: Rng>(rng: &mut R, image_size: usize, z_dim: usize) -> Self {
        let strides = [2, 1, 2, 1, 1];
        let c = ENCODER_CHANNELS;
        let mut blocks = vec![];
        let mut size = image_size;
        let mut in_ch = 1;
        for &stride in &strides {
            let conv1 = init_linear(rng, 9 * in_ch, c, 1.0);
            let conv2 = init_linear(rng, 9 * c, c, 1.0);
            let proj = (stride != 1 || in_ch != c).then(|| init_linear(rng, in_ch, c, 1.0));
            blocks.push(ResBlock { conv1, conv2, proj, stride });
            size = conv_out(size, stride);
            in_ch = c;
        }
        let flat = size * size * c;
        let fc = MlpWeights {
            layers: vec![
                init_linear(rng, flat, HIDDEN, 1.0),
                init_linear(rng, HIDDEN, HIDDEN, 1.0),
                init_linear(rng, HIDDEN, HIDDEN, 1.0),
                init_linear(rng, HIDDEN, HIDDEN, 1.0),
            ],
            activations: vec![Activation::Elu; 4],
        };
        EncoderWeights {
            image_size,
            blocks,
            fc,
            mu: init_linear(rng, HIDDEN, z_dim, 1.0),
            logvar: init_linear(rng, HIDDEN, z_dim, 1.0),
        }
    }
}

pub fn activate<T: Real>(tape: &mut Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Linear => x,
        Activation::Elu => tape.elu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// `x·W + b` for `x: [B, in]`. `W` is either shared (`[in, out]`, bias
/// `[out]`) or per sample (`[B, in, out]`, bias `[B, out]`).
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, layer: &Linear<Var>) -> Result<Var, NetsError> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(layer.weight).to_vec();
    let dim_err = |expected: Vec<usize>| NetsError::Dimension { what: "linear input", expected, got: xs.clone() };
    match ws.len() {
        2 => {
            if xs.len() != 2 || xs[1] != ws[0] {
                return Err(dim_err(vec![xs.first().copied().unwrap_or(1), ws[0]]));
            }
            let y = tape.matmul(x, layer.weight)?;
            Ok(tape.broadcast_add(y, layer.bias)?)
        }
        3 => {
            if xs.len() != 2 || xs[0] != ws[0] || xs[1] != ws[1] {
                return Err(dim_err(vec![ws[0], ws[1]]));
            }
            let (b, out) = (ws[0], ws[2]);
            let row = tape.reshape(x, &[b, 1, ws[1]])?;
            let y = tape.matmul(row, layer.weight)?;
            let y = tape.reshape(y, &[b, out])?;
            Ok(tape.add(y, layer.bias)?)
        }
        _ => Err(NetsError::Dimension { what: "linear weight rank", expected: vec![2, 3], got: ws }),
    }
}

/// `act_L(...act_1(x·W_1 + b_1)...·W_L + b_L)`
pub fn mlp_apply<T: Real>(tape: &mut Tape<T>, w: &MlpWeights<Var>, x: Var) -> Result<Var, NetsError> {
    let mut h = x;
    for (layer, &act) in w.layers.iter().zip(&w.activations) {
        let y = linear(tape, h, layer)?;
        h = activate(tape, y, act);
    }
    Ok(h)
}

/// `h' = tanh(h·W_h + x·W_x + b)`, shared or per-sample weights.
pub fn rnn_step<T: Real>(tape: &mut Tape<T>, w: &RnnWeights<Var>, h: Var, x: Var) -> Result<Var, NetsError> {
    let hh = linear(tape, h, &Linear { weight: w.w_h, bias: w.bias })?;
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w.w_x).to_vec();
    let in_dim = ws[ws.len() - 2];
    if xs.len() != 2 || xs[1] != in_dim {
        return Err(NetsError::Dimension { what: "rnn input", expected: vec![xs[0], in_dim], got: xs });
    }
    let xw = if ws.len() == 3 {
        let row = tape.reshape(x, &[ws[0], 1, in_dim])?;
        let y = tape.matmul(row, w.w_x)?;
        tape.reshape(y, &[ws[0], ws[2]])?
    } else {
        tape.matmul(x, w.w_x)?
    };
    let pre = tape.add(hh, xw)?;
    Ok(tape.tanh(pre))
}

/// 3×3 (or 1×1) convolution on channels-last `[B,H,W,C]`.
fn conv<T: Real>(tape: &mut Tape<T>, x: Var, w: &Linear<Var>, kernel: usize, stride: usize) -> Result<Var, NetsError> {
    let pad = kernel / 2;
    let cols = tape.patches(x, kernel, stride, pad)?;
    let s = tape.shape(cols).to_vec();
    let out_ch = tape.shape(w.weight)[1];
    let flat = tape.reshape(cols, &[s[0] * s[1] * s[2], s[3]])?;
    let y = tape.matmul(flat, w.weight)?;
    let y = tape.broadcast_add(y, w.bias)?;
    Ok(tape.reshape(y, &[s[0], s[1], s[2], out_ch])?)
}

fn res_block<T: Real>(tape: &mut Tape<T>, x: Var, b: &ResBlock<Var>) -> Result<Var, NetsError> {
    let h = conv(tape, x, &b.conv1, 3, b.stride)?;
    let h = tape.elu(h);
    let h = conv(tape, h, &b.conv2, 3, 1)?;
    let skip = match &b.proj {
        Some(p) => conv(tape, x, p, 1, b.stride)?,
        None => x,
    };
    let y = tape.add(skip, h)?;
    Ok(tape.elu(y))
}

/// Encodes `[B,S,S]` images to `(μ, log σ²)`, each `[B, z]`.
pub fn encoder_apply<T: Real>(tape: &mut Tape<T>, w: &EncoderWeights<Var>, image: Var) -> Result<(Var, Var), NetsError> {
    let s = tape.shape(image).to_vec();
    let size = w.image_size;
    if s.len() != 3 || s[1] != size || s[2] != size {
        return Err(NetsError::Dimension { what: "encoder image", expected: vec![s[0], size, size], got: s });
    }
    let batch = s[0];
    let mut h = tape.reshape(image, &[batch, size, size, 1])?;
    for b in &w.blocks {
        h = res_block(tape, h, b)?;
    }
    let flat: usize = tape.shape(h)[1..].iter().product();
    let h = tape.reshape(h, &[batch, flat])?;
    let h = mlp_apply(tape, &w.fc, h)?;
    let mu = linear(tape, h, &w.mu)?;
    let logvar = linear(tape, h, &w.logvar)?;
    Ok((mu, logvar))
}
