//! The shared hypernetwork.
//!
//! A trunk MLP over a program `z` feeds seven linear heads. Their outputs
//! are cut, by fixed slices, into the weights of one level's primary
//! networks plus the sequence initializers. The same weights serve every
//! tree level, so the layout is a function of `z_dim` and the patch size
//! only.

use rand::Rng;

use crate::nets::{init_linear, linear, mlp_apply, Activation, Linear, MlpWeights, NetsError, RnnWeights, HIDDEN};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const HEADS: [&str; 7] = ["encoder", "state", "policy", "patch_decoder", "action_decoder", "x0", "a0"];
pub const TRUNK_LAYERS: usize = 6;
pub const HEAD_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    /// Per-sample shape.
    pub shape: Vec<usize>,
    /// Offset into the concatenation of all head outputs.
    pub offset: usize,
    pub head: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub z_dim: usize,
    pub patch_pixels: usize,
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn head_range(&self, head: usize) -> std::ops::Range<usize> {
        let mut it = self.entries.iter().filter(|e| e.head == head);
        let start = it.next().map_or(0, |e| e.offset);
        let end = self.entries.iter().filter(|e| e.head == head).map(|e| e.offset + e.len()).max().unwrap_or(start);
        start..end
    }

    pub fn head_size(&self, head: usize) -> usize {
        self.head_range(head).len()
    }
}

/// Primary-network layout for programs of width `z_dim` decoding
/// `patch_pixels`-pixel patches. Dense weights are `[in, out]`.
pub fn layout(z_dim: usize, patch_pixels: usize) -> ParamLayout {
    assert!(z_dim >= 1 && patch_pixels >= 1);
    let (z, h, p) = (z_dim, HIDDEN, patch_pixels);
    let mlp = |name: &str, dims: [usize; 4]| -> Vec<(String, Vec<usize>)> {
        (0..3)
            .flat_map(|i| {
                [(format!("{name}.{i}.weight"), vec![dims[i], dims[i + 1]]), (format!("{name}.{i}.bias"), vec![dims[i + 1]])]
            })
            .collect()
    };
    let rnn = |name: &str| -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{name}.w_h"), vec![z, z]),
            (format!("{name}.w_x"), vec![z, z]),
            (format!("{name}.bias"), vec![z]),
            (format!("{name}.h0"), vec![z]),
        ]
    };
    let heads = [
        mlp("encoder", [p + 6, h, h, z]),
        rnn("state"),
        rnn("policy"),
        mlp("patch_decoder", [z, h, h, p]),
        mlp("action_decoder", [z, h, h, 6]),
        vec![("x0".to_string(), vec![p])],
        vec![("a0".to_string(), vec![6])],
    ];
    let mut entries = vec![];
    let mut offset = 0;
    for (head, items) in heads.into_iter().enumerate() {
        for (name, shape) in items {
            let e = LayoutEntry { name, shape, offset, head };
            offset += e.len();
            entries.push(e);
        }
    }
    ParamLayout { z_dim, patch_pixels, entries, total: offset }
}

/// Everything one program needs to unroll a level.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryNets<W> {
    pub encoder: MlpWeights<W>,
    pub state: RnnWeights<W>,
    pub h0_state: W,
    pub policy: RnnWeights<W>,
    pub h0_policy: W,
    pub patch_decoder: MlpWeights<W>,
    pub action_decoder: MlpWeights<W>,
    pub x0: W,
    pub a0: W,
}

const E_ACTS: [Activation; 3] = [Activation::Elu, Activation::Elu, Activation::Linear];
const D_ACTS: [Activation; 3] = [Activation::Elu, Activation::Elu, Activation::Sigmoid];
const T_ACTS: [Activation; 3] = [Activation::Elu, Activation::Elu, Activation::Linear];

impl<W: Clone> PrimaryNets<W> {
    /// Assembles from values listed in layout order.
    pub fn from_entries(values: Vec<W>) -> Self {
        assert_eq!(values.len(), 6 + 4 + 4 + 6 + 6 + 1 + 1, "primary entry count");
        let mut it = values.into_iter();
        let mut next = || it.next().unwrap();
        let mlp = |acts: [Activation; 3], next: &mut dyn FnMut() -> W| MlpWeights {
            layers: (0..3).map(|_| Linear { weight: next(), bias: next() }).collect(),
            activations: acts.to_vec(),
        };
        let encoder = mlp(E_ACTS, &mut next);
        let state = RnnWeights { w_h: next(), w_x: next(), bias: next() };
        let h0_state = next();
        let policy = RnnWeights { w_h: next(), w_x: next(), bias: next() };
        let h0_policy = next();
        let patch_decoder = mlp(D_ACTS, &mut next);
        let action_decoder = mlp(T_ACTS, &mut next);
        PrimaryNets { encoder, state, h0_state, policy, h0_policy, patch_decoder, action_decoder, x0: next(), a0: next() }
    }

    /// Values in layout order.
    pub fn entries(&self) -> Vec<&W> {
        fn mlp<'a, W>(m: &'a MlpWeights<W>, out: &mut Vec<&'a W>) {
            for l in &m.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        let mut out = vec![];
        mlp(&self.encoder, &mut out);
        out.extend([&self.state.w_h, &self.state.w_x, &self.state.bias, &self.h0_state]);
        out.extend([&self.policy.w_h, &self.policy.w_x, &self.policy.bias, &self.h0_policy]);
        mlp(&self.patch_decoder, &mut out);
        mlp(&self.action_decoder, &mut out);
        out.extend([&self.x0, &self.a0]);
        out
    }
}

impl<T: Real> PrimaryNets<Tensor<T>> {
    /// Number of generated values per program.
    pub fn count_per_sample(&self) -> usize {
        self.entries().iter().map(|t| t.len() / t.shape()[0]).sum()
    }

    /// `[B, total]` rows of all entries concatenated in layout order.
    pub fn flatten(&self) -> Tensor<T> {
        let entries = self.entries();
        let b = entries[0].shape()[0];
        let mut data = vec![];
        for s in 0..b {
            for e in &entries {
                let inner = e.len() / b;
                data.extend_from_slice(&e.data()[s * inner..(s + 1) * inner]);
            }
        }
        let total = data.len() / b;
        Tensor::new([b, total], data).expect("flatten shape")
    }
}

/// Trunk (6 elu layers of 64) plus seven linear heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperWeights<W> {
    pub z_dim: usize,
    pub patch_pixels: usize,
    pub trunk: MlpWeights<W>,
    pub heads: Vec<Linear<W>>,
}

impl<W> HyperWeights<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> HyperWeights<U> {
        HyperWeights {
            z_dim: self.z_dim,
            patch_pixels: self.patch_pixels,
            trunk: self.trunk.map(f),
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        layout(self.z_dim, self.patch_pixels)
    }

    pub fn params(&self) -> Vec<(String, &W)> {
        let mut out = vec![];
        self.trunk.collect("hypernet.trunk", &mut out);
        for (h, name) in self.heads.iter().zip(HEADS) {
            out.push((format!("hypernet.head.{name}.weight"), &h.weight));
            out.push((format!("hypernet.head.{name}.bias"), &h.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut W)> {
        let mut out = vec![];
        self.trunk.collect_mut("hypernet.trunk", &mut out);
        for (h, name) in self.heads.iter_mut().zip(HEADS) {
            out.push((format!("hypernet.head.{name}.weight"), &mut h.weight));
            out.push((format!("hypernet.head.{name}.bias"), &mut h.bias));
        }
        out
    }
}

impl<T: Real> HyperWeights<Tensor<T>> {
    /// Standard fan-in init for the trunk; heads scaled by [`HEAD_GAIN`]
    /// because their outputs are weights themselves.
    pub fn init<R: Rng>(rng: &mut R, z_dim: usize, patch_pixels: usize) -> Self {
        let mut layers = vec![init_linear(rng, z_dim, HIDDEN, 1.0)];
        for _ in 1..TRUNK_LAYERS {
            layers.push(init_linear(rng, HIDDEN, HIDDEN, 1.0));
        }
        let trunk = MlpWeights { layers, activations: vec![Activation::Elu; TRUNK_LAYERS] };
        let lay = layout(z_dim, patch_pixels);
        let mut heads: Vec<Linear<Tensor<T>>> =
            (0..HEADS.len()).map(|h| init_linear(rng, HIDDEN, lay.head_size(h), HEAD_GAIN)).collect();
        // The head bias is what every program's networks start from: give
        // generated matrices a fan-in draw of their own, leave generated
        // biases and initial states at zero.
        for e in lay.entries.iter().filter(|e| e.shape.len() == 2) {
            let start = e.offset - lay.head_range(e.head).start;
            let bound = (3.0 / e.shape[0] as f64).sqrt();
            for v in &mut heads[e.head].bias.data_mut()[start..start + e.len()] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        HyperWeights { z_dim, patch_pixels, trunk, heads }
    }
}

/// Raw head outputs, `[B, head_size]` each.
pub fn generate_heads<T: Real>(tape: &mut Tape<T>, hw: &HyperWeights<Var>, z: Var) -> Result<Vec<Var>, NetsError> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != hw.z_dim {
        return Err(NetsError::Dimension { what: "program", expected: vec![shape[0], hw.z_dim], got: shape });
    }
    let trunk = mlp_apply(tape, &hw.trunk, z)?;
    hw.heads.iter().map(|h| linear(tape, trunk, h)).collect()
}

/// Cuts head outputs into per-sample primary weights.
pub fn split_heads<T: Real>(tape: &mut Tape<T>, lay: &ParamLayout, heads: &[Var]) -> Result<PrimaryNets<Var>, NetsError> {
    let batch = tape.shape(heads[0])[0];
    let mut values = Vec::with_capacity(lay.entries.len());
    for e in &lay.entries {
        let start = e.offset - lay.head_range(e.head).start;
        let piece = tape.slice(heads[e.head], start, e.len())?;
        let mut shape = vec![batch];
        shape.extend_from_slice(&e.shape);
        values.push(tape.reshape(piece, &shape)?);
    }
    Ok(PrimaryNets::from_entries(values))
}

/// `z: [B, z_dim]` to a batch of primary networks, differentiable in both
/// the hypernetwork weights and `z`.
pub fn generate_primary<T: Real>(tape: &mut Tape<T>, hw: &HyperWeights<Var>, z: Var) -> Result<PrimaryNets<Var>, NetsError> {
    let heads = generate_heads(tape, hw, z)?;
    split_heads(tape, &hw.layout(), &heads)
}
