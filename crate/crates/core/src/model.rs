//! Inference, recursive generation and the training objective.
//!
//! Every function here records onto a caller-supplied tape and works on a
//! batch: images are `[B,S,S]`, programs `[B,z]`, raw actions `[B,6]`.
//! Per-sample networks come out of the hypernetwork with a leading batch
//! axis, so one pass unrolls the whole batch in lockstep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypernet::{generate_primary, HyperWeights};
use crate::nets::{encoder_apply, mlp_apply, rnn_step, EncoderWeights, NetsError};
use crate::stn::{extract_patch, squash_action, warp, LevelGeometry, StnError};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Stn(#[from] StnError),
    #[error("non-finite value at level {level}, step {step}")]
    NonFinite { level: usize, step: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Run configuration. `levels[0]` is the image level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub z_dim: usize,
    /// Steps per level, top first: `[τ², τ¹]`.
    pub steps: Vec<usize>,
    pub levels: Vec<LevelGeometry>,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { z_dim: 32, steps: vec![4, 4], levels: vec![LevelGeometry::top(), LevelGeometry::sub()], beta: 1.0, seed: 0 }
    }
}

impl ModelConfig {
    pub fn with_steps(mut self, top: usize, sub: usize) -> Self {
        self.steps = vec![top, sub];
        self
    }

    /// Small configuration for 64-bit gradient checks: `|z| = 8`, two
    /// steps per level, 14-pixel images and 6-pixel patches.
    pub fn tiny() -> Self {
        let top = LevelGeometry { canvas_size: 14, patch_size: 6, scale_min: 3.0 / 14.0, scale_max: 6.0 / 14.0, ..LevelGeometry::top() };
        let sub = LevelGeometry { canvas_size: 6, patch_size: 6, ..LevelGeometry::sub() };
        ModelConfig { z_dim: 8, steps: vec![2, 2], levels: vec![top, sub], beta: 1.0, seed: 0 }
    }

    pub fn image_size(&self) -> usize {
        self.levels[0].canvas_size
    }

    pub fn patch_size(&self) -> usize {
        self.levels[0].patch_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.z_dim == 0 {
            return fail("z_dim must be positive".into());
        }
        if self.levels.is_empty() || self.levels.len() != self.steps.len() {
            return fail(format!("{} levels but {} step counts", self.levels.len(), self.steps.len()));
        }
        if self.steps.contains(&0) {
            return fail("every level needs at least one step".into());
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        let p = self.patch_size();
        for (i, g) in self.levels.iter().enumerate() {
            g.validate()?;
            if g.patch_size != p {
                return fail(format!("level {i} patch size {} differs from {p}; the hypernetwork is shared", g.patch_size));
            }
            if i > 0 && g.canvas_size != p {
                return fail(format!("level {i} canvas {} must equal the parent's patch size {p}", g.canvas_size));
            }
        }
        Ok(())
    }
}

/// Encoder plus hypernetwork: everything that is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<W> {
    pub encoder: EncoderWeights<W>,
    pub hyper: HyperWeights<W>,
}

impl<W> Model<W> {
    pub fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Model<U> {
        Model { encoder: self.encoder.map(f), hyper: self.hyper.map(f) }
    }

    pub fn params(&self) -> Vec<(String, &W)> {
        let mut out = self.encoder.params();
        out.extend(self.hyper.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut W)> {
        let mut out = self.encoder.params_mut();
        out.extend(self.hyper.params_mut());
        out
    }
}

impl<T: Real> Model<Tensor<T>> {
    /// Fresh weights drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderWeights::init(&mut rng, config.image_size(), config.z_dim);
        let p = config.patch_size();
        let hyper = HyperWeights::init(&mut rng, config.z_dim, p * p);
        Ok(Model { encoder, hyper })
    }

    pub fn cast<U: Real>(&self) -> Model<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// One level's unroll. Sequences have one entry per step; each entry is
/// batched. `children[t]` is the sub-level unrolled from `states[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTrace<V> {
    pub states: Vec<V>,
    pub raw_actions: Vec<V>,
    /// Squashed `(sx, sy, tx, ty, θ, m)`.
    pub actions: Vec<V>,
    /// `D(z_t)`, decoded at every level.
    pub patches: Vec<V>,
    /// What was actually warped: the child canvas, or the decoded patch at
    /// the leaves.
    pub placed: Vec<V>,
    pub canvas: V,
    pub children: Vec<LevelTrace<V>>,
}

impl<V> LevelTrace<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> LevelTrace<U> {
        LevelTrace {
            states: self.states.iter().map(&mut *f).collect(),
            raw_actions: self.raw_actions.iter().map(&mut *f).collect(),
            actions: self.actions.iter().map(&mut *f).collect(),
            patches: self.patches.iter().map(&mut *f).collect(),
            placed: self.placed.iter().map(&mut *f).collect(),
            canvas: f(&self.canvas),
            children: self.children.iter().map(|c| c.map(f)).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.states.len()
    }

    /// Number of patch decodes in this subtree.
    pub fn decode_count(&self) -> usize {
        self.patches.len() + self.children.iter().map(|c| c.decode_count()).sum::<usize>()
    }
}

/// Full parse: the top-level program, its trace, and the order in which
/// steps completed. Each order entry is the path of step indices from the
/// root, so `[t]` is part `t` and `[t, u]` its sub-part `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseTree<V> {
    pub z: V,
    pub mu: Option<V>,
    pub logvar: Option<V>,
    pub root: LevelTrace<V>,
    pub order: Vec<Vec<usize>>,
}

impl<V> ParseTree<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> ParseTree<U> {
        ParseTree {
            z: f(&self.z),
            mu: self.mu.as_ref().map(&mut *f),
            logvar: self.logvar.as_ref().map(&mut *f),
            root: self.root.map(f),
            order: self.order.clone(),
        }
    }

    pub fn image(&self) -> &V {
        &self.root.canvas
    }
}

impl ParseTree<Var> {
    /// Values of sample `index`, each with the batch axis removed.
    pub fn sample<T: Real>(&self, tape: &Tape<T>, index: usize) -> ParseTree<Tensor<T>> {
        self.map(&mut |v| tape.value(*v).select(index))
    }
}

/// Posterior `(μ, log σ²)` for a batch of images.
pub fn encode<T: Real>(tape: &mut Tape<T>, w: &EncoderWeights<Var>, x: Var) -> Result<(Var, Var), ModelError> {
    Ok(encoder_apply(tape, w, x)?)
}

/// `z = μ + exp(log σ² / 2) ⊙ noise`
pub fn sample_latent<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var, noise: Var) -> Result<Var, ModelError> {
    let half = tape.scale(logvar, 0.5);
    let sd = tape.exp(half);
    let e = tape.mul(sd, noise)?;
    Ok(tape.add(mu, e)?)
}

fn check_finite<T: Real>(tape: &Tape<T>, v: Var, level: usize, step: usize) -> Result<(), ModelError> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { level, step })
    }
}

/// Unrolls `steps[0]` steps of the program `z` under `levels[0]`, recursing
/// into `levels[1..]` for each child program. Level numbers in errors count
/// down to 1 at the leaves; steps count from 1.
pub fn unroll_level<T: Real>(
    tape: &mut Tape<T>,
    hw: &HyperWeights<Var>,
    z: Var,
    levels: &[LevelGeometry],
    steps: &[usize],
    path: &mut Vec<usize>,
    order: &mut Vec<Vec<usize>>,
) -> Result<LevelTrace<Var>, ModelError> {
    let geom = &levels[0];
    let level = levels.len();
    let batch = tape.shape(z)[0];
    let p = geom.patch_size;
    let nets = generate_primary(tape, hw, z)?;

    let mut h_s = tape.reshape(nets.h0_state, &[batch, hw.z_dim])?;
    let mut h_p = tape.reshape(nets.h0_policy, &[batch, hw.z_dim])?;
    let mut feedback = nets.x0;
    let mut a_raw = nets.a0;
    let mut trace = LevelTrace {
        states: vec![],
        raw_actions: vec![],
        actions: vec![],
        patches: vec![],
        placed: vec![],
        canvas: z,
        children: vec![],
    };
    let mut canvas: Option<Var> = None;

    for t in 0..steps[0] {
        let prev = squash_action(tape, a_raw, geom)?;
        let e_in = tape.concat(&[feedback, prev.packed])?;
        let e = mlp_apply(tape, &nets.encoder, e_in)?;
        h_s = rnn_step(tape, &nets.state, h_s, e)?;
        h_p = rnn_step(tape, &nets.policy, h_p, e)?;
        let z_child = h_s;
        a_raw = mlp_apply(tape, &nets.action_decoder, h_p)?;
        let action = squash_action(tape, a_raw, geom)?;
        let decoded = mlp_apply(tape, &nets.patch_decoder, z_child)?;
        let decoded = tape.reshape(decoded, &[batch, p, p])?;

        path.push(t);
        let placed = if levels.len() > 1 {
            let child = unroll_level(tape, hw, z_child, &levels[1..], &steps[1..], path, order)?;
            let c = child.canvas;
            trace.children.push(child);
            c
        } else {
            decoded
        };
        feedback = tape.reshape(placed, &[batch, p * p])?;
        let warped = warp(tape, placed, &action, geom.canvas_size)?;
        let next = match canvas {
            Some(c) => tape.add(c, warped)?,
            None => warped,
        };
        check_finite(tape, next, level, t + 1)?;
        canvas = Some(next);
        order.push(path.clone());
        path.pop();

        trace.states.push(z_child);
        trace.raw_actions.push(a_raw);
        trace.actions.push(action.packed);
        trace.patches.push(decoded);
        trace.placed.push(placed);
    }
    trace.canvas = canvas.expect("at least one step");
    Ok(trace)
}

/// Depth-first generation of the whole tree from top-level programs.
pub fn generate<T: Real>(tape: &mut Tape<T>, hw: &HyperWeights<Var>, z: Var, cfg: &ModelConfig) -> Result<ParseTree<Var>, ModelError> {
    cfg.validate()?;
    let mut order = vec![];
    let root = unroll_level(tape, hw, z, &cfg.levels, &cfg.steps, &mut vec![], &mut order)?;
    Ok(ParseTree { z, mu: None, logvar: None, root, order })
}

/// Per-sample objective components, each `[B,1]`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub part_reg: Var,
    pub kl: Var,
}

/// `[B,…]` to `[B,1]` row sums.
fn row_sum<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[shape[0], n])?;
    let ones = tape.constant(Tensor::full([n, 1], T::one()));
    Ok(tape.matmul(flat, ones)?)
}

/// `recon = ‖canvas − x‖²`, `part_reg = (1/τ²) Σ_t ‖D(z¹_t) − g⁻¹(x, a²_t)‖²`,
/// `kl = −½ Σ (1 + log σ² − μ² − σ²)`, per sample.
pub fn loss_terms<T: Real>(tape: &mut Tape<T>, tree: &ParseTree<Var>, x: Var, cfg: &ModelConfig) -> Result<LossTerms, ModelError> {
    let canvas = tree.root.canvas;
    if tape.shape(canvas) != tape.shape(x) {
        return Err(TapeError::Shape { op: "loss_terms", shapes: vec![tape.shape(canvas).to_vec(), tape.shape(x).to_vec()] }.into());
    }
    let diff = tape.sub(canvas, x)?;
    let sq = tape.square(diff);
    let recon = row_sum(tape, sq)?;

    let geom = &cfg.levels[0];
    let steps = tree.root.steps();
    let mut part_reg: Option<Var> = None;
    for t in 0..steps {
        let act = squash_action(tape, tree.root.raw_actions[t], geom)?;
        let target = extract_patch(tape, x, &act, geom.patch_size)?;
        let d = tape.sub(tree.root.patches[t], target)?;
        let sq = tape.square(d);
        let s = row_sum(tape, sq)?;
        part_reg = Some(match part_reg {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let part_reg = tape.scale(part_reg.expect("at least one step"), 1.0 / steps as f64);

    let kl = match (tree.mu, tree.logvar) {
        (Some(mu), Some(lv)) => {
            let mu2 = tape.square(mu);
            let var = tape.exp(lv);
            let a = tape.sub(lv, mu2)?;
            let a = tape.sub(a, var)?;
            let a = tape.add_scalar(a, 1.0);
            let s = row_sum(tape, a)?;
            tape.scale(s, -0.5)
        }
        _ => {
            let b = tape.shape(x)[0];
            tape.constant(Tensor::zeros([b, 1]))
        }
    };
    Ok(LossTerms { recon, part_reg, kl })
}

/// Batch mean of `recon + part_reg + β·kl`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: &LossTerms, beta: f64) -> Result<Var, ModelError> {
    let a = tape.add(terms.recon, terms.part_reg)?;
    let k = tape.scale(terms.kl, beta);
    let s = tape.add(a, k)?;
    Ok(tape.mean(s))
}

/// Tape handles for one encode → sample → generate → loss pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tree: ParseTree<Var>,
    pub terms: LossTerms,
    pub total: Var,
}

/// Encodes `x`, draws `z` with the given standard-normal `noise` (zeros
/// when `None`), generates and scores.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<Var>,
    x: Var,
    noise: Option<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Forward, ModelError> {
    let (mu, logvar) = encode(tape, &model.encoder, x)?;
    let noise = noise.unwrap_or_else(|| Tensor::zeros(tape.shape(mu)));
    let noise = tape.constant(noise);
    let z = sample_latent(tape, mu, logvar, noise)?;
    let mut tree = generate(tape, &model.hyper, z, cfg)?;
    tree.mu = Some(mu);
    tree.logvar = Some(logvar);
    let terms = loss_terms(tape, &tree, x, cfg)?;
    let total = total_loss(tape, &terms, cfg.beta)?;
    Ok(Forward { tree, terms, total })
}

/// Binds every weight as a tracked leaf.
pub fn bind<T: Real>(tape: &mut Tape<T>, model: &Model<Tensor<T>>) -> Model<Var> {
    model.map(&mut |t| tape.var(t.clone()))
}

/// Binds every weight as a constant (no gradients).
pub fn bind_constant<T: Real>(tape: &mut Tape<T>, model: &Model<Tensor<T>>) -> Model<Var> {
    model.map(&mut |t| tape.constant(t.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(cfg: &ModelConfig) -> Model<Tensor<f64>> {
        Model::<Tensor<f64>>::init(cfg).unwrap().map(&mut |t| Tensor::zeros(t.shape()))
    }

    #[test]
    fn sample_latent_examples() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::full([1, 3], 1.0));
        let lv = tape.constant(Tensor::full([1, 3], 4f64.ln()));
        let n = tape.constant(Tensor::full([1, 3], 0.5));
        let z = sample_latent(&mut tape, mu, lv, n).unwrap();
        for v in tape.value(z).data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let zero = tape.constant(Tensor::zeros([1, 3]));
        let z = sample_latent(&mut tape, mu, lv, zero).unwrap();
        assert_eq!(tape.value(z), tape.value(mu));
        let z = sample_latent(&mut tape, mu, zero, n).unwrap();
        assert_eq!(tape.value(z), &Tensor::full([1, 3], 1.5));
    }

    #[test]
    fn zero_weights_place_half_patches_at_centre() {
        let cfg = ModelConfig::default().with_steps(1, 1);
        let model = zero_model(&cfg);
        let mut tape = Tape::<f64>::new();
        let m = bind_constant(&mut tape, &model);
        let z = tape.constant(Tensor::zeros([1, cfg.z_dim]));
        let tree = generate(&mut tape, &m.hyper, z, &cfg).unwrap();
        let act = tape.value(tree.root.actions[0]).data().to_vec();
        let mid = (cfg.levels[0].scale_min + cfg.levels[0].scale_max) / 2.0;
        assert!((act[0] - mid).abs() < 1e-12 && (act[1] - mid).abs() < 1e-12);
        assert!(act[2..].iter().all(|&v| v == 0.0));
        for p in tree.root.children[0].patches.iter().chain(&tree.root.patches) {
            assert!(tape.value(*p).data().iter().all(|&v| v == 0.5));
        }
        let img = tape.value(tree.root.canvas);
        // Centre pixel sees the sub-part, corners stay empty.
        assert!(img.data()[14 * 28 + 14] > 0.0);
        assert_eq!(img.data()[0], 0.0);
    }

    #[test]
    fn single_step_tree_has_one_part_and_one_subpart() {
        let cfg = ModelConfig::tiny().with_steps(1, 1);
        let model = Model::<Tensor<f64>>::init(&cfg).unwrap();
        let mut tape = Tape::<f64>::new();
        let m = bind_constant(&mut tape, &model);
        let z = tape.constant(Tensor::full([1, 8], 0.1));
        let tree = generate(&mut tape, &m.hyper, z, &cfg).unwrap();
        assert_eq!(tree.root.steps(), 1);
        assert_eq!(tree.root.children.len(), 1);
        assert_eq!(tree.root.children[0].steps(), 1);
        assert_eq!(tree.order, vec![vec![0, 0], vec![0]]);
    }

    #[test]
    fn canvas_is_sum_of_warped_children_and_order_is_depth_first() {
        let cfg = ModelConfig::tiny().with_steps(3, 2);
        let model = Model::<Tensor<f64>>::init(&cfg).unwrap();
        let mut tape = Tape::<f64>::new();
        let m = bind_constant(&mut tape, &model);
        let z = tape.constant(Tensor::from_f64([2, 8], &(0..16).map(|i| (i as f64).cos()).collect::<Vec<_>>()).unwrap());
        let tree = generate(&mut tape, &m.hyper, z, &cfg).unwrap();
        let mut sum = Tensor::<f64>::zeros([2, 14, 14]);
        for t in 0..3 {
            assert_eq!(tree.root.placed[t], tree.root.children[t].canvas);
            let a: Vec<f64> = tape.value(tree.root.actions[t]).data().to_vec();
            let acts: Vec<_> = a.chunks(6).map(crate::stn::AffineAction::from_slice).collect();
            let act = crate::stn::action_constants(&mut tape, &acts).unwrap();
            let w = warp(&mut tape, tree.root.children[t].canvas, &act, 14).unwrap();
            for (s, v) in sum.data_mut().iter_mut().zip(tape.value(w).data()) {
                *s += v;
            }
        }
        for (a, b) in sum.data().iter().zip(tape.value(tree.root.canvas).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let want: Vec<Vec<usize>> = (0..3).flat_map(|t| vec![vec![t, 0], vec![t, 1], vec![t]]).collect();
        assert_eq!(tree.order, want);
        assert_eq!(tree.root.decode_count(), 3 + 3 * 2);
    }

    #[test]
    fn kl_for_unit_mean_is_half_dimension() {
        let mut tape = Tape::<f64>::new();
        let cfg = ModelConfig::default().with_steps(1, 1);
        let model = zero_model(&cfg);
        let m = bind_constant(&mut tape, &model);
        let z = tape.constant(Tensor::zeros([1, 32]));
        let mut tree = generate(&mut tape, &m.hyper, z, &cfg).unwrap();
        tree.mu = Some(tape.constant(Tensor::full([1, 32], 1.0)));
        tree.logvar = Some(tape.constant(Tensor::zeros([1, 32])));
        let x = tape.constant(Tensor::zeros([1, 28, 28]));
        let terms = loss_terms(&mut tape, &tree, x, &cfg).unwrap();
        assert!((tape.value(terms.kl).item() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_has_zero_recon_and_kl() {
        let cfg = ModelConfig::tiny();
        let model = Model::<Tensor<f64>>::init(&cfg).unwrap();
        let mut tape = Tape::<f64>::new();
        let m = bind_constant(&mut tape, &model);
        let z = tape.constant(Tensor::full([1, 8], 0.2));
        let mut tree = generate(&mut tape, &m.hyper, z, &cfg).unwrap();
        tree.mu = Some(tape.constant(Tensor::zeros([1, 8])));
        tree.logvar = Some(tape.constant(Tensor::zeros([1, 8])));
        let x = tape.constant(tape.value(tree.root.canvas).clone());
        let terms = loss_terms(&mut tape, &tree, x, &cfg).unwrap();
        assert_eq!(tape.value(terms.recon).item(), 0.0);
        assert_eq!(tape.value(terms.kl).item(), 0.0);
        assert!(tape.value(terms.part_reg).item() >= 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let c = |tape: &mut Tape<f64>, v: f64| tape.constant(Tensor::full([1, 1], v));
        let terms = LossTerms { recon: c(&mut tape, 2.0), part_reg: c(&mut tape, 1.0), kl: c(&mut tape, 16.0) };
        let t = total_loss(&mut tape, &terms, 0.1).unwrap();
        assert!((tape.value(t).item() - 4.6).abs() < 1e-12);
        let t = total_loss(&mut tape, &terms, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 3.0);
        let zero = LossTerms { recon: c(&mut tape, 0.0), part_reg: c(&mut tape, 0.0), kl: c(&mut tape, 0.0) };
        let t = total_loss(&mut tape, &zero, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
    }

    #[test]
    fn batch_mean_matches_per_sample_losses() {
        let cfg = ModelConfig::tiny();
        let model = Model::<Tensor<f64>>::init(&cfg).unwrap();
        let imgs: Vec<f64> = (0..2 * 14 * 14).map(|i| ((i * 7 % 13) as f64) / 13.0).collect();
        let x = Tensor::from_f64([2, 14, 14], &imgs).unwrap();
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let m = bind_constant(&mut tape, &model);
            let xv = tape.constant(x);
            let f = forward(&mut tape, &m, xv, None, &cfg).unwrap();
            tape.value(f.total).item()
        };
        let both = run(x.clone());
        let a = run(Tensor::stack(&[x.select(0)]).unwrap());
        let b = run(Tensor::stack(&[x.select(1)]).unwrap());
        assert!((both - (a + b) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_noise_pipeline_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let model = Model::<Tensor<f32>>::init(&cfg).unwrap();
        let x = Tensor::full([2, 14, 14], 0.3f32);
        let run = || {
            let mut tape = Tape::<f32>::new();
            let m = bind(&mut tape, &model);
            let xv = tape.constant(x.clone());
            let f = forward(&mut tape, &m, xv, None, &cfg).unwrap();
            tape.value(f.total).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_aborts_with_step() {
        let cfg = ModelConfig::tiny();
        let mut model = Model::<Tensor<f64>>::init(&cfg).unwrap();
        // Poison the patch-decoder head bias: the first decode becomes NaN.
        let lay = model.hyper.layout();
        let head = 3;
        let local = lay.entries.iter().find(|e| e.name == "patch_decoder.2.bias").unwrap().offset - lay.head_range(head).start;
        model.hyper.heads[head].bias.data_mut()[local] = f64::NAN;
        let mut tape = Tape::<f64>::new();
        let m = bind_constant(&mut tape, &model);
        let z = tape.constant(Tensor::zeros([1, 8]));
        let err = generate(&mut tape, &m.hyper, z, &cfg).unwrap_err();
        assert_eq!(err, ModelError::NonFinite { level: 1, step: 1 });
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.levels[1].canvas_size = 14;
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let bad = ModelConfig { beta: -1.0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig::default().with_steps(0, 2);
        assert!(bad.validate().is_err());
    }
}
